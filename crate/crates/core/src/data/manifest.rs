//! Line-oriented dataset manifest.
//!
//! ```text
//! STEPMANIFEST 1
//! classes 2
//! class opening_bottle
//! class closing_bottle
//! dims 16 8 64                 # optional: T n d every clip must match
//! clip c0000 opening_bottle train features/c0000.stepf
//! ```
//!
//! Blank lines and `#` comments are ignored. Feature paths are relative to the
//! manifest's directory unless absolute.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{read_features, FeatureDims, FeatureSequence};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "STEPMANIFEST 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Path as written in the manifest.
    pub feature_path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub dims: Option<FeatureDims>,
    pub clips: Vec<ClipRecord>,
    /// Directory relative feature paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn resolve(&self, record: &ClipRecord) -> PathBuf {
        if record.feature_path.is_absolute() {
            record.feature_path.clone()
        } else {
            self.root.join(&record.feature_path)
        }
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |r| r.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\nclasses {}\n", self.classes.len());
        for c in &self.classes {
            writeln!(out, "class {c}").unwrap();
        }
        if let Some(d) = self.dims {
            writeln!(out, "dims {} {} {}", d.frames, d.tokens, d.dim).unwrap();
        }
        for r in &self.clips {
            writeln!(
                out,
                "clip {} {} {} {}",
                r.clip_id,
                self.classes[r.label],
                r.split,
                r.feature_path.display()
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { path: path.into(), line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        match lines.next() {
            Some((_, l)) if l == MANIFEST_HEADER => {}
            Some((n, l)) => return Err(parse_err(n, format!("expected {MANIFEST_HEADER:?}, found {l:?}"))),
            None => return Err(parse_err(1, "empty manifest".into())),
        }

        let mut declared: Option<usize> = None;
        let mut classes: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut dims = None;
        let mut clips = Vec::new();
        let mut seen = HashSet::new();

        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["classes", count] => {
                    let count = count
                        .parse()
                        .map_err(|_| parse_err(n, format!("bad class count {count:?}")))?;
                    declared = Some(count);
                }
                ["class", name] => {
                    if !clips.is_empty() {
                        return Err(parse_err(n, "class declared after clip records".into()));
                    }
                    if index.insert(name.to_string(), classes.len()).is_some() {
                        return Err(parse_err(n, format!("class {name:?} declared twice")));
                    }
                    classes.push(name.to_string());
                }
                ["dims", t, p, d] => {
                    let num = |s: &str| {
                        s.parse::<usize>()
                            .ok()
                            .filter(|&v| v > 0)
                            .ok_or_else(|| parse_err(n, format!("bad dimension {s:?}")))
                    };
                    dims = Some(FeatureDims { frames: num(t)?, tokens: num(p)?, dim: num(d)? });
                }
                ["clip", id, class, split, feature_path] => {
                    let label = *index.get(*class).ok_or_else(|| Error::UnknownClass {
                        path: path.into(),
                        line: n,
                        name: class.to_string(),
                    })?;
                    let split = split.parse().map_err(|e| parse_err(n, e))?;
                    if !seen.insert(id.to_string()) {
                        return Err(Error::DuplicateClip(id.to_string()));
                    }
                    clips.push(ClipRecord {
                        clip_id: id.to_string(),
                        feature_path: PathBuf::from(feature_path),
                        label,
                        split,
                    });
                }
                _ => return Err(parse_err(n, format!("unrecognized line {line:?}"))),
            }
        }

        match declared {
            Some(c) if c == classes.len() => {}
            Some(c) => {
                return Err(parse_err(
                    0,
                    format!("header declares {c} classes but {} are listed", classes.len()),
                ))
            }
            None => return Err(parse_err(0, "missing `classes <C>` line".into())),
        }

        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { classes, dims, clips, root })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, path)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub features: FeatureSequence,
    pub label: usize,
}

/// Manifest with every clip's features loaded, grouped by split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let loaded: Vec<(Split, Clip)> = manifest
            .clips
            .par_iter()
            .map(|record| {
                let path = manifest.resolve(record);
                let mut features = read_features(&path)?;
                if let Some(expected) = manifest.dims {
                    if features.dims() != expected {
                        return Err(Error::Shape {
                            op: "manifest dims",
                            lhs: vec![expected.frames, expected.tokens, expected.dim],
                            rhs: {
                                let d = features.dims();
                                vec![d.frames, d.tokens, d.dim]
                            },
                        });
                    }
                }
                features.clip_id = record.clip_id.clone();
                Ok((record.split, Clip { features, label: record.label }))
            })
            .collect::<Result<_>>()?;
        let mut dataset = Dataset {
            classes: manifest.classes.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (split, clip) in loaded {
            dataset.split_mut(split).push(clip);
        }
        Ok(dataset)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[Clip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Clip> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn dims(&self) -> Option<FeatureDims> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map(|c| c.features.dims())
    }
}
