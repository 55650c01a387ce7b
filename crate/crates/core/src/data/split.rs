//! Symmetric-pair class splits.
//!
//! Pair files list one entry per line: two class names form a nearly
//! symmetric pair, a single name marks a class as explicitly non-symmetric.
//! Classes not mentioned at all are non-symmetric too.
//!
//! ```text
//! # pairs
//! opening_bottle closing_bottle
//! entering_car   exiting_car
//! eating
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetricSplit {
    pairs: Vec<(usize, usize)>,
    mirror: Vec<Option<usize>>,
}

impl SymmetricSplit {
    /// A split with no symmetric classes.
    pub fn none(num_classes: usize) -> Self {
        Self { pairs: Vec::new(), mirror: vec![None; num_classes] }
    }

    pub fn new(num_classes: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut mirror = vec![None; num_classes];
        for &(a, b) in &pairs {
            for c in [a, b] {
                if c >= num_classes {
                    return Err(Error::Index { what: "pair class", index: c, len: num_classes });
                }
            }
            if a == b || mirror[a].is_some() || mirror[b].is_some() {
                let dup = if mirror[a].is_some() || a == b { a } else { b };
                return Err(Error::PairOverlap(format!("class #{dup}")));
            }
            mirror[a] = Some(b);
            mirror[b] = Some(a);
        }
        Ok(Self { pairs, mirror })
    }

    pub fn parse(text: &str, classes: &[String], path: &Path) -> Result<Self> {
        let lookup = |name: &str, line: usize| {
            classes.iter().position(|c| c == name).ok_or_else(|| Error::UnknownClass {
                path: path.into(),
                line,
                name: name.to_string(),
            })
        };
        let mut pairs = Vec::new();
        let mut singles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let names: Vec<&str> = line.split_whitespace().collect();
            match names.as_slice() {
                [] => {}
                [single] => singles.push(lookup(single, i + 1)?),
                [a, b] => pairs.push((lookup(a, i + 1)?, lookup(b, i + 1)?)),
                _ => {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: i + 1,
                        msg: format!("expected one or two class names, found {}", names.len()),
                    })
                }
            }
        }
        let split = Self::new(classes.len(), pairs).map_err(|e| match e {
            Error::PairOverlap(_) => Error::PairOverlap(overlapping_name(text, classes)),
            other => other,
        })?;
        if let Some(&s) = singles.iter().find(|&&s| split.mirror[s].is_some()) {
            return Err(Error::PairOverlap(classes[s].clone()));
        }
        Ok(split)
    }

    pub fn to_text(&self, classes: &[String]) -> String {
        let mut out = String::from("# nearly symmetric class pairs\n");
        for &(a, b) in &self.pairs {
            writeln!(out, "{} {}", classes[a], classes[b]).unwrap();
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.mirror.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn mirror(&self, class: usize) -> Option<usize> {
        self.mirror.get(class).copied().flatten()
    }

    pub fn is_symmetric(&self, class: usize) -> bool {
        self.mirror(class).is_some()
    }

    pub fn sym_set(&self) -> Vec<usize> {
        (0..self.mirror.len()).filter(|&c| self.is_symmetric(c)).collect()
    }

    pub fn nsym_set(&self) -> Vec<usize> {
        (0..self.mirror.len()).filter(|&c| !self.is_symmetric(c)).collect()
    }
}

fn overlapping_name(text: &str, classes: &[String]) -> String {
    let mut seen = std::collections::HashSet::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        let names: Vec<&str> = line.split_whitespace().collect();
        if names.len() == 2 {
            for n in names {
                if !seen.insert(n) {
                    return n.to_string();
                }
            }
        }
    }
    classes.first().cloned().unwrap_or_default()
}

pub fn define_pairs(path: &Path, classes: &[String]) -> Result<SymmetricSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SymmetricSplit::parse(&text, classes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overlap_is_rejected_by_name() {
        let classes = names(&["A", "B", "C"]);
        let err = SymmetricSplit::parse("A B\nB C\n", &classes, Path::new("p")).unwrap_err();
        assert!(matches!(err, Error::PairOverlap(ref n) if n == "B"), "{err}");
    }

    #[test]
    fn single_listed_in_pair_is_overlap() {
        let classes = names(&["A", "B"]);
        assert!(matches!(
            SymmetricSplit::parse("A B\nA\n", &classes, Path::new("p")),
            Err(Error::PairOverlap(_))
        ));
    }

    #[test]
    fn self_pair_rejected() {
        assert!(SymmetricSplit::new(2, vec![(1, 1)]).is_err());
    }

    #[test]
    fn mirror_is_symmetric() {
        let s = SymmetricSplit::new(5, vec![(0, 3), (4, 1)]).unwrap();
        for c in 0..5 {
            if let Some(m) = s.mirror(c) {
                assert_eq!(s.mirror(m), Some(c));
            }
        }
        assert_eq!(s.sym_set(), vec![0, 1, 3, 4]);
        assert_eq!(s.nsym_set(), vec![2]);
    }

    #[test]
    fn unknown_name() {
        let classes = names(&["A", "B"]);
        assert!(matches!(
            SymmetricSplit::parse("A Z", &classes, Path::new("p")),
            Err(Error::UnknownClass { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_text() {
        let classes = names(&["a", "b", "c", "d"]);
        let s = SymmetricSplit::new(4, vec![(0, 2)]).unwrap();
        assert_eq!(SymmetricSplit::parse(&s.to_text(&classes), &classes, Path::new("p")).unwrap(), s);
    }
}
