//! Line-oriented dataset manifests.
//!
//! ```text
//! # comment
//! @domain synthetic
//! @resize 256 512
//! @disparity_sign +1
//! @building_classes 6 17
//! @building_threshold 0.15
//! scene_0001<TAB>left/0001.png<TAB>right/0001.png<TAB>disp/0001.pfm
//! ```
//!
//! Synthetic entries are `id, left, right, disparity[, labels]`; real entries
//! are `id, image[, labels]`. Relative paths resolve against the manifest's
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DisparitySign;

pub const DEFAULT_BUILDING_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetDomain {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// `[left, right]` for synthetic entries, `[image]` for real ones.
    pub images: Vec<PathBuf>,
    pub disparity: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub domain: DatasetDomain,
    pub entries: Vec<ManifestEntry>,
    pub resize_to: Option<(usize, usize)>,
    pub disparity_sign: DisparitySign,
    /// Label values counted as building content. Empty disables filtering.
    pub building_classes: Vec<u8>,
    pub building_threshold: f64,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Manifest(format!("line {line}: {msg}"))
}

impl DatasetManifest {
    pub fn new(domain: DatasetDomain) -> Self {
        Self {
            domain,
            entries: Vec::new(),
            resize_to: None,
            disparity_sign: DisparitySign::Positive,
            building_classes: Vec::new(),
            building_threshold: DEFAULT_BUILDING_THRESHOLD,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut domain = None;
        let mut m = Self::new(DatasetDomain::Synthetic);
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if let Some(d) = line.strip_prefix('@') {
                let mut parts = d.split_whitespace();
                let key = parts.next().unwrap_or("");
                let args: Vec<&str> = parts.collect();
                match (key, args.as_slice()) {
                    ("domain", ["synthetic"]) => domain = Some(DatasetDomain::Synthetic),
                    ("domain", ["real"]) => domain = Some(DatasetDomain::Real),
                    ("resize", [r, c]) => {
                        let r: usize = r.parse().map_err(|_| bad(n, "resize rows must be an integer"))?;
                        let c: usize = c.parse().map_err(|_| bad(n, "resize cols must be an integer"))?;
                        if r == 0 || c == 0 {
                            return Err(bad(n, "resize dims must be positive"));
                        }
                        m.resize_to = Some((r, c));
                    }
                    ("disparity_sign", [s]) => {
                        m.disparity_sign = DisparitySign::parse(s).ok_or_else(|| bad(n, "sign must be +1 or -1"))?;
                    }
                    ("building_classes", ids) => {
                        m.building_classes = ids
                            .iter()
                            .map(|s| s.parse::<u8>().map_err(|_| bad(n, format!("class id {s:?} is not a byte"))))
                            .collect::<Result<_>>()?;
                    }
                    ("building_threshold", [t]) => {
                        let t: f64 = t.parse().map_err(|_| bad(n, "threshold must be a number"))?;
                        if !(0.0..=1.0).contains(&t) {
                            return Err(bad(n, "threshold must lie in [0, 1]"));
                        }
                        m.building_threshold = t;
                    }
                    _ => return Err(bad(n, format!("unknown or malformed directive @{d}"))),
                }
                continue;
            }
            rows.push((n, line));
        }
        m.domain = domain.ok_or_else(|| Error::Manifest("missing @domain directive".into()))?;
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in rows {
            let f: Vec<&str> = line.split('\t').collect();
            if f.iter().any(|s| s.is_empty()) {
                return Err(bad(n, "empty field"));
            }
            let entry = match (m.domain, f.len()) {
                (DatasetDomain::Synthetic, 4 | 5) => ManifestEntry {
                    id: f[0].to_string(),
                    images: vec![resolve(f[1]), resolve(f[2])],
                    disparity: Some(resolve(f[3])),
                    labels: f.get(4).map(|p| resolve(p)),
                },
                (DatasetDomain::Synthetic, k) => {
                    return Err(bad(n, format!("synthetic entries need id, left, right, disparity[, labels]; got {k} fields")))
                }
                (DatasetDomain::Real, 2 | 3) => ManifestEntry {
                    id: f[0].to_string(),
                    images: vec![resolve(f[1])],
                    disparity: None,
                    labels: f.get(2).map(|p| resolve(p)),
                },
                (DatasetDomain::Real, k) => {
                    return Err(bad(n, format!("real entries need id, image[, labels] and carry no disparity; got {k} fields")))
                }
            };
            if !seen.insert(entry.id.clone()) {
                return Err(bad(n, format!("duplicate id {:?}", entry.id)));
            }
            m.entries.push(entry);
        }
        Ok(m)
    }

    /// Serializes with paths written as given (callers pick relative or absolute).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dom = match self.domain {
            DatasetDomain::Synthetic => "synthetic",
            DatasetDomain::Real => "real",
        };
        let _ = writeln!(s, "@domain {dom}");
        if let Some((r, c)) = self.resize_to {
            let _ = writeln!(s, "@resize {r} {c}");
        }
        let sign = match self.disparity_sign {
            DisparitySign::Positive => "+1",
            DisparitySign::Negative => "-1",
        };
        let _ = writeln!(s, "@disparity_sign {sign}");
        if !self.building_classes.is_empty() {
            let ids: Vec<String> = self.building_classes.iter().map(u8::to_string).collect();
            let _ = writeln!(s, "@building_classes {}", ids.join(" "));
            let _ = writeln!(s, "@building_threshold {}", self.building_threshold);
        }
        for e in &self.entries {
            let mut fields = vec![e.id.clone()];
            fields.extend(e.images.iter().map(|p| p.display().to_string()));
            fields.extend(e.disparity.iter().map(|p| p.display().to_string()));
            fields.extend(e.labels.iter().map(|p| p.display().to_string()));
            let _ = writeln!(s, "{}", fields.join("\t"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "# demo\n@domain synthetic\n@resize 4 8\n@disparity_sign -1\n@building_classes 6 17\n\
                    a\tl.png\tr.png\td.pfm\nb\t/abs/l.png\tr.png\td.dsp\tlab.png\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resize_to, Some((4, 8)));
        assert_eq!(m.disparity_sign, DisparitySign::Negative);
        assert_eq!(m.entries[0].images[0], PathBuf::from("/data/l.png"));
        assert_eq!(m.entries[1].images[0], PathBuf::from("/abs/l.png"));
        assert_eq!(m.entries[1].id, "b");
        assert!(m.entries[1].labels.is_some());
        let again = DatasetManifest::parse(&m.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn real_entries_carry_no_disparity() {
        let err = DatasetManifest::parse("@domain real\nx\ta.png\tb.png\td.pfm\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
        let err = DatasetManifest::parse("@domain synthetic\nx\ta.png\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
        assert!(DatasetManifest::parse("x\ta.png\n", Path::new("")).is_err());
        assert!(DatasetManifest::parse("@domain real\nx\ta.png\nx\tb.png\n", Path::new("")).is_err());
        assert!(DatasetManifest::parse("@domain real\n@bogus 1\n", Path::new("")).is_err());
    }
}
