use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_dir_sorted, TrainingRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub video_id: String,
    pub reference_index: usize,
    pub gt_index: usize,
}

impl ManifestEntry {
    pub fn from_record(r: &TrainingRecord, split: Split) -> Self {
        Self {
            id: r.id.clone(),
            split,
            video_id: r.meta.video_id.clone(),
            reference_index: r.meta.reference_index,
            gt_index: r.meta.gt_index,
        }
    }
}

/// Plain-text table of records: `#` header lines carry the config hash and
/// per-split counts, then one tab-separated row per record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(config_hash: String, mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Self { config_hash, entries }
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash\t{}", self.config_hash);
        let _ = writeln!(
            s,
            "# counts\ttrain={}\tval={}\ttest={}",
            self.count(Split::Train),
            self.count(Split::Val),
            self.count(Split::Test)
        );
        let _ = writeln!(s, "id\tsplit\tvideo\treference_frame\tgt_frame");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                e.split.as_str(),
                e.video_id,
                e.reference_index,
                e.gt_index
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let bad = |line: usize, what: &str| Error::validation(format!("manifest line {line}: {what}"));
        let mut config_hash = None;
        let mut counts: Option<[usize; 3]> = None;
        let mut entries = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "# config_hash" => config_hash = fields.get(1).map(|s| s.to_string()),
                "# counts" => {
                    let mut c = [0usize; 3];
                    for f in &fields[1..] {
                        let (k, v) = f.split_once('=').ok_or_else(|| bad(n, "bad count"))?;
                        let v: usize = v.parse().map_err(|_| bad(n, "bad count"))?;
                        c[Split::parse(k)? as usize] = v;
                    }
                    counts = Some(c);
                }
                "id" => header_seen = true,
                _ if fields[0].starts_with('#') => {}
                _ => {
                    if !header_seen || fields.len() != 5 {
                        return Err(bad(n, "malformed row"));
                    }
                    entries.push(ManifestEntry {
                        id: fields[0].to_string(),
                        split: Split::parse(fields[1])?,
                        video_id: fields[2].to_string(),
                        reference_index: fields[3].parse().map_err(|_| bad(n, "bad frame index"))?,
                        gt_index: fields[4].parse().map_err(|_| bad(n, "bad frame index"))?,
                    });
                }
            }
        }
        let manifest = DatasetManifest::new(
            config_hash.ok_or_else(|| Error::validation("manifest lacks config_hash"))?,
            entries,
        );
        if let Some(c) = counts {
            let actual = [Split::Train, Split::Val, Split::Test].map(|s| manifest.count(s));
            if c != actual {
                return Err(Error::validation(format!(
                    "manifest counts {c:?} disagree with rows {actual:?}"
                )));
            }
        }
        let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
        ids.dedup();
        if ids.len() != manifest.entries.len() {
            return Err(Error::validation("manifest lists a record twice"));
        }
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, self.to_text()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Checks that the record directories on disk are exactly the listed ones.
    pub fn verify_against_directory(&self, dir: &Path) -> Result<()> {
        let on_disk: Vec<String> = read_dir_sorted(dir)?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
            .filter(|n| !n.starts_with('.'))
            .collect();
        let listed: Vec<String> = self.entries.iter().map(|e| e.id.clone()).collect();
        if on_disk != listed {
            return Err(Error::validation(format!(
                "manifest lists {} records but {} record directories exist",
                listed.len(),
                on_disk.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_count_check() {
        let m = DatasetManifest::new(
            "abc".into(),
            vec![
                ManifestEntry {
                    id: "v1_00000_00010".into(),
                    split: Split::Train,
                    video_id: "v1".into(),
                    reference_index: 0,
                    gt_index: 10,
                },
                ManifestEntry {
                    id: "v0_00020_00000".into(),
                    split: Split::Test,
                    video_id: "v0".into(),
                    reference_index: 20,
                    gt_index: 0,
                },
            ],
        );
        let back = DatasetManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let tampered = m.to_text().replace("train=1", "train=2");
        assert!(DatasetManifest::parse(&tampered).is_err());
    }
}
