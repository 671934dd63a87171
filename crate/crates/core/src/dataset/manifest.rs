//! The JSON-lines manifest describing a generated dataset.
//!
//! Line kinds, in file order: one `header`, then one `group` line per
//! surviving group, then one `packed` line per training grid. Paths are
//! relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_grid::{mask_query, ImageGrid};
use crate::selective::SelectiveMask;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub groups_requested: usize,
    pub candidates_per_pair: usize,
    pub image_size: usize,
    pub test_fraction: f64,
    pub grey: f64,
    pub selected_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub caption_in: String,
    pub caption_out: String,
    pub input: String,
    pub output: String,
    /// Directional similarity of the kept candidate.
    pub score: f64,
    pub candidate_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: String,
    pub split: Split,
    pub instruction: String,
    pub unified: String,
    pub seed: u64,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedEntry {
    pub id: String,
    pub group: String,
    pub split: Split,
    /// Pair indices within the group.
    pub example: usize,
    pub query: usize,
    pub train_grid: String,
    pub cond_grid: String,
    pub mask: String,
    pub mask_classes: Vec<String>,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Group(GroupEntry),
    Packed(PackedEntry),
}

/// A training or evaluation record loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub id: String,
    pub group: String,
    pub instruction: String,
    pub unified: String,
    pub train_grid: ImageGrid,
    pub cond_grid: ImageGrid,
    pub mask: SelectiveMask,
    /// Captions of the query pair (bottom row).
    pub query_captions: (String, String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub groups: Vec<GroupEntry>,
    pub packed: Vec<PackedEntry>,
}

impl Manifest {
    /// Serialized lines, byte-for-byte what [`Manifest::write`] produces.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let lines = std::iter::once(ManifestLine::Header(self.header.clone()))
            .chain(self.groups.iter().cloned().map(ManifestLine::Group))
            .chain(self.packed.iter().cloned().map(ManifestLine::Packed));
        for line in lines {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Parse and check a manifest: one header first, known groups, existing files.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut header = None;
        let mut groups = Vec::new();
        let mut packed = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| {
                Error::Validation(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            match parsed {
                ManifestLine::Header(h) if header.is_none() && n == 0 => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(Error::Validation(format!(
                        "{}:{}: header must be the single first line",
                        path.display(),
                        n + 1
                    )))
                }
                ManifestLine::Group(g) => groups.push(g),
                ManifestLine::Packed(p) => packed.push(p),
            }
        }
        let header = header.ok_or_else(|| Error::Validation(format!("{} has no header", path.display())))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        let m = Self {
            root,
            header,
            groups,
            packed,
        };
        m.verify()?;
        Ok(m)
    }

    fn verify(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.groups.iter().map(|g| g.id.as_str()).collect();
        let mut files: Vec<&str> = Vec::new();
        for g in &self.groups {
            if g.pairs.len() < 2 {
                return Err(Error::Validation(format!("group {} has fewer than 2 pairs", g.id)));
            }
            for p in &g.pairs {
                files.push(&p.input);
                files.push(&p.output);
            }
        }
        for p in &self.packed {
            let Some(g) = self.group(&p.group) else {
                return Err(Error::Validation(format!(
                    "record {} refers to unknown group {}",
                    p.id, p.group
                )));
            };
            if p.example == p.query || p.example >= g.pairs.len() || p.query >= g.pairs.len() || p.split != g.split {
                return Err(Error::Validation(format!("record {} is inconsistent with group {}", p.id, g.id)));
            }
            files.extend([p.train_grid.as_str(), p.cond_grid.as_str(), p.mask.as_str()]);
        }
        debug_assert!(ids.len() <= self.groups.len());
        if ids.len() != self.groups.len() {
            return Err(Error::Validation("duplicate group ids in manifest".into()));
        }
        for f in files {
            let full = self.root.join(f);
            if !full.is_file() {
                return Err(Error::Validation(format!("manifest references missing file {}", full.display())));
            }
        }
        Ok(())
    }

    pub fn group(&self, id: &str) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn group_ids(&self, split: Split) -> BTreeSet<String> {
        self.groups
            .iter()
            .filter(|g| g.split == split)
            .map(|g| g.id.clone())
            .collect()
    }

    pub fn records(&self, split: Split) -> Vec<&PackedEntry> {
        self.packed.iter().filter(|p| p.split == split).collect()
    }

    pub fn load_record(&self, entry: &PackedEntry) -> Result<LoadedRecord> {
        let g = self
            .group(&entry.group)
            .ok_or_else(|| Error::Validation(format!("unknown group {}", entry.group)))?;
        let train_grid = ImageGrid::load_png(&self.root.join(&entry.train_grid))?;
        let cond_grid = mask_query(&train_grid, self.header.grey)?;
        let mut mask = SelectiveMask::load_png(&self.root.join(&entry.mask))?;
        mask.source_classes = entry.mask_classes.clone();
        let q = &g.pairs[entry.query];
        Ok(LoadedRecord {
            id: entry.id.clone(),
            group: g.id.clone(),
            instruction: g.instruction.clone(),
            unified: g.unified.clone(),
            train_grid,
            cond_grid,
            mask,
            query_captions: (q.caption_in.clone(), q.caption_out.clone()),
        })
    }

    pub fn load_records(&self, split: Split) -> Result<Vec<LoadedRecord>> {
        self.records(split).into_iter().map(|e| self.load_record(e)).collect()
    }
}
