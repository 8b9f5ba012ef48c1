use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::format::{parse_manifest, read_sample, sample_paths};
use super::{DatasetSpec, SegSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub split: String,
    pub id: String,
}

/// Lazily loadable samples of one dataset. Loading is read-only, so an
/// index can be shared between worker threads.
#[derive(Debug, Clone)]
pub struct SampleIndex {
    pub dataset: Arc<DatasetSpec>,
    pub dir: PathBuf,
    pub entries: Vec<SampleRef>,
}

impl SampleIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<SegSample> {
        let r = &self.entries[i];
        read_sample(&self.dataset, &self.dir, &r.split, &r.id)
    }

    /// Entries belonging to `split`, as a new index.
    pub fn split(&self, split: &str) -> SampleIndex {
        SampleIndex {
            dataset: self.dataset.clone(),
            dir: self.dir.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
        }
    }

    /// Loads every sample and returns all failures (schema errors and
    /// invariant violations) instead of stopping at the first one.
    pub fn check_all(&self) -> Vec<Error> {
        let mut errors = Vec::new();
        for i in 0..self.len() {
            match self.load(i) {
                Ok(s) => {
                    let v = super::validate_sample(&s);
                    if !v.is_empty() {
                        let (_, ann) = sample_paths(&self.dir, &self.entries[i].split, &s.id);
                        let msg = v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                        errors.push(Error::schema(ann, "sample", msg));
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        errors
    }
}

/// Reads every `<root>/<dataset>/manifest`. A dataset directory without a
/// manifest is fatal; sample files named by a manifest must exist.
pub fn load_corpus(root: &Path) -> Result<Vec<(Arc<DatasetSpec>, SampleIndex)>> {
    let rd = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let manifest = dir.join("manifest");
        if !manifest.is_file() {
            return Err(Error::MissingManifest(manifest));
        }
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let spec = Arc::new(parse_manifest(&text, &manifest)?);
        let mut entries = Vec::new();
        for (split, ids) in &spec.splits {
            for id in ids {
                let (img, ann) = sample_paths(&dir, split, id);
                for p in [&img, &ann] {
                    if !p.is_file() {
                        return Err(Error::schema(
                            &manifest,
                            "split",
                            format!("listed sample file {} does not exist", p.display()),
                        ));
                    }
                }
                entries.push(SampleRef {
                    split: split.clone(),
                    id: id.clone(),
                });
            }
        }
        let index = SampleIndex {
            dataset: spec.clone(),
            dir,
            entries,
        };
        out.push((spec, index));
    }
    Ok(out)
}
