//! Dataset index: one `image<TAB>mask` pair per line, paths relative to the
//! manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::data::sample::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Manifest {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, image: impl Into<PathBuf>, mask: impl Into<PathBuf>) {
        self.entries.push(ManifestEntry {
            image: image.into(),
            mask: mask.into(),
        });
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image)
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].mask)
    }

    /// Text form, one `image\tmask\n` line per entry.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.image.display(), e.mask.display()))
            .collect()
    }

    /// Writes the manifest to `path`; entries must already be relative to
    /// `path`'s directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// First `n` entries and the rest, e.g. a train/validation partition.
    pub fn split_at(&self, n: usize) -> (Manifest, Manifest) {
        let n = n.min(self.entries.len());
        let (a, b) = self.entries.split_at(n);
        (
            Manifest {
                root: self.root.clone(),
                entries: a.to_vec(),
            },
            Manifest {
                root: self.root.clone(),
                entries: b.to_vec(),
            },
        )
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        (0..self.len())
            .map(|i| Sample::load(self.image_path(i), self.mask_path(i)))
            .collect()
    }
}

pub fn parse_manifest(text: &str, root: &Path, origin: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new(root);
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: idx + 1,
            msg,
        };
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(err(format!(
                "expected `image<TAB>mask`, found {} field(s)",
                fields.len()
            )));
        }
        for f in &fields {
            if !root.join(f).is_file() {
                return Err(err(format!("referenced file `{f}` does not exist")));
            }
        }
        manifest.push(fields[0], fields[1]);
    }
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = parse_manifest(&text, &root, path)?;
    if manifest.is_empty() {
        warn!("manifest {} lists no samples", path.display());
    }
    Ok(manifest)
}
