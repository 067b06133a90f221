//! Paired-image datasets laid out as `root/{shadow,shadow_free,mask}/NAME.png`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_image, load_mask, save_image, save_mask};
use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::tensor::Tensor;

pub const SHADOW_DIR: &str = "shadow";
pub const SHADOW_FREE_DIR: &str = "shadow_free";
pub const MASK_DIR: &str = "mask";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletPaths {
    pub name: String,
    pub shadow: PathBuf,
    pub shadow_free: PathBuf,
    pub mask: PathBuf,
}

/// A shadow image, its shadow-free ground truth and the shadow mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub name: String,
    pub shadow: Tensor,
    pub shadow_free: Tensor,
    pub mask: ShadowMask,
}

impl Triplet {
    pub fn new(name: impl Into<String>, shadow: Tensor, shadow_free: Tensor, mask: ShadowMask) -> Result<Self> {
        let name = name.into();
        let dims_ok = match *shadow.shape() {
            [3, h, w] => shadow_free.shape() == [3, h, w] && (mask.height(), mask.width()) == (h, w),
            _ => false,
        };
        if !dims_ok {
            return Err(dim_err!(
                "triplet {name}: shadow {:?}, shadow-free {:?}, mask {}×{}",
                shadow.shape(),
                shadow_free.shape(),
                mask.height(),
                mask.width()
            ));
        }
        Ok(Triplet {
            name,
            shadow,
            shadow_free,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Writes the three PNGs under `root` in the standard layout.
    pub fn save(&self, root: &Path) -> Result<()> {
        for dir in [SHADOW_DIR, SHADOW_FREE_DIR, MASK_DIR] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let file = format!("{}.png", self.name);
        save_image(root.join(SHADOW_DIR).join(&file), &self.shadow)?;
        save_image(root.join(SHADOW_FREE_DIR).join(&file), &self.shadow_free)?;
        save_mask(root.join(MASK_DIR).join(&file), &self.mask)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<TripletPaths>,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
        ))
    }
}

impl DatasetIndex {
    /// Pairs every `shadow/NAME.png` with `shadow_free/NAME.png` and
    /// `mask/NAME.png`, sorted by name.
    pub fn from_layout(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let shadow_dir = root.join(SHADOW_DIR);
        let mut names = Vec::new();
        for entry in fs::read_dir(&shadow_dir).map_err(|e| Error::io(&shadow_dir, e))? {
            let path = entry.map_err(|e| Error::io(&shadow_dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let file = format!("{name}.png");
            let t = TripletPaths {
                shadow: root.join(SHADOW_DIR).join(&file),
                shadow_free: root.join(SHADOW_FREE_DIR).join(&file),
                mask: root.join(MASK_DIR).join(&file),
                name,
            };
            require_file(&t.shadow_free)?;
            require_file(&t.mask)?;
            entries.push(t);
        }
        Ok(DatasetIndex { root, split, entries })
    }

    /// Reads a manifest of `shadow shadow_free mask` relative paths, one
    /// triplet per line. Blank lines and `#` comments are skipped.
    pub fn from_manifest(root: impl AsRef<Path>, manifest: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [s, f, m] = parts[..] else {
                return Err(Error::Config(format!(
                    "{}:{}: expected three paths, got {}",
                    manifest.display(),
                    n + 1,
                    parts.len()
                )));
            };
            let t = TripletPaths {
                name: Path::new(s)
                    .file_stem()
                    .and_then(|x| x.to_str())
                    .unwrap_or(s)
                    .to_string(),
                shadow: root.join(s),
                shadow_free: root.join(f),
                mask: root.join(m),
            };
            for p in [&t.shadow, &t.shadow_free, &t.mask] {
                require_file(p)?;
            }
            entries.push(t);
        }
        Ok(DatasetIndex { root, split, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Triplet> {
        let p = &self.entries[index];
        Triplet::new(
            p.name.clone(),
            load_image(&p.shadow)?,
            load_image(&p.shadow_free)?,
            load_mask(&p.mask)?,
        )
    }

    /// Decodes every triplet, failing on the first unreadable or
    /// inconsistent one.
    pub fn load_all(&self) -> Result<Vec<Triplet>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
