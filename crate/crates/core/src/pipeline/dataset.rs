//! JSON dataset manifests.
//!
//! A manifest lists subject ids and `GSHFLD01` image paths, relative to the
//! manifest's directory:
//!
//! ```json
//! { "subjects": [ { "id": "s000", "path": "s000.gsh" } ] }
//! ```
//!
//! Each image stores `K` channels of class responsibilities; voxels whose
//! channels are all zero are treated as missing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CategoricalImage, Lattice};
use crate::fieldio::{read_field, write_field, Dtype};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
}

/// Subjects loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<CategoricalImage>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, images: Vec<CategoricalImage>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::Data(format!("{} ids for {} images", ids.len(), images.len())));
        }
        if let Some(first) = images.first() {
            for (id, img) in ids.iter().zip(&images) {
                img.lattice()
                    .ensure_same(first.lattice(), &format!("subject {id}"))?;
                if img.classes() != first.classes() {
                    return Err(Error::Data(format!(
                        "subject {id} has {} classes, expected {}",
                        img.classes(),
                        first.classes()
                    )));
                }
            }
        }
        Ok(Self { ids, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn lattice(&self) -> Option<&Lattice> {
        self.images.first().map(CategoricalImage::lattice)
    }

    pub fn classes(&self) -> Option<usize> {
        self.images.first().map(CategoricalImage::classes)
    }

    /// Loads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: manifest_path.clone(),
            source,
        })?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut ids = Vec::with_capacity(manifest.subjects.len());
        let mut images = Vec::with_capacity(manifest.subjects.len());
        for entry in manifest.subjects {
            let field = read_field(&root.join(&entry.path))?;
            images.push(CategoricalImage::new(field)?);
            ids.push(entry.id);
        }
        Self::new(ids, images)
    }

    /// Writes every image as `<id>.gsh` next to a manifest in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for (id, img) in self.ids.iter().zip(&self.images) {
            let name = PathBuf::from(format!("{id}.gsh"));
            write_field(&dir.join(&name), img.field(), Dtype::F64)?;
            manifest.subjects.push(ManifestEntry {
                id: id.clone(),
                path: name,
            });
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
