//! Volume file formats and the on-disk dataset layout.
//!
//! Flat binary volumes (`.hinv`) start with a 16-byte header: the ASCII magic
//! `HINV` followed by three little-endian `u32` dimensions
//! `(slices, rows, cols)`. The voxels follow as little-endian `f32` in
//! slice-major order. NIfTI-1 files (`.nii`, `.nii.gz`) are read with their
//! first two axes as `(rows, cols)` and the third as the slice axis.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, Volume};
use crate::error::{HinetError, Result};

pub const HINV_MAGIC: &[u8; 4] = b"HINV";
const HINV_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Hinv,
    Nifti,
}

impl VolumeFormat {
    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Hinv => "hinv",
            VolumeFormat::Nifti => "nii",
        }
    }

    pub fn from_path(path: &Path) -> VolumeFormat {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Hinv
        }
    }
}

fn subject_from_path(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a volume; the subject id is taken from the parent directory name.
pub fn load_volume(path: &Path, modality: Modality) -> Result<Volume> {
    match VolumeFormat::from_path(path) {
        VolumeFormat::Hinv => load_hinv(path, modality),
        VolumeFormat::Nifti => load_nifti(path, modality),
    }
}

pub fn save_volume(path: &Path, volume: &Volume, format: VolumeFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HinetError::io(parent, e))?;
    }
    match format {
        VolumeFormat::Hinv => save_hinv(path, volume),
        VolumeFormat::Nifti => save_nifti(path, volume),
    }
}

fn load_hinv(path: &Path, modality: Modality) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| HinetError::io(path, e))?;
    if bytes.len() < HINV_HEADER_LEN {
        return Err(HinetError::format(
            "header",
            format!("{} bytes is shorter than the 16-byte header", bytes.len()),
        ));
    }
    if &bytes[..4] != HINV_MAGIC {
        return Err(HinetError::format("magic", format!("expected HINV, found {:?}", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    if shape.contains(&0) {
        return Err(HinetError::format("dims", format!("zero-sized dimension in {shape:?}")));
    }
    let voxels = shape.iter().product::<usize>();
    let payload = &bytes[HINV_HEADER_LEN..];
    if payload.len() != voxels * 4 {
        return Err(HinetError::format(
            "payload",
            format!("dims {shape:?} need {} bytes, file has {}", voxels * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(subject_from_path(path), modality, shape, data)
}

fn save_hinv(path: &Path, volume: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(HINV_HEADER_LEN + volume.data().len() * 4);
    buf.extend_from_slice(HINV_MAGIC);
    for d in volume.shape() {
        let d = u32::try_from(d)
            .map_err(|_| HinetError::format("dims", format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in volume.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| HinetError::io(path, e))?;
    f.write_all(&buf).map_err(|e| HinetError::io(path, e))
}

fn load_nifti(path: &Path, modality: Modality) -> Result<Volume> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| HinetError::format("nifti", e.to_string()))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| HinetError::format("nifti.data", e.to_string()))?;
    let dims = arr.shape().to_vec();
    let (rows, cols, slices) = match dims[..] {
        [r, c] => (r, c, 1),
        [r, c, s] => (r, c, s),
        [r, c, s, 1] => (r, c, s),
        _ => {
            return Err(HinetError::format(
                "nifti.dim",
                format!("expected a 3-D volume, got dims {dims:?}"),
            ))
        }
    };
    let arr = arr
        .into_shape((rows, cols, slices))
        .map_err(|e| HinetError::format("nifti.dim", e.to_string()))?;
    let mut data = Vec::with_capacity(rows * cols * slices);
    for s in 0..slices {
        for r in 0..rows {
            for c in 0..cols {
                data.push(arr[[r, c, s]]);
            }
        }
    }
    Volume::new(subject_from_path(path), modality, [slices, rows, cols], data)
}

fn save_nifti(path: &Path, volume: &Volume) -> Result<()> {
    let [slices, rows, cols] = volume.shape();
    let d = volume.data();
    let arr = ndarray::Array3::from_shape_fn((rows, cols, slices), |(r, c, s)| {
        d[(s * rows + r) * cols + c]
    });
    nifti::writer::WriterOptions::new(path)
        .write_nifti(&arr)
        .map_err(|e| HinetError::format("nifti", e.to_string()))
}

/// One subject entry in `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    /// Modality -> file name relative to the subject directory.
    pub modalities: BTreeMap<Modality, String>,
}

/// Lists subjects and which modalities each one has.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestSubject>,
}

/// `<root>/<subject_id>/<modality>.<ext>` plus `<root>/manifest.json`.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn volume_path(&self, subject: &str, modality: Modality, format: VolumeFormat) -> PathBuf {
        self.root
            .join(subject)
            .join(format!("{}.{}", modality.as_str(), format.extension()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(Self::MANIFEST)
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| HinetError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HinetError::format("manifest", e.to_string()))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| HinetError::io(&self.root, e))?;
        let path = self.manifest_path();
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| HinetError::io(&path, e))
    }

    /// Builds a manifest from whatever `<modality>.<ext>` files are present.
    pub fn scan(&self) -> Result<Manifest> {
        let mut subjects = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| HinetError::io(&self.root, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        for dir in dirs {
            let mut modalities = BTreeMap::new();
            let files = fs::read_dir(&dir).map_err(|e| HinetError::io(&dir, e))?;
            for f in files.filter_map(|e| e.ok()) {
                let name = f.file_name().to_string_lossy().into_owned();
                let stem = name.split('.').next().unwrap_or_default();
                if let Ok(m) = stem.parse::<Modality>() {
                    modalities.insert(m, name);
                }
            }
            if !modalities.is_empty() {
                subjects.push(ManifestSubject {
                    id: dir.file_name().unwrap().to_string_lossy().into_owned(),
                    modalities,
                });
            }
        }
        Ok(Manifest { subjects })
    }

    /// Loads one modality of one subject using the manifest entry.
    pub fn load(&self, subject: &ManifestSubject, modality: Modality) -> Result<Volume> {
        let file = subject
            .modalities
            .get(&modality)
            .ok_or_else(|| HinetError::MissingModality {
                subject: subject.id.clone(),
                modality: modality.to_string(),
            })?;
        load_volume(&self.root.join(&subject.id).join(file), modality)
    }
}
