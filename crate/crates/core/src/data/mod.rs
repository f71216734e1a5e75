//! Volume ingestion, intensity scaling, cropping, patching and subject splits.

mod io;
mod phantom;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HinetError, Result};

pub use io::{
    load_volume, save_volume, DatasetLayout, Manifest, ManifestSubject, VolumeFormat, HINV_MAGIC,
};
pub use phantom::{make_phantom_dataset, phantom_target, PhantomConfig, PhantomRule, SubjectVolumes};

/// Crop applied to each 240x240 axial slice.
pub const CROP_SIZE: (usize, usize) = (160, 180);
/// Side of the square training patches.
pub const PATCH_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
    Synthetic,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::T1,
        Modality::T1c,
        Modality::T2,
        Modality::Flair,
        Modality::Synthetic,
    ];

    /// File stem used in the dataset directory layout.
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
            Modality::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "Flair",
            Modality::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

impl FromStr for Modality {
    type Err = HinetError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == lower)
            .ok_or_else(|| HinetError::Argument(format!("unknown modality '{s}'")))
    }
}

/// Single-modality 3-D scalar field laid out as `(slices, rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub modality: Modality,
    shape: [usize; 3],
    data: Vec<f32>,
    /// Range of the raw intensities as loaded (kept through normalization).
    pub intensity_range: (f32, f32),
}

impl Volume {
    pub fn new(
        subject_id: impl Into<String>,
        modality: Modality,
        shape: [usize; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(HinetError::format(
                "dims",
                format!("every dimension must be >= 1, got {shape:?}"),
            ));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(HinetError::format(
                "dims",
                format!("shape {shape:?} does not match {} voxels", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(HinetError::Data(format!("non-finite voxel at flat index {i}")));
        }
        let range = value_range(&data);
        Ok(Self {
            subject_id: subject_id.into(),
            modality,
            shape,
            data,
            intensity_range: range,
        })
    }

    /// Stacks equally-sized slices into a volume.
    pub fn from_slices(
        subject_id: impl Into<String>,
        modality: Modality,
        slices: &[Image2D],
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| HinetError::format("dims", "volume needs at least one slice"))?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if s.shape() != (rows, cols) {
                return Err(HinetError::Dimension(format!(
                    "slice {:?} differs from {:?}",
                    s.shape(),
                    (rows, cols)
                )));
            }
            data.extend_from_slice(s.data());
        }
        Self::new(subject_id, modality, [slices.len(), rows, cols], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_slices(&self) -> usize {
        self.shape[0]
    }

    pub fn slice(&self, index: usize) -> Result<Image2D> {
        let [n, rows, cols] = self.shape;
        if index >= n {
            return Err(HinetError::Argument(format!(
                "slice {index} out of range for {n} slices"
            )));
        }
        let plane = rows * cols;
        Image2D::new(
            rows,
            cols,
            self.data[index * plane..(index + 1) * plane].to_vec(),
            self.modality,
        )
    }
}

fn value_range(data: &[f32]) -> (f32, f32) {
    data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Row-major 2-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    pub modality: Modality,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, modality: Modality) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(HinetError::Dimension(format!(
                "{rows}x{cols} image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            modality,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f32, modality: Modality) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            modality,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies the `rows x cols` window whose top-left corner is `(r0, c0)`.
    pub fn window(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Image2D> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(HinetError::Dimension(format!(
                "window {rows}x{cols} at ({r0},{c0}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + cols]);
        }
        Image2D::new(rows, cols, data, self.modality)
    }
}

/// Linearly maps a volume onto `[-1, 1]` using its own min and max.
/// Constant volumes map to all zeros.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(HinetError::Data(format!(
            "non-finite voxel at flat index {i} in {} {}",
            v.subject_id, v.modality
        )));
    }
    let (lo, hi) = value_range(&v.data);
    let data = if hi > lo {
        let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
        v.data
            .iter()
            .map(|&x| (2.0 * (f64::from(x) - lo) / span - 1.0) as f32)
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Ok(Volume {
        subject_id: v.subject_id.clone(),
        modality: v.modality,
        shape: v.shape,
        data,
        intensity_range: (lo, hi),
    })
}

/// Inverse of [`normalize_intensity`] for a given raw range.
pub fn denormalize(value: f32, range: (f32, f32)) -> f32 {
    let (lo, hi) = range;
    ((f64::from(value) + 1.0) * 0.5 * (f64::from(hi) - f64::from(lo)) + f64::from(lo)) as f32
}

/// Center crop to `rows x cols`, offsets floored.
pub fn center_crop_to(img: &Image2D, rows: usize, cols: usize) -> Result<Image2D> {
    if img.rows < rows || img.cols < cols {
        return Err(HinetError::Dimension(format!(
            "cannot crop {rows}x{cols} from a {}x{} image",
            img.rows, img.cols
        )));
    }
    let (r0, c0) = crop_offsets(img.shape(), (rows, cols));
    img.window(r0, c0, rows, cols)
}

pub fn crop_offsets(input: (usize, usize), crop: (usize, usize)) -> (usize, usize) {
    ((input.0 - crop.0) / 2, (input.1 - crop.1) / 2)
}

/// Center crop to 160x180.
pub fn center_crop(img: &Image2D) -> Result<Image2D> {
    center_crop_to(img, CROP_SIZE.0, CROP_SIZE.1)
}

/// Four corner-anchored square patches covering their parent image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Image2D>,
    pub anchors: Vec<(usize, usize)>,
}

pub fn corner_anchors(parent: (usize, usize), patch: usize) -> [(usize, usize); 4] {
    let (dr, dc) = (parent.0 - patch, parent.1 - patch);
    [(0, 0), (0, dc), (dr, 0), (dr, dc)]
}

/// Splits an image into four overlapping `patch x patch` corner patches.
/// The parent must be at least `patch` and at most `2 * patch` on each side.
pub fn extract_patches_sized(img: &Image2D, patch: usize) -> Result<PatchSet> {
    let (rows, cols) = img.shape();
    if rows < patch || cols < patch || rows > 2 * patch || cols > 2 * patch {
        return Err(HinetError::Dimension(format!(
            "four {patch}x{patch} patches cannot tile a {rows}x{cols} image"
        )));
    }
    let anchors = corner_anchors((rows, cols), patch);
    let patches = anchors
        .iter()
        .map(|&(r, c)| img.window(r, c, patch, patch))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        patches,
        anchors: anchors.to_vec(),
    })
}

/// Splits a 160x180 image into the four 128x128 corner patches.
pub fn extract_patches(img: &Image2D) -> Result<PatchSet> {
    if img.shape() != CROP_SIZE {
        return Err(HinetError::Dimension(format!(
            "expected a {}x{} image, got {}x{}",
            CROP_SIZE.0,
            CROP_SIZE.1,
            img.rows(),
            img.cols()
        )));
    }
    extract_patches_sized(img, PATCH_SIZE)
}

/// Reassembles patches, averaging every pixel over the patches covering it.
pub fn stitch_patches(ps: &PatchSet) -> Result<Image2D> {
    if ps.patches.len() != 4 || ps.anchors.len() != 4 {
        return Err(HinetError::Structure(format!(
            "a patch set needs 4 patches and 4 anchors, got {} and {}",
            ps.patches.len(),
            ps.anchors.len()
        )));
    }
    let (ph, pw) = ps.patches[0].shape();
    if ps.patches.iter().any(|p| p.shape() != (ph, pw)) {
        return Err(HinetError::Structure("patches differ in shape".into()));
    }
    let rows = ps.anchors.iter().map(|a| a.0 + ph).max().unwrap_or(0);
    let cols = ps.anchors.iter().map(|a| a.1 + pw).max().unwrap_or(0);
    let mut sum = vec![0.0f32; rows * cols];
    let mut count = vec![0u32; rows * cols];
    for (p, &(r0, c0)) in ps.patches.iter().zip(&ps.anchors) {
        for r in 0..ph {
            for c in 0..pw {
                let i = (r0 + r) * cols + c0 + c;
                sum[i] += p.get(r, c);
                count[i] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(HinetError::Structure(format!(
            "anchors leave pixel ({}, {}) uncovered",
            i / cols,
            i % cols
        )));
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| s / n as f32)
        .collect();
    Image2D::new(rows, cols, data, ps.patches[0].modality)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle of subject ids into train/test with `round(fraction * N)`
/// training subjects.
pub fn split_subjects(ids: &[String], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(HinetError::Argument("cannot split an empty subject list".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(HinetError::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(HinetError::Argument("subject ids must be unique".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let test_ids = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train_ids: shuffled,
        test_ids,
        seed,
    })
}

/// Paired training item: two source images and the target, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x1: Image2D,
    pub x2: Image2D,
    pub y: Image2D,
    pub subject_id: String,
    pub slice_index: usize,
    pub anchor: (usize, usize),
}

impl Sample {
    pub fn new(
        x1: Image2D,
        x2: Image2D,
        y: Image2D,
        subject_id: impl Into<String>,
        slice_index: usize,
        anchor: (usize, usize),
    ) -> Result<Self> {
        if x1.shape() != x2.shape() || x1.shape() != y.shape() {
            return Err(HinetError::Dimension(format!(
                "sample images differ in shape: {:?}, {:?}, {:?}",
                x1.shape(),
                x2.shape(),
                y.shape()
            )));
        }
        let mods = [x1.modality, x2.modality, y.modality];
        if mods[0] == mods[1] || mods[0] == mods[2] || mods[1] == mods[2] {
            return Err(HinetError::Argument(format!(
                "sample modalities must be pairwise distinct, got {mods:?}"
            )));
        }
        Ok(Self {
            x1,
            x2,
            y,
            subject_id: subject_id.into(),
            slice_index,
            anchor,
        })
    }
}

/// `(slice_index, x1, x2, y)` at parent resolution.
pub type PreparedSlice = (usize, Image2D, Image2D, Option<Image2D>);

/// How normalized slices are turned into network-sized samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    /// Center crop applied to each slice first.
    pub crop: Option<(usize, usize)>,
    /// Side of the four corner patches; `None` keeps the whole (cropped) slice.
    pub patch: Option<usize>,
    /// Drop slices whose target is entirely background (its minimum value).
    pub skip_background: bool,
}

impl SamplePlan {
    /// 240x240 slices cropped to 160x180 and split into four 128x128 patches.
    pub fn cropped_patches() -> Self {
        Self {
            crop: Some(CROP_SIZE),
            patch: Some(PATCH_SIZE),
            skip_background: false,
        }
    }

    /// Slices already at network resolution.
    pub fn whole() -> Self {
        Self {
            crop: None,
            patch: None,
            skip_background: false,
        }
    }

    /// Resolution of the slice before patching.
    pub fn parent_shape(&self, slice: (usize, usize)) -> (usize, usize) {
        self.crop.unwrap_or(slice)
    }
}

fn is_background(img: &Image2D) -> bool {
    let first = img.data()[0];
    img.data().iter().all(|&v| v == first)
}

/// Prepares the (already normalized) slice images for one subject according
/// to `plan`, returning parent-resolution images per slice:
/// `(slice_index, x1, x2, y)`.
pub fn prepare_slices(
    x1: &Volume,
    x2: &Volume,
    y: Option<&Volume>,
    plan: &SamplePlan,
) -> Result<Vec<PreparedSlice>> {
    let shape = x1.shape();
    if x2.shape() != shape || y.is_some_and(|y| y.shape() != shape) {
        return Err(HinetError::Dimension(format!(
            "subject {} volumes differ in shape",
            x1.subject_id
        )));
    }
    let crop = |img: Image2D| -> Result<Image2D> {
        match plan.crop {
            Some((r, c)) => center_crop_to(&img, r, c),
            None => Ok(img),
        }
    };
    let mut out = Vec::with_capacity(shape[0]);
    for s in 0..shape[0] {
        let ty = y.map(|v| v.slice(s).and_then(crop)).transpose()?;
        if plan.skip_background && ty.as_ref().is_some_and(is_background) {
            continue;
        }
        out.push((s, crop(x1.slice(s)?)?, crop(x2.slice(s)?)?, ty));
    }
    Ok(out)
}

/// Builds samples ordered by (slice, anchor) for one subject.
pub fn build_samples(x1: &Volume, x2: &Volume, y: &Volume, plan: &SamplePlan) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (s, a, b, t) in prepare_slices(x1, x2, Some(y), plan)? {
        let t = t.expect("target requested");
        match plan.patch {
            Some(p) => {
                let (pa, pb, pt) = (
                    extract_patches_sized(&a, p)?,
                    extract_patches_sized(&b, p)?,
                    extract_patches_sized(&t, p)?,
                );
                for k in 0..4 {
                    samples.push(Sample::new(
                        pa.patches[k].clone(),
                        pb.patches[k].clone(),
                        pt.patches[k].clone(),
                        x1.subject_id.clone(),
                        s,
                        pa.anchors[k],
                    )?);
                }
            }
            None => samples.push(Sample::new(a, b, t, x1.subject_id.clone(), s, (0, 0))?),
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> Image2D {
        let data = (0..rows * cols).map(|i| i as f32).collect();
        Image2D::new(rows, cols, data, Modality::T1).unwrap()
    }

    #[test]
    fn normalization_maps_extremes_and_midpoint() {
        let v = Volume::new("s", Modality::T1, [1, 1, 3], vec![0.0, 50.0, 100.0]).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(n.intensity_range, (0.0, 100.0));
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::new("s", Modality::T2, [2, 2, 2], vec![7.0; 8]).unwrap();
        assert!(normalize_intensity(&v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_volume_is_a_data_error() {
        let v = Volume {
            subject_id: "s".into(),
            modality: Modality::T1,
            shape: [1, 1, 2],
            data: vec![1.0, f32::NAN],
            intensity_range: (0.0, 1.0),
        };
        assert!(matches!(normalize_intensity(&v), Err(HinetError::Data(_))));
        assert!(matches!(
            Volume::new("s", Modality::T1, [1, 1, 2], vec![1.0, f32::INFINITY]),
            Err(HinetError::Data(_))
        ));
    }

    #[test]
    fn zero_slice_volume_is_a_format_error() {
        let err = Volume::new("s", Modality::T1, [0, 8, 8], vec![]).unwrap_err();
        assert!(matches!(err, HinetError::Format { ref field, .. } if field == "dims"));
    }

    #[test]
    fn crop_offsets_and_index_mapping() {
        assert_eq!(crop_offsets((240, 240), CROP_SIZE), (40, 30));
        let img = ramp(240, 240);
        let c = center_crop(&img).unwrap();
        assert_eq!(c.shape(), (160, 180));
        for r in 0..160 {
            for col in 0..180 {
                assert_eq!(c.get(r, col), img.get(r + 40, col + 30));
            }
        }
        let exact = ramp(160, 180);
        assert_eq!(center_crop(&exact).unwrap(), exact);
        assert!(matches!(center_crop(&ramp(100, 240)), Err(HinetError::Dimension(_))));
    }

    #[test]
    fn patch_anchors_cover_every_pixel() {
        let ps = extract_patches(&ramp(160, 180)).unwrap();
        assert_eq!(ps.anchors, vec![(0, 0), (0, 52), (32, 0), (32, 52)]);
        let mut count = vec![0u8; 160 * 180];
        for &(r0, c0) in &ps.anchors {
            for r in r0..r0 + 128 {
                for c in c0..c0 + 128 {
                    count[r * 180 + c] += 1;
                }
            }
        }
        assert!(count.iter().all(|&n| n >= 1));
        for r in 0..160 {
            for c in 0..180 {
                let all_four = (32..128).contains(&r) && (52..128).contains(&c);
                assert_eq!(count[r * 180 + c] == 4, all_four, "pixel ({r},{c})");
            }
        }
        assert!(matches!(extract_patches(&ramp(128, 128)), Err(HinetError::Dimension(_))));
    }

    #[test]
    fn stitching_averages_overlaps() {
        let ones = extract_patches(&Image2D::filled(160, 180, 1.0, Modality::T1)).unwrap();
        assert!(stitch_patches(&ones).unwrap().data().iter().all(|&v| v == 1.0));

        let mut ps = extract_patches(&Image2D::filled(160, 180, 0.0, Modality::T1)).unwrap();
        ps.patches[1] = Image2D::filled(128, 128, 1.0, Modality::T1);
        let out = stitch_patches(&ps).unwrap();
        // (0, 100) is covered by patches 0 and 1 only
        assert_eq!(out.get(0, 100), 0.5);
        // (0, 150) only by patch 1
        assert_eq!(out.get(0, 150), 1.0);

        let mut broken = ps.clone();
        broken.patches.pop();
        assert!(matches!(stitch_patches(&broken), Err(HinetError::Structure(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..285).map(|i| format!("s{i:03}")).collect();
        let a = split_subjects(&ids, 0.8, 7).unwrap();
        assert_eq!((a.train_ids.len(), a.test_ids.len()), (228, 57));
        assert_eq!(a, split_subjects(&ids, 0.8, 7).unwrap());
        let five: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let b = split_subjects(&five, 0.8, 1).unwrap();
        assert_eq!((b.train_ids.len(), b.test_ids.len()), (4, 1));
        assert!(matches!(split_subjects(&[], 0.8, 1), Err(HinetError::Argument(_))));
    }

    #[test]
    fn sample_rejects_repeated_modalities() {
        let a = Image2D::filled(4, 4, 0.0, Modality::T1);
        let b = Image2D::filled(4, 4, 0.0, Modality::T1);
        let y = Image2D::filled(4, 4, 0.0, Modality::Flair);
        assert!(Sample::new(a, b, y, "s", 0, (0, 0)).is_err());
    }

    #[test]
    fn samples_follow_slice_then_anchor_order() {
        let mk = |m, off: f32| {
            let data = (0..2 * 240 * 240).map(|i| (i % 97) as f32 + off).collect();
            normalize_intensity(&Volume::new("s1", m, [2, 240, 240], data).unwrap()).unwrap()
        };
        let (x1, x2, y) = (mk(Modality::T1, 0.0), mk(Modality::T2, 1.0), mk(Modality::Flair, 2.0));
        let samples = build_samples(&x1, &x2, &y, &SamplePlan::cropped_patches()).unwrap();
        assert_eq!(samples.len(), 8);
        let order: Vec<_> = samples.iter().map(|s| (s.slice_index, s.anchor)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
        assert!(samples.iter().all(|s| s.x1.shape() == (128, 128)));
    }
}
