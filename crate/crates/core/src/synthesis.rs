//! Slice- and volume-level inference through the patch pipeline.

use crate::data::{extract_patches_sized, prepare_slices, stitch_patches, Image2D, Modality, PatchSet, SamplePlan, Volume};
use crate::error::{HinetError, Result};
use crate::model::HiNetParams;
use crate::trainer::{stack_images, unstack_image};

/// Synthesizes one parent-resolution slice: whole-image inference, or four
/// corner patches averaged where they overlap.
pub fn synthesize_slice(params: &HiNetParams, x1: &Image2D, x2: &Image2D, patch: Option<usize>) -> Result<Image2D> {
    match patch {
        None => {
            let y = params.synthesize(&stack_images(&[x1])?, &stack_images(&[x2])?)?;
            unstack_image(&y, 0, Modality::Synthetic)
        }
        Some(p) => {
            let (a, b) = (extract_patches_sized(x1, p)?, extract_patches_sized(x2, p)?);
            let y = params.synthesize(
                &stack_images(&a.patches.iter().collect::<Vec<_>>())?,
                &stack_images(&b.patches.iter().collect::<Vec<_>>())?,
            )?;
            let patches = (0..a.patches.len())
                .map(|k| unstack_image(&y, k, Modality::Synthetic))
                .collect::<Result<Vec<_>>>()?;
            stitch_patches(&PatchSet {
                patches,
                anchors: a.anchors,
            })
        }
    }
}

/// Synthesized slices of one subject, `(slice_index, image)` in [-1, 1].
pub fn synthesize_subject(
    params: &HiNetParams,
    x1: &Volume,
    x2: &Volume,
    plan: &SamplePlan,
) -> Result<Vec<(usize, Image2D)>> {
    prepare_slices(x1, x2, None, plan)?
        .into_iter()
        .map(|(s, a, b, _)| Ok((s, synthesize_slice(params, &a, &b, plan.patch)?)))
        .collect()
}

/// Stacks synthesized slices into a volume; every slice of the source must
/// be present.
pub fn assemble_volume(subject: &str, slices: Vec<(usize, Image2D)>, n_slices: usize) -> Result<Volume> {
    if slices.len() != n_slices || slices.iter().enumerate().any(|(i, (s, _))| *s != i) {
        return Err(HinetError::Structure(format!(
            "subject {subject}: {} synthesized slices do not cover all {n_slices}",
            slices.len()
        )));
    }
    Volume::from_slices(subject, Modality::Synthetic, &slices.into_iter().map(|(_, im)| im).collect::<Vec<_>>())
}
