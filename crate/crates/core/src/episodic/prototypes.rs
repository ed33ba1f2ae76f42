use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::spectral::{
    estimate_support, extract_prototype, mean_prototypes, BBox, PrototypeSet, Provenance, SpectralConfig,
};
use crate::tensorkit::Tensor;

/// How the support object is located.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Fiedler partition of the support's own features.
    #[serde(alias = "free")]
    #[value(alias = "free")]
    AnnotationFree,
    /// Bounding box of the ground-truth support mask.
    #[serde(alias = "oracle")]
    #[value(alias = "oracle")]
    OracleMask,
}

/// Prototype of one support image from its pyramid (finest level first).
pub fn shot_prototype(
    pyramid: &[Tensor<f32>],
    mask: Option<&Mask>,
    mode: PrototypeMode,
    spectral: &SpectralConfig,
) -> Result<PrototypeSet> {
    match mode {
        PrototypeMode::AnnotationFree => Ok(estimate_support(pyramid, spectral)?.prototypes),
        PrototypeMode::OracleMask => {
            let mask = mask.ok_or_else(|| Error::invalid("oracle-mask prototypes need a support mask"))?;
            let bbox = BBox::of_mask(mask.data(), mask.height(), mask.width())
                .ok_or_else(|| Error::invalid("support mask is empty"))?;
            Ok(extract_prototype(pyramid, &bbox, mask.height(), mask.width())?.with_provenance(Provenance::OracleMask))
        }
    }
}

/// Per-level mean of the shot prototypes.
pub fn support_prototypes(
    shots: &[(&[Tensor<f32>], Option<&Mask>)],
    mode: PrototypeMode,
    spectral: &SpectralConfig,
) -> Result<PrototypeSet> {
    let sets = shots
        .iter()
        .enumerate()
        .map(|(i, (pyr, mask))| {
            shot_prototype(pyr, *mask, mode, spectral).map_err(|e| e.context(format!("support {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_prototypes(&sets)
}
