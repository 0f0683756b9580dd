//! Masked generative distillation: random masks over the aligned student
//! feature, a small generative block that reconstructs the teacher feature
//! from what is left, and the reconstruction loss. The direct-mimic
//! baseline and a temperature logit loss live here too.

mod block;
mod loss;
mod mask;

pub use block::{GenerativeBlock, ProjectorSpec};
pub use loss::{kd_logit_loss, mgd_loss, mgd_stage_loss, mimic_loss, total_loss, Reduction};
pub use mask::{apply_mask, sample_mask, Mask, MaskConfig, MaskMode};
