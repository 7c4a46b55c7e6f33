//! Shared inputs for the criterion benches.

use std::path::PathBuf;

use dualcloak_core::model::{load_checkpoint, make_synthetic_dataset, reference_clip};
use dualcloak_core::{Tensor, VictimModel};

pub fn fixture_model() -> VictimModel {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/model/model.ckpt");
    load_checkpoint(&path).expect("fixture checkpoint")
}

/// One synthetic subject as `(image, reference clip, label)`.
pub fn subject(model: &VictimModel, seed: u64) -> (Tensor, Tensor, usize) {
    let c = model.config();
    let clip = make_synthetic_dataset(1, seed, c.frames, c.image_size, c.image_size).expect("synthetic subject").remove(0);
    let x = clip.frame(0);
    let reference = reference_clip(&x, c.frames, clip.velocity.expect("synthetic clips move")).expect("reference clip");
    (x, reference, clip.label)
}
