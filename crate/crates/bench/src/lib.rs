//! Shared fixtures for the criterion benchmarks.

use std::collections::BTreeMap;

use micromodal_core::data::synth::{generate_synthetic_dataset, SyntheticSpec};
use micromodal_core::data::{LoadedSample, ModalityTag};

/// A fixed-length synthetic gesture batch (RGB + pose streams).
pub fn gesture_samples(
    n: usize,
    steps: usize,
    d_rgb: usize,
    d_pose: usize,
    seed: u64,
) -> Vec<LoadedSample> {
    let spec = SyntheticSpec {
        n_classes: 4,
        n_samples: n,
        t_min: steps,
        t_max: steps,
        streams: BTreeMap::from([(ModalityTag::Rgb, d_rgb), (ModalityTag::Pose, d_pose)]),
        rho: 0.6,
        noise: 0.3,
        jitter: 1.0,
        active_fraction: 1.0,
        seed,
    };
    generate_synthetic_dataset(&spec).unwrap()
}
