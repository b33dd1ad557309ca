//! Shared fixtures for the criterion benchmarks.

use bifbm_core::{HurstParams, MultiParams, TimeGrid};

pub fn supercritical() -> HurstParams {
    HurstParams::new(0.7, 0.9).expect("valid parameters")
}

pub fn local_time_params() -> HurstParams {
    HurstParams::new(0.6, 0.9).expect("valid parameters")
}

pub fn grid(n: usize) -> TimeGrid {
    TimeGrid::uniform(1.0, n).expect("valid grid")
}

pub fn planar() -> MultiParams {
    MultiParams::from_vectors(&[0.7, 0.75], &[0.9, 0.9]).expect("valid parameters")
}
