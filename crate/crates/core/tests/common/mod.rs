#![allow(dead_code)]

use decornet_core::data::synthetic::synthetic_slices;
use decornet_core::data::{AugmentationPolicy, VolumeSlices};
use decornet_core::{ChannelConfig, SliceSample, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random binary mask pairs; densities vary per pair and include empty masks.
pub fn random_mask_pairs(n: usize, side: usize, seed: u64) -> Vec<(Array2<u8>, Array2<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (pa, pb) = match i % 10 {
                0 => (0.0, 0.0),
                1 => (0.0, 0.4),
                2 => (0.4, 0.0),
                _ => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            };
            let a = Array2::from_shape_fn((side, side), |_| u8::from(rng.random_bool(pa)));
            let b = Array2::from_shape_fn((side, side), |_| u8::from(rng.random_bool(pb)));
            (a, b)
        })
        .collect()
}

/// Metrics computed from foreground coordinate sets.
pub struct SetOracle {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl SetOracle {
    pub fn new(pred: &Array2<u8>, gt: &Array2<u8>) -> Self {
        use std::collections::BTreeSet;
        let set = |m: &Array2<u8>| -> BTreeSet<(usize, usize)> {
            m.indexed_iter().filter(|(_, &v)| v == 1).map(|(ix, _)| ix).collect()
        };
        let (p, g) = (set(pred), set(gt));
        let inter = p.intersection(&g).count() as u64;
        let union = p.union(&g).count() as u64;
        let (np, ng) = (p.len() as u64, g.len() as u64);
        let frac = |num: u64, den: u64, both_empty: bool| {
            if den == 0 {
                if both_empty { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        let both_empty = np == 0 && ng == 0;
        Self {
            dice: frac(2 * inter, np + ng, both_empty),
            iou: frac(inter, union, both_empty),
            precision: frac(inter, np, both_empty),
            recall: frac(inter, ng, both_empty),
        }
    }
}

/// The overfit fixture: four 64×64 slices that double as validation data.
pub fn overfit_data() -> (Vec<SliceSample>, Vec<VolumeSlices>) {
    let slices = synthetic_slices(4, 64, 0);
    let val = vec![VolumeSlices {
        volume_id: "synthetic".into(),
        slices: slices.clone(),
    }];
    (slices, val)
}

pub fn overfit_config(lambda: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.channels = ChannelConfig::new(&[8, 16, 32, 32, 32]).unwrap();
    cfg.loss.lambda_decor = lambda;
    cfg.optim.lr0 = 3e-3;
    cfg.optim.epochs = 200;
    cfg.optim.batch_size = 4;
    cfg.data.augmentation = AugmentationPolicy::identity();
    cfg.deterministic = true;
    cfg.seed = seed;
    cfg
}

/// A network small enough for multi-epoch tests on 32×32 slices.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.channels = ChannelConfig::new(&[4, 4, 8, 8, 8]).unwrap();
    cfg.optim.lr0 = 3e-3;
    cfg.optim.epochs = 3;
    cfg.optim.batch_size = 4;
    cfg.deterministic = true;
    cfg
}

pub fn tiny_data(n: usize, seed: u64) -> (Vec<SliceSample>, Vec<VolumeSlices>) {
    let slices = synthetic_slices(n, 32, seed);
    let val = vec![VolumeSlices {
        volume_id: "val".into(),
        slices: synthetic_slices(2, 32, seed + 1000),
    }];
    (slices, val)
}
