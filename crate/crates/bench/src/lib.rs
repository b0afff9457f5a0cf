//! Fixtures shared by the benchmarks.

use ps3_core::params::AttentionWeights;
use ps3_core::{Matrix, Model, ModelSpec, Sample, SurvivalRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn attention_weights(d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let s = 1.0 / (d as f64).sqrt();
    AttentionWeights {
        query: normal(d, d, s, rng),
        key: normal(d, d, s, rng),
        value: normal(d, d, s, rng),
    }
}

/// Patches from `k` unit-variance clusters with centers spread by 3.
pub fn clustered_patches(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let centers = normal(k, d, 3.0, rng);
    let mut x = normal(n, d, 1.0, rng);
    for i in 0..n {
        let c = rng.random_range(0..k);
        for (v, m) in x.row_mut(i).iter_mut().zip(centers.row(c)) {
            *v += m;
        }
    }
    x
}

/// Default-sized model for 50 pathways of 10 genes, 16 slide prototypes of
/// `d_h = 16` and reports of `d_t = 32`.
pub fn default_model(seed: u64) -> Model {
    let config = TrainConfig::default();
    let spec = ModelSpec::from_config(&config, vec![10; 50], 32, 16, 6, 9);
    Model::init(spec, seed).expect("valid spec")
}

pub fn patients(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Sample>, Vec<SurvivalRecord>) {
    let samples = (0..n)
        .map(|i| Sample {
            patient_id: format!("p{i}"),
            pathways: Some(
                spec.pathway_widths
                    .iter()
                    .map(|&w| normal(1, w, 1.0, rng).into_vec())
                    .collect(),
            ),
            histology: Some(normal(spec.n_h, spec.histology_width(), 1.0, rng)),
            text: Some(normal(rng.random_range(3..=spec.max_segments), spec.d_t, 1.0, rng)),
        })
        .collect();
    let records = (0..n)
        .map(|i| {
            SurvivalRecord::new(format!("p{i}"), rng.random_range(1.0..100.0), rng.random_bool(0.7)).expect("valid")
        })
        .collect();
    (samples, records)
}
