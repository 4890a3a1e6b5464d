#![allow(dead_code)]

pub mod oracle;

use emostory::attention::{ProjectionWeights, RegionConfig, ThresholdMode, TokenStream};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use oracle::{Instance, Mat};

pub fn to_array(m: &Mat) -> Array2<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows, cols), |(i, j)| m[i][j])
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Random stream with at most `max_n` tokens and width at most `max_d`.
/// Needs `max_n >= 4` (two prompt tokens plus one token per image).
pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, max_d: usize) -> Instance {
    let hw_max = (max_n - 2) / 2;
    let hw = rng.random_range(1..=hw_max);
    let prompt_len = rng.random_range(2..=max_n - 2 * hw);
    let split = rng.random_range(1..prompt_len);
    let first = (rng.random_range(0..split), split);
    let second = (split, rng.random_range(split + 1..=prompt_len));
    let (subject, element) = if rng.random_bool(0.5) { (first, second) } else { (second, first) };
    let d = rng.random_range(1..=max_d);
    let n = prompt_len + 2 * hw;
    let z_scale = rng.random_range(0.5..2.5);
    let w_scale = 1.0 / (d as f64).sqrt();
    Instance {
        z: gaussian(rng, n, d, z_scale),
        prompt_len,
        hw,
        subject,
        element,
        wq: gaussian(rng, d, d, w_scale),
        wk: gaussian(rng, d, d, w_scale),
        wv: gaussian(rng, d, d, w_scale),
        tau: rng.random_range(0.05..0.95),
        relative: rng.random_bool(0.7),
        lambda: rng.random_range(0.0..=1.0),
        alpha: rng.random_range(0.0..5.0),
        quantile: rng.random_range(0.0..=1.0),
    }
}

pub fn engine_inputs(inst: &Instance) -> (TokenStream, ProjectionWeights, RegionConfig) {
    let stream = TokenStream::new(
        to_array(&inst.z),
        inst.prompt_len,
        (1, inst.hw),
        inst.subject.0..inst.subject.1,
        inst.element.0..inst.element.1,
    )
    .expect("valid random stream");
    let weights = ProjectionWeights::new(to_array(&inst.wq), to_array(&inst.wk), to_array(&inst.wv)).unwrap();
    let config = RegionConfig {
        tau: inst.tau,
        threshold_mode: if inst.relative { ThresholdMode::Relative } else { ThresholdMode::Absolute },
        lambda_mix: inst.lambda,
        alpha: inst.alpha,
        d: None,
        ra_quantile: inst.quantile,
    };
    (stream, weights, config)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}
