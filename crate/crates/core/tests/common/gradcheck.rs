//! Analytic gradient against central differences of the oracle loss.

use lexdense::encoder::{EncoderConfig, EncoderModel};
use lexdense::trainer::{assemble_batch, loss_gradient};
use rand::Rng;

use super::{gen, oracles};

pub const DIM: usize = 8;
pub const BUCKETS: usize = 32;

pub fn small_model(seed: u64) -> EncoderModel {
    EncoderModel::init(
        EncoderConfig {
            dim: DIM,
            vocab_buckets: BUCKETS,
            ..EncoderConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h` of the oracle loss, over every touched coordinate
/// plus a few untouched ones, on a B=2, C=3 batch. Relative error uses
/// `max(|a|, |b|, 1e-6)` as denominator. Even seeds spread the weights to
/// [-1, 1] so the normalization Jacobian matters; odd seeds keep the init.
pub fn max_gradient_error(seed: u64, tau: f64, h: f64) -> f64 {
    let mut rng = gen::rng(seed);
    let vocab = gen::vocab(40);
    let docs = gen::corpus(&mut rng, 12, &vocab, 6);
    let examples = gen::examples(&mut rng, &docs, &vocab, 2, 3);
    let mut model = small_model(seed);
    if seed.is_multiple_of(2) {
        for r in 0..DIM {
            for k in 0..BUCKETS {
                let w: f64 = rng.gen_range(-1.0..1.0);
                model.set_weight(r, k, w);
            }
        }
    }
    let batch = assemble_batch(&examples, &model, &docs, None).unwrap();
    let (loss, grad) = loss_gradient(&batch, &model, tau).unwrap();
    let reference = oracles::infonce(&model, &docs, &examples, tau);
    assert!((loss - reference).abs() < 1e-10, "loss {loss} vs oracle {reference}");
    let mut coords: Vec<(usize, usize)> = grad
        .columns()
        .flat_map(|(k, _)| (0..DIM).map(move |r| (r, k as usize)))
        .collect();
    coords.extend((0..4).map(|_| (rng.gen_range(0..DIM), rng.gen_range(0..BUCKETS))));
    let mut worst: f64 = 0.0;
    for (r, k) in coords {
        let w = model.weight(r, k);
        let mut m = model.clone();
        m.set_weight(r, k, w + h);
        let up = oracles::infonce(&m, &docs, &examples, tau);
        m.set_weight(r, k, w - h);
        let down = oracles::infonce(&m, &docs, &examples, tau);
        let fd = (up - down) / (2.0 * h);
        let an = grad.get(r, k);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
