#![allow(dead_code)]

use std::path::PathBuf;

use tuneconv_core::data::{encode_png, Rng};
use tuneconv_core::{Shape, Tensor};

pub fn golden_ckpt() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden_p2.tcnv")
}

/// Smooth colour ramp plus uniform noise, encoded as PNG.
pub fn noisy_png(h: usize, w: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::seed(seed);
    let t = Tensor::<f32>::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| {
        let base = 0.5 + 0.3 * ((i as f32 * 0.3 + c as f32).sin() * (j as f32 * 0.2).cos());
        base + rng.uniform_in(-0.15, 0.15) as f32
    });
    encode_png(&t).unwrap()
}
