//! Single-image inference shared by `tuneconv infer` and `POST /infer`, so
//! both produce the same bytes for the same request.

use std::path::Path;

use sha2::{Digest, Sha256};
use tuneconv_core::data::{decode_png, encode_png, png_dimensions};
use tuneconv_core::objectives::TuneParams;
use tuneconv_core::train::Checkpoint;

pub const DEFAULT_MAX_PIXELS: usize = 2_000_000;

#[derive(Debug)]
pub enum InferError {
    OmegaLength { expected: usize, got: usize },
    TooLarge { pixels: usize, max: usize },
    BadImage(String),
    Runtime(String),
}

impl std::fmt::Display for InferError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InferError::OmegaLength { expected, got } => {
                write!(f, "omega has {got} values but the checkpoint expects p = {expected}")
            }
            InferError::TooLarge { pixels, max } => write!(f, "image has {pixels} pixels, limit is {max}"),
            InferError::BadImage(r) => write!(f, "invalid image: {r}"),
            InferError::Runtime(r) => write!(f, "{r}"),
        }
    }
}

impl std::error::Error for InferError {}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub png: Vec<u8>,
    /// The values actually used, after clamping into `[0,1]`.
    pub omega: Vec<f64>,
    pub clamped: bool,
}

pub fn check_omega(ckpt: &Checkpoint, omega: &[f64]) -> Result<(Vec<f64>, bool), InferError> {
    let p = ckpt.model.p();
    if omega.len() != p {
        return Err(InferError::OmegaLength {
            expected: p,
            got: omega.len(),
        });
    }
    let (t, clamped) = TuneParams::<f64>::clamped(omega);
    Ok((t.as_slice().to_vec(), clamped))
}

pub fn run_inference(ckpt: &Checkpoint, png: &[u8], omega: &[f64], max_pixels: usize) -> Result<InferOutput, InferError> {
    let (omega, clamped) = check_omega(ckpt, omega)?;
    let name = Path::new("<input>");
    let (w, h) = png_dimensions(png, name).map_err(|e| InferError::BadImage(e.to_string()))?;
    if w * h > max_pixels {
        return Err(InferError::TooLarge {
            pixels: w * h,
            max: max_pixels,
        });
    }
    let x = decode_png(png, name).map_err(|e| InferError::BadImage(e.to_string()))?;
    let w32: Vec<f32> = omega.iter().map(|&v| v as f32).collect();
    let y = ckpt.model.infer(&x, &w32).map_err(|e| InferError::Runtime(e.to_string()))?;
    let png = encode_png(&y).map_err(|e| InferError::Runtime(e.to_string()))?;
    Ok(InferOutput { png, omega, clamped })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
