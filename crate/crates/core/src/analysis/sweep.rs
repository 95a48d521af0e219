use std::fmt::Write as _;

use crate::data::{blur, DegradationSpec, Rng};
use crate::error::{Error, Result};
use crate::exec;
use crate::layers::Model;
use crate::objectives::{mse, noise_target, psnr, MultiLossSpec, Objective, DEFAULT_NU};
use crate::tensor::{filter2d_reflect, gaussian_kernel, Tensor};

/// Default evaluation grid on the two-objective line: `(w, 1 − w)`.
pub fn line_grid(steps: &[f64]) -> Vec<Vec<f64>> {
    steps.iter().map(|&w| vec![w, 1.0 - w]).collect()
}

pub const DEFAULT_STEPS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub omega_grid: Vec<Vec<f64>>,
    pub nu: f64,
    pub blur_support: usize,
    /// Base seed of the per-image noise realisations.
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(sigmas: Vec<f64>, rhos: Vec<f64>, omega_grid: Vec<Vec<f64>>) -> Self {
        SweepConfig {
            sigmas,
            rhos,
            omega_grid,
            nu: DEFAULT_NU,
            blur_support: 21,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub omega: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
    pub psnr: f64,
    pub psnr_eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(σ, ρ, PSNR(z, y))` of the identity mapping.
    pub identity: Vec<(f64, f64, f64)>,
}

/// Clean/degraded pair of one evaluation image at one `(σ, ρ)`.
pub struct EvalPair {
    pub y: Tensor<f32>,
    pub z: Tensor<f32>,
}

/// Deterministic noise realisation for image `i` at level indices `(si, ri)`.
pub fn eval_pair(y: &Tensor<f32>, sigma: f64, rho: f64, blur_support: usize, seed: u64, i: usize, si: usize, ri: usize) -> Result<EvalPair> {
    let stream = ((i as u64) << 32) | ((si as u64) << 16) | ri as u64;
    let mut rng = Rng::seed(seed).split(stream);
    let spec = DegradationSpec {
        sigma_range: [sigma, sigma],
        rho_range: [rho, rho],
        blur_support,
    };
    let z = crate::data::degrade(y, sigma, rho, &spec, &mut rng)?;
    Ok(EvalPair { y: y.clone(), z })
}

/// PSNR and PSNR_η per `(ω, σ, ρ)` averaged over `images`; every `ω` sees
/// the same noise realisation of each image.
pub fn sweep_eval(model: &Model<f32>, spec: &MultiLossSpec, images: &[Tensor<f32>], cfg: &SweepConfig) -> Result<SweepTable> {
    if images.is_empty() {
        return Err(Error::arg("sweep_eval", "dataset is empty"));
    }
    for w in &cfg.omega_grid {
        if w.len() != model.p() {
            return Err(Error::dim("sweep_eval", "p", model.p(), w.len()));
        }
    }
    let noise_slot = spec.index_of(Objective::Noise);
    let mut table = SweepTable {
        rows: Vec::new(),
        identity: Vec::new(),
    };
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        for (ri, &rho) in cfg.rhos.iter().enumerate() {
            let pairs = images
                .iter()
                .enumerate()
                .map(|(i, y)| eval_pair(y, sigma, rho, cfg.blur_support, cfg.seed, i, si, ri))
                .collect::<Result<Vec<_>>>()?;
            let ident = pairs.iter().map(|p| psnr(&p.z, &p.y, 1.0)).collect::<Result<Vec<_>>>()?;
            table.identity.push((sigma, rho, mean(&ident)));
            for w in &cfg.omega_grid {
                let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
                let w_noise = noise_slot.map(|k| wf[k]).unwrap_or(0.0);
                let per = exec::map_indices(pairs.len(), |i| -> Result<(f64, f64)> {
                    let p = &pairs[i];
                    let out = model.infer(&p.z, &wf)?;
                    let eta = noise_target(&p.y, &p.z, w_noise, cfg.nu as f32)?;
                    Ok((psnr(&out, &p.y, 1.0)?, psnr(&out, &eta, 1.0)?))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                table.rows.push(SweepRow {
                    omega: w.clone(),
                    sigma,
                    rho,
                    psnr: mean(&per.iter().map(|r| r.0).collect::<Vec<_>>()),
                    psnr_eta: mean(&per.iter().map(|r| r.1).collect::<Vec<_>>()),
                });
            }
        }
    }
    Ok(table)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl SweepTable {
    pub fn p(&self) -> usize {
        self.rows.first().map(|r| r.omega.len()).unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let p = self.p();
        let mut s = String::new();
        for i in 1..=p {
            let _ = write!(s, "omega{i},");
        }
        s.push_str("sigma,rho,psnr,psnr_eta\n");
        for r in &self.rows {
            for w in &r.omega {
                let _ = write!(s, "{w},");
            }
            let _ = writeln!(s, "{},{},{:.4},{:.4}", r.sigma, r.rho, r.psnr, r.psnr_eta);
        }
        s
    }

    /// Aligned text with one block per `(σ, ρ)` and the identity baseline.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(sigma, rho, ident) in &self.identity {
            let _ = writeln!(s, "sigma {sigma}  rho {rho}  identity PSNR {ident:.2} dB");
            let _ = writeln!(s, "{:<24} {:>10} {:>10}", "omega", "PSNR", "PSNR_eta");
            for r in self.rows.iter().filter(|r| r.sigma == sigma && r.rho == rho) {
                let w = r.omega.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ");
                let _ = writeln!(s, "{:<24} {:>10.2} {:>10.2}", format!("({w})"), r.psnr, r.psnr_eta);
            }
            s.push('\n');
        }
        s
    }

    pub fn get(&self, omega: &[f64], sigma: f64, rho: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.sigma == sigma && r.rho == rho && r.omega.iter().zip(omega).all(|(a, b)| (a - b).abs() < 1e-12))
    }
}

/// Mean absolute high-pass response `mean|x − g⊛x|` with the 9×9, σ = 2.5
/// Gaussian.
pub fn sharpness(x: &Tensor<f32>) -> Result<f64> {
    let g = gaussian_kernel::<f32>(9, 2.5)?;
    let low = filter2d_reflect(x, &g)?;
    let s: f64 = x.data().iter().zip(low.data()).map(|(a, b)| (a - b).abs() as f64).sum();
    Ok(s / x.len() as f64)
}

/// `mean((pred − y)²)`.
pub fn residual_energy(pred: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    mse(pred, y)
}

/// Blurred clean image, the noise-free part of a degraded input.
pub fn blurred(y: &Tensor<f32>, rho: f64, support: usize) -> Result<Tensor<f32>> {
    blur(y, rho, support)
}
