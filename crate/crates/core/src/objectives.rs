//! Per-objective targets and losses, the parametric multi-loss, and the
//! PSNR metrics used to read off each objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{filter2d_reflect, gaussian_kernel, Tensor};

/// Residual-noise fraction kept by the noise objective at full strength.
pub const DEFAULT_NU: f64 = 0.9;
/// Maximum sharpening gain of the unsharp-mask target.
pub const DEFAULT_GAMMA: f64 = 8.0;
pub const UNSHARP_SIZE: usize = 9;
pub const UNSHARP_SIGMA: f64 = 2.5;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// L1 to the clean image.
    Rec,
    /// L1 to the clean image plus a controlled share of the input noise.
    Noise,
    /// L1 to an unsharp-masked version of the noise target.
    Blur,
}

impl Objective {
    pub fn id(self) -> &'static str {
        match self {
            Objective::Rec => "rec",
            Objective::Noise => "noise",
            Objective::Blur => "blur",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Objective::Rec => "fidelity",
            Objective::Noise => "noise preservation",
            Objective::Blur => "sharpening",
        }
    }
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveTerm {
    pub id: Objective,
    #[serde(default = "unit")]
    pub lambda: f64,
}

/// Ordered objectives; position `i` is bound to `ω_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiLossSpec {
    pub objectives: Vec<ObjectiveTerm>,
}

impl MultiLossSpec {
    pub fn new(terms: &[(Objective, f64)]) -> Result<Self> {
        let spec = MultiLossSpec {
            objectives: terms
                .iter()
                .map(|&(id, lambda)| ObjectiveTerm { id, lambda })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit weights for every objective.
    pub fn uniform(ids: &[Objective]) -> Self {
        MultiLossSpec {
            objectives: ids.iter().map(|&id| ObjectiveTerm { id, lambda: 1.0 }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.objectives.is_empty() {
            bad.push("at least one objective is required".to_string());
        }
        for (i, t) in self.objectives.iter().enumerate() {
            if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
                bad.push(format!("objective {i} ({}): lambda must be finite and >= 0", t.id.id()));
            }
            if self.objectives[..i].iter().any(|o| o.id == t.id) {
                bad.push(format!("objective {} listed twice", t.id.id()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn p(&self) -> usize {
        self.objectives.len()
    }

    pub fn index_of(&self, id: Objective) -> Option<usize> {
        self.objectives.iter().position(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<Objective> {
        self.objectives.iter().map(|t| t.id).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.objectives.iter().map(|t| t.lambda).collect()
    }
}

/// Interactive parameters, each in `[0, 1]`. Their sum is unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneParams<T> {
    values: Vec<T>,
}

impl<T: Scalar> TuneParams<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("tune_params", "need at least one parameter"));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::arg("tune_params", format!("omega[{i}] = {v} outside [0, 1]")));
        }
        Ok(TuneParams { values })
    }

    /// Clamps into `[0, 1]`; the flag reports whether anything changed.
    /// Non-finite entries become 0.
    pub fn clamped(values: &[T]) -> (Self, bool) {
        let mut changed = false;
        let values = values
            .iter()
            .map(|&v| {
                let c = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) };
                changed |= c != v;
                c
            })
            .collect();
        (TuneParams { values }, changed)
    }

    pub fn p(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize) -> T {
        self.values[i]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::vector(&self.values)
    }
}

/// Constants of the target constructions.
#[derive(Clone, Debug)]
pub struct TargetParams<T> {
    pub nu: T,
    pub gamma: T,
    /// Normalised low-pass kernel of the unsharp mask.
    pub unsharp: Tensor<T>,
}

impl<T: Scalar> TargetParams<T> {
    pub fn new(nu: f64, gamma: f64, unsharp_size: usize, unsharp_sigma: f64) -> Result<Self> {
        Ok(TargetParams {
            nu: T::of(nu),
            gamma: T::of(gamma),
            unsharp: gaussian_kernel(unsharp_size, unsharp_sigma)?,
        })
    }
}

impl<T: Scalar> Default for TargetParams<T> {
    fn default() -> Self {
        Self::new(DEFAULT_NU, DEFAULT_GAMMA, UNSHARP_SIZE, UNSHARP_SIGMA).expect("default target params")
    }
}

fn check_unit(op: &'static str, name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::arg(op, format!("{name} = {v} outside [0, 1]")))
    }
}

fn l1<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    pred.sub(target)?.abs().mean()
}

/// Mean absolute error against the clean image.
pub fn rec_loss<'g, T: Scalar>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    l1(pred, gt)
}

/// `y + ω_noise·ν·(z − y)`.
pub fn noise_target<T: Scalar>(y: &Tensor<T>, z: &Tensor<T>, omega_noise: T, nu: T) -> Result<Tensor<T>> {
    const OP: &str = "noise_target";
    check_unit(OP, "omega_noise", omega_noise.as_f64())?;
    check_unit(OP, "nu", nu.as_f64())?;
    let s = omega_noise * nu;
    y.zip_map(z, OP, |a, b| a + s * (b - a))
}

pub fn noise_loss<'g, T: Scalar>(pred: Var<'g, T>, y_eta: Var<'g, T>) -> Result<Var<'g, T>> {
    l1(pred, y_eta)
}

/// `y_η + ω_blur·γ·(y_η − g⊛y_η)`, filtered per channel with mirrored borders.
pub fn blur_target<T: Scalar>(y_eta: &Tensor<T>, omega_blur: T, gamma: T, g: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "blur_target";
    let total: f64 = g.data().iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::arg(OP, format!("low-pass kernel must sum to 1, sums to {total}")));
    }
    check_unit(OP, "omega_blur", omega_blur.as_f64())?;
    if !(gamma >= T::zero()) {
        return Err(Error::arg(OP, format!("gamma must be >= 0, got {gamma}")));
    }
    let s = omega_blur * gamma;
    let low = filter2d_reflect(y_eta, g)?;
    y_eta.zip_map(&low, OP, |v, l| v + s * (v - l))
}

pub fn blur_loss<'g, T: Scalar>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    l1(pred, target)
}

/// Targets of every objective in `spec` for one `ω`. The blur target is built
/// on top of the noise target, using the `ω` slot bound to the noise
/// objective (or none when the spec has no noise objective).
pub fn objective_targets<T: Scalar>(
    spec: &MultiLossSpec,
    omega: &[T],
    y: &Tensor<T>,
    z: &Tensor<T>,
    params: &TargetParams<T>,
) -> Result<Vec<Tensor<T>>> {
    if omega.len() != spec.p() {
        return Err(Error::dim("objective_targets", "p", spec.p(), omega.len()));
    }
    let w_noise = spec.index_of(Objective::Noise).map(|i| omega[i]).unwrap_or_else(T::zero);
    let y_eta = noise_target(y, z, w_noise, params.nu)?;
    spec.objectives
        .iter()
        .zip(omega)
        .map(|(t, &w)| match t.id {
            Objective::Rec => Ok(y.clone()),
            Objective::Noise => Ok(y_eta.clone()),
            Objective::Blur => blur_target(&y_eta, w, params.gamma, &params.unsharp),
        })
        .collect()
}

/// `Σ_i ω_i·λ_i·L_i`.
pub fn multi_loss<'g, T: Scalar>(omega: &[T], spec: &MultiLossSpec, losses: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    const OP: &str = "multi_loss";
    if omega.len() != spec.p() {
        return Err(Error::dim(OP, "omega", spec.p(), omega.len()));
    }
    if losses.len() != spec.p() {
        return Err(Error::dim(OP, "losses", spec.p(), losses.len()));
    }
    let mut total: Option<Var<'g, T>> = None;
    for ((&w, t), &l) in omega.iter().zip(&spec.objectives).zip(losses) {
        let term = l.scale(w * T::of(t.lambda));
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    total.ok_or_else(|| Error::arg(OP, "no objectives"))
}

/// Scalar form of [`multi_loss`].
pub fn multi_loss_value(omega: &[f64], spec: &MultiLossSpec, losses: &[f64]) -> Result<f64> {
    if omega.len() != spec.p() || losses.len() != spec.p() {
        return Err(Error::dim("multi_loss", "p", spec.p(), omega.len().min(losses.len())));
    }
    Ok(omega
        .iter()
        .zip(spec.lambdas())
        .zip(losses)
        .map(|((w, l), v)| w * l * v)
        .sum())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.shape().expect_eq(&b.shape(), "mse")?;
    if a.is_empty() {
        return Err(Error::domain("mse", "empty tensor"));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::arg("psnr", format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// PSNR against the noise-preservation target rather than the clean image.
pub fn psnr_eta<T: Scalar>(pred: &Tensor<T>, y: &Tensor<T>, z: &Tensor<T>, omega_noise: T, nu: T, peak: f64) -> Result<f64> {
    psnr(pred, &noise_target(y, z, omega_noise, nu)?, peak)
}
