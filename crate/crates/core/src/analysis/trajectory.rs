use std::path::Path;

use serde_json::{json, Map, Value};

use crate::container;
use crate::error::{Error, Result};
use crate::layers::{Model, Variant};
use crate::tensor::{Shape, Tensor};

/// Aggregated kernels of one tunable convolution along an `ω` grid.
#[derive(Clone, Debug)]
pub struct LayerTrajectory {
    pub name: String,
    /// One flattened `(k̂, b̂)` per grid point.
    pub points: Vec<Vec<f32>>,
    /// Score of each point on the first principal component.
    pub pc1: Vec<f64>,
    /// Share of the trajectory variance captured by the first component.
    pub explained_variance: f64,
}

/// Top eigenpair of a symmetric positive semi-definite matrix by power
/// iteration; stops when successive unit vectors differ by less than `tol`.
pub fn power_iteration(m: &[f64], n: usize, tol: f64, max_iter: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let mut w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect();
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|a| *a /= nw);
        lambda = nw;
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < tol {
            break;
        }
    }
    (lambda, v)
}

/// First-component scores and explained variance of row vectors `points`.
pub fn principal_component(points: &[Vec<f32>]) -> (Vec<f64>, f64) {
    let m = points.len();
    if m == 0 {
        return (Vec::new(), 1.0);
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j] as f64).sum::<f64>() / m as f64)
        .collect();
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(&a, b)| a as f64 - b).collect())
        .collect();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[i * m + j] = s;
            gram[j * m + i] = s;
        }
    }
    let trace: f64 = (0..m).map(|i| gram[i * m + i]).sum();
    if trace == 0.0 {
        return (vec![0.0; m], 1.0);
    }
    let (lambda, u) = power_iteration(&gram, m, 1e-9, 100_000);
    let scale = lambda.sqrt();
    (u.iter().map(|a| a * scale).collect(), lambda / trace)
}

/// For every tunable convolution, the aggregated `(k̂, b̂)` at each `ω` of
/// `grid` plus its first principal component.
pub fn extract_kernel_trajectories(model: &Model<f32>, grid: &[Vec<f64>]) -> Result<Vec<LayerTrajectory>> {
    const OP: &str = "extract_kernel_trajectories";
    if model.config().variant != Variant::Tunable {
        return Err(Error::arg(OP, "model has no tunable convolutions"));
    }
    if grid.is_empty() {
        return Err(Error::arg(OP, "empty omega grid"));
    }
    model
        .tunable_layers()
        .into_iter()
        .map(|(name, bank, mapper)| {
            let points = grid
                .iter()
                .map(|w| {
                    let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
                    let alpha = mapper.weights(&wf)?;
                    let (k, b) = bank.aggregate(&alpha)?;
                    let mut flat = k.into_vec();
                    flat.extend_from_slice(b.data());
                    Ok(flat)
                })
                .collect::<Result<Vec<_>>>()?;
            let (pc1, explained_variance) = principal_component(&points);
            Ok(LayerTrajectory {
                name,
                points,
                pc1,
                explained_variance,
            })
        })
        .collect()
}

/// Writes trajectories with the checkpoint container layout:
/// `{layer}.points` is `[m, len, 1, 1]`, `{layer}.pc1` is `[m, 1, 1, 1]`.
pub fn trajectories_to_bytes(trajs: &[LayerTrajectory], grid: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut header = Map::new();
    header.insert("kind".into(), Value::from("trajectories"));
    header.insert("omega_grid".into(), json!(grid));
    header.insert(
        "layers".into(),
        Value::Array(
            trajs
                .iter()
                .map(|t| json!({"name": t.name, "explained_variance": t.explained_variance}))
                .collect(),
        ),
    );
    let mut owned = Vec::new();
    for t in trajs {
        let m = t.points.len();
        let len = t.points.first().map_or(0, Vec::len);
        let flat: Vec<f32> = t.points.iter().flatten().copied().collect();
        owned.push((format!("{}.points", t.name), Tensor::from_vec(Shape::new(m, len, 1, 1), flat)?));
        let pc: Vec<f32> = t.pc1.iter().map(|&v| v as f32).collect();
        owned.push((format!("{}.pc1", t.name), Tensor::from_vec(Shape::new(m, 1, 1, 1), pc)?));
    }
    let arrays: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    container::encode(header, &arrays)
}

pub fn save_trajectories(trajs: &[LayerTrajectory], grid: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trajectories_to_bytes(trajs, grid)?).map_err(|e| Error::io(path, e))
}
