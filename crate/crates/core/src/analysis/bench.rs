use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::layers::{KernelBank, ParamMapper};
use crate::tensor::{conv2d, ConvGeom, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub kernel_sizes: Vec<usize>,
    /// Input channels; output channels are equal.
    pub channels: Vec<usize>,
    pub ps: Vec<usize>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kernel_sizes: vec![3, 5, 7],
            channels: vec![4, 8, 16, 32],
            ps: (1..=8).collect(),
            sizes: vec![128],
            reps: 100,
            warmup: 10,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.reps < 100 {
            bad.push(format!("reps must be >= 100 (got {})", self.reps));
        }
        if self.warmup < 1 {
            bad.push("warmup must be >= 1".into());
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            bad.push("kernel sizes must be odd".into());
        }
        if self.ps.contains(&0) || self.channels.contains(&0) || self.sizes.contains(&0) {
            bad.push("p, channels and sizes must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverheadRow {
    pub k: usize,
    pub c: usize,
    pub p: usize,
    pub size: usize,
    pub traditional_us: f64,
    pub tunable_us: f64,
    pub overhead_pct: f64,
    /// Half-width of the overhead's ~95% band from timing jitter.
    pub noise_band_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationRow {
    pub k: usize,
    pub c: usize,
    pub p: usize,
    pub size: usize,
    /// Mapper plus bank aggregation, without the convolution.
    pub aggregation_us: f64,
    pub noise_band_us: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub overhead: Vec<OverheadRow>,
    pub aggregation: Vec<AggregationRow>,
}

/// Smallest positive step of the monotonic clock seen over a short probe.
pub fn clock_granularity() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Robust summary of repeated timings, in microseconds per call.
#[derive(Clone, Debug)]
pub struct Samples {
    pub us: Vec<f64>,
}

impl Samples {
    fn sorted(&self) -> Vec<f64> {
        let mut v = self.us.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    fn quantile(sorted: &[f64], q: f64) -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }

    pub fn median(&self) -> f64 {
        Self::quantile(&self.sorted(), 0.5)
    }

    /// Standard error of the median from the IQR: `1.2533 · (IQR/1.349) / √n`.
    pub fn median_se(&self) -> f64 {
        let s = self.sorted();
        let iqr = Self::quantile(&s, 0.75) - Self::quantile(&s, 0.25);
        1.2533 * (iqr / 1.349) / (s.len() as f64).sqrt()
    }
}

/// Calls per sample so that one sample lasts at least `floor`.
fn calls_per_sample(f: &mut dyn FnMut(), floor: Duration) -> usize {
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        if t.elapsed() >= floor || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    inner
}

/// 50 clock ticks; warns when a single call is shorter.
fn tick_floor(f: &mut dyn FnMut(), granularity: Duration) -> usize {
    let inner = calls_per_sample(f, granularity * 50);
    if inner > 1 {
        log::warn!("timer resolution too coarse for one call: grouping {inner} calls per sample");
    }
    inner
}

fn sample(f: &mut dyn FnMut(), inner: usize) -> f64 {
    let t = Instant::now();
    for _ in 0..inner {
        f();
    }
    t.elapsed().as_secs_f64() * 1e6 / inner as f64
}

/// Times `f` `reps` times after `warmup` calls, reporting microseconds per
/// call. Calls too short for the clock are grouped.
pub fn time_op(mut f: impl FnMut(), reps: usize, warmup: usize, granularity: Duration) -> Samples {
    for _ in 0..warmup {
        f();
    }
    let inner = tick_floor(&mut f, granularity);
    Samples {
        us: (0..reps).map(|_| sample(&mut f, inner)).collect(),
    }
}

/// Paired timings: the two closures alternate every repetition so slow
/// drifts of the machine hit both equally.
fn time_pair(mut a: impl FnMut(), mut b: impl FnMut(), reps: usize, warmup: usize, granularity: Duration) -> (Samples, Samples) {
    for _ in 0..warmup {
        a();
        b();
    }
    let ia = tick_floor(&mut a, granularity);
    let ib = tick_floor(&mut b, granularity);
    let mut sa = Vec::with_capacity(reps);
    let mut sb = Vec::with_capacity(reps);
    for _ in 0..reps {
        sa.push(sample(&mut a, ia));
        sb.push(sample(&mut b, ib));
    }
    (Samples { us: sa }, Samples { us: sb })
}

/// Minimum length of one aggregation sample. A single aggregation takes
/// microseconds, so short samples mostly measure cache and allocator state.
const AGG_SAMPLE_FLOOR: Duration = Duration::from_micros(20);

/// Round-robin timings of several closures, one sample each per round.
fn time_round_robin(fs: &mut [Box<dyn FnMut() + '_>], reps: usize, warmup: usize, floor: Duration) -> Vec<Samples> {
    for _ in 0..warmup {
        fs.iter_mut().for_each(|f| f());
    }
    let inner: Vec<usize> = fs.iter_mut().map(|f| calls_per_sample(f.as_mut(), floor)).collect();
    let mut out = vec![Vec::with_capacity(reps); fs.len()];
    for _ in 0..reps {
        for (i, f) in fs.iter_mut().enumerate() {
            out[i].push(sample(f.as_mut(), inner[i]));
        }
    }
    out.into_iter().map(|us| Samples { us }).collect()
}

struct Case {
    x: Tensor<f32>,
    kernels: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    omega: Vec<f32>,
    geom: ConvGeom,
}

impl Case {
    fn new(k: usize, c: usize, p: usize, size: usize, rng: &mut Rng) -> Self {
        let mut rand = |s: Shape| Tensor::from_fn(s, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32);
        Case {
            x: rand(Shape::new(1, c, size, size)),
            kernels: (0..p).map(|_| rand(Shape::new(c, c, k, k))).collect(),
            biases: (0..p).map(|_| rand(Shape::vector(c))).collect(),
            weight: rand(Shape::new(p, p, 1, 1)),
            bias: rand(Shape::vector(p)),
            omega: (0..p).map(|i| (i as f32 + 0.5) / p as f32).collect(),
            geom: ConvGeom::same(k),
        }
    }

    fn bank(&self) -> KernelBank<&Tensor<f32>> {
        KernelBank {
            kernels: self.kernels.iter().collect(),
            biases: self.biases.iter().collect(),
        }
    }

    /// Mapper (skipped at p = 1) plus aggregation.
    fn aggregate(&self) -> (Tensor<f32>, Tensor<f32>) {
        let alpha = if self.kernels.len() == 1 {
            vec![1.0]
        } else {
            let m = ParamMapper {
                weight: &self.weight,
                bias: &self.bias,
            };
            m.weights(&self.omega).expect("valid mapper")
        };
        self.bank().aggregate(&alpha).expect("valid bank")
    }

    fn traditional(&self) -> Tensor<f32> {
        conv2d(&self.x, &self.kernels[0], &self.biases[0], self.geom).expect("valid conv")
    }

    fn tunable(&self) -> Tensor<f32> {
        let (k, b) = self.aggregate();
        conv2d(&self.x, &k, &b, self.geom).expect("valid conv")
    }
}

/// Runtime of a tunable convolution (mapper + aggregation + conv) relative
/// to a traditional convolution of the same shape, plus the aggregation cost
/// alone at every spatial size.
pub fn bench_overhead(cfg: &BenchConfig, mut progress: impl FnMut(&OverheadRow)) -> Result<BenchReport> {
    cfg.validate()?;
    let gran = clock_granularity();
    let mut rng = Rng::seed(cfg.seed);
    let mut report = BenchReport::default();
    for &k in &cfg.kernel_sizes {
        for &c in &cfg.channels {
            for &p in &cfg.ps {
                let cases: Vec<Case> = cfg.sizes.iter().map(|&size| Case::new(k, c, p, size, &mut rng)).collect();
                for (case, &size) in cases.iter().zip(&cfg.sizes) {
                    let (trad, tun) = time_pair(
                        || {
                            black_box(case.traditional());
                        },
                        || {
                            black_box(case.tunable());
                        },
                        cfg.reps,
                        cfg.warmup,
                        gran,
                    );
                    let (mt, mu) = (trad.median(), tun.median());
                    let band = 2.0 * (trad.median_se().powi(2) + tun.median_se().powi(2)).sqrt();
                    let row = OverheadRow {
                        k,
                        c,
                        p,
                        size,
                        traditional_us: mt,
                        tunable_us: mu,
                        overhead_pct: 100.0 * (mu - mt) / mt,
                        noise_band_pct: 100.0 * band / mt,
                    };
                    progress(&row);
                    report.overhead.push(row);
                }
                // all sizes interleaved so drift and cache state hit them alike
                let mut fs: Vec<Box<dyn FnMut() + '_>> = cases
                    .iter()
                    .map(|case| -> Box<dyn FnMut() + '_> {
                        Box::new(move || {
                            black_box(case.aggregate());
                        })
                    })
                    .collect();
                let aggs = time_round_robin(&mut fs, cfg.reps, cfg.warmup, AGG_SAMPLE_FLOOR.max(gran * 50));
                for (agg, &size) in aggs.iter().zip(&cfg.sizes) {
                    report.aggregation.push(AggregationRow {
                        k,
                        c,
                        p,
                        size,
                        aggregation_us: agg.median(),
                        noise_band_us: 2.0 * agg.median_se(),
                    });
                }
            }
        }
    }
    Ok(report)
}

pub const OVERHEAD_CSV_HEADER: &str = "k,c,p,size,traditional_us,tunable_us,overhead_pct,noise_band_pct";

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut s = format!("{OVERHEAD_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{:.3},{:.4},{:.4}",
            r.k, r.c, r.p, r.size, r.traditional_us, r.tunable_us, r.overhead_pct, r.noise_band_pct
        );
    }
    s
}

pub fn aggregation_csv(rows: &[AggregationRow]) -> String {
    let mut s = String::from("k,c,p,size,aggregation_us,noise_band_us\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.4},{:.4}", r.k, r.c, r.p, r.size, r.aggregation_us, r.noise_band_us);
    }
    s
}

/// Counts decreases of the overhead along increasing `p` that exceed the
/// combined noise band of the two neighbours. Smaller decreases are ties.
pub fn significant_inversions(rows_by_p: &[&OverheadRow]) -> usize {
    rows_by_p
        .windows(2)
        .filter(|w| {
            let drop = w[0].overhead_pct - w[1].overhead_pct;
            let band = (w[0].noise_band_pct.powi(2) + w[1].noise_band_pct.powi(2)).sqrt();
            drop > band
        })
        .count()
}
