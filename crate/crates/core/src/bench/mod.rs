//! Desk-scale convergence benchmark.
//!
//! A teacher MLP is fitted to a fixed synthetic regression task, its hidden
//! layers are magnitude-pruned, and three students are fine-tuned to match
//! the teacher's outputs from identical batches:
//!
//! * `pruned`: the pruned teacher weights as-is,
//! * `scaled`: the same weights after square-root singular value scaling,
//! * `random_he`: fresh weights with std `sqrt(2 / fan_in)`.
//!
//! Every run is a pure function of its config and seed.

mod config;
mod net;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BenchConfig, InitKind};
pub use net::{kept_channels, mse, normal_batch, prune_channels, Gradients, Layer, NetError, ToyNet, LEAKY_SLOPE};

use crate::matrix::Matrix;
use crate::refine::{refine_checkpoint, RefineConfig, RefineError};
use crate::spectrum::{compute_stats, SpectrumStats};
use crate::svd::svd;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("refinement failed: {0}")]
    Refine(#[from] RefineError),
    #[error("spectrum of layer {layer}: {reason}")]
    Spectrum { layer: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

// Independent RNG streams derived from one seed.
const STREAM_TASK: u64 = 0;
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_TEACHER_DATA: u64 = 2;
const STREAM_STUDENT_DATA: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_HE: u64 = 5;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// The fixed regression task a teacher learns: a He-initialized net with the
/// teacher's input and output sizes and every hidden layer `width` wide.
pub fn task_net(seed: u64, dims: &[usize], width: usize) -> Result<ToyNet, NetError> {
    if dims.len() < 2 {
        return Err(NetError::TooFewDims(dims.to_vec()));
    }
    let mut task_dims = vec![dims[0]];
    task_dims.extend(std::iter::repeat_n(width, dims.len() - 2));
    task_dims.push(dims[dims.len() - 1]);
    ToyNet::he(&task_dims, &mut rng(seed, STREAM_TASK))
}

/// Teacher and how well it fits the task.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub net: ToyNet,
    /// Task MSE on the held-out evaluation batch.
    pub final_mse: f64,
    pub steps: usize,
    pub reached_target: bool,
}

/// Draws unit-normal weights and fits them to [`task_net`] with Adam until
/// the evaluation MSE drops below `cfg.teacher_target_mse` or the step cap.
pub fn make_teacher(seed: u64, cfg: &BenchConfig) -> Result<Teacher, NetError> {
    let task = task_net(seed, &cfg.dims, cfg.task_width)?;
    let mut net = ToyNet::unit_normal(&cfg.dims, &mut rng(seed, STREAM_TEACHER_INIT))?;
    let eval_x = normal_batch(&mut rng(seed, STREAM_EVAL), cfg.eval_size, cfg.dims[0]);
    let eval_y = task.forward(&eval_x);
    let mut data = rng(seed, STREAM_TEACHER_DATA);
    let mut adam = Adam::new(net.num_params());

    let mut final_mse = net.mse(&eval_x, &eval_y);
    let mut steps = 0;
    while steps < cfg.teacher_steps && final_mse >= cfg.teacher_target_mse {
        let x = normal_batch(&mut data, cfg.batch, cfg.dims[0]);
        let y = task.forward(&x);
        let (_, g) = net.loss_and_grad(&x, &y);
        let lr = cfg.teacher_lr * cosine_decay(steps, cfg.teacher_steps);
        adam.step(&mut net, &g, lr);
        steps += 1;
        if steps % cfg.log_every == 0 || steps == cfg.teacher_steps {
            final_mse = net.mse(&eval_x, &eval_y);
        }
    }
    Ok(Teacher { net, final_mse, steps, reached_target: final_mse < cfg.teacher_target_mse })
}

fn cosine_decay(step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, net: &mut ToyNet, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut p = net.params();
        for (((p, g), m), v) in p.iter_mut().zip(g.flatten()).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
        net.set_params(&p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Evaluation MSE against the teacher; NaN after divergence.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub init: InitKind,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    pub diverged: bool,
}

impl Curve {
    /// Last recorded loss, `None` if the run diverged.
    pub fn final_loss(&self) -> Option<f64> {
        if self.diverged {
            None
        } else {
            self.points.last().map(|p| p.loss)
        }
    }
}

/// Shared step grid: 0, `log_every`, .., and `steps` itself.
pub fn step_grid(steps: usize, log_every: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..=steps).step_by(log_every).collect();
    if *grid.last().unwrap() != steps {
        grid.push(steps);
    }
    grid
}

/// Fine-tunes `student` toward `teacher` with plain SGD on fresh unit-normal
/// batches, recording evaluation MSE on the grid from [`step_grid`]. Batches
/// depend only on `seed`, so every init sees the same data.
pub fn train_student(student: &ToyNet, teacher: &ToyNet, init: InitKind, seed: u64, cfg: &BenchConfig) -> Curve {
    let mut net = student.clone();
    let in_dim = cfg.dims[0];
    let eval_x = normal_batch(&mut rng(seed, STREAM_EVAL), cfg.eval_size, in_dim);
    let eval_y = teacher.forward(&eval_x);
    let mut data = rng(seed, STREAM_STUDENT_DATA);

    let grid = step_grid(cfg.student_steps, cfg.log_every);
    let mut points = Vec::with_capacity(grid.len());
    let mut diverged = false;
    let mut step = 0;
    for &mark in &grid {
        while step < mark && !diverged {
            let x = normal_batch(&mut data, cfg.batch, in_dim);
            let y = teacher.forward(&x);
            let (loss, g) = net.loss_and_grad(&x, &y);
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            net.sgd_step(&g, cfg.lr);
            step += 1;
        }
        let loss = if diverged { f64::NAN } else { net.mse(&eval_x, &eval_y) };
        if !loss.is_finite() {
            diverged = true;
        }
        points.push(CurvePoint { step: mark, loss: if diverged { f64::NAN } else { loss } });
    }
    Curve { init, seed, points, diverged }
}

/// Student starting points for one seed.
pub fn build_inits(pruned: &ToyNet, seed: u64, cfg: &BenchConfig) -> Result<BTreeMap<InitKind, ToyNet>, BenchError> {
    let mut out = BTreeMap::new();
    for &init in &cfg.inits {
        let net = match init {
            InitKind::Pruned => pruned.clone(),
            InitKind::Scaled => {
                let refined = refine_checkpoint(&pruned.to_checkpoint(), &RefineConfig::default())?;
                ToyNet::from_checkpoint(&refined.checkpoint, pruned.layers.len())?
            }
            InitKind::RandomHe => ToyNet::he(&pruned.dims(), &mut rng(seed, STREAM_HE))?,
        };
        out.insert(init, net);
    }
    Ok(out)
}

/// Per-layer spectrum summaries of a net.
pub fn layer_spectra(net: &ToyNet) -> Result<Vec<SpectrumStats>, BenchError> {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let f = svd(&l.weight).map_err(|e| BenchError::Spectrum { layer: i, reason: e.to_string() })?;
            compute_stats(f.sigma()).map_err(|e| BenchError::Spectrum { layer: i, reason: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub teacher_mse: f64,
    pub teacher_reached_target: bool,
    pub curves: Vec<Curve>,
    pub final_loss: BTreeMap<InitKind, Option<f64>>,
    pub steps_to_threshold: BTreeMap<InitKind, Option<usize>>,
    /// Per-layer spectra of each init before training.
    pub spectra: BTreeMap<InitKind, Vec<SpectrumStats>>,
}

const SMOOTHING_WINDOW: usize = 10;
const THRESHOLD_FACTOR: f64 = 1.05;

/// First grid step whose trailing mean over the last (up to) ten recorded
/// losses falls below `threshold`.
pub fn steps_to_threshold(curve: &Curve, threshold: f64) -> Option<usize> {
    let losses: Vec<f64> = curve.points.iter().map(|p| p.loss).collect();
    (0..losses.len()).find_map(|i| {
        let window = &losses[(i + 1).saturating_sub(SMOOTHING_WINDOW)..=i];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        (mean < threshold).then_some(curve.points[i].step)
    })
}

/// Teacher, pruning, the three inits and their training curves for one seed.
pub fn run_comparison(seed: u64, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let teacher = make_teacher(seed, cfg)?;
    let pruned = prune_channels(&teacher.net, cfg.sparsity)?;
    let inits = build_inits(&pruned, seed, cfg)?;

    let mut spectra = BTreeMap::new();
    for (&k, net) in &inits {
        spectra.insert(k, layer_spectra(net)?);
    }
    let curves: Vec<Curve> = inits.iter().map(|(&k, net)| train_student(net, &teacher.net, k, seed, cfg)).collect();

    let final_loss: BTreeMap<_, _> = curves.iter().map(|c| (c.init, c.final_loss())).collect();
    let best = final_loss.values().flatten().copied().fold(f64::INFINITY, f64::min);
    let threshold = THRESHOLD_FACTOR * best;
    let steps_to_threshold =
        curves.iter().map(|c| (c.init, if c.diverged { None } else { steps_to_threshold(c, threshold) })).collect();

    Ok(BenchReport {
        seed,
        teacher_mse: teacher.final_mse,
        teacher_reached_target: teacher.reached_target,
        curves,
        final_loss,
        steps_to_threshold,
        spectra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub median_final_loss: Option<f64>,
    pub median_steps_to_threshold: Option<f64>,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub per_init: BTreeMap<InitKind, InitSummary>,
    pub runs: Vec<BenchReport>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs every seed (concurrently, each run single-threaded) and summarizes
/// per init. Runs are ordered by seed.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchSummary, BenchError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|i| cfg.seed + i).collect();
    let runs: Vec<BenchReport> = seeds.par_iter().map(|&s| run_comparison(s, cfg)).collect::<Result<_, _>>()?;
    let mut per_init = BTreeMap::new();
    for &init in &cfg.inits {
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_loss[&init]).collect();
        let steps: Vec<f64> = runs.iter().filter_map(|r| r.steps_to_threshold[&init]).map(|s| s as f64).collect();
        per_init.insert(
            init,
            InitSummary {
                median_final_loss: median(finals),
                median_steps_to_threshold: median(steps),
                diverged_runs: runs.iter().filter(|r| r.final_loss[&init].is_none()).count(),
            },
        );
    }
    Ok(BenchSummary { config: cfg.clone(), per_init, runs })
}

/// Loss curves as CSV with columns `init,seed,step,loss`.
pub fn curves_csv(summary: &BenchSummary) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["init", "seed", "step", "loss"]).expect("in-memory write");
    for run in &summary.runs {
        for c in &run.curves {
            for p in &c.points {
                w.write_record([
                    c.init.label().to_string(),
                    c.seed.to_string(),
                    p.step.to_string(),
                    p.loss.to_string(),
                ])
                .expect("in-memory write");
            }
        }
    }
    w.into_inner().expect("in-memory flush")
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    config: &'a BenchConfig,
    per_init: &'a BTreeMap<InitKind, InitSummary>,
    runs: Vec<RunJson<'a>>,
}

#[derive(Serialize)]
struct RunJson<'a> {
    seed: u64,
    teacher_mse: f64,
    teacher_reached_target: bool,
    final_loss: &'a BTreeMap<InitKind, Option<f64>>,
    steps_to_threshold: &'a BTreeMap<InitKind, Option<usize>>,
    spectra: &'a BTreeMap<InitKind, Vec<SpectrumStats>>,
}

/// Summary without curves (those go to the CSV).
pub fn summary_json(summary: &BenchSummary) -> Vec<u8> {
    let s = SummaryJson {
        config: &summary.config,
        per_init: &summary.per_init,
        runs: summary
            .runs
            .iter()
            .map(|r| RunJson {
                seed: r.seed,
                teacher_mse: r.teacher_mse,
                teacher_reached_target: r.teacher_reached_target,
                final_loss: &r.final_loss,
                steps_to_threshold: &r.steps_to_threshold,
                spectra: &r.spectra,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&s).expect("summary serializes");
    out.push(b'\n');
    out
}

/// Writes `curves.csv` and `summary.json` into `dir`.
pub fn write_outputs(summary: &BenchSummary, dir: &Path) -> Result<(), BenchError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| BenchError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, bytes) in [("curves.csv", curves_csv(summary)), ("summary.json", summary_json(summary))] {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(io(&path))?;
        f.write_all(&bytes).map_err(io(&path))?;
    }
    Ok(())
}

/// Relative deviation of `cond(scaled) / sqrt(cond(pruned))` from one, per
/// layer. `None` where a layer is rank deficient.
pub fn sqrt_condition_deviation(report: &BenchReport) -> Vec<Option<f64>> {
    let (Some(p), Some(s)) = (report.spectra.get(&InitKind::Pruned), report.spectra.get(&InitKind::Scaled)) else {
        return Vec::new();
    };
    p.iter()
        .zip(s)
        .map(|(p, s)| {
            let (cp, cs) = (p.condition.finite()?, s.condition.finite()?);
            Some((cs - cp.sqrt()).abs() / cp.sqrt())
        })
        .collect()
}

/// Central-difference gradient of the MSE with respect to parameter `index`.
pub fn finite_difference(net: &ToyNet, x: &Matrix, y: &Matrix, index: usize, h: f64) -> f64 {
    let mut p = net.params();
    let orig = p[index];
    let mut probe = net.clone();
    p[index] = orig + h;
    probe.set_params(&p);
    let plus = probe.mse(x, y);
    p[index] = orig - h;
    probe.set_params(&p);
    let minus = probe.mse(x, y);
    (plus - minus) / (2.0 * h)
}
