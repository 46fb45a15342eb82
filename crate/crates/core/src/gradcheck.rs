//! Finite-difference verification of the analytic gradients of the full
//! masked-prediction objective (embedding, encoder, head, loss).
//!
//! Targets are computed once from the unperturbed forward pass and held
//! fixed while probing, which is exactly what the analytic gradient assumes.
//! The finite differences are always evaluated in `f64`; in `f32` mode they
//! are compared against the `f32` analytic gradient at the same (exactly
//! representable) parameters.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{TargetMode, TrainConfig};
use crate::data::{generate_toy_dataset, Image};
use crate::encoder::{init_params, ModelParams};
use crate::real::Real;
use crate::train::{fit_tokenizer, loss_with_targets, mim_objective, prepare_batch, MimBatch};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "float32" => Ok(Precision::F32),
            "f64" | "float64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (expected f32|f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Entries probed per tensor: the largest-magnitude analytic entry plus
    /// random others.
    pub samples_per_tensor: usize,
    /// Images in the probe batch.
    pub images: usize,
    /// Overrides `target.omega`.
    pub omega: Option<f64>,
    /// Restrict to tensors whose name starts with this prefix.
    pub prefix: Option<String>,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_tensor: 4,
            images: 2,
            omega: None,
            prefix: None,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn entries_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Model, batch and parameters the check runs on. Parameters are the usual
/// initialization plus small noise on every tensor so that no gradient is
/// structurally zero.
pub struct Problem {
    pub params: ModelParams<f64>,
    pub batch: MimBatch<f64>,
}

pub fn build_problem(cfg: &TrainConfig, seed: u64, images: usize) -> Result<Problem> {
    let mut data_cfg = cfg.clone();
    data_cfg.seed = seed;
    // the tokenizer needs at least `vocab` distinct patches, and flat
    // patches repeat, so fit on a generously sized set
    let n = (8 * cfg.model.vocab / cfg.tokens().max(1))
        .max(cfg.data.n_train)
        .max(images);
    data_cfg.data.n_train = n;
    data_cfg.data.n_test = 0;
    data_cfg.tokenizer.iters = 3;
    let data = generate_toy_dataset(&data_cfg.dataset_spec())?;
    let (codebook, _) = fit_tokenizer(&data_cfg, &data.train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParams<f64> = init_params(&cfg.model_config(), &mut rng)?;
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    params.for_each_mut(|_, _, data| {
        for v in data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    });
    // round through f32 so both precisions start from identical values
    let params = params.cast::<f32>().cast::<f64>();
    let imgs: Vec<&Image> = data.train.iter().take(images).collect();
    let batch: MimBatch<f32> = prepare_batch(cfg, &codebook, &imgs, false, &mut rng)?;
    Ok(Problem {
        params,
        batch: batch.cast(),
    })
}

fn analytic<T: Real>(
    problem: &Problem,
    tau: f64,
    omega: f64,
    mode: TargetMode,
) -> Result<(f64, ModelParams<f64>, ndarray::Array2<f64>)> {
    let p: ModelParams<T> = problem.params.cast();
    let batch: MimBatch<T> = problem.batch.cast();
    let out = mim_objective(&p, &batch, tau, omega, mode)?;
    Ok((
        out.loss.as_f64(),
        out.grads.cast(),
        out.targets.mapv(|v| v.as_f64()),
    ))
}

/// Runs the check on the model shape of `cfg`.
pub fn grad_check(
    cfg: &TrainConfig,
    seed: u64,
    precision: Precision,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let problem = build_problem(cfg, seed, opts.images)?;
    let omega = opts.omega.unwrap_or(cfg.target.omega);
    let mode = cfg.target.mode;
    let (loss, grads, targets) = match precision {
        Precision::F64 => analytic::<f64>(&problem, cfg.target.tau, omega, mode)?,
        Precision::F32 => analytic::<f32>(&problem, cfg.target.tau, omega, mode)?,
    };

    let grad_slices: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let names = problem.params.names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut probe = problem.params.clone();
    let mut tensors = Vec::new();
    for (t, name) in names.iter().enumerate() {
        if let Some(prefix) = &opts.prefix {
            if !name.starts_with(prefix.as_str()) {
                continue;
            }
        }
        let g = &grad_slices[t];
        let mut picks = vec![(0..g.len())
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
            .unwrap_or(0)];
        while picks.len() < opts.samples_per_tensor.min(g.len()) {
            let j = rng.random_range(0..g.len());
            if !picks.contains(&j) {
                picks.push(j);
            }
        }
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for j in picks {
            let orig = probe.slices()[t][j];
            probe.slices_mut()[t][j] = orig + opts.h;
            let up = loss_with_targets(&probe, &problem.batch, &targets)?;
            probe.slices_mut()[t][j] = orig - opts.h;
            let down = loss_with_targets(&probe, &problem.batch, &targets)?;
            probe.slices_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            check.checked += 1;
            check.max_abs_err = check.max_abs_err.max((g[j] - numeric).abs());
            check.max_rel_err = check
                .max_rel_err
                .max(relative_error(g[j], numeric, opts.floor));
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let max_abs_err = tensors.iter().map(|t| t.max_abs_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        precision,
        loss,
        tensors,
        max_rel_err,
        max_abs_err,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
