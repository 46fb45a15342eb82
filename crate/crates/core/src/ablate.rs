//! Hyper-parameter sweeps: one pre-train plus linear probe per value, all
//! sharing the seed, data order and tokenizer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{TargetMode, TrainConfig};
use crate::data::Dataset;
use crate::eval::{linear_probe, MetricsRow};
use crate::masking::MaskStrategy;
use crate::tokenizer::Codebook;
use crate::train::{epoch_means, pretrain, steps_per_epoch, StepMetrics, TrainState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Tau,
    Omega,
    Mask,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Tau => "tau",
            Axis::Omega => "omega",
            Axis::Mask => "mask",
        })
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tau" => Ok(Axis::Tau),
            "omega" => Ok(Axis::Omega),
            "mask" => Ok(Axis::Mask),
            _ => Err(format!(
                "unknown ablation axis {s:?} (expected tau|omega|mask)"
            )),
        }
    }
}

/// Value label of the single-choice (hard-label) row on the tau axis.
pub const SINGLE_CHOICE: &str = "single";

impl Axis {
    /// Grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Tau => &["0.1", "1", "4", "10"],
            Axis::Omega => &["0", "0.2", "0.4", "0.6", "0.8", "1"],
            Axis::Mask => &[
                "block:0.45",
                "block:0.6",
                "block:0.75",
                "block:0.9",
                "random:0.45",
                "random:0.6",
                "random:0.75",
                "random:0.9",
            ],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with one sweep value applied. Mask values read
    /// `strategy:ratio`; the tau axis also accepts `single`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Axis::Tau if value == SINGLE_CHOICE => cfg.target.mode = TargetMode::SingleChoice,
            Axis::Tau => {
                cfg.set("target.tau", value)?;
                cfg.target.mode = TargetMode::MultiChoice;
            }
            Axis::Omega => {
                cfg.set("target.omega", value)?;
                cfg.target.mode = TargetMode::MultiChoice;
            }
            Axis::Mask => {
                let (strategy, ratio) = value.split_once(':').ok_or_else(|| {
                    Error::config("mask", format!("expected `strategy:ratio`, got {value:?}"))
                })?;
                cfg.mask.strategy = strategy
                    .parse::<MaskStrategy>()
                    .map_err(|e| Error::config("mask.strategy", e.to_string()))?;
                cfg.set("mask.ratio", ratio)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub top1: f64,
    pub final_loss: f64,
}

pub const ABLATION_HEADER: &str = "axis,value,top1,final_loss";

/// Outcome of one pre-train followed by a probe.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub probe: MetricsRow,
    /// Mean loss of the last epoch.
    pub final_loss: f64,
}

/// Pre-trains from scratch under `cfg` and probes the result.
pub fn pretrain_and_probe(
    cfg: &TrainConfig,
    data: &Dataset,
    codebook: &Codebook,
    run_id: &str,
) -> Result<RunOutcome> {
    let mut state = TrainState::new(cfg)?;
    let metrics = pretrain(cfg, codebook, &data.train, &mut state, |_, _| Ok(()))?;
    let per = steps_per_epoch(data.train.len(), cfg.batch_size) as usize;
    let final_loss = epoch_means(&metrics, per)
        .last()
        .copied()
        .unwrap_or(f64::NAN);
    let probe = linear_probe(cfg, &state.params, data, run_id)?;
    Ok(RunOutcome {
        state,
        metrics,
        probe,
        final_loss,
    })
}

/// Runs the sweep. On the tau axis a single-choice row is appended unless
/// `values` already contains it. `progress` sees each row as it finishes.
pub fn run_ablation(
    base: &TrainConfig,
    axis: Axis,
    values: &[String],
    data: &Dataset,
    codebook: &Codebook,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut values = values.to_vec();
    if axis == Axis::Tau && !values.iter().any(|v| v == SINGLE_CHOICE) {
        values.push(SINGLE_CHOICE.to_string());
    }
    // validate every value before spending time on any run
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let out = pretrain_and_probe(cfg, data, codebook, &format!("{axis}={value}"))?;
        let row = AblationRow {
            axis,
            value: value.clone(),
            top1: out.probe.top1,
            final_loss: out.final_loss,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.axis, r.value, r.top1, r.final_loss
        ));
    }
    out
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::write(path, ablation_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy_dataset;
    use crate::train::fit_tokenizer;

    #[test]
    fn default_grids() {
        assert_eq!(Axis::Omega.default_values().len(), 6);
        assert_eq!(Axis::Mask.default_values().len(), 8);
        assert_eq!(Axis::Tau.default_values(), ["0.1", "1", "4", "10"]);
    }

    #[test]
    fn values_apply_and_validate() {
        let base = TrainConfig::desk();
        let c = Axis::Mask.apply(&base, "block:0.6").unwrap();
        assert_eq!(c.mask.strategy, MaskStrategy::Block);
        assert_eq!(c.mask.ratio, 0.6);
        let c = Axis::Tau.apply(&base, SINGLE_CHOICE).unwrap();
        assert_eq!(c.target.mode, TargetMode::SingleChoice);
        assert_eq!(Axis::Omega.apply(&base, "0.2").unwrap().target.omega, 0.2);
        assert!(Axis::Omega.apply(&base, "1.5").is_err());
        assert!(Axis::Tau.apply(&base, "-1").is_err());
        assert!(Axis::Mask.apply(&base, "0.75").is_err());
        assert!(Axis::Mask.apply(&base, "stripes:0.75").is_err());
    }

    #[test]
    fn single_value_sweep_matches_standalone_run() {
        let mut cfg = TrainConfig::desk();
        cfg.model.layers = 1;
        cfg.model.dim = 16;
        cfg.model.heads = 2;
        cfg.model.vocab = 16;
        cfg.data.image_size = 16;
        cfg.data.n_train = 8;
        cfg.data.n_test = 8;
        cfg.batch_size = 4;
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.probe.epochs = 5;
        let data = generate_toy_dataset(&cfg.dataset_spec()).unwrap();
        let (cb, _) = fit_tokenizer(&cfg, &data.train).unwrap();
        let rows = run_ablation(&cfg, Axis::Omega, &["0.5".into()], &data, &cb, |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        let mut alone = cfg.clone();
        alone.target.omega = 0.5;
        let out = pretrain_and_probe(&alone, &data, &cb, "alone").unwrap();
        assert_eq!(rows[0].top1, out.probe.top1);
        assert_eq!(rows[0].final_loss, out.final_loss);
        let csv = ablation_csv(&rows);
        assert!(csv.starts_with("axis,value,top1,final_loss\nomega,0.5,"));
    }
}
