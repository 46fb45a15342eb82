//! Pre-training loop: augment, tokenize, mask, predict, build targets from
//! the same forward pass, soft cross-entropy, clip, AdamW.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{TargetMode, TrainConfig};
use crate::data::{augment_train, patchify, Image};
use crate::encoder::{backward_patches, forward_patches, init_params, ModelParams};
use crate::loss::{hard_cross_entropy, soft_cross_entropy};
use crate::masking::sample_mask;
use crate::optim::{clip_global_norm, AdamState, CosineSchedule};
use crate::real::Real;
use crate::targets::{build_targets, one_hot};
use crate::tokenizer::{encode_patch_logits, fit_codebook, hard_ids, Codebook, FitReport};
use crate::{Error, Result};

/// Independent stream for `(seed, tag, indices…)`.
pub fn derive_rng(seed: u64, tag: u64, idx: &[u64]) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(seed ^ mix(tag));
    for &i in idx {
        h = mix(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SHUFFLE: u64 = 2;
pub(crate) const TAG_STEP: u64 = 3;
pub(crate) const TAG_TOKENIZER: u64 = 4;
pub(crate) const TAG_INSPECT: u64 = 5;
pub(crate) const TAG_FINETUNE: u64 = 7;

/// Fits the frozen tokenizer on the (unaugmented) training patches.
pub fn fit_tokenizer(cfg: &TrainConfig, train: &[Image]) -> Result<(Codebook, FitReport)> {
    let grids = train
        .iter()
        .map(|img| patchify(img, cfg.model.patch))
        .collect::<Result<Vec<_>>>()?;
    let patches = crate::data::stack_patches(&grids)?;
    let seed = rand::Rng::random(&mut derive_rng(cfg.seed, TAG_TOKENIZER, &[]));
    fit_codebook(
        patches.view(),
        cfg.model.vocab,
        cfg.tokenizer.iters,
        seed,
        cfg.token_dim(),
        cfg.tokenizer.gain,
    )
}

/// One prepared mini-batch: stacked patches, tokenizer logits and the
/// masked rows (indices into the stack).
#[derive(Debug, Clone)]
pub struct MimBatch<T> {
    pub patches: Array2<T>,
    pub token_logits: Array2<T>,
    pub masked_rows: Vec<usize>,
    pub tokens: usize,
}

impl<T: Real> MimBatch<T> {
    pub fn images(&self) -> usize {
        self.patches.nrows() / self.tokens
    }

    pub fn cast<U: Real>(&self) -> MimBatch<U> {
        MimBatch {
            patches: self.patches.mapv(|v| U::lit(v.as_f64())),
            token_logits: self.token_logits.mapv(|v| U::lit(v.as_f64())),
            masked_rows: self.masked_rows.clone(),
            tokens: self.tokens,
        }
    }
}

/// Builds a batch from images. With `augment` the crop/flip draws and the
/// masks come from `rng`; otherwise only the masks do.
pub fn prepare_batch<T: Real, R: rand::Rng>(
    cfg: &TrainConfig,
    codebook: &Codebook,
    images: &[&Image],
    augment: bool,
    rng: &mut R,
) -> Result<MimBatch<T>> {
    let n = cfg.tokens();
    let side = cfg.grid_side();
    let mut patches = Array2::zeros((images.len() * n, cfg.model_config().patch_dim()));
    let mut token_logits = Array2::zeros((images.len() * n, codebook.vocab()));
    let mut masked_rows = Vec::new();
    for (b, img) in images.iter().enumerate() {
        let view = if augment {
            augment_train(img, rng)
        } else {
            (*img).clone()
        };
        let pg = patchify(&view, cfg.model.patch)?;
        if pg.len() != n {
            return Err(Error::Shape(format!(
                "image yields {} patches, model expects {n}",
                pg.len()
            )));
        }
        let z = encode_patch_logits(pg.patches.view(), codebook)?;
        let rows = s![b * n..(b + 1) * n, ..];
        patches
            .slice_mut(rows)
            .assign(&pg.patches.mapv(|v| T::lit(v as f64)));
        token_logits.slice_mut(rows).assign(&z.cast::<T>());
        let m = sample_mask(cfg.mask.strategy, side, side, cfg.mask.ratio, rng)?;
        masked_rows.extend(m.masked.iter().map(|&i| b * n + i));
    }
    Ok(MimBatch {
        patches,
        token_logits,
        masked_rows,
        tokens: n,
    })
}

/// Per-image targets for a batch from the encoder's features on x̂.
/// Returns the stacked targets and their mean entropy over masked rows.
pub fn batch_targets<T: Real>(
    batch: &MimBatch<T>,
    features: &Array2<T>,
    tau: f64,
    omega: f64,
    mode: TargetMode,
) -> Result<(Array2<T>, f64)> {
    let n = batch.tokens;
    let vocab = batch.token_logits.ncols();
    match mode {
        TargetMode::SingleChoice => {
            let ids = hard_ids(&batch.token_logits);
            Ok((one_hot(&ids, vocab), 0.0))
        }
        TargetMode::MultiChoice => {
            let mut out = Array2::zeros(batch.token_logits.raw_dim());
            let mut entropy = 0.0;
            for b in 0..batch.images() {
                let rows = s![b * n..(b + 1) * n, ..];
                let z = batch.token_logits.slice(rows).to_owned();
                let f = features.slice(rows).to_owned();
                let t = build_targets(&z, &f, tau, omega)?;
                let local: Vec<usize> = batch
                    .masked_rows
                    .iter()
                    .filter(|&&r| r / n == b)
                    .map(|&r| r - b * n)
                    .collect();
                entropy += t.mean_entropy(&local) * local.len() as f64;
                out.slice_mut(rows).assign(&t.z_hat);
            }
            Ok((out, entropy / batch.masked_rows.len().max(1) as f64))
        }
    }
}

/// Result of one objective evaluation with analytic gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: T,
    pub grads: ModelParams<T>,
    pub targets: Array2<T>,
    pub target_entropy: f64,
}

/// Forward, targets (as constants), masked loss, backward.
pub fn mim_objective<T: Real>(
    params: &ModelParams<T>,
    batch: &MimBatch<T>,
    tau: f64,
    omega: f64,
    mode: TargetMode,
) -> Result<ObjectiveOutput<T>> {
    let (out, cache) = forward_patches(params, &batch.patches, &batch.masked_rows)?;
    let (targets, target_entropy) = batch_targets(batch, &out.features, tau, omega, mode)?;
    let lo = match mode {
        TargetMode::MultiChoice => soft_cross_entropy(&out.logits, &targets, &batch.masked_rows)?,
        TargetMode::SingleChoice => hard_cross_entropy(
            &out.logits,
            &hard_ids(&batch.token_logits),
            &batch.masked_rows,
        )?,
    };
    let grads = backward_patches(
        params,
        &batch.patches,
        &batch.masked_rows,
        &cache,
        None,
        Some(&lo.grad),
    )?;
    Ok(ObjectiveOutput {
        loss: lo.loss,
        grads,
        targets,
        target_entropy,
    })
}

/// Loss only, with targets supplied from outside.
pub fn loss_with_targets<T: Real>(
    params: &ModelParams<T>,
    batch: &MimBatch<T>,
    targets: &Array2<T>,
) -> Result<T> {
    let (out, _) = forward_patches(params, &batch.patches, &batch.masked_rows)?;
    Ok(soft_cross_entropy(&out.logits, targets, &batch.masked_rows)?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub target_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Optimizer steps taken so far. With the seed it fixes every random
    /// stream the loop draws from.
    pub step: u64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = derive_rng(cfg.seed, TAG_INIT, &[]);
        let params = init_params(&cfg.model_config(), &mut rng)?;
        Ok(Self::from_params(params, cfg.seed, 0))
    }

    /// Fresh optimizer moments around existing parameters. The schedule
    /// continues from `step`; Adam's bias correction restarts with the
    /// zeroed moments.
    pub fn from_params(params: ModelParams<f32>, seed: u64, step: u64) -> Self {
        let adam = AdamState::new(&params);
        TrainState {
            params,
            adam,
            step,
            seed,
            loss_history: Vec::new(),
        }
    }
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

pub fn schedule(cfg: &TrainConfig, n_train: usize) -> CosineSchedule {
    let per = steps_per_epoch(n_train, cfg.batch_size);
    CosineSchedule {
        peak: cfg.peak_lr,
        min: cfg.min_lr,
        warmup: cfg.warmup_epochs as u64 * per,
        total: cfg.epochs as u64 * per,
    }
}

/// One optimizer step on `images`.
pub fn train_step(
    cfg: &TrainConfig,
    codebook: &Codebook,
    state: &mut TrainState,
    images: &[&Image],
    sched: &CosineSchedule,
) -> Result<StepMetrics> {
    let mut rng = derive_rng(state.seed, TAG_STEP, &[state.step]);
    let batch: MimBatch<f32> = prepare_batch(cfg, codebook, images, true, &mut rng)?;
    let mut out = mim_objective(
        &state.params,
        &batch,
        cfg.target.tau,
        cfg.target.omega,
        cfg.target.mode,
    )?;
    let loss = out.loss as f64;
    if !loss.is_finite() || !out.grads.all_finite() {
        return Err(Error::NonFinite {
            stage: format!("training step {} (loss {loss})", state.step),
            layer: None,
        });
    }
    clip_global_norm(&mut out.grads, cfg.grad_clip);
    let lr = sched.lr(state.step);
    state
        .adam
        .step(&mut state.params, &out.grads, lr, &cfg.adam_hyper(), |_| {
            1.0
        });
    let m = StepMetrics {
        step: state.step,
        lr,
        loss,
        target_entropy: out.target_entropy,
    };
    state.step += 1;
    state.loss_history.push(loss);
    Ok(m)
}

/// Runs `cfg.epochs` epochs. `on_epoch(epoch, state)` fires after each
/// epoch (1-based) and may write checkpoints.
pub fn pretrain(
    cfg: &TrainConfig,
    codebook: &Codebook,
    train: &[Image],
    state: &mut TrainState,
    mut on_epoch: impl FnMut(usize, &TrainState) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let sched = schedule(cfg, train.len());
    let per = steps_per_epoch(train.len(), cfg.batch_size);
    let start_epoch = (state.step / per) as usize;
    let mut metrics = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(state.seed, TAG_SHUFFLE, &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &train[i]).collect();
            metrics.push(train_step(cfg, codebook, state, &images, &sched)?);
        }
        on_epoch(epoch + 1, state)?;
    }
    Ok(metrics)
}

/// Mean loss over each epoch's steps.
pub fn epoch_means(metrics: &[StepMetrics], per_epoch: usize) -> Vec<f64> {
    metrics
        .chunks(per_epoch.max(1))
        .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::from("step,lr,loss,target_entropy\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            m.step, m.lr, m.loss, m.target_entropy
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
