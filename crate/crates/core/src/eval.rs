//! Linear probing and fine-tuning on mean-pooled patch features.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::data::{augment_train, patchify, Dataset, Image};
use crate::encoder::{
    backbone_forward, embed, embed_backward, layer_id, vit_backward, ModelParams,
};
use crate::optim::{adamw_update, AdamHyper, AdamState, CosineSchedule};
use crate::real::{argmax, softmax_rows};
use crate::train::{derive_rng, steps_per_epoch, TAG_FINETUNE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Probe,
    FineTune,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Probe => "probe",
            EvalMode::FineTune => "finetune",
        })
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: EvalMode,
    /// Epoch at which `top1` was reached.
    pub epoch: usize,
    pub top1: f64,
    /// Training loss at that epoch.
    pub loss: f64,
}

pub const RESULTS_HEADER: &str = "run_id,mode,epoch,top1,loss";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.run_id, self.mode, self.epoch, self.top1, self.loss
        )
    }
}

/// Appends rows to a results file, writing the header when it is new.
pub fn append_results(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Percentage of positions where `pred` equals `labels`.
pub fn top1_accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

pub fn labels_of(images: &[Image]) -> Result<Vec<usize>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            img.label
                .ok_or_else(|| Error::InvalidArgument(format!("image {i} has no label")))
        })
        .collect()
}

fn stack_images(cfg: &TrainConfig, images: &[&Image]) -> Result<Array2<f32>> {
    let grids = images
        .iter()
        .map(|img| patchify(img, cfg.model.patch))
        .collect::<Result<Vec<_>>>()?;
    crate::data::stack_patches(&grids)
}

/// Mean over patches of the final-layer features of the unmasked image.
pub fn pooled_features(
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    images: &[Image],
) -> Result<Array2<f64>> {
    let n = params.config.tokens;
    let mut out = Array2::zeros((images.len(), params.config.dim));
    for (c, chunk) in images.chunks(64).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let patches = stack_images(cfg, &refs)?;
        let x = embed(params, &patches, &[])?;
        let (f, _) = backbone_forward(params, &x, n)?;
        for b in 0..chunk.len() {
            let mean = f
                .slice(s![b * n..(b + 1) * n, ..])
                .mean_axis(Axis(0))
                .unwrap();
            out.row_mut(c * 64 + b).assign(&mean.mapv(|v| v as f64));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub best_top1: f64,
    pub best_epoch: usize,
    pub loss_at_best: f64,
    pub final_top1: f64,
}

/// Softmax cross-entropy of a linear classifier and its gradients.
fn linear_ce(
    x: &Array2<f64>,
    y: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
) -> (f64, Array2<f64>, Array1<f64>, Array2<f64>) {
    let logits = x.dot(w) + b;
    let q = softmax_rows(&logits);
    let n = x.nrows() as f64;
    let mut d = q.clone();
    let mut loss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        loss -= q[[i, yi]].max(f64::MIN_POSITIVE).ln();
        d[[i, yi]] -= 1.0;
    }
    d /= n;
    (loss / n, x.t().dot(&d), d.sum_axis(Axis(0)), d)
}

fn predict(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Vec<usize> {
    (x.dot(w) + b).rows().into_iter().map(argmax).collect()
}

/// Trains a linear softmax classifier on fixed features with full-batch
/// Adam from zero weights (no randomness) and reports the best test top-1.
/// Features are standardized with training-set statistics.
pub fn probe_on_features(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<ProbeResult> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(Error::Shape("feature rows do not match label count".into()));
    }
    if train_y.is_empty() || test_y.is_empty() {
        return Err(Error::InvalidArgument(
            "probe needs labeled train and test sets".into(),
        ));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    let mean = train_x.mean_axis(Axis(0)).unwrap();
    let std = train_x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let tr = (train_x - &mean) / &std;
    let te = (test_x - &mean) / &std;

    let d = tr.ncols();
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut mw, mut vw) = (w.clone(), w.clone());
    let (mut mb, mut vb) = (b.clone(), b.clone());
    let hp = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut best = ProbeResult {
        best_top1: -1.0,
        best_epoch: 0,
        loss_at_best: f64::NAN,
        final_top1: 0.0,
    };
    for epoch in 1..=epochs {
        let (loss, gw, gb, _) = linear_ce(&tr, train_y, &w, &b);
        let step = epoch as u64;
        adamw_update(
            w.as_slice_mut().unwrap(),
            gw.as_slice().unwrap(),
            mw.as_slice_mut().unwrap(),
            vw.as_slice_mut().unwrap(),
            lr,
            0.0,
            step,
            &hp,
        );
        adamw_update(
            b.as_slice_mut().unwrap(),
            gb.as_slice().unwrap(),
            mb.as_slice_mut().unwrap(),
            vb.as_slice_mut().unwrap(),
            lr,
            0.0,
            step,
            &hp,
        );
        let acc = top1_accuracy(&predict(&te, &w, &b), test_y)?;
        if acc > best.best_top1 {
            best.best_top1 = acc;
            best.best_epoch = epoch;
            best.loss_at_best = loss;
        }
        best.final_top1 = acc;
    }
    Ok(best)
}

/// Linear probe on frozen encoder features (the MIM head is unused).
pub fn linear_probe(
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    data: &Dataset,
    run_id: &str,
) -> Result<MetricsRow> {
    let train_y = labels_of(&data.train)?;
    let test_y = labels_of(&data.test)?;
    let train_x = pooled_features(cfg, params, &data.train)?;
    let test_x = pooled_features(cfg, params, &data.test)?;
    let r = probe_on_features(
        &train_x,
        &train_y,
        &test_x,
        &test_y,
        data.classes,
        cfg.probe.epochs,
        cfg.probe.lr,
    )?;
    Ok(MetricsRow {
        run_id: run_id.to_string(),
        mode: EvalMode::Probe,
        epoch: r.best_epoch,
        top1: r.best_top1,
        loss: r.loss_at_best,
    })
}

/// Learning-rate multiplier `decay^(L − layer_id)` for tensor `name`.
/// The classifier counts as the top layer; the unused MIM head is frozen.
pub fn layer_lr_scale(name: &str, layers: usize, decay: f64) -> f64 {
    if name.starts_with("head.") {
        return 0.0;
    }
    decay.powi((layers - layer_id(name, layers)) as i32)
}

/// End-to-end fine-tuning of the encoder plus a linear classifier on
/// mean-pooled features. Returns the best-epoch row and the tuned encoder.
pub fn fine_tune(
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    data: &Dataset,
    run_id: &str,
) -> Result<(MetricsRow, ModelParams<f32>)> {
    let ft = &cfg.finetune;
    if params.config != cfg.model_config() {
        return Err(Error::Shape(format!(
            "checkpoint model {:?} does not match configuration {:?}",
            params.config,
            cfg.model_config()
        )));
    }
    let train_y = labels_of(&data.train)?;
    let test_y = labels_of(&data.test)?;
    let classes = data.classes;
    let n = params.config.tokens;
    let layers = params.config.layers;
    let dim = params.config.dim;

    let mut p = params.clone();
    let mut adam = AdamState::new(&p);
    let mut cw = Array2::<f32>::zeros((dim, classes));
    let mut cb = Array1::<f32>::zeros(classes);
    let (mut mcw, mut vcw) = (cw.clone(), cw.clone());
    let (mut mcb, mut vcb) = (cb.clone(), cb.clone());
    let hp = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: ft.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: ft.weight_decay,
    };
    let per = steps_per_epoch(data.train.len(), ft.batch_size);
    let sched = CosineSchedule {
        peak: ft.lr,
        min: ft.min_lr,
        warmup: ft.warmup_epochs as u64 * per,
        total: ft.epochs as u64 * per,
    };
    let mut best = MetricsRow {
        run_id: run_id.to_string(),
        mode: EvalMode::FineTune,
        epoch: 0,
        top1: -1.0,
        loss: f64::NAN,
    };
    let mut step = 0u64;
    for epoch in 1..=ft.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, TAG_FINETUNE, &[0, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(ft.batch_size) {
            let mut rng = derive_rng(cfg.seed, TAG_FINETUNE, &[1, step]);
            let views: Vec<Image> = chunk
                .iter()
                .map(|&i| augment_train(&data.train[i], &mut rng))
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let patches = stack_images(cfg, &refs)?;
            let x = embed(&p, &patches, &[])?;
            let (f, cache) = backbone_forward(&p, &x, n)?;
            let bsz = chunk.len();
            let pooled = Array2::from_shape_fn((bsz, dim), |(b, d)| {
                f.slice(s![b * n..(b + 1) * n, d]).sum() / n as f32
            });
            let pooled64 = pooled.mapv(|v| v as f64);
            let ys: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, gw, gb, dlogits) = linear_ce(
                &pooled64,
                &ys,
                &cw.mapv(|v| v as f64),
                &cb.mapv(|v| v as f64),
            );
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("fine-tuning step {step}"),
                    layer: None,
                });
            }
            epoch_loss += loss * bsz as f64;
            let dpool = dlogits.dot(&cw.t().mapv(|v| v as f64)).mapv(|v| v as f32);
            let mut df = Array2::<f32>::zeros(f.raw_dim());
            let inv_n = 1.0 / n as f32;
            for b in 0..bsz {
                for r in b * n..(b + 1) * n {
                    df.row_mut(r).assign(&(&dpool.row(b) * inv_n));
                }
            }
            let (mut grad, dx) = vit_backward(&p, &cache, Some(&df), None)?;
            embed_backward(&patches, &[], &dx, &mut grad);
            let lr = sched.lr(step);
            step += 1;
            adam.step(&mut p, &grad, lr, &hp, |name| {
                layer_lr_scale(name, layers, ft.layer_decay)
            });
            adamw_update(
                cw.as_slice_mut().unwrap(),
                gw.mapv(|v| v as f32).as_slice().unwrap(),
                mcw.as_slice_mut().unwrap(),
                vcw.as_slice_mut().unwrap(),
                lr,
                ft.weight_decay,
                step,
                &hp,
            );
            adamw_update(
                cb.as_slice_mut().unwrap(),
                gb.mapv(|v| v as f32).as_slice().unwrap(),
                mcb.as_slice_mut().unwrap(),
                vcb.as_slice_mut().unwrap(),
                lr,
                0.0,
                step,
                &hp,
            );
        }
        let feats = pooled_features(cfg, &p, &data.test)?;
        let pred = predict(&feats, &cw.mapv(|v| v as f64), &cb.mapv(|v| v as f64));
        let acc = top1_accuracy(&pred, &test_y)?;
        if acc > best.top1 {
            best.top1 = acc;
            best.epoch = epoch;
            best.loss = epoch_loss / data.train.len() as f64;
        }
    }
    Ok((best, p))
}
