//! Per-image dumps of the target construction: token ids, top multi-choice
//! candidates, `p`, `W`, `ẑ`, features, and `W` as a 16-bit heatmap.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::TrainConfig;
use crate::data::{patchify, Image};
use crate::encoder::{forward_patches, ModelParams};
use crate::masking::{sample_mask, MaskSpec};
use crate::netpbm::write_pgm16;
use crate::real::entropy;
use crate::targets::{build_targets, TargetDistribution};
use crate::tokenizer::{encode_logits, Codebook};
use crate::train::{derive_rng, TAG_INSPECT};
use crate::{Error, Result};

/// Everything computed for one inspected image.
#[derive(Debug, Clone)]
pub struct TargetView {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    pub mask: MaskSpec,
    pub features: Array2<f64>,
    pub targets: TargetDistribution<f64>,
}

impl TargetView {
    /// The `k` most probable ids of row `i` of `ẑ`, ties broken by id.
    pub fn top_k(&self, i: usize, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .targets
            .z_hat
            .row(i)
            .iter()
            .copied()
            .enumerate()
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

/// Runs the encoder on `img` under `mask` and builds its targets. The
/// computation is done in `f64` from the stored `f32` parameters.
pub fn target_view(
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    codebook: &Codebook,
    img: &Image,
    mask: MaskSpec,
) -> Result<TargetView> {
    let pg = patchify(img, cfg.model.patch)?;
    let z = encode_logits(&pg, codebook)?;
    let p64 = params.cast::<f64>();
    let patches = pg.patches.mapv(f64::from);
    let (out, _) = forward_patches(&p64, &patches, &mask.masked)?;
    let targets = build_targets(&z.z, &out.features, cfg.target.tau, cfg.target.omega)?;
    Ok(TargetView {
        rows: pg.rows,
        cols: pg.cols,
        ids: z.hard_ids(),
        mask,
        features: out.features,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectSummary {
    pub index: usize,
    pub masked: usize,
    pub mean_entropy_z_hat: f64,
    pub mean_entropy_p: f64,
    pub log_vocab: f64,
    pub files: Vec<PathBuf>,
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes the dump files for image `index` of `images` into `out_dir`.
pub fn inspect_targets(
    cfg: &TrainConfig,
    params: &ModelParams<f32>,
    codebook: &Codebook,
    images: &[Image],
    index: usize,
    out_dir: &Path,
) -> Result<InspectSummary> {
    let img = images.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "image index {index} out of range for {} images",
            images.len()
        ))
    })?;
    let side = cfg.grid_side();
    let mut rng = derive_rng(cfg.seed, TAG_INSPECT, &[index as u64]);
    let mask = sample_mask(cfg.mask.strategy, side, side, cfg.mask.ratio, &mut rng)?;
    let view = target_view(cfg, params, codebook, img, mask)?;
    std::fs::create_dir_all(out_dir)?;
    let stem = format!("img{index}");
    let mut files = Vec::new();
    let mut emit = |suffix: &str, text: String| -> Result<()> {
        let path = out_dir.join(format!("{stem}_{suffix}"));
        std::fs::write(&path, text)?;
        files.push(path);
        Ok(())
    };

    let mut grid = String::new();
    for r in 0..view.rows {
        let cells: Vec<String> = (0..view.cols)
            .map(|c| view.ids[r * view.cols + c].to_string())
            .collect();
        writeln!(grid, "{}", cells.join(",")).unwrap();
    }
    emit("token_ids.csv", grid)?;

    let mut top = String::from("patch,masked,id1,prob1,id2,prob2,id3,prob3\n");
    for i in 0..view.ids.len() {
        let mut cells = vec![i.to_string(), (view.mask.contains(i) as u8).to_string()];
        for (id, prob) in view.top_k(i, 3) {
            cells.push(id.to_string());
            cells.push(prob.to_string());
        }
        writeln!(top, "{}", cells.join(",")).unwrap();
    }
    emit("top3.csv", top)?;
    emit("p.csv", matrix_csv(&view.targets.p))?;
    emit("w.csv", matrix_csv(&view.targets.w))?;
    emit("z_hat.csv", matrix_csv(&view.targets.z_hat))?;
    emit("features.csv", matrix_csv(&view.features))?;

    let masked = &view.mask.masked;
    let mean_entropy_p = masked
        .iter()
        .map(|&i| entropy(view.targets.p.row(i)))
        .sum::<f64>()
        / masked.len() as f64;
    let summary = InspectSummary {
        index,
        masked: masked.len(),
        mean_entropy_z_hat: view.targets.mean_entropy(masked),
        mean_entropy_p,
        log_vocab: (codebook.vocab() as f64).ln(),
        files: Vec::new(),
    };
    emit(
        "entropy.txt",
        format!(
            "image {}\nmasked {}\nmean_entropy_z_hat {}\nmean_entropy_p {}\nlog_vocab {}\ntau {}\nomega {}\n",
            index,
            summary.masked,
            summary.mean_entropy_z_hat,
            summary.mean_entropy_p,
            summary.log_vocab,
            cfg.target.tau,
            cfg.target.omega
        ),
    )?;
    let pgm = out_dir.join(format!("{stem}_affinity.pgm"));
    write_pgm16(&pgm, &view.targets.w)?;
    files.push(pgm);
    Ok(InspectSummary { files, ..summary })
}
