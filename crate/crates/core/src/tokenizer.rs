//! Frozen k-means patch tokenizer.
//!
//! Patches are optionally average-pooled into a `token_dim`-dimensional space
//! and multiplied by a fixed gain, giving tokenizer-space vectors `u_i`. These
//! are clustered with k-means++ / Lloyd and scored against the resulting codes
//! as `z[i, k] = -‖u_i - c_k‖² / sqrt(token_dim)`.
//!
//! The gain sets the logit scale, and with it how sharp `softmax(z / τ)` is at
//! a given temperature.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PatchGrid;
use crate::real::{argmax, Real};
use crate::{Error, Result};

/// The visual vocabulary: `V` code vectors of dimension `token_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Array2<f32>,
    codes_f64: Array2<f64>,
    input_dim: usize,
    gain: f64,
}

impl Codebook {
    pub fn new(codes: Array2<f32>, input_dim: usize) -> Result<Self> {
        Self::with_gain(codes, input_dim, 1.0)
    }

    pub fn with_gain(codes: Array2<f32>, input_dim: usize, gain: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tokenizer gain must be positive, got {gain}"
            )));
        }
        let (v, d) = codes.dim();
        if v == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "codebook must be non-empty, got {v}x{d}"
            )));
        }
        if input_dim % d != 0 {
            return Err(Error::Shape(format!(
                "patch dimension {input_dim} cannot be pooled to token dimension {d}"
            )));
        }
        if codes.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                stage: "codebook".into(),
                layer: None,
            });
        }
        let codes_f64 = codes.mapv(f64::from);
        Ok(Self {
            codes,
            codes_f64,
            input_dim,
            gain,
        })
    }

    pub fn vocab(&self) -> usize {
        self.codes.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.codes.ncols()
    }

    /// Patch dimension `C·P²` the codebook accepts before pooling.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn codes(&self) -> &Array2<f32> {
        &self.codes
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Tokenizer-space vectors `u_i` of raw patch rows.
    pub fn project(&self, patches: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
        let mut u = pool_patches(patches, self.token_dim())?;
        if self.gain != 1.0 {
            u *= self.gain;
        }
        Ok(u)
    }
}

/// Maps patch vectors to tokenizer space by averaging consecutive groups of
/// `input_dim / token_dim` entries. Identity when the dimensions agree.
pub fn pool_patches(patches: ArrayView2<'_, f32>, token_dim: usize) -> Result<Array2<f64>> {
    let (n, d) = patches.dim();
    if token_dim == 0 || d % token_dim != 0 {
        return Err(Error::Shape(format!(
            "patch dimension {d} is not a multiple of token dimension {token_dim}"
        )));
    }
    let group = d / token_dim;
    let inv = 1.0 / group as f64;
    Ok(Array2::from_shape_fn((n, token_dim), |(i, j)| {
        patches
            .row(i)
            .iter()
            .skip(j * group)
            .take(group)
            .map(|&v| f64::from(v))
            .sum::<f64>()
            * inv
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    /// Assignment fixpoint reached before the iteration cap.
    pub converged: bool,
    /// Number of empty clusters re-seeded from far points.
    pub reseeded: usize,
}

impl FitReport {
    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(f64::NAN)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centre uniform, later centres drawn with
/// probability proportional to squared distance to the nearest chosen centre.
pub fn kmeans_pp_init<R: Rng + ?Sized>(data: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut centres = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centres.row_mut(0).assign(&data.row(first));
    let mut nearest: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|x| sq_dist(x.as_slice().unwrap(), data.row(first).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // guard against landing on a zero-weight tail through rounding
            if nearest[idx] == 0.0 {
                idx = nearest
                    .iter()
                    .enumerate()
                    .fold(
                        (0, -1.0),
                        |best, (i, &w)| if w > best.1 { (i, w) } else { best },
                    )
                    .0;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centres.row_mut(c).assign(&data.row(pick));
        let chosen = data.row(pick);
        let chosen = chosen.as_slice().unwrap();
        for (i, x) in data.rows().into_iter().enumerate() {
            let dd = sq_dist(x.as_slice().unwrap(), chosen);
            if dd < nearest[i] {
                nearest[i] = dd;
            }
        }
    }
    centres
}

/// Nearest centre (lowest index on ties) and its squared distance per point.
fn assign(data: &Array2<f64>, centres: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    // ‖x‖² - 2x·c + ‖c‖² ranks the centres; the winner's distance is then
    // recomputed directly so inertia carries no cancellation error.
    let cross = data.dot(&centres.t());
    let c_norm: Array1<f64> = centres.map_axis(Axis(1), |c| c.dot(&c));
    let mut labels = Vec::with_capacity(data.nrows());
    let mut dists = Vec::with_capacity(data.nrows());
    for (i, x) in data.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for k in 0..centres.nrows() {
            let score = c_norm[k] - 2.0 * cross[[i, k]];
            if score < best_score {
                best_score = score;
                best = k;
            }
        }
        labels.push(best);
        dists.push(sq_dist(
            x.as_slice().unwrap(),
            centres.row(best).as_slice().unwrap(),
        ));
    }
    (labels, dists)
}

/// Lloyd iterations from a given initialisation. Stops after `iters`
/// assignment steps or at an assignment fixpoint. Empty clusters are
/// re-seeded from the points farthest from their assigned centre.
pub fn lloyd(data: &Array2<f64>, init: Array2<f64>, iters: usize) -> (Array2<f64>, FitReport) {
    let (k, d) = init.dim();
    let mut centres = init;
    let mut report = FitReport {
        inertia: Vec::new(),
        converged: false,
        reseeded: 0,
    };
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..iters {
        let (labels, mut dists) = assign(data, &centres);
        report.inertia.push(dists.iter().sum());
        if prev.as_ref() == Some(&labels) {
            report.converged = true;
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &data.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centres.row_mut(c).assign(&mean);
            } else {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold(
                        (0, -1.0),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0;
                centres.row_mut(c).assign(&data.row(far));
                dists[far] = 0.0;
                report.reseeded += 1;
            }
        }
        prev = Some(labels);
    }
    (centres, report)
}

/// Fits a `vocab`-code codebook with k-means++ seeding and Lloyd iterations.
pub fn fit_codebook(
    patches: ArrayView2<'_, f32>,
    vocab: usize,
    iters: usize,
    seed: u64,
    token_dim: usize,
    gain: f64,
) -> Result<(Codebook, FitReport)> {
    if vocab == 0 {
        return Err(Error::InvalidArgument(
            "vocabulary size must be positive".into(),
        ));
    }
    let mut data = pool_patches(patches, token_dim)?;
    if gain != 1.0 {
        data *= gain;
    }
    let distinct: HashSet<Vec<u64>> = data
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < vocab {
        return Err(Error::InvalidArgument(format!(
            "{} distinct patch vectors cannot support a vocabulary of {vocab}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(&data, vocab, &mut rng);
    let (centres, report) = lloyd(&data, init, iters.max(1));
    let codes = centres.mapv(|v| v as f32);
    Ok((Codebook::with_gain(codes, patches.ncols(), gain)?, report))
}

/// Per-patch tokenizer scores `z ∈ R^{N×V}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits {
    pub z: Array2<f64>,
}

impl TokenLogits {
    pub fn hard_ids(&self) -> Vec<usize> {
        hard_ids(&self.z)
    }

    pub fn cast<T: Real>(&self) -> Array2<T> {
        self.z.mapv(T::lit)
    }
}

pub fn encode_logits(pg: &PatchGrid, cb: &Codebook) -> Result<TokenLogits> {
    encode_patch_logits(pg.patches.view(), cb)
}

/// Scores raw patch rows (any count) against the codebook.
pub fn encode_patch_logits(patches: ArrayView2<'_, f32>, cb: &Codebook) -> Result<TokenLogits> {
    if patches.ncols() != cb.input_dim() {
        return Err(Error::Shape(format!(
            "patch dimension {} does not match the codebook's input dimension {}",
            patches.ncols(),
            cb.input_dim()
        )));
    }
    let u = cb.project(patches)?;
    let scale = 1.0 / (cb.token_dim() as f64).sqrt();
    let codes = &cb.codes_f64;
    let z = Array2::from_shape_fn((u.nrows(), cb.vocab()), |(i, k)| {
        -sq_dist(
            u.row(i).as_slice().unwrap(),
            codes.row(k).as_slice().unwrap(),
        ) * scale
    });
    Ok(TokenLogits { z })
}

/// Row-wise argmax; ties resolve to the lowest id.
pub fn hard_ids<T: Real>(z: &Array2<T>) -> Vec<usize> {
    z.rows().into_iter().map(argmax).collect()
}
