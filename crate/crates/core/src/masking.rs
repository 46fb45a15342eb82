//! Masked index sets and mask-token substitution.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;

use crate::real::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    Block,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "block" => Ok(MaskStrategy::Block),
            _ => Err(format!(
                "unknown mask strategy {s:?} (expected random|block)"
            )),
        }
    }
}

/// The masked patch set `M`, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked: Vec<usize>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub n: usize,
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.masked.len() as f64 / self.n as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut v = vec![false; self.n];
        for &i in &self.masked {
            v[i] = true;
        }
        v
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} must lie strictly between 0 and 1"
        )));
    }
    Ok(())
}

/// Uniform subset of exactly `round(ratio·n)` indices.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let count = (ratio * n as f64).round() as usize;
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} of {n} patches masks {count} patches"
        )));
    }
    let mut masked = index::sample(rng, n, count).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        masked,
        strategy: MaskStrategy::Random,
        ratio,
        n,
    })
}

pub const BLOCK_MIN_AREA: usize = 4;
pub const BLOCK_ASPECT_MIN: f64 = 0.3;
pub const BLOCK_OVERSHOOT: f64 = 0.1;
pub const BLOCK_MAX_ATTEMPTS: usize = 200;

/// Union of random rectangles until at least `ratio` of the grid is covered,
/// never exceeding `ratio + 0.1`.
///
/// Each block draws its area log-uniformly from `[4, room]` (where `room` is
/// the number of patches still allowed) and its aspect ratio log-uniformly
/// from `[0.3, 1/0.3]`. A block is kept only if it adds between one patch
/// and `room` new patches.
pub fn block_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let n = rows * cols;
    if n < 16 {
        return Err(Error::InvalidArgument(format!(
            "block masking needs at least 16 patches, grid is {rows}x{cols}"
        )));
    }
    let target = (ratio * n as f64).ceil() as usize;
    let upper = (((ratio + BLOCK_OVERSHOOT) * n as f64).floor() as usize).min(n);
    let mut grid = vec![false; n];
    let mut count = 0usize;
    let log_aspect = (BLOCK_ASPECT_MIN.ln(), (1.0 / BLOCK_ASPECT_MIN).ln());

    let mut attempts = 0;
    while count < target {
        if attempts == BLOCK_MAX_ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "block masking reached {:.3} of the grid after {BLOCK_MAX_ATTEMPTS} attempts (target {ratio})",
                count as f64 / n as f64
            )));
        }
        attempts += 1;
        let room = upper - count;
        let hi = (room.max(BLOCK_MIN_AREA) as f64).ln();
        let lo = (BLOCK_MIN_AREA as f64).ln();
        let area = if hi > lo {
            rng.random_range(lo..=hi).exp()
        } else {
            BLOCK_MIN_AREA as f64
        };
        let aspect = rng.random_range(log_aspect.0..=log_aspect.1).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h * w < BLOCK_MIN_AREA || h > rows || w > cols {
            continue;
        }
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        let fresh = (top..top + h)
            .flat_map(|r| (left..left + w).map(move |c| r * cols + c))
            .filter(|&i| !grid[i])
            .count();
        if fresh == 0 || fresh > room {
            continue;
        }
        for r in top..top + h {
            for c in left..left + w {
                grid[r * cols + c] = true;
            }
        }
        count += fresh;
    }
    let masked = (0..n).filter(|&i| grid[i]).collect();
    Ok(MaskSpec {
        masked,
        strategy: MaskStrategy::Block,
        ratio,
        n,
    })
}

pub fn sample_mask<R: Rng + ?Sized>(
    strategy: MaskStrategy,
    rows: usize,
    cols: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    match strategy {
        MaskStrategy::Random => random_mask(rows * cols, ratio, rng),
        MaskStrategy::Block => block_mask(rows, cols, ratio, rng),
    }
}

/// Replaces the rows listed in `m` with `mask_token`.
pub fn apply_mask_tokens<T: Real>(
    embedded: &Array2<T>,
    m: &MaskSpec,
    mask_token: &Array1<T>,
) -> Result<Array2<T>> {
    let mut out = embedded.clone();
    substitute_rows(&mut out, &m.masked, mask_token)?;
    Ok(out)
}

pub(crate) fn substitute_rows<T: Real>(
    x: &mut Array2<T>,
    rows: &[usize],
    token: &Array1<T>,
) -> Result<()> {
    if token.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "mask token has {} entries, embeddings have {}",
            token.len(),
            x.ncols()
        )));
    }
    for &i in rows {
        if i >= x.nrows() {
            return Err(Error::InvalidArgument(format!(
                "masked index {i} out of range for {} rows",
                x.nrows()
            )));
        }
        x.row_mut(i).assign(token);
    }
    Ok(())
}
