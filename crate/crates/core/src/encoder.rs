//! Pre-norm vision transformer with a token-id head and a hand-written
//! backward pass.
//!
//! Activations are stacked as `(B·N)×D` matrices: the linear layers run over
//! the whole batch at once and attention runs per image on its `N` rows.

use ndarray::{s, Array1, Array2, Axis, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::masking::substitute_rows;
use crate::real::{all_finite, softmax_rows, Real};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    /// Patches per image, `N`.
    pub tokens: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.dim", self.dim),
            ("model.heads", self.heads),
            ("model.patch", self.patch),
            ("data.channels", self.channels),
            ("tokens", self.tokens),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!(
                    "dimension {} is not divisible by {} heads",
                    self.dim, self.heads
                ),
            ));
        }
        if self.vocab < 2 {
            return Err(Error::config(
                "model.vocab",
                "vocabulary needs at least 2 tokens",
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn head_hidden(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1_w: Array1<T>,
    pub norm1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub norm2_w: Array1<T>,
    pub norm2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All trainable encoder and head parameters. Weight matrices are stored
/// `in × out` so a layer is `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub pos_embed: Array2<T>,
    pub mask_token: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_w: Array1<T>,
    pub norm_b: Array1<T>,
    pub head_w1: Array2<T>,
    pub head_b1: Array1<T>,
    pub head_w2: Array2<T>,
    pub head_b2: Array1<T>,
}

macro_rules! block_fields {
    ($cb:ident, $($args:tt)*) => {
        $cb!($($args)*;
            norm1_w "norm1.weight", norm1_b "norm1.bias",
            wq "attn.q.weight", bq "attn.q.bias",
            wk "attn.k.weight", bk "attn.k.bias",
            wv "attn.v.weight", bv "attn.v.bias",
            wo "attn.proj.weight", bo "attn.proj.bias",
            norm2_w "norm2.weight", norm2_b "norm2.bias",
            w1 "mlp.fc1.weight", b1 "mlp.fc1.bias",
            w2 "mlp.fc2.weight", b2 "mlp.fc2.bias")
    };
}

macro_rules! top_fields_pre {
    ($cb:ident, $($args:tt)*) => {
        $cb!($($args)*;
            patch_w "patch_embed.weight", patch_b "patch_embed.bias",
            pos_embed "pos_embed", mask_token "mask_token")
    };
}

macro_rules! top_fields_post {
    ($cb:ident, $($args:tt)*) => {
        $cb!($($args)*;
            norm_w "norm.weight", norm_b "norm.bias",
            head_w1 "head.fc1.weight", head_b1 "head.fc1.bias",
            head_w2 "head.fc2.weight", head_b2 "head.fc2.bias")
    };
}

macro_rules! visit_ref {
    ($s:ident, $prefix:expr, $f:ident; $($field:ident $name:literal),*) => {
        $( $f(&format!("{}{}", $prefix, $name), $s.$field.shape(), $s.$field.as_slice().expect("standard layout")); )*
    };
}

macro_rules! visit_mut {
    ($s:ident, $prefix:expr, $f:ident; $($field:ident $name:literal),*) => {
        $( {
            let shape = $s.$field.shape().to_vec();
            $f(&format!("{}{}", $prefix, $name), &shape, $s.$field.as_slice_mut().expect("standard layout"));
        } )*
    };
}

macro_rules! map_fields {
    ($s:ident, $g:ident, $ty:ident { $($extra:tt)* }; $($field:ident $name:literal),*) => {
        $ty { $( $field: $s.$field.mapv(&$g), )* $($extra)* }
    };
}

fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let normal = Normal::new(0.0, std).expect("valid std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return T::lit(v);
        }
    }
}

impl<T: Real> Block<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let f = cfg.mlp_dim();
        Block {
            norm1_w: Array1::zeros(d),
            norm1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            norm2_w: Array1::zeros(d),
            norm2_b: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn map<U: Real>(&self, g: impl Fn(T) -> U) -> Block<U> {
        block_fields!(map_fields, self, g, Block {})
    }
}

impl<T: Real> ModelParams<T> {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(ModelParams {
            config: *cfg,
            patch_w: Array2::zeros((cfg.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            pos_embed: Array2::zeros((cfg.tokens, d)),
            mask_token: Array1::zeros(d),
            blocks: (0..cfg.layers).map(|_| Block::zeros(cfg)).collect(),
            norm_w: Array1::zeros(d),
            norm_b: Array1::zeros(d),
            head_w1: Array2::zeros((d, cfg.head_hidden())),
            head_b1: Array1::zeros(cfg.head_hidden()),
            head_w2: Array2::zeros((cfg.head_hidden(), cfg.vocab)),
            head_b2: Array1::zeros(cfg.vocab),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config validated at construction")
    }

    /// Visits every tensor in canonical order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &[usize], &'a [T])) {
        top_fields_pre!(visit_ref, self, "", f);
        for (i, b) in self.blocks.iter().enumerate() {
            block_fields!(visit_ref, b, format!("blocks.{i}."), f);
        }
        top_fields_post!(visit_ref, self, "", f);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &[usize], &'a mut [T])) {
        let ModelParams {
            patch_w,
            patch_b,
            pos_embed,
            mask_token,
            blocks,
            norm_w,
            norm_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            ..
        } = self;
        struct Pre<'b, T> {
            patch_w: &'b mut Array2<T>,
            patch_b: &'b mut Array1<T>,
            pos_embed: &'b mut Array2<T>,
            mask_token: &'b mut Array1<T>,
        }
        struct Post<'b, T> {
            norm_w: &'b mut Array1<T>,
            norm_b: &'b mut Array1<T>,
            head_w1: &'b mut Array2<T>,
            head_b1: &'b mut Array1<T>,
            head_w2: &'b mut Array2<T>,
            head_b2: &'b mut Array1<T>,
        }
        let pre = Pre {
            patch_w,
            patch_b,
            pos_embed,
            mask_token,
        };
        top_fields_pre!(visit_mut, pre, "", f);
        for (i, b) in blocks.iter_mut().enumerate() {
            block_fields!(visit_mut, b, format!("blocks.{i}."), f);
        }
        let post = Post {
            norm_w,
            norm_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        };
        top_fields_post!(visit_mut, post, "", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _, _| out.push(n.to_string()));
        out
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        self.for_each(|_, _, s| out.push(s));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.for_each_mut(|_, _, s| out.push(s));
        out
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, _| n += 1);
        n
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, s| n += s.len());
        n
    }

    pub fn map<U: Real>(&self, g: impl Fn(T) -> U) -> ModelParams<U> {
        let pre: ModelParams<U> = top_fields_pre!(
            map_fields,
            self,
            g,
            ModelParams {
                config: self.config,
                blocks: self.blocks.iter().map(|b| b.map(&g)).collect(),
                norm_w: Array1::zeros(0),
                norm_b: Array1::zeros(0),
                head_w1: Array2::zeros((0, 0)),
                head_b1: Array1::zeros(0),
                head_w2: Array2::zeros((0, 0)),
                head_b2: Array1::zeros(0),
            }
        );
        top_fields_post!(map_fields, self, g, ModelParams { ..pre })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        let src = other.slices();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * *s;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for dst in self.slices_mut() {
            for d in dst.iter_mut() {
                *d *= alpha;
            }
        }
    }

    pub fn sq_norm(&self) -> T {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .into_iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Tensors excluded from weight decay: 1-D parameters (biases, layer-norm
/// scales and offsets, the mask token) and the positional embedding.
pub fn is_no_decay(name: &str, shape: &[usize]) -> bool {
    shape.len() == 1 || name == "pos_embed"
}

/// Depth index used by layer-wise learning-rate decay: 0 for the input
/// embedding, `i + 1` for block `i`, `layers` for the final norm and heads.
pub fn layer_id(name: &str, layers: usize) -> usize {
    if name.starts_with("patch_embed") || name == "pos_embed" || name == "mask_token" {
        0
    } else if let Some(rest) = name.strip_prefix("blocks.") {
        let idx: usize = rest
            .split('.')
            .next()
            .and_then(|i| i.parse().ok())
            .expect("block tensor names carry an index");
        (idx + 1).min(layers)
    } else {
        layers
    }
}

/// Truncated-normal (σ = 0.02, cut at 2σ) weights, zero biases and
/// positional embedding, unit layer-norm scales.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    let mut p = ModelParams::zeros(cfg)?;
    p.for_each_mut(|name, _, data| {
        let is_norm = name.starts_with("norm.") || name.contains(".norm");
        if is_norm && name.ends_with(".weight") {
            data.fill(T::one());
        } else if name.ends_with(".bias") || name == "pos_embed" || is_norm {
            data.fill(T::zero());
        } else {
            for v in data.iter_mut() {
                *v = trunc_normal(rng, INIT_STD);
            }
        }
    });
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Real>(x: &Array2<T>, w: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<T>() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *is = T::one() / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * w + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    w: &Array1<T>,
    cache: &LnCache<T>,
    dw: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dw += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = T::lit(dy.ncols() as f64);
    let mut dx = dy * w;
    for ((mut row, xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.iter().copied().sum::<T>() / d;
        let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<T>() / d;
        for (g, &x) in row.iter_mut().zip(xh.iter()) {
            *g = (*g - mean_g - x * mean_gx) * is;
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn linear<T: Real>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn check_finite<T: Real>(x: &Array2<T>, stage: &str, layer: Option<usize>) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.into(),
            layer,
        })
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    a: Array2<T>,
    ln1: LnCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities, one `N×N` matrix per (image, head).
    attn: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LnCache<T>,
    bn: Array2<T>,
    h1: Array2<T>,
    g: Array2<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    hidden: Array2<T>,
    act: Array2<T>,
}

/// Activations saved by the forward pass for [`vit_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    tokens: usize,
    blocks: Vec<BlockCache<T>>,
    ln_final: LnCache<T>,
    features: Array2<T>,
    head: Option<HeadCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Attention probability matrices of `layer`, ordered by (image, head).
    pub fn attention(&self, layer: usize) -> &[Array2<T>] {
        &self.blocks[layer].attn
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `f(x̂)`, post final layer norm.
    pub features: Array2<T>,
    /// Head scores whose row softmax is the predicted token distribution.
    pub logits: Array2<T>,
}

fn batch_dims(rows: usize, tokens: usize) -> Result<usize> {
    if tokens == 0 || rows % tokens != 0 || rows == 0 {
        return Err(Error::Shape(format!(
            "{rows} input rows do not form whole images of {tokens} tokens"
        )));
    }
    Ok(rows / tokens)
}

fn block_forward<T: Real>(
    blk: &Block<T>,
    x: &Array2<T>,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, BlockCache<T>) {
    let batch = x.nrows() / tokens;
    let dh = x.ncols() / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let (a, ln1) = layer_norm(x, &blk.norm1_w, &blk.norm1_b);
    let q = linear(&a, &blk.wq, &blk.bq);
    let k = linear(&a, &blk.wk, &blk.bk);
    let v = linear(&a, &blk.wv, &blk.bv);
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let probs = softmax_rows(&scores);
            ctx.slice_mut(s![rows.clone(), cols])
                .assign(&probs.dot(&vh));
            attn.push(probs);
        }
    }
    let x1 = x + &linear(&ctx, &blk.wo, &blk.bo);
    let (bn, ln2) = layer_norm(&x1, &blk.norm2_w, &blk.norm2_b);
    let h1 = linear(&bn, &blk.w1, &blk.b1);
    let g = h1.mapv(gelu);
    let x2 = &x1 + &linear(&g, &blk.w2, &blk.b2);
    (
        x2,
        BlockCache {
            a,
            ln1,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            bn,
            h1,
            g,
        },
    )
}

fn block_backward<T: Real>(
    blk: &Block<T>,
    c: &BlockCache<T>,
    dx2: Array2<T>,
    tokens: usize,
    heads: usize,
    grad: &mut Block<T>,
) -> Array2<T> {
    let batch = dx2.nrows() / tokens;
    let dh = dx2.ncols() / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    // MLP branch
    grad.w2 += &c.g.t().dot(&dx2);
    grad.b2 += &dx2.sum_axis(Axis(0));
    let mut dh1 = dx2.dot(&blk.w2.t());
    ndarray::Zip::from(&mut dh1)
        .and(&c.h1)
        .for_each(|d, &h| *d *= gelu_grad(h));
    grad.w1 += &c.bn.t().dot(&dh1);
    grad.b1 += &dh1.sum_axis(Axis(0));
    let dbn = dh1.dot(&blk.w1.t());
    let mut dx1 = dx2;
    dx1 += &layer_norm_backward(
        &dbn,
        &blk.norm2_w,
        &c.ln2,
        &mut grad.norm2_w,
        &mut grad.norm2_b,
    );

    // attention branch
    grad.wo += &c.ctx.t().dot(&dx1);
    grad.bo += &dx1.sum_axis(Axis(0));
    let dctx = dx1.dot(&blk.wo.t());
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let probs = &c.attn[b * heads + h];
            let dctx_h = dctx.slice(s![rows.clone(), cols.clone()]);
            let qh = c.q.slice(s![rows.clone(), cols.clone()]);
            let kh = c.k.slice(s![rows.clone(), cols.clone()]);
            let vh = c.v.slice(s![rows.clone(), cols.clone()]);
            let dprobs = dctx_h.dot(&vh.t());
            dv.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&probs.t().dot(&dctx_h));
            let mut dscores = dprobs;
            for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let dot: T = drow.iter().zip(prow.iter()).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(prow.iter()) {
                    *d = p * (*d - dot) * scale;
                }
            }
            dq.slice_mut(s![rows.clone(), cols.clone()])
                .assign(&dscores.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols])
                .assign(&dscores.t().dot(&qh));
        }
    }
    grad.wq += &c.a.t().dot(&dq);
    grad.bq += &dq.sum_axis(Axis(0));
    grad.wk += &c.a.t().dot(&dk);
    grad.bk += &dk.sum_axis(Axis(0));
    grad.wv += &c.a.t().dot(&dv);
    grad.bv += &dv.sum_axis(Axis(0));
    let mut da = dq.dot(&blk.wq.t());
    da += &dk.dot(&blk.wk.t());
    da += &dv.dot(&blk.wv.t());
    dx1 += &layer_norm_backward(
        &da,
        &blk.norm1_w,
        &c.ln1,
        &mut grad.norm1_w,
        &mut grad.norm1_b,
    );
    dx1
}

/// Transformer blocks and final layer norm on mask-substituted,
/// position-embedded input. Returns `f(x̂)`.
pub fn backbone_forward<T: Real>(
    p: &ModelParams<T>,
    embedded: &Array2<T>,
    tokens: usize,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    batch_dims(embedded.nrows(), tokens)?;
    if embedded.ncols() != p.config.dim {
        return Err(Error::Shape(format!(
            "input width {} does not match model dimension {}",
            embedded.ncols(),
            p.config.dim
        )));
    }
    check_finite(embedded, "encoder input", None)?;
    let mut x = embedded.clone();
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for (l, blk) in p.blocks.iter().enumerate() {
        let (next, cache) = block_forward(blk, &x, tokens, p.config.heads);
        check_finite(&next, "encoder block", Some(l))?;
        x = next;
        blocks.push(cache);
    }
    let (features, ln_final) = layer_norm(&x, &p.norm_w, &p.norm_b);
    check_finite(&features, "final layer norm", Some(p.blocks.len()))?;
    Ok((
        features.clone(),
        ForwardCache {
            tokens,
            blocks,
            ln_final,
            features,
            head: None,
        },
    ))
}

/// Full encoder plus MIM head.
pub fn vit_forward<T: Real>(
    p: &ModelParams<T>,
    embedded: &Array2<T>,
    tokens: usize,
) -> Result<(EncoderOutput<T>, ForwardCache<T>)> {
    let (features, mut cache) = backbone_forward(p, embedded, tokens)?;
    let hidden = linear(&features, &p.head_w1, &p.head_b1);
    let act = hidden.mapv(gelu);
    let logits = linear(&act, &p.head_w2, &p.head_b2);
    check_finite(&logits, "head", Some(p.blocks.len()))?;
    cache.head = Some(HeadCache { hidden, act });
    Ok((EncoderOutput { features, logits }, cache))
}

/// Exact gradients for every encoder/head parameter given upstream gradients
/// on the features and/or logits. Returns parameter gradients (embedding
/// tensors left zero) and the gradient w.r.t. the encoder input.
pub fn vit_backward<T: Real>(
    p: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_features: Option<&Array2<T>>,
    d_logits: Option<&Array2<T>>,
) -> Result<(ModelParams<T>, Array2<T>)> {
    let mut grad = p.zeros_like();
    let rows = cache.features.nrows();
    let mut df = match d_features {
        Some(d) => {
            if d.dim() != cache.features.dim() {
                return Err(Error::Shape(format!(
                    "feature gradient {:?} vs features {:?}",
                    d.dim(),
                    cache.features.dim()
                )));
            }
            d.clone()
        }
        None => Array2::zeros(cache.features.raw_dim()),
    };
    if let Some(dl) = d_logits {
        let head = cache.head.as_ref().ok_or(Error::MissingCache(
            "head activations (forward ran without the head)",
        ))?;
        if dl.dim() != (rows, p.config.vocab) {
            return Err(Error::Shape(format!(
                "logit gradient {:?} vs logits {:?}",
                dl.dim(),
                (rows, p.config.vocab)
            )));
        }
        grad.head_w2 = head.act.t().dot(dl);
        grad.head_b2 = dl.sum_axis(Axis(0));
        let mut dh = dl.dot(&p.head_w2.t());
        ndarray::Zip::from(&mut dh)
            .and(&head.hidden)
            .for_each(|d, &h| *d *= gelu_grad(h));
        grad.head_w1 = cache.features.t().dot(&dh);
        grad.head_b1 = dh.sum_axis(Axis(0));
        df += &dh.dot(&p.head_w1.t());
    }
    if cache.blocks.len() != p.blocks.len() {
        return Err(Error::MissingCache("per-layer activations"));
    }
    let mut dx = layer_norm_backward(
        &df,
        &p.norm_w,
        &cache.ln_final,
        &mut grad.norm_w,
        &mut grad.norm_b,
    );
    for l in (0..p.blocks.len()).rev() {
        dx = block_backward(
            &p.blocks[l],
            &cache.blocks[l],
            dx,
            cache.tokens,
            p.config.heads,
            &mut grad.blocks[l],
        );
    }
    Ok((grad, dx))
}

/// Patch embedding, mask-token substitution at `masked_rows` (indices into
/// the stacked batch), then positional embedding.
pub fn embed<T: Real>(
    p: &ModelParams<T>,
    patches: &Array2<T>,
    masked_rows: &[usize],
) -> Result<Array2<T>> {
    let tokens = p.config.tokens;
    let batch = batch_dims(patches.nrows(), tokens)?;
    if patches.ncols() != p.config.patch_dim() {
        return Err(Error::Shape(format!(
            "patch width {} does not match {}",
            patches.ncols(),
            p.config.patch_dim()
        )));
    }
    let mut x = linear(patches, &p.patch_w, &p.patch_b);
    substitute_rows(&mut x, masked_rows, &p.mask_token)?;
    for b in 0..batch {
        let mut block = x.slice_mut(s![b * tokens..(b + 1) * tokens, ..]);
        block += &p.pos_embed;
    }
    Ok(x)
}

/// Accumulates embedding gradients into `grad` given `d_embedded`.
pub fn embed_backward<T: Real>(
    patches: &Array2<T>,
    masked_rows: &[usize],
    d_embedded: &Array2<T>,
    grad: &mut ModelParams<T>,
) {
    let tokens = grad.config.tokens;
    for b in 0..d_embedded.nrows() / tokens {
        grad.pos_embed += &d_embedded.slice(s![b * tokens..(b + 1) * tokens, ..]);
    }
    let mut d_lin = d_embedded.clone();
    for &i in masked_rows {
        grad.mask_token += &d_embedded.row(i);
        d_lin.row_mut(i).fill(T::zero());
    }
    grad.patch_w += &patches.t().dot(&d_lin);
    grad.patch_b += &d_lin.sum_axis(Axis(0));
}

/// Forward from raw patches: embed, encode, head.
pub fn forward_patches<T: Real>(
    p: &ModelParams<T>,
    patches: &Array2<T>,
    masked_rows: &[usize],
) -> Result<(EncoderOutput<T>, ForwardCache<T>)> {
    let x = embed(p, patches, masked_rows)?;
    vit_forward(p, &x, p.config.tokens)
}

/// Backward through head, encoder and embedding.
pub fn backward_patches<T: Real>(
    p: &ModelParams<T>,
    patches: &Array2<T>,
    masked_rows: &[usize],
    cache: &ForwardCache<T>,
    d_features: Option<&Array2<T>>,
    d_logits: Option<&Array2<T>>,
) -> Result<ModelParams<T>> {
    let (mut grad, dx) = vit_backward(p, cache, d_features, d_logits)?;
    embed_backward(patches, masked_rows, &dx, &mut grad);
    Ok(grad)
}

pub fn shape_len<D: Dimension>(shape: &D) -> usize {
    shape.size()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            patch: 2,
            channels: 1,
            tokens: 4,
            vocab: 5,
        }
    }

    fn random_params(cfg: &ModelConfig, seed: u64, std: f64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(cfg).unwrap();
        p.for_each_mut(|_, _, d| {
            for v in d.iter_mut() {
                *v = rng.random_range(-std..std);
            }
        });
        p
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(
            ModelParams::<f32>::zeros(&cfg),
            Err(Error::Config { ref key, .. }) if key == "model.heads"
        ));
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let cfg = tiny();
        let a: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.pos_embed.iter().all(|&v| v == 0.0));
        assert!(a.blocks[0].norm1_w.iter().all(|&v| v == 1.0));
        assert!(a.blocks[1].b1.iter().all(|&v| v == 0.0));
        assert!(a.blocks[0].wq.iter().all(|&v| v.abs() <= 0.04));
        assert!(a.head_w2.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = ModelParams::<f32>::zeros(&tiny()).unwrap();
        let names = p.names();
        assert_eq!(names[0], "patch_embed.weight");
        assert_eq!(names.last().unwrap(), "head.fc2.bias");
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names.len(), 4 + 16 * 2 + 6);
    }

    #[test]
    fn layer_ids_and_decay_groups() {
        assert_eq!(layer_id("pos_embed", 4), 0);
        assert_eq!(layer_id("blocks.2.attn.q.weight", 4), 3);
        assert_eq!(layer_id("norm.bias", 4), 4);
        assert!(is_no_decay("mask_token", &[8]));
        assert!(is_no_decay("pos_embed", &[4, 8]));
        assert!(!is_no_decay("blocks.0.attn.q.weight", &[8, 8]));
    }

    #[test]
    fn zero_projections_reduce_to_final_norm() {
        let cfg = tiny();
        let mut p = random_params(&cfg, 1, 0.5);
        for b in &mut p.blocks {
            b.wo.fill(0.0);
            b.bo.fill(0.0);
            b.w2.fill(0.0);
            b.b2.fill(0.0);
        }
        let x = random_matrix(8, 8, 2);
        let (out, _) = vit_forward(&p, &x, 4).unwrap();
        let (expect, _) = layer_norm(&x, &p.norm_w, &p.norm_b);
        assert_eq!(out.features, expect);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny();
        let p = random_params(&cfg, 4, 0.8);
        let x = random_matrix(12, 8, 5);
        let (_, cache) = vit_forward(&p, &x, 4).unwrap();
        for l in 0..cfg.layers {
            assert_eq!(cache.attention(l).len(), 3 * cfg.heads);
            for a in cache.attention(l) {
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = tiny();
        let p = random_params(&cfg, 6, 0.5);
        let patches = random_matrix(4, cfg.patch_dim(), 7);
        let perm = [2usize, 0, 3, 1];
        let (base, _) = forward_patches(&p, &patches, &[1]).unwrap();

        let mut pp = p.clone();
        let mut permuted = patches.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pp.pos_embed.row_mut(dst).assign(&p.pos_embed.row(src));
            permuted.row_mut(dst).assign(&patches.row(src));
        }
        // patch 1 moved to position 3
        let (out, _) = forward_patches(&pp, &permuted, &[3]).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in out.features.row(dst).iter().zip(base.features.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.logits.row(dst).iter().zip(base.logits.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn naive_ln(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * w[i] + b[i])
            .collect()
    }

    fn naive_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
    }

    fn mat_vec(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
        (0..w.ncols())
            .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
            .collect()
    }

    /// Element-by-element single-layer, single-head forward with N = 2, D = 2.
    #[test]
    fn single_layer_matches_dense_oracle() {
        let cfg = ModelConfig {
            layers: 1,
            dim: 2,
            heads: 1,
            patch: 1,
            channels: 1,
            tokens: 2,
            vocab: 3,
        };
        let p = random_params(&cfg, 11, 0.9);
        let x = random_matrix(2, 2, 12);
        let (out, _) = vit_forward(&p, &x, 2).unwrap();

        let blk = &p.blocks[0];
        let v = |a: &Array1<f64>| a.to_vec();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| x.row(i).to_vec()).collect();
        let a: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| naive_ln(r, &v(&blk.norm1_w), &v(&blk.norm1_b)))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| mat_vec(r, &blk.wq, &blk.bq)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| mat_vec(r, &blk.wk, &blk.bk)).collect();
        let vv: Vec<Vec<f64>> = a.iter().map(|r| mat_vec(r, &blk.wv, &blk.bv)).collect();
        let mut x1 = Vec::new();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let att: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
            let ctx: Vec<f64> = (0..2)
                .map(|c| att[0] * vv[0][c] + att[1] * vv[1][c])
                .collect();
            let proj = mat_vec(&ctx, &blk.wo, &blk.bo);
            x1.push((0..2).map(|c| rows[i][c] + proj[c]).collect::<Vec<_>>());
        }
        for i in 0..2 {
            let bn = naive_ln(&x1[i], &v(&blk.norm2_w), &v(&blk.norm2_b));
            let h: Vec<f64> = mat_vec(&bn, &blk.w1, &blk.b1)
                .into_iter()
                .map(naive_gelu)
                .collect();
            let m = mat_vec(&h, &blk.w2, &blk.b2);
            let x2: Vec<f64> = (0..2).map(|c| x1[i][c] + m[c]).collect();
            let f = naive_ln(&x2, &v(&p.norm_w), &v(&p.norm_b));
            let hh: Vec<f64> = mat_vec(&f, &p.head_w1, &p.head_b1)
                .into_iter()
                .map(naive_gelu)
                .collect();
            let logits = mat_vec(&hh, &p.head_w2, &p.head_b2);
            for c in 0..2 {
                assert!((out.features[[i, c]] - f[c]).abs() < 1e-12);
            }
            for c in 0..3 {
                assert!((out.logits[[i, c]] - logits[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_linear_and_respects_zero_upstream() {
        let cfg = tiny();
        let p = random_params(&cfg, 13, 0.4);
        let patches = random_matrix(8, cfg.patch_dim(), 14);
        let masked = [1usize, 6];
        let (_, cache) = forward_patches(&p, &patches, &masked).unwrap();
        let dl = random_matrix(8, cfg.vocab, 15);
        let g1 = backward_patches(&p, &patches, &masked, &cache, None, Some(&dl)).unwrap();
        let g2 = backward_patches(&p, &patches, &masked, &cache, None, Some(&(&dl * 2.0))).unwrap();
        for (a, b) in g1.slices().into_iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        let zero = Array2::zeros((8, cfg.vocab));
        let g0 = backward_patches(&p, &patches, &masked, &cache, None, Some(&zero)).unwrap();
        assert!(g0.head_b2.iter().all(|&v| v == 0.0));
        assert_eq!(g0.sq_norm(), 0.0);
    }

    #[test]
    fn missing_head_cache_is_an_error() {
        let cfg = tiny();
        let p = random_params(&cfg, 16, 0.4);
        let x = random_matrix(4, 8, 17);
        let (_, cache) = backbone_forward(&p, &x, 4).unwrap();
        let dl = Array2::zeros((4, cfg.vocab));
        assert!(matches!(
            vit_backward(&p, &cache, None, Some(&dl)),
            Err(Error::MissingCache(_))
        ));
        assert!(vit_backward(&p, &cache, Some(&Array2::ones((4, 8))), None).is_ok());
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let cfg = tiny();
        let mut p = random_params(&cfg, 18, 0.4);
        p.blocks[1].b2[0] = f64::INFINITY;
        let x = random_matrix(4, 8, 19);
        match vit_forward(&p, &x, 4) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, Some(1)),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    /// Central differences on every entry of a tiny model.
    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = tiny();
        let p = random_params(&cfg, 20, 0.6);
        let patches = random_matrix(8, cfg.patch_dim(), 21);
        let masked = [0usize, 5, 7];
        let weights = random_matrix(8, cfg.vocab, 22);
        let fweights = random_matrix(8, cfg.dim, 23);
        let loss = |q: &ModelParams<f64>| -> f64 {
            let (out, _) = forward_patches(q, &patches, &masked).unwrap();
            (&out.logits * &weights).sum() + (&out.features * &fweights).sum()
        };
        let (_, cache) = forward_patches(&p, &patches, &masked).unwrap();
        let g = backward_patches(
            &p,
            &patches,
            &masked,
            &cache,
            Some(&fweights),
            Some(&weights),
        )
        .unwrap();
        let analytic: Vec<f64> = g.slices().into_iter().flatten().copied().collect();
        let total = analytic.len();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in 0..total {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus
                .slices_mut()
                .into_iter()
                .flat_map(|s| s.iter_mut())
                .nth(idx)
                .unwrap() += h;
            *minus
                .slices_mut()
                .into_iter()
                .flat_map(|s| s.iter_mut())
                .nth(idx)
                .unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
