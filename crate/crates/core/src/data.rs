//! Toy images, patch sequences and training augmentations.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// A `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
    pub label: Option<usize>,
}

impl Image {
    pub fn new(pixels: Array3<f32>, label: Option<usize>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image {c}x{h}x{w}")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { pixels, label })
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// An image cut into `rows × cols` square patches, each flattened row-major
/// and channel-last: element `(py * P + px) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array2<f32>,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

pub fn patchify(img: &Image, patch: usize) -> Result<PatchGrid> {
    let (c, h, w) = img.pixels.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image height {h} and width {w} must be divisible by patch size {patch}"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut patches = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for q in 0..cols {
            let mut row = patches.row_mut(r * cols + q);
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        row[(py * patch + px) * c + ch] =
                            img.pixels[[ch, r * patch + py, q * patch + px]];
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        patch_size: patch,
        channels: c,
    })
}

pub fn unpatchify(pg: &PatchGrid) -> Array3<f32> {
    let p = pg.patch_size;
    let c = pg.channels;
    let mut pixels = Array3::zeros((c, pg.rows * p, pg.cols * p));
    for r in 0..pg.rows {
        for q in 0..pg.cols {
            let row = pg.patches.row(r * pg.cols + q);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        pixels[[ch, r * p + py, q * p + px]] = row[(py * p + px) * c + ch];
                    }
                }
            }
        }
    }
    pixels
}

/// Parameters of one random-resized-crop + flip draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Fraction of the image area kept by the crop, in `[0.67, 1]`.
    pub scale: f32,
    /// Crop placement within the free margin, each in `[0, 1]`.
    pub offset_y: f32,
    pub offset_x: f32,
    pub flip: bool,
}

pub const MIN_CROP_SCALE: f32 = 0.67;

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        offset_y: 0.0,
        offset_x: 0.0,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            scale: rng.random_range(MIN_CROP_SCALE..=1.0),
            offset_y: rng.random_range(0.0..=1.0),
            offset_x: rng.random_range(0.0..=1.0),
            flip: rng.random_bool(0.5),
        }
    }
}

pub fn augment_train<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    augment_with(img, AugmentParams::sample(rng))
}

/// Square-aspect crop covering `scale` of the area, resized back bilinearly,
/// then an optional horizontal flip.
pub fn augment_with(img: &Image, aug: AugmentParams) -> Image {
    let (c, h, w) = img.pixels.dim();
    let side = aug.scale.clamp(0.0, 1.0).sqrt();
    let (ch_, cw) = (side * h as f32, side * w as f32);
    let y0 = (h as f32 - ch_) * aug.offset_y.clamp(0.0, 1.0);
    let x0 = (w as f32 - cw) * aug.offset_x.clamp(0.0, 1.0);
    let sy = ch_ / h as f32;
    let sx = cw / w as f32;

    let sample_axis = |dst: usize, origin: f32, step: f32, len: usize| -> (usize, usize, f32) {
        let src = (origin + (dst as f32 + 0.5) * step - 0.5).clamp(0.0, (len - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f32)
    };

    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        let (y_lo, y_hi, fy) = sample_axis(y, y0, sy, h);
        for x in 0..w {
            let (x_lo, x_hi, fx) = sample_axis(x, x0, sx, w);
            let dst_x = if aug.flip { w - 1 - x } else { x };
            for ch in 0..c {
                let p = &img.pixels;
                let top = p[[ch, y_lo, x_lo]] + (p[[ch, y_lo, x_hi]] - p[[ch, y_lo, x_lo]]) * fx;
                let bot = p[[ch, y_hi, x_lo]] + (p[[ch, y_hi, x_hi]] - p[[ch, y_hi, x_lo]]) * fx;
                out[[ch, y, dst_x]] = (top + (bot - top) * fy).clamp(0.0, 1.0);
            }
        }
    }
    Image {
        pixels: out,
        label: img.label,
    }
}

/// Shape drawn in toy images; the class id is the shape index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Disc,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
    ];

    /// Whether offset `(dy, dx)` from the centre, in units of the radius,
    /// lies inside the shape.
    fn contains(self, dy: f32, dx: f32) -> bool {
        match self {
            Shape::Disc => dy * dy + dx * dx <= 1.0,
            Shape::Square => dy.abs() <= 0.8 && dx.abs() <= 0.8,
            Shape::Triangle => dy <= 0.8 && dy >= -1.0 && dx.abs() <= (dy + 1.0) * 0.5,
            Shape::Cross => {
                (dy.abs() <= 0.3 && dx.abs() <= 1.0) || (dx.abs() <= 0.3 && dy.abs() <= 1.0)
            }
            Shape::Ring => {
                let r2 = dy * dy + dx * dx;
                (0.36..=1.0).contains(&r2)
            }
            Shape::Diamond => dy.abs() + dx.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
    pub classes: usize,
}

/// Procedural light shapes on a dark background. Image `i` of each split has
/// class `i mod classes`, so splits whose size is a multiple of `classes` are
/// exactly balanced.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > Shape::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..={}, got {}",
            Shape::ALL.len(),
            spec.classes
        )));
    }
    if spec.patch_size == 0 || spec.image_size == 0 || spec.image_size % spec.patch_size != 0 {
        return Err(Error::config(
            "data.image_size",
            format!(
                "image size {} is not divisible by patch size {}",
                spec.image_size, spec.patch_size
            ),
        ));
    }
    if spec.channels == 0 {
        return Err(Error::config("data.channels", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |n: usize| -> Vec<Image> {
        (0..n)
            .map(|i| {
                let label = i % spec.classes;
                render_toy_image(
                    &mut rng,
                    Shape::ALL[label],
                    spec.image_size,
                    spec.channels,
                    label,
                )
            })
            .collect()
    };
    let train = split(spec.n_train);
    let test = split(spec.n_test);
    Ok(Dataset {
        train,
        test,
        classes: spec.classes,
    })
}

const BACKGROUND: f32 = 0.2;
const FOREGROUND: f32 = 0.9;

fn render_toy_image<R: Rng>(
    rng: &mut R,
    shape: Shape,
    size: usize,
    channels: usize,
    label: usize,
) -> Image {
    let s = size as f32;
    // Fixed grey levels: the only content is geometry, so predicting a masked
    // patch means completing the outlines around it.
    let mut pixels = Array3::from_elem((channels, size, size), BACKGROUND);
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let radius = rng.random_range(0.2 * s..0.35 * s);
        let cy = rng.random_range(radius * 0.6..s - radius * 0.6);
        let cx = rng.random_range(radius * 0.6..s - radius * 0.6);
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f32 + 0.5 - cy) / radius;
                let dx = (x as f32 + 0.5 - cx) / radius;
                if shape.contains(dy, dx) {
                    for ch in 0..channels {
                        pixels[[ch, y, x]] = FOREGROUND;
                    }
                }
            }
        }
    }
    Image {
        pixels,
        label: Some(label),
    }
}

/// Stacks the patch rows of several grids into one `(B·N)×(C·P²)` matrix.
pub fn stack_patches(grids: &[PatchGrid]) -> Result<Array2<f32>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (n, d) = first.patches.dim();
    let mut out = Array2::zeros((n * grids.len(), d));
    for (b, g) in grids.iter().enumerate() {
        if g.patches.dim() != (n, d) {
            return Err(Error::Shape(format!(
                "batch item {b} has patch matrix {:?}, expected {:?}",
                g.patches.dim(),
                (n, d)
            )));
        }
        out.slice_mut(ndarray::s![b * n..(b + 1) * n, ..])
            .assign(&g.patches);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> ToyDatasetSpec {
        ToyDatasetSpec {
            seed,
            n_train: 512,
            n_test: 128,
            classes: 4,
            image_size: 32,
            patch_size: 8,
            channels: 3,
        }
    }

    fn checksum(ds: &Dataset) -> u64 {
        ds.train
            .iter()
            .chain(&ds.test)
            .flat_map(|im| im.pixels.iter())
            .fold(0xcbf29ce484222325u64, |h, v| {
                (h ^ v.to_bits() as u64).wrapping_mul(0x100000001b3)
            })
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = generate_toy_dataset(&spec(1)).unwrap();
        assert_eq!(a.train.len(), 512);
        assert_eq!(a.test.len(), 128);
        for class in 0..4 {
            let n = a.train.iter().filter(|im| im.label == Some(class)).count();
            assert_eq!(n, 128);
        }
        let b = generate_toy_dataset(&spec(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(&spec(2)).unwrap();
        assert_ne!(checksum(&a), checksum(&c));
        for im in a.train.iter().take(16) {
            assert!(im.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn indivisible_image_size_is_a_config_error() {
        let mut s = spec(1);
        s.image_size = 30;
        assert!(matches!(
            generate_toy_dataset(&s),
            Err(Error::Config { ref key, .. }) if key == "data.image_size"
        ));
    }

    #[test]
    fn patch_grid_geometry() {
        let img = Image::new(Array3::from_elem((3, 32, 32), 0.25), None).unwrap();
        let pg = patchify(&img, 8).unwrap();
        assert_eq!((pg.len(), pg.rows, pg.cols), (16, 4, 4));
        assert!(pg.patches.iter().all(|&v| v == 0.25));

        let big = Image::new(Array3::zeros((3, 224, 224)), None).unwrap();
        assert_eq!(patchify(&big, 16).unwrap().len(), 196);
    }

    #[test]
    fn patch_layout_is_channel_last_row_major() {
        let mut px = Array3::zeros((2, 4, 4));
        px[[1, 2, 3]] = 0.5;
        let pg = patchify(&Image::new(px, None).unwrap(), 2).unwrap();
        // pixel (y=2, x=3) lives in patch (1, 1), local (0, 1)
        let (dy, dx, c) = (0, 1, 1);
        assert_eq!(pg.patches[[3, (dy * 2 + dx) * 2 + c]], 0.5);
    }

    #[test]
    fn indivisible_patchify_names_dims() {
        let img = Image::new(Array3::zeros((1, 10, 12)), None).unwrap();
        let err = patchify(&img, 4).unwrap_err().to_string();
        assert!(
            err.contains("10") && err.contains("12") && err.contains('4'),
            "{err}"
        );
    }

    #[test]
    fn identity_and_flip_augmentations() {
        let ds = generate_toy_dataset(&ToyDatasetSpec {
            n_train: 4,
            n_test: 0,
            ..spec(3)
        })
        .unwrap();
        let img = &ds.train[1];
        assert_eq!(&augment_with(img, AugmentParams::IDENTITY), img);

        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = augment_with(img, flip);
        assert_ne!(&once, img);
        assert_eq!(once.pixels[[0, 5, 0]], img.pixels[[0, 5, 31]]);
        assert_eq!(&augment_with(&once, flip), img);
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let ds = generate_toy_dataset(&ToyDatasetSpec {
            n_train: 8,
            n_test: 0,
            ..spec(4)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for img in &ds.train {
            for _ in 0..8 {
                let out = augment_train(img, &mut rng);
                assert_eq!(out.pixels.dim(), img.pixels.dim());
                assert_eq!(out.label, img.label);
                assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
