//! Binary PGM (P5) / PPM (P6) reading and PGM writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::data::{Dataset, Image};
use crate::{Error, Result};

fn malformed(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{}: {msg}", path.display()))
}

/// Parses a P5 or P6 file into an image scaled to `[0, 1]`.
pub fn read_netpbm(path: &Path, label: Option<usize>) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;

    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(malformed(path, format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| malformed(path, format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(path, format!("maxval {maxval} out of range")));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * sample_bytes;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| malformed(path, format!("raster needs {need} bytes")))?;

    let mut pixels = Array3::zeros((channels, height, width));
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let i = ((y * width + x) * channels + c) * sample_bytes;
                let raw = if sample_bytes == 1 {
                    raster[i] as u32
                } else {
                    u16::from_be_bytes([raster[i], raster[i + 1]]) as u32
                };
                pixels[[c, y, x]] = (raw.min(maxval as u32) as f32) / maxval as f32;
            }
        }
    }
    Image::new(pixels, label)
}

/// Loads every `.ppm`/`.pgm` file under `dir`. Files inside a numeric
/// subdirectory take that number as their label; top-level files are
/// unlabeled. Entries are sorted by path for a stable order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut entries: Vec<(std::path::PathBuf, Option<usize>)> = Vec::new();
    let is_pnm = |p: &Path| {
        matches!(
            p.extension().and_then(|e| e.to_str()),
            Some("ppm" | "pgm" | "pnm")
        )
    };
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            let label = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse().ok());
            for inner in fs::read_dir(&path)? {
                let p = inner?.path();
                if is_pnm(&p) {
                    entries.push((p, label));
                }
            }
        } else if is_pnm(&path) {
            entries.push((path, None));
        }
    }
    entries.sort();
    entries
        .iter()
        .map(|(p, label)| read_netpbm(p, *label))
        .collect()
}

/// Loads a labeled image directory as a dataset: every fifth image (by
/// sorted path) goes to the test split. Images must be `size`×`size` with
/// `channels` channels.
pub fn load_dataset_dir(dir: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let images = load_image_dir(dir)?;
    if images.is_empty() {
        return Err(Error::config(
            "data.dir",
            format!("no PPM/PGM images under {}", dir.display()),
        ));
    }
    for (i, img) in images.iter().enumerate() {
        if img.height() != size || img.width() != size || img.channels() != channels {
            return Err(Error::config(
                "data.dir",
                format!(
                    "image {i} is {}x{}x{}, expected {channels}x{size}x{size}",
                    img.channels(),
                    img.height(),
                    img.width()
                ),
            ));
        }
    }
    let classes = images
        .iter()
        .filter_map(|i| i.label)
        .max()
        .map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, img) in images.into_iter().enumerate() {
        if i % 5 == 4 {
            test.push(img);
        } else {
            train.push(img);
        }
    }
    Ok(Dataset {
        train,
        test,
        classes,
    })
}

/// Writes a 16-bit binary PGM where pixel = round(value · 65535), values
/// clamped to `[0, 1]`.
pub fn write_pgm16(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let mut out = Vec::with_capacity(32 + h * w * 2);
    write!(out, "P5\n# scale 65535\n{w} {h}\n65535\n")?;
    for v in values.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads back a PGM written by [`write_pgm16`] (or any P5) as `[0, 1]` values.
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let img = read_netpbm(path, None)?;
    if img.channels() != 1 {
        return Err(malformed(path, "expected a single-channel PGM"));
    }
    let (_, h, w) = img.pixels.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.pixels[[0, y, x]] as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_parse() {
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 51, 255]);
        fs::write(&ppm, bytes).unwrap();
        let img = read_netpbm(&ppm, Some(2)).unwrap();
        assert_eq!(img.pixels.dim(), (3, 1, 2));
        assert_eq!(img.pixels[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels[[1, 0, 1]], 0.2);
        assert_eq!(img.label, Some(2));

        let sub = dir.path().join("1");
        fs::create_dir(&sub).unwrap();
        fs::write(sub.join("b.pgm"), b"P5 1 1 255 \x80").unwrap();
        let all = load_image_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        // "1/b.pgm" sorts before "a.ppm"
        assert_eq!(all[0].label, Some(1));
        assert_eq!(all[0].channels(), 1);
        assert_eq!(all[1].label, None);
    }

    #[test]
    fn truncated_raster_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5 4 4 255\n\x00\x00").unwrap();
        assert!(read_netpbm(&p, None).is_err());
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        let v = Array2::from_shape_vec((2, 2), vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        write_pgm16(&p, &v).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in v.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
