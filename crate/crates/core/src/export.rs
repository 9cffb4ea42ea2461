//! Binary PPM (P6) images and small CSV helpers.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Class colours: empty gray, wall white, lava cyan, lawn purple, then extras.
pub const PALETTE: [[u8; 3]; 8] = [
    [128, 128, 128],
    [255, 255, 255],
    [0, 200, 220],
    [150, 60, 200],
    [230, 160, 30],
    [40, 160, 60],
    [200, 40, 40],
    [30, 30, 30],
];

/// Write an RGB image, each cell blown up to `scale x scale` pixels.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]], scale: usize) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::ShapeMismatch { expected: format!("{}", width * height), got: format!("{}", rgb.len()) });
    }
    let scale = scale.max(1);
    let (w, h) = (width * scale, height * scale);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            buf.extend_from_slice(&rgb[(y / scale) * width + x / scale]);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_label_ppm(path: &Path, width: usize, height: usize, labels: &[usize], scale: usize) -> Result<()> {
    let rgb: Vec<[u8; 3]> = labels.iter().map(|&k| PALETTE[k % PALETTE.len()]).collect();
    write_ppm(path, width, height, &rgb, scale)
}

/// Grayscale heat map normalised to the finite range of `values`; brighter is
/// higher. Non-finite cells are drawn red.
pub fn write_heatmap_ppm(path: &Path, width: usize, height: usize, values: &[f64], scale: usize) -> Result<()> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rgb: Vec<[u8; 3]> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                let g = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            } else {
                [200, 0, 0]
            }
        })
        .collect();
    write_ppm(path, width, height, &rgb, scale)
}

/// Write `contents` to `path`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        write_label_ppm(&p, 3, 2, &[0, 1, 2, 3, 0, 1], 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P6\n6 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 6 * 4 * 3);
    }
}
