use std::path::Path;

use advpit::dsp::{self, MagSpec, StftConfig};
use image::{GrayImage, Luma};

use crate::error::{CliError, Result};

/// Lowest level drawn, relative to the loudest bin in the grid.
pub const DB_FLOOR: f64 = -80.0;
const GAP: u32 = 2;
const GAP_SHADE: u8 = 128;

/// Maps magnitudes to 8-bit gray on a log scale with a fixed floor below `peak`.
pub fn shade(mag: f64, peak: f64) -> u8 {
    if !(peak > 0.0) || !(mag > 0.0) {
        return 0;
    }
    let db = (20.0 * (mag / peak).log10()).clamp(DB_FLOOR, 0.0);
    ((db - DB_FLOOR) / -DB_FLOOR * 255.0).round() as u8
}

/// Renders mix, targets and estimates as a grid: the mix alone on the first
/// row, targets on the second and estimates on the third, one column per
/// source. Time runs left to right and frequency upwards.
pub fn spectrogram_grid(mix: &[f64], targets: &[Vec<f64>], estimates: &[Vec<f64>], cfg: &StftConfig) -> Result<GrayImage> {
    let spec = |x: &[f64]| -> Result<MagSpec> {
        Ok(dsp::stft(x, cfg)?.magnitude())
    };
    let rows: Vec<Vec<MagSpec>> = vec![
        vec![spec(mix)?],
        targets.iter().map(|t| spec(t)).collect::<Result<_>>()?,
        estimates.iter().map(|e| spec(e)).collect::<Result<_>>()?,
    ];
    let first = &rows[0][0];
    let (tw, th) = (first.frames as u32, first.bins as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let peak = rows
        .iter()
        .flatten()
        .flat_map(|m| m.data.iter().copied())
        .fold(0.0, f64::max);
    let width = cols * tw + (cols - 1) * GAP;
    let height = rows.len() as u32 * th + (rows.len() as u32 - 1) * GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([GAP_SHADE]));
    for (r, row) in rows.iter().enumerate() {
        for (c, m) in row.iter().enumerate() {
            let (x0, y0) = (c as u32 * (tw + GAP), r as u32 * (th + GAP));
            for f in 0..m.frames {
                for b in 0..m.bins {
                    let y = y0 + th - 1 - b as u32;
                    img.put_pixel(x0 + f as u32, y, Luma([shade(m.data[f * m.bins + b], peak)]));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::Render {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
