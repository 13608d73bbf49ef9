//! 8-bit PNG previews: axial slices in the fixed [-200, 800] HU display
//! window, sinograms (min-max scaled) and confusion-matrix heatmaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{normalize_hu, VoxelGrid};
use crate::tomo::Sinogram;

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(data).map_err(to_err)?;
    w.finish().map_err(to_err)
}

fn gray(hu: f64) -> u8 {
    (normalize_hu(hu) * 255.0).round() as u8
}

/// Slice `z` rendered top row first (y = 0 at the top).
pub fn slice_pixels(v: &VoxelGrid, z: usize) -> Result<Vec<u8>> {
    let nz = v.dims()[2];
    if z >= nz {
        return Err(Error::invalid(format!(
            "slice {z} out of range (volume has {nz})"
        )));
    }
    Ok(v.slice(z).iter().map(|&h| gray(h)).collect())
}

pub fn write_slice(path: &Path, v: &VoxelGrid, z: usize) -> Result<()> {
    let [nx, ny, _] = v.dims();
    write_png(
        path,
        nx,
        ny,
        png::ColorType::Grayscale,
        &slice_pixels(v, z)?,
    )
}

/// The middle axial slice.
pub fn write_mid_slice(path: &Path, v: &VoxelGrid) -> Result<()> {
    write_slice(path, v, v.dims()[2] / 2)
}

/// Volumes side by side at slice `z` with a 2-pixel black gutter.
pub fn write_panels(path: &Path, vols: &[&VoxelGrid], z: usize) -> Result<()> {
    let Some(first) = vols.first() else {
        return Err(Error::invalid("no volumes to render"));
    };
    let [nx, ny, _] = first.dims();
    if vols.iter().any(|v| v.dims() != first.dims()) {
        return Err(Error::invalid("panel volumes differ in dims"));
    }
    let gutter = 2;
    let width = vols.len() * nx + (vols.len() - 1) * gutter;
    let mut img = vec![0u8; width * ny];
    for (i, v) in vols.iter().enumerate() {
        let px = slice_pixels(v, z)?;
        let x0 = i * (nx + gutter);
        for y in 0..ny {
            img[y * width + x0..y * width + x0 + nx].copy_from_slice(&px[y * nx..(y + 1) * nx]);
        }
    }
    write_png(path, width, ny, png::ColorType::Grayscale, &img)
}

/// One row per angle, one column per detector bin, min-max scaled.
pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    let (lo, hi) = s
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = s
        .data
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    write_png(path, s.bins, s.n_angles, png::ColorType::Grayscale, &px)
}

/// Heatmap of a 5×5 percentage matrix (rows = truth), white at 0 % to dark
/// blue at 100 %, `cell` pixels per entry.
pub fn write_confusion(path: &Path, pct: &[[f64; 5]; 5], cell: usize) -> Result<()> {
    if cell == 0 {
        return Err(Error::invalid("cell size must be >= 1"));
    }
    let side = 5 * cell;
    let mut img = vec![0u8; side * side * 3];
    for (r, row) in pct.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            let f = (p / 100.0).clamp(0.0, 1.0);
            let rgb = [
                (255.0 * (1.0 - f) + 8.0 * f) as u8,
                (255.0 * (1.0 - f) + 48.0 * f) as u8,
                (255.0 * (1.0 - f) + 107.0 * f) as u8,
            ];
            for y in r * cell..(r + 1) * cell {
                for x in c * cell..(c + 1) * cell {
                    img[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    write_png(path, side, side, png::ColorType::Rgb, &img)
}
