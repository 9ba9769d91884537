//! Ablation curves (SVG) and partition / prediction images (PNG).

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use apanet_core::backbone::extract_features;
use apanet_core::data::Episode;
use apanet_core::head::{infer, Model};
use apanet_core::prototypes::{kmeans_partition, remove_foreground, spp_partition, PartitionMasks};
use apanet_core::{ChaCha8Rng, Mask, Tensor3};
use plotters::prelude::*;

use crate::ablation::AblationReport;
use crate::error::{Error, Result};

/// Writes one `<stem>.svg` per report: median mIoU per cell with IQR bars.
pub fn emit_plots(reports: &[AblationReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Core(apanet_core::Error::Contract("no reports to plot".into())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    reports
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.svg", r.stem()));
            curve(r, &path).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

fn curve(report: &AblationReport, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let xs: Vec<f64> = report.cells.iter().map(|c| c.x).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let pad = ((hi - lo) * 0.08).max(0.1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} (fold {}, {}-shot)", report.suite.name(), report.fold, report.k_shot), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0.0..1.0)?;
    chart.configure_mesh().y_desc("novel mIoU").x_desc(x_axis_name(report)).draw()?;
    let points: Vec<(f64, f64)> = report.cells.iter().filter_map(|c| Some((c.x, c.median?))).collect();
    chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
    chart.draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))?;
    for c in &report.cells {
        if let (Some(q1), Some(q3)) = (c.q1, c.q3) {
            chart.draw_series(std::iter::once(PathElement::new(vec![(c.x, q1), (c.x, q3)], BLACK)))?;
        }
    }
    root.present()?;
    Ok(())
}

fn x_axis_name(report: &AblationReport) -> String {
    let labels: Vec<String> = report.cells.iter().map(|c| format!("{}: {}", c.x, c.cell)).collect();
    labels.join(", ")
}

/// Distinct colours for partition regions; foreground is drawn black.
pub const REGION_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Colour image of a feature-grid partition, each cell upscaled to a
/// `scale × scale` block. Cells in no region (the removed foreground) are
/// black.
pub fn partition_overlay(partition: &PartitionMasks, scale: usize) -> Result<RgbImage> {
    let Some(first) = partition.masks.first() else {
        return Err(Error::Core(apanet_core::Error::Contract("empty partition".into())));
    };
    let (h, w) = first.dims();
    let labels = partition.label_map();
    let mut img = RgbImage::new(h * scale, w * scale);
    for i in 0..h * scale {
        for j in 0..w * scale {
            let px = match labels[(i / scale) * w + j / scale] {
                Some(r) => REGION_COLORS[r % REGION_COLORS.len()],
                None => [0, 0, 0],
            };
            img.set(i, j, px);
        }
    }
    Ok(img)
}

/// Plain 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width * 3] }
    }

    pub fn get(&self, i: usize, j: usize) -> [u8; 3] {
        let k = (i * self.width + j) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set(&mut self, i: usize, j: usize, px: [u8; 3]) {
        let k = (i * self.width + j) * 3;
        self.data[k..k + 3].copy_from_slice(&px);
    }

    pub fn from_tensor(t: &Tensor3) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::Core(apanet_core::Error::Shape("expected a 3-channel image".into())));
        }
        let mut img = Self::new(t.height(), t.width());
        for i in 0..t.height() {
            for j in 0..t.width() {
                let c = t.cell(i, j);
                img.set(i, j, [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
        Ok(img)
    }

    pub fn from_mask(m: &Mask) -> Self {
        let (h, w) = m.dims();
        let mut img = Self::new(h, w);
        for i in 0..h {
            for j in 0..w {
                img.set(i, j, if m.get(i, j) { [255; 3] } else { [0; 3] });
            }
        }
        img
    }

    /// Places `tiles` left to right with a `gap`-pixel grey separator.
    pub fn hstack(tiles: &[RgbImage], gap: usize) -> Self {
        let height = tiles.iter().map(|t| t.height).max().unwrap_or(0);
        let width = tiles.iter().map(|t| t.width).sum::<usize>() + gap * tiles.len().saturating_sub(1);
        let mut out = Self::new(height, width);
        out.data.fill(128);
        let mut x0 = 0;
        for t in tiles {
            for i in 0..t.height {
                for j in 0..t.width {
                    out.set(i, x0 + j, t.get(i, j));
                }
            }
            x0 += t.width + gap;
        }
        out
    }

    /// Places `rows` top to bottom with a `gap`-pixel grey separator.
    pub fn vstack(rows: &[RgbImage], gap: usize) -> Self {
        let width = rows.iter().map(|t| t.width).max().unwrap_or(0);
        let height = rows.iter().map(|t| t.height).sum::<usize>() + gap * rows.len().saturating_sub(1);
        let mut out = Self::new(height, width);
        out.data.fill(128);
        let mut y0 = 0;
        for t in rows {
            for i in 0..t.height {
                for j in 0..t.width {
                    out.set(y0 + i, j, t.get(i, j));
                }
            }
            y0 += t.height + gap;
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| png_error(path, e))?;
        w.write_image_data(&self.data).map_err(|e| png_error(path, e))?;
        w.finish().map_err(|e| png_error(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = png::Decoder::new(std::io::BufReader::new(file))
            .read_info()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
        }
        buf.truncate(info.buffer_size());
        Ok(Self { height: info.height as usize, width: info.width as usize, data: buf })
    }
}

fn png_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Query image, ground truth, and the background partitions used for
/// class-agnostic prototypes: k-means with `clusters` regions followed by
/// each SPP level in `spp_levels`, all with the foreground removed.
pub fn partition_figure(episode: &Episode, model: &Model, clusters: usize, iters: usize, spp_levels: &[usize], rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    let (h, w) = model.feature_size();
    let scale = model.backbone.config.stride;
    let pack = extract_features(&episode.query.image, &episode.query.mask, &model.backbone)?;
    let mut tiles = vec![RgbImage::from_tensor(&episode.query.image)?, RgbImage::from_mask(&episode.query.mask)];
    let km = kmeans_partition(&pack.high, clusters, iters, rng)?;
    tiles.push(partition_overlay(&remove_foreground(&km, &pack.mask)?, scale)?);
    for &a in spp_levels {
        let spp = spp_partition(h, w, a)?;
        tiles.push(partition_overlay(&remove_foreground(&spp, &pack.mask)?, scale)?);
    }
    Ok(RgbImage::hstack(&tiles, 2))
}

/// One row per episode: support image, support mask, query image, query
/// ground truth, prediction.
pub fn prediction_grid(episodes: &[Episode], model: &Model) -> Result<RgbImage> {
    let rows = episodes
        .iter()
        .map(|ep| {
            let support: Vec<_> = ep.support.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
            let pred = infer(&support, &ep.query.image, model)?;
            Ok(RgbImage::hstack(
                &[
                    RgbImage::from_tensor(&ep.support[0].image)?,
                    RgbImage::from_mask(&ep.support[0].mask),
                    RgbImage::from_tensor(&ep.query.image)?,
                    RgbImage::from_mask(&ep.query.mask),
                    RgbImage::from_mask(&pred),
                ],
                2,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RgbImage::vstack(&rows, 2))
}
