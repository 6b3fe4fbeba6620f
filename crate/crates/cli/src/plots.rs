//! Minimal PNG plots for `evaluate --plots`: the projected eye-openness
//! timeline and the frame-to-frame smoothness curve of the first sample.

use std::path::Path;

use image::{Rgb, RgbImage};

use pdt_core::config::RunConfig;
use pdt_core::error::{Error, Result};
use pdt_core::metrics;
use pdt_core::pipeline;
use pdt_core::types::ExpressionSequence;
use pdt_core::Real;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 300;
const MARGIN: u32 = 20;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([150, 150, 150]);
const LINE: Rgb<u8> = Rgb([30, 90, 200]);

pub fn write_plots(cfg: &RunConfig, out: &Path) -> Result<()> {
    let partition = pipeline::load_partition(out)?;
    let sample_path = out.join("samples").join("sample_000.pdt");
    let sampled = ExpressionSequence::new(
        pdt_core::io::read_matrix::<Real>(&sample_path)?,
        cfg.fps,
    )?;

    let axis = metrics::eye_principal_axis(&sampled, &partition)?;
    let eye: Vec<f64> = (0..sampled.frames())
        .map(|i| {
            partition
                .eye
                .iter()
                .zip(axis.iter())
                .map(|(&j, a)| sampled.values()[[i, j]] * a)
                .sum()
        })
        .collect();
    polyline_png(&out.join("plot_eye.png"), &eye)?;

    let smooth = metrics::temporal_smoothness(&sampled)?;
    polyline_png(&out.join("plot_smoothness.png"), &smooth)?;
    Ok(())
}

fn polyline_png(path: &Path, series: &[f64]) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::Invalid("plot needs at least 2 points".into()));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, AXIS);
    }
    for y in MARGIN..HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }

    let to_xy = |i: usize| {
        let fx = i as f64 / (series.len() - 1) as f64;
        let fy = (series[i] - lo) / span;
        let x = MARGIN as f64 + fx * (WIDTH - 2 * MARGIN) as f64;
        let y = (HEIGHT - MARGIN) as f64 - fy * (HEIGHT - 2 * MARGIN) as f64;
        (x, y)
    };
    for i in 0..series.len() - 1 {
        let (x0, y0) = to_xy(i);
        let (x1, y1) = to_xy(i + 1);
        segment(&mut img, x0, y0, x1, y1);
    }

    img.save(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn segment(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, LINE);
        }
    }
}
