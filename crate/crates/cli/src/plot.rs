//! PNG scatter of chain state against ground truth.

use std::path::Path;

use odm_core::dataset::{BBOX_CHANNELS, CENTER_CHANNELS};
use odm_core::{Mat64, OdmError, Result};
use plotters::prelude::*;

const PANEL: u32 = 420;

/// `(truth, state)` x- and y-coordinate pairs over bbox corners and center.
fn coordinate_pairs(truth: &Mat64, state: &Mat64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let channels = BBOX_CHANNELS.chain(CENTER_CHANNELS);
    for c in channels {
        let target = if c % 2 == 0 { &mut xs } else { &mut ys };
        for t in 0..truth.rows() {
            target.push((truth.get(t, c), state.get(t, c)));
        }
    }
    (xs, ys)
}

/// Mean perpendicular distance of `(a, b)` points to the line `a = b`.
pub fn mean_diagonal_distance(points: &[(f64, f64)]) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|(a, b)| (a - b).abs() / std::f64::consts::SQRT_2)
        .sum();
    sum / points.len().max(1) as f64
}

fn draw_panel(
    area: &DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>,
    points: &[(f64, f64)],
) -> Result<()> {
    let plot_err = |e: String| OdmError::argument(format!("plot: {e}"));
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.2).max(10.0);
    let (lo, hi) = (lo - pad, hi + pad);
    let mut chart = ChartBuilder::on(area)
        .margin(12)
        .build_cartesian_2d(lo..hi, lo..hi)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new([(lo, lo), (hi, hi)], BLACK.mix(0.6)))
        .map_err(|e| plot_err(e.to_string()))?;
    let clip = |v: f64| v.clamp(lo, hi);
    chart
        .draw_series(
            points
                .iter()
                .map(|&(a, b)| Circle::new((a, clip(b)), 3, BLUE.mix(0.7).filled())),
        )
        .map_err(|e| plot_err(e.to_string()))?;
    area.draw(&Rectangle::new(
        [(0, 0), (PANEL as i32 - 1, PANEL as i32 - 1)],
        BLACK.stroke_width(1),
    ))
    .map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Two panels (x coordinates left, y right): ground truth on the horizontal
/// axis, chain state on the vertical. Returns the mean distance to the
/// diagonal over both panels, in pixels.
pub fn denoise_scatter(path: &Path, truth: &Mat64, state: &Mat64) -> Result<f64> {
    let (xs, ys) = coordinate_pairs(truth, state);
    {
        let root = BitMapBackend::new(path, (2 * PANEL, PANEL)).into_drawing_area();
        root.fill(&WHITE)
            .map_err(|e| OdmError::argument(format!("plot: {e}")))?;
        let (left, right) = root.split_horizontally(PANEL);
        draw_panel(&left, &xs)?;
        draw_panel(&right, &ys)?;
        root.present().map_err(|e| OdmError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    let all: Vec<(f64, f64)> = xs.into_iter().chain(ys).collect();
    Ok(mean_diagonal_distance(&all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_distance() {
        assert_eq!(mean_diagonal_distance(&[(1.0, 1.0), (5.0, 5.0)]), 0.0);
        let d = mean_diagonal_distance(&[(0.0, 2.0)]);
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
