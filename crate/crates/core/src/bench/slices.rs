//! Density slices: scatter files and 2-D histogram rasters of the
//! transported mass over the first two coordinates.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::SliceSpec;
use super::{write_file, BenchError};
use crate::densities::GaussianMixture;
use crate::fields::{FieldPair, Trainable};
use crate::lagrangian::{fmt17, Integrator, SourceMode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Random stream used for slice samples.
pub const SLICE_STREAM: u64 = 3;

/// Samples pushed through one tape at a time.
const CHUNK: usize = 2048;

/// Largest refinement of the integration grid tried when aligning slice times.
const MAX_REFINE: usize = 64;

/// Everything needed to push samples along trained fields.
#[derive(Debug, Clone, Copy)]
pub struct SliceSource<'a> {
    pub fields: &'a FieldPair,
    pub rho0: &'a GaussianMixture,
    pub source: SourceMode,
    /// Integration steps used during training.
    pub steps: usize,
    pub seed: u64,
}

/// Sidecar of one raster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceSummary {
    pub time: f64,
    pub raster: String,
    pub scatter: String,
    /// `[[x_lo, x_hi], [y_lo, y_hi]]`
    pub bounds: [[f64; 2]; 2],
    /// Columns and rows.
    pub bins: [usize; 2],
    pub samples: usize,
    pub integration_steps: usize,
    pub row_order: &'static str,
    pub levels: &'static str,
    pub max_bin_mass: f64,
    pub mass_in_bounds: f64,
    pub total_mass: f64,
    /// Mass-weighted mean of the cell centers.
    pub centroid: Option<[f64; 2]>,
    /// Column and row of the heaviest cell.
    pub peak_cell: Option<[usize; 2]>,
    pub empty: bool,
}

/// Bounds covering both densities along the first two coordinates:
/// component means plus or minus four standard deviations.
pub fn auto_bounds(rho0: &GaussianMixture, rho1: &GaussianMixture) -> [[f64; 2]; 2] {
    let mut b = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
    for c in rho0.components().iter().chain(rho1.components()) {
        for k in 0..c.mean.len().min(2) {
            let s = 4.0 * c.variance[k].sqrt();
            b[k][0] = b[k][0].min(c.mean[k] - s);
            b[k][1] = b[k][1].max(c.mean[k] + s);
        }
    }
    if rho0.dim() < 2 {
        b[1] = [-0.5, 0.5];
    }
    b
}

/// Smallest multiple of `steps` on whose grid every time is a node.
pub fn aligned_steps(times: &[f64], steps: usize) -> Option<usize> {
    (1..=MAX_REFINE).map(|k| k * steps).find(|&n| {
        times.iter().all(|t| {
            let j = t * n as f64;
            (j - j.round()).abs() < 1e-9
        })
    })
}

/// Histogram of weighted points; row 0 holds the largest second coordinate.
pub fn histogram(xy: &[[f64; 2]], weights: &[f64], bounds: [[f64; 2]; 2], bins: [usize; 2]) -> Vec<f64> {
    let [nx, ny] = bins;
    let mut cells = vec![0.0; nx * ny];
    let locate = |v: f64, [lo, hi]: [f64; 2], n: usize| -> Option<usize> {
        if !(lo..=hi).contains(&v) {
            return None;
        }
        Some((((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
    };
    for (p, w) in xy.iter().zip(weights) {
        if let (Some(c), Some(r)) = (locate(p[0], bounds[0], nx), locate(p[1], bounds[1], ny)) {
            cells[(ny - 1 - r) * nx + c] += w;
        }
    }
    cells
}

/// Binary portable graymap, 256 levels, scaled so the heaviest cell is 255.
pub fn pgm(cells: &[f64], bins: [usize; 2]) -> Vec<u8> {
    let max = cells.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", bins[0], bins[1]).into_bytes();
    out.extend(cells.iter().map(|&m| {
        if max > 0.0 {
            (255.0 * m / max).round() as u8
        } else {
            0
        }
    }));
    out
}

fn summarize(cells: &[f64], bounds: [[f64; 2]; 2], bins: [usize; 2]) -> (f64, f64, Option<[f64; 2]>, Option<[usize; 2]>) {
    let [nx, ny] = bins;
    let wx = (bounds[0][1] - bounds[0][0]) / nx as f64;
    let wy = (bounds[1][1] - bounds[1][0]) / ny as f64;
    let (mut total, mut cx, mut cy, mut max) = (0.0, 0.0, 0.0, 0.0);
    let mut peak = None;
    for r in 0..ny {
        for c in 0..nx {
            let m = cells[r * nx + c];
            total += m;
            cx += m * (bounds[0][0] + (c as f64 + 0.5) * wx);
            cy += m * (bounds[1][1] - (r as f64 + 0.5) * wy);
            if m > max {
                max = m;
                peak = Some([c, r]);
            }
        }
    }
    let centroid = (total > 0.0).then(|| [cx / total, cy / total]);
    (max, total, centroid, peak)
}

fn file_stem(t: f64) -> String {
    format!("slice_t{t:.3}")
}

/// Pushes `spec.samples` reference samples along the fields and writes, for
/// each requested time, `slice_t<time>.csv` (first two coordinates, density
/// and per-sample mass), `slice_t<time>.pgm` and `slice_t<time>.json`.
pub fn export_slices(
    src: SliceSource<'_>,
    spec: &SliceSpec,
    bounds: [[f64; 2]; 2],
    dir: &Path,
) -> Result<Vec<SliceSummary>, BenchError> {
    let n_steps = aligned_steps(&spec.times, src.steps).ok_or_else(|| {
        BenchError::Config(vec![format!(
            "slices.times: not all times fall on a refinement of the {}-step grid",
            src.steps
        )])
    })?;
    let d = src.rho0.dim();
    let n = spec.samples;
    let nodes: Vec<usize> = spec.times.iter().map(|t| (t * n_steps as f64).round() as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
    rng.set_stream(SLICE_STREAM);
    let points = src.rho0.sample(n, &mut rng).points;

    // per time: (x, y), log rho, per-sample mass
    let mut xy = vec![Vec::with_capacity(n); nodes.len()];
    let mut log_rho = vec![Vec::with_capacity(n); nodes.len()];
    let mut mass = vec![Vec::with_capacity(n); nodes.len()];
    for start in (0..n).step_by(CHUNK) {
        let rows = CHUNK.min(n - start);
        let chunk = Tensor::matrix(rows, d, points.data()[start * d..(start + rows) * d].to_vec());
        let mut tape = Tape::new();
        let mut bound = src.fields.bind(&mut tape, Trainable::NONE).map_err(|e| BenchError::Numerical(e.to_string()))?;
        let bundle = Integrator::new(src.rho0, n_steps)
            .with_source(src.source)
            .integrate(&mut tape, &mut bound, &chunk)
            .map_err(|e| BenchError::Numerical(e.to_string()))?;
        for (k, &j) in nodes.iter().enumerate() {
            let z = tape.value(bundle.z[j]).data();
            for i in 0..rows {
                let y = if d > 1 { z[i * d + 1] } else { 0.0 };
                xy[k].push([z[i * d], y]);
            }
            log_rho[k].extend_from_slice(tape.value(bundle.log_rho[j]).data());
            mass[k].extend(tape.value(bundle.log_ratio[j]).data().iter().map(|l| l.exp() / n as f64));
        }
    }

    let bins = if d > 1 { spec.bins } else { [spec.bins[0], 1] };
    let mut out = Vec::with_capacity(nodes.len());
    for (k, &t) in spec.times.iter().enumerate() {
        let stem = file_stem(t);
        let mut csv = String::from("sample_id,x_1,x_2,rho,mass\n");
        for i in 0..n {
            let [x, y] = xy[k][i];
            writeln!(
                csv,
                "{i},{},{},{},{}",
                fmt17(x),
                fmt17(y),
                fmt17(log_rho[k][i].exp()),
                fmt17(mass[k][i])
            )
            .expect("writing to a string");
        }
        let cells = histogram(&xy[k], &mass[k], bounds, bins);
        let (max, in_bounds, centroid, peak) = summarize(&cells, bounds, bins);
        let empty = max <= 0.0;
        if empty {
            warn!("slice at t = {t}: no mass inside bounds {bounds:?}; raster is all zero");
        }
        let summary = SliceSummary {
            time: t,
            raster: format!("{stem}.pgm"),
            scatter: format!("{stem}.csv"),
            bounds,
            bins,
            samples: n,
            integration_steps: n_steps,
            row_order: "row-major, first row at the upper bound of the second coordinate",
            levels: "round(255 * bin_mass / max_bin_mass)",
            max_bin_mass: max,
            mass_in_bounds: in_bounds,
            total_mass: mass[k].iter().sum(),
            centroid,
            peak_cell: peak,
            empty,
        };
        write_file(&dir.join(format!("{stem}.csv")), csv)?;
        write_file(&dir.join(format!("{stem}.pgm")), pgm(&cells, bins))?;
        write_file(&dir.join(format!("{stem}.json")), crate::json::to_string_pretty(&summary))?;
        out.push(summary);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_steps_examples() {
        let quarters = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert_eq!(aligned_steps(&quarters, 10), Some(20));
        assert_eq!(aligned_steps(&quarters, 8), Some(8));
        assert_eq!(aligned_steps(&[1.0 / 3.0], 10), Some(30));
        assert_eq!(aligned_steps(&[0.1234567], 10), None);
    }

    #[test]
    fn histogram_layout() {
        let bounds = [[0.0, 2.0], [0.0, 2.0]];
        let cells = histogram(&[[0.5, 0.5], [1.5, 1.5], [1.5, 1.9], [3.0, 0.0]], &[1.0, 2.0, 3.0, 9.0], bounds, [2, 2]);
        // top row is the upper half of y
        assert_eq!(cells, vec![0.0, 5.0, 1.0, 0.0]);
        let (max, total, centroid, peak) = summarize(&cells, bounds, [2, 2]);
        assert_eq!((max, total, peak), (5.0, 6.0, Some([1, 0])));
        let c = centroid.unwrap();
        assert!((c[0] - (0.5 + 5.0 * 1.5) / 6.0).abs() < 1e-15);
        assert!((c[1] - (0.5 + 5.0 * 1.5) / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pgm_scaling() {
        let img = pgm(&[0.0, 1.0, 2.0, 4.0], [2, 2]);
        assert!(img.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&img[img.len() - 4..], &[0, 64, 128, 255]);
        assert_eq!(&pgm(&[0.0; 4], [2, 2])[11..], &[0, 0, 0, 0]);
    }
}
