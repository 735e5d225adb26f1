//! Warp visualisation: the image of a regular chequered grid under the
//! fitted warp, exported as CSV coordinate pairs and an SVG drawing.

use std::path::Path;

use deepwarp_core::warp::{forward_trace, WarpStack};
use nalgebra::DMatrix;

use crate::run::AppError;

/// Samples per grid-cell edge (higher = smoother curved lines).
const EDGE_SAMPLES: usize = 8;

/// Warped grid: input points and their images, plus polylines for drawing.
pub struct WarpGrid {
    pub inputs: Vec<[f64; 2]>,
    pub outputs: Vec<[f64; 2]>,
    /// Index ranges of `outputs` forming each polyline.
    pub lines: Vec<std::ops::Range<usize>>,
    pub dim: usize,
}

/// Evaluate the warp on the grid lines of a `g x g` chequered pattern over
/// the knots' bounding box (or on `g` points of the interval in 1D).
pub fn warp_grid(stack: &WarpStack, g: usize) -> Result<WarpGrid, AppError> {
    assert!(g >= 2);
    let d = stack.dim();
    let knots = stack.knots.coords();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for i in 0..knots.nrows() {
        for k in 0..d {
            lo[k] = lo[k].min(knots[(i, k)]);
            hi[k] = hi[k].max(knots[(i, k)]);
        }
    }

    let mut inputs: Vec<[f64; 2]> = Vec::new();
    let mut lines = Vec::new();
    if d == 1 {
        let n = (g - 1) * EDGE_SAMPLES + 1;
        let start = inputs.len();
        for i in 0..n {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64;
            inputs.push([x, 0.0]);
        }
        lines.push(start..inputs.len());
    } else {
        let n = (g - 1) * EDGE_SAMPLES + 1;
        // horizontal lines
        for row in 0..g {
            let y = lo[1] + (hi[1] - lo[1]) * row as f64 / (g - 1) as f64;
            let start = inputs.len();
            for i in 0..n {
                let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64;
                inputs.push([x, y]);
            }
            lines.push(start..inputs.len());
        }
        // vertical lines
        for col in 0..g {
            let x = lo[0] + (hi[0] - lo[0]) * col as f64 / (g - 1) as f64;
            let start = inputs.len();
            for i in 0..n {
                let y = lo[1] + (hi[1] - lo[1]) * i as f64 / (n - 1) as f64;
                inputs.push([x, y]);
            }
            lines.push(start..inputs.len());
        }
    }

    let mut pts = DMatrix::zeros(inputs.len(), d);
    for (i, p) in inputs.iter().enumerate() {
        for k in 0..d {
            pts[(i, k)] = p[k];
        }
    }
    let out = forward_trace(stack, &pts)
        .map_err(AppError::Model)?
        .data_output();
    let outputs: Vec<[f64; 2]> = (0..out.nrows())
        .map(|i| {
            if d == 1 {
                [out[(i, 0)], 0.0]
            } else {
                [out[(i, 0)], out[(i, 1)]]
            }
        })
        .collect();
    Ok(WarpGrid {
        inputs,
        outputs,
        lines,
        dim: d,
    })
}

/// CSV of (input, output) coordinate pairs.
pub fn write_warp_csv(path: &Path, grid: &WarpGrid) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let header: &[&str] = if grid.dim == 1 {
        &["s1", "w1"]
    } else {
        &["s1", "s2", "w1", "w2"]
    };
    w.write_record(header)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    for (inp, out) in grid.inputs.iter().zip(&grid.outputs) {
        let rec: Vec<String> = if grid.dim == 1 {
            vec![format!("{}", inp[0]), format!("{}", out[0])]
        } else {
            vec![
                format!("{}", inp[0]),
                format!("{}", inp[1]),
                format!("{}", out[0]),
                format!("{}", out[1]),
            ]
        };
        w.write_record(&rec)
            .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

/// SVG of the warped grid lines (1D warps are drawn as the graph of the
/// warping function).
pub fn write_warp_svg(path: &Path, grid: &WarpGrid) -> Result<(), AppError> {
    const SIZE: f64 = 600.0;
    const PAD: f64 = 20.0;

    // bounding box of what we draw
    let draw_pts: Vec<[f64; 2]> = if grid.dim == 1 {
        grid.inputs
            .iter()
            .zip(&grid.outputs)
            .map(|(i, o)| [i[0], o[0]])
            .collect()
    } else {
        grid.outputs.clone()
    };
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &draw_pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * PAD) / span;
    let map = |p: [f64; 2]| -> (f64, f64) {
        (
            PAD + (p[0] - lo[0]) * scale,
            // SVG y grows downward
            SIZE - PAD - (p[1] - lo[1]) * scale,
        )
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for range in &grid.lines {
        let mut d = String::from("M");
        for (idx, i) in range.clone().enumerate() {
            let (x, y) = map(draw_pts[i]);
            if idx == 0 {
                d.push_str(&format!(" {x:.2} {y:.2}"));
            } else {
                d.push_str(&format!(" L {x:.2} {y:.2}"));
            }
        }
        svg.push_str(&format!(
            "<path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use deepwarp_core::warp::{AwuLayer, Layer};
    use deepwarp_core::KnotSet;
    use nalgebra::DMatrix as M;

    fn unit_knots_2d() -> KnotSet {
        let n = 5;
        let mut c = M::zeros(n * n, 2);
        for i in 0..n {
            for j in 0..n {
                c[(i * n + j, 0)] = i as f64 / (n - 1) as f64;
                c[(i * n + j, 1)] = j as f64 / (n - 1) as f64;
            }
        }
        KnotSet::new(c).unwrap()
    }

    #[test]
    fn identity_grid_is_unchanged() {
        let stack = WarpStack::new(Vec::new(), unit_knots_2d());
        let grid = warp_grid(&stack, 5).unwrap();
        for (i, o) in grid.inputs.iter().zip(&grid.outputs) {
            assert!((i[0] - o[0]).abs() < 1e-12);
            assert!((i[1] - o[1]).abs() < 1e-12);
        }
        assert_eq!(grid.lines.len(), 10);
    }

    #[test]
    fn svg_and_csv_written() {
        let knots = KnotSet::new(M::from_fn(9, 1, |i, _| i as f64 / 8.0)).unwrap();
        let stack = WarpStack::new(
            vec![Layer::Awu(AwuLayer::new(0, 5, 200.0, 0.0, 1.0))],
            knots,
        );
        let grid = warp_grid(&stack, 9).unwrap();
        let dir = std::env::temp_dir().join(format!("deepwarp-svg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let csv_path = dir.join("warp.csv");
        let svg_path = dir.join("warp.svg");
        write_warp_csv(&csv_path, &grid).unwrap();
        write_warp_svg(&svg_path, &grid).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<path"));
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.starts_with("s1,w1"));
    }
}
