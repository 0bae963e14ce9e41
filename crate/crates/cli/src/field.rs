//! Displacement-field rasters and effective scan-path polylines.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use graphscan::graphscan::{
    compute_affinities, displacement_field, normalize_axis, DisplacementField, ProjectionSet,
    TokenGrid,
};
use graphscan::tensor::{DenseArray, SeededRng};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Pixels per token edge in the raster figures.
pub const PIXEL: usize = 8;

/// Logit given to the rightward slot by [`Weights::BiasRight`].
pub const BIAS_SPIKE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// `±(k+1)/D` alternating on the lattice parity.
    Checker,
    /// Even channels carry the normalized row, odd channels the column.
    Gradient,
    /// Ones at the centre token, zeros elsewhere.
    Impulse,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Checker, Pattern::Gradient, Pattern::Impulse];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Checker => "checker",
            Pattern::Gradient => "gradient",
            Pattern::Impulse => "impulse",
        }
    }

    pub fn grid(self, height: usize, width: usize, channels: usize) -> TokenGrid {
        let centre = (height / 2) * width + width / 2;
        TokenGrid::from_fn(height, width, channels, |flat| {
            let (i, k) = (flat / channels, flat % channels);
            let (r, c) = (i / width, i % width);
            match self {
                Pattern::Checker => {
                    let s = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                    s * (k + 1) as f64 / channels as f64
                }
                Pattern::Gradient if k % 2 == 0 => normalize_axis(r, height),
                Pattern::Gradient => normalize_axis(c, width),
                Pattern::Impulse => f64::from(u8::from(i == centre)),
            }
        })
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown pattern {s:?}; expected checker, gradient or impulse"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    /// Every projection and bias entry from `U[-1, 1]` under the run seed.
    Random,
    /// All projections and the bias zero, so affinities are uniform.
    Zero,
    /// Zero projections with a single large bias on the `(0, +1)` slot.
    BiasRight,
}

impl Weights {
    pub fn name(self) -> &'static str {
        match self {
            Weights::Random => "random",
            Weights::Zero => "zero",
            Weights::BiasRight => "bias-right",
        }
    }

    pub fn projections(self, cfg: &RunConfig, channels: usize) -> graphscan::Result<ProjectionSet> {
        let d = channels;
        match self {
            Weights::Random => {
                let mut rng = SeededRng::new(cfg.seed);
                ProjectionSet::random_full(&mut rng, d, d, d, cfg.radius, cfg.heads, 1.0)
            }
            Weights::Zero => ProjectionSet::zeros(d, d, d, cfg.radius).with_heads(cfg.heads),
            Weights::BiasRight => {
                let mut p = ProjectionSet::zeros(d, d, d, cfg.radius).with_heads(cfg.heads)?;
                if cfg.radius > 0 {
                    p.bias.set(0, 1, BIAS_SPIKE)?;
                }
                Ok(p)
            }
        }
    }
}

impl FromStr for Weights {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Weights::Random, Weights::Zero, Weights::BiasRight]
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| format!("unknown weights {s:?}; expected random, zero or bias-right"))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Reads an `H × W × D` grid stored as
/// `{"height": H, "width": W, "channels": D, "data": [...]}` in raster order.
pub fn load_grid(path: &Path) -> CliResult<TokenGrid> {
    let input_err = |message: String| CliError::Input {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| input_err(e.to_string()))?;
    let file: GridFile = serde_json::from_str(&text).map_err(|e| input_err(e.to_string()))?;
    DenseArray::new(vec![file.height, file.width, file.channels], file.data)
        .and_then(TokenGrid::new)
        .map_err(|e| input_err(e.to_string()))
}

pub fn compute_field(
    grid: &TokenGrid,
    proj: &ProjectionSet,
) -> graphscan::Result<DisplacementField> {
    let field = compute_affinities(grid, proj)?;
    displacement_field(&field, grid)
}

fn max_magnitude(f: &DisplacementField) -> f64 {
    (0..f.displacement.len())
        .map(|i| f.magnitude(i))
        .fold(0.0, f64::max)
}

/// Per-token magnitude quantized to 0..=255 relative to the largest one.
pub fn magnitude_levels(f: &DisplacementField) -> Vec<u8> {
    let max = max_magnitude(f);
    (0..f.displacement.len())
        .map(|i| {
            if max > 0.0 {
                (255.0 * f.magnitude(i) / max).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// ASCII graymap, one `PIXEL × PIXEL` block per token.
pub fn magnitude_pgm(f: &DisplacementField) -> Vec<u8> {
    let levels = magnitude_levels(f);
    let (w, h) = (f.width * PIXEL, f.height * PIXEL);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| levels[(y / PIXEL) * f.width + x / PIXEL].to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s.into_bytes()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (255.0 * c).round().clamp(0.0, 255.0) as u8)
}

/// Binary pixmap: hue encodes direction (0 = rightward, counter-clockwise
/// with up positive), value encodes relative magnitude.
pub fn direction_ppm(f: &DisplacementField) -> Vec<u8> {
    let max = max_magnitude(f);
    let colours: Vec<[u8; 3]> = f
        .displacement
        .iter()
        .enumerate()
        .map(|(i, &[dr, dc])| {
            let m = f.magnitude(i);
            if max == 0.0 || m == 0.0 {
                return [0, 0, 0];
            }
            let hue = (-dr).atan2(dc) / std::f64::consts::TAU;
            hsv_to_rgb(hue, 1.0, m / max)
        })
        .collect();
    let (w, h) = (f.width * PIXEL, f.height * PIXEL);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&colours[(y / PIXEL) * f.width + x / PIXEL]);
        }
    }
    out
}

fn to_pixel(coord: f64, n: usize) -> f64 {
    let index = if n > 1 {
        (coord + 1.0) * (n - 1) as f64 / 2.0
    } else {
        0.0
    };
    (index + 0.5) * PIXEL as f64
}

/// Vector figure with the raster-order polyline through the expected
/// positions, a circle at the first token and a square at the last.
pub fn path_svg(f: &DisplacementField) -> Vec<u8> {
    let (w, h) = (f.width * PIXEL, f.height * PIXEL);
    let points: Vec<(f64, f64)> = f
        .expected
        .iter()
        .map(|&[r, c]| (to_pixel(c, f.width), to_pixel(r, f.height)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    s.push_str("<g fill=\"#bbbbbb\">\n");
    for r in 0..f.height {
        for c in 0..f.width {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"0.8\"/>",
                (c as f64 + 0.5) * PIXEL as f64,
                (r as f64 + 0.5) * PIXEL as f64
            );
        }
    }
    s.push_str("</g>\n<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"0.8\" points=\"");
    let joined: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.3},{y:.3}"))
        .collect();
    s.push_str(&joined.join(" "));
    s.push_str("\"/>\n");
    if let (Some(&(sx, sy)), Some(&(ex, ey))) = (points.first(), points.last()) {
        let _ = writeln!(
            s,
            "<circle class=\"start\" cx=\"{sx:.3}\" cy=\"{sy:.3}\" r=\"2.5\" fill=\"#2a9d3a\"/>"
        );
        let _ = writeln!(
            s,
            "<rect class=\"end\" x=\"{:.3}\" y=\"{:.3}\" width=\"5\" height=\"5\" fill=\"#c62828\"/>",
            ex - 2.5,
            ey - 2.5
        );
    }
    s.push_str("</svg>\n");
    s.into_bytes()
}

/// The three files written for one field, as `(file name, bytes)`.
pub fn figures(label: &str, f: &DisplacementField) -> Vec<(String, Vec<u8>)> {
    vec![
        (format!("field_{label}_magnitude.pgm"), magnitude_pgm(f)),
        (format!("field_{label}_direction.ppm"), direction_ppm(f)),
        (format!("field_{label}_path.svg"), path_svg(f)),
    ]
}
