//! GraphScan timing over growing lattices.

use std::fmt::Write as _;
use std::time::Instant;

use graphscan::graphscan::{
    compute_affinities, route_tokens, window_size, ProjectionSet, TokenGrid,
};
use graphscan::tensor::SeededRng;

use crate::config::RunConfig;

pub const DEFAULT_SIDES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub repeats: usize,
    /// Best observed wall time of one affinity + routing pass.
    pub seconds: f64,
}

impl BenchRow {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn ns_per_token(&self) -> f64 {
        self.seconds * 1e9 / self.tokens() as f64
    }
}

struct Workload {
    grid: TokenGrid,
    proj: ProjectionSet,
    repeats: usize,
}

impl Workload {
    fn pass(&self) -> graphscan::Result<TokenGrid> {
        let field = compute_affinities(&self.grid, &self.proj)?;
        route_tokens(&self.grid, &field, &self.proj)
    }

    fn batch(&self) -> graphscan::Result<f64> {
        let start = Instant::now();
        for _ in 0..self.repeats {
            std::hint::black_box(self.pass()?);
        }
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Number of timed rounds per lattice.
pub const ROUNDS: usize = 7;

/// Times one affinity + routing pass on each `(height, width)` lattice.
///
/// Each lattice gets a repeat count that makes one batch last at least
/// `min_seconds`. Batches then run round-robin over the lattices for
/// [`ROUNDS`] rounds and the fastest batch per lattice is kept, so a slow
/// stretch on a shared machine affects all sizes alike instead of one.
pub fn time_grids(
    cfg: &RunConfig,
    sizes: &[(usize, usize)],
    radius: usize,
    min_seconds: f64,
) -> graphscan::Result<Vec<BenchRow>> {
    let d = cfg.channels;
    let mut loads = Vec::with_capacity(sizes.len());
    for &(height, width) in sizes {
        let mut rng = SeededRng::new(cfg.seed);
        let grid = TokenGrid::random(&mut rng, height, width, d, 1.0)?;
        let proj = ProjectionSet::random_full(&mut rng, d, d, d, radius, cfg.heads, 1.0)?;
        let mut load = Workload {
            grid,
            proj,
            repeats: 1,
        };
        while load.batch()? < min_seconds && load.repeats < 1 << 20 {
            load.repeats *= 2;
        }
        loads.push(load);
    }
    let mut best = vec![f64::INFINITY; loads.len()];
    for _ in 0..ROUNDS {
        for (b, load) in best.iter_mut().zip(&loads) {
            *b = b.min(load.batch()? / load.repeats as f64);
        }
    }
    Ok(sizes
        .iter()
        .zip(loads.iter().zip(best))
        .map(|(&(height, width), (load, seconds))| BenchRow {
            height,
            width,
            radius,
            repeats: load.repeats,
            seconds,
        })
        .collect())
}

pub fn run_bench(
    cfg: &RunConfig,
    sides: &[usize],
    min_seconds: f64,
) -> graphscan::Result<Vec<BenchRow>> {
    let sizes: Vec<_> = sides.iter().map(|&s| (s, s)).collect();
    time_grids(cfg, &sizes, cfg.radius, min_seconds)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,tokens,radius,slots,repeats,seconds,ns_per_token\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.9},{:.3}",
            r.height,
            r.width,
            r.tokens(),
            r.radius,
            window_size(r.radius),
            r.repeats,
            r.seconds,
            r.ns_per_token()
        );
    }
    s
}
