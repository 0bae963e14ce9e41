//! The invariant suite behind `graphscan verify`.

use std::fmt::Write as _;
use std::time::Instant;

use graphscan::graphscan::{
    compute_affinities, messages, multi_head_route, route_jvp, route_tokens, route_via_matrix,
    routing_matrix, window_size, ProjectionSet, TokenGrid,
};
use graphscan::routed_analysis::{
    attenuation_bound_check, compare_runs, containment_check, exact_output_decomposition,
    exact_state_decomposition, frozen_reachability, local_global_kernel_sum, routed_scan,
    FrozenCoefficients, BOUND_ROUNDING,
};
use graphscan::selective_scan::{prefix_scan, recurrent_scan, unrolled_state, SsmCore};
use graphscan::tensor::{max_abs_diff, DenseArray, SeededRng};
use serde::Serialize;

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub wall_time_s: f64,
    /// Set when the check could not be evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub schema: u32,
    pub passed: bool,
    pub config: RunConfig,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn failed_checks(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "graphscan verify  seed={}  grid={}x{}x{}  radius={}  heads={}",
            self.config.seed,
            self.config.height,
            self.config.width,
            self.config.channels,
            self.config.radius,
            self.config.heads
        );
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
            };
            let _ = write!(
                s,
                "{status}  {:<22} max_err={:.3e}  tol={:.1e}  cases={:<4} {:.3}s",
                c.name, c.max_error, c.tolerance, c.cases, c.wall_time_s
            );
            if let Some(e) = &c.error {
                let _ = write!(s, "  ({e})");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{}",
            if self.passed {
                "all checks passed".to_string()
            } else {
                format!("failed: {}", self.failed_checks().join(", "))
            }
        );
        s
    }
}

type Measured = graphscan::Result<(f64, usize)>;

struct Case {
    core: SsmCore,
    grid: TokenGrid,
    proj: ProjectionSet,
}

fn random_case(cfg: &RunConfig, rng: &mut SeededRng, heads: usize) -> graphscan::Result<Case> {
    let d = cfg.channels;
    Ok(Case {
        core: SsmCore::random(rng, d, cfg.state_dim)?,
        grid: TokenGrid::random(rng, cfg.height, cfg.width, d, 1.0)?,
        proj: ProjectionSet::random_full(rng, d, d, d, cfg.radius, heads, 1.0)?,
    })
}

fn sub_rng(seed: u64, k: u64) -> SeededRng {
    SeededRng::new(seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn scan_equivalence(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 8;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let u = c.grid.sequence();
        let a = recurrent_scan(&c.core, &u)?;
        let b = prefix_scan(&c.core, &u)?;
        worst = worst
            .max(a.states.max_abs_diff(&b.states)?)
            .max(a.outputs.max_abs_diff(&b.outputs)?);
    }
    Ok((worst, cases))
}

fn unrolled_form(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 4;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let u = c.grid.sequence();
        let rec = recurrent_scan(&c.core, &u)?;
        for t in 0..rec.len().min(33) {
            let h = unrolled_state(&c.core, &u, t)?;
            worst = worst.max(max_abs_diff(h.data(), rec.state(t)));
        }
    }
    Ok((worst, cases))
}

fn dual_path(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 10;
    for _ in 0..cases {
        let c = random_case(cfg, rng, 1)?;
        let field = compute_affinities(&c.grid, &c.proj)?;
        let direct = route_tokens(&c.grid, &field, &c.proj)?;
        let via = route_via_matrix(&c.grid, &routing_matrix(&field, &c.proj)?)?;
        worst = worst.max(direct.features().max_abs_diff(via.features())?);
    }
    Ok((worst, cases))
}

fn state_decomposition(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 6;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let res = routed_scan(&c.core, &c.grid, &c.proj)?;
        let dec = exact_state_decomposition(&res)?;
        worst = worst.max(dec.total.max_abs_diff(&res.delta_states)?);
    }
    Ok((worst, cases))
}

fn output_decomposition(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 6;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let res = routed_scan(&c.core, &c.grid, &c.proj)?;
        let dec = exact_state_decomposition(&res)?;
        let out = exact_output_decomposition(&res, &dec)?;
        worst = worst.max(out.total.max_abs_diff(&res.delta_outputs)?);
    }
    Ok((worst, cases))
}

fn kernel_composition(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 4;
    for _ in 0..cases {
        let c = random_case(cfg, rng, 1)?;
        let res = routed_scan(&c.core, &c.grid, &c.proj)?;
        worst = worst.max(local_global_kernel_sum(&res)?.max_disagreement());
    }
    Ok((worst, cases))
}

/// Largest amount by which the kernel exceeds its bound beyond rounding
/// (0 when it never does), together with the deviation from equality in the constant
/// single-channel case where the bound is tight.
fn attenuation_bound(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 10;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let res = routed_scan(&c.core, &c.grid, &c.proj)?;
        let zs: Vec<Vec<f64>> = (0..3).map(|_| rng.vector(cfg.channels, 2.0)).collect();
        let report = attenuation_bound_check(&res, &zs)?;
        for e in &report.entries {
            worst = worst.max(e.lhs - e.rhs * (1.0 + BOUND_ROUNDING));
        }
    }
    let a = DenseArray::new(vec![1, 1], vec![0.5f64.ln()])?;
    let core = SsmCore::frozen(a, vec![1.0], vec![1.0], vec![1.0])?;
    let grid = TokenGrid::from_fn(cfg.height, cfg.width, 1, |_| 1.0);
    let res = routed_scan(&core, &grid, &ProjectionSet::zeros(1, 1, 1, cfg.radius))?;
    for e in attenuation_bound_check(&res, &[vec![1.0]])?.entries {
        worst = worst.max((e.lhs - e.rhs).abs());
    }
    Ok((worst, cases + 1))
}

fn reachability(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 6;
    let (len, d, n) = (cfg.height * cfg.width, cfg.channels, cfg.state_dim);
    for _ in 0..cases {
        let c = random_case(cfg, rng, 1)?;
        let field = compute_affinities(&c.grid, &c.proj)?;
        let abar = DenseArray::from_fn(&[len, d, n], |_| rng.uniform(0.05, 0.95));
        let bbar = DenseArray::uniform(rng, &[len, d, n], 1.0)?;
        let coeffs = FrozenCoefficients::new(abar, bbar)?;
        let maps = frozen_reachability(&coeffs, &c.grid, &field, &c.proj)?;
        let routed = c
            .grid
            .sequence()
            .add(&messages(&c.grid, &field, &c.proj)?)?;
        worst = worst
            .max(maps.routed.max_abs_diff(&coeffs.recurrence(&routed)?)?)
            .max(
                maps.base
                    .max_abs_diff(&coeffs.recurrence(&c.grid.sequence())?)?,
            );
    }
    Ok((worst, cases))
}

/// Output difference between routed and base runs with `W_o = 0`; exact
/// containment means this is exactly zero.
fn containment(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 6;
    let d = cfg.channels;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let proj = c.proj.with_output(DenseArray::zeros(&[d, d]))?;
        let report = containment_check(&c.core, &c.grid, &proj)?;
        if !report.holds() {
            let res = routed_scan(&c.core, &c.grid, &proj)?;
            worst = worst.max(res.delta_outputs.max_abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok((worst, cases))
}

/// 1 when a tiny nonzero `W_o` still leaves the outputs bit-identical,
/// which would make the containment check vacuous.
fn containment_probe(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let d = cfg.channels;
    let c = random_case(cfg, rng, cfg.heads)?;
    let proj = c.proj.with_output(DenseArray::filled(&[d, d], 1e-8))?;
    let report = compare_runs(&c.core, &c.grid, &proj)?;
    Ok((if report.outputs_equal { 1.0 } else { 0.0 }, 1))
}

/// Relative error of the analytic directional derivative against central
/// differences.
fn jvp(cfg: &RunConfig, rng: &mut SeededRng) -> Measured {
    let mut worst = 0.0f64;
    let cases = 4;
    let h = 1e-5;
    for _ in 0..cases {
        let c = random_case(cfg, rng, cfg.heads)?;
        let dir = TokenGrid::random(rng, cfg.height, cfg.width, cfg.channels, 1.0)?;
        let analytic = route_jvp(&c.grid, &c.proj, &dir)?;
        let shifted = |sign: f64| {
            TokenGrid::from_fn(cfg.height, cfg.width, cfg.channels, |k| {
                c.grid.data()[k] + sign * h * dir.data()[k]
            })
        };
        let plus = multi_head_route(&shifted(1.0), &c.proj)?;
        let minus = multi_head_route(&shifted(-1.0), &c.proj)?;
        let fd: Vec<f64> = plus
            .data()
            .iter()
            .zip(minus.data())
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        worst = worst.max(max_abs_diff(analytic.data(), &fd) / scale);
    }
    Ok((worst, cases))
}

fn window_sizes(cfg: &RunConfig, _rng: &mut SeededRng) -> Measured {
    let expected = [(0, 1), (1, 9), (2, 25), (3, 49)];
    let mut err = 0.0f64;
    for (r, s) in expected {
        err = err.max((window_size(r) as f64 - s as f64).abs());
    }
    let side = 2 * cfg.radius + 1;
    err = err.max((window_size(cfg.radius) as f64 - (side * side) as f64).abs());
    Ok((err, expected.len() + 1))
}

type CheckFn = fn(&RunConfig, &mut SeededRng) -> Measured;

/// `(name, default tolerance, check)` in execution order.
pub const CHECKS: [(&str, f64, CheckFn); 12] = [
    ("scan_equivalence", 1e-10, scan_equivalence),
    ("unrolled_form", 1e-10, unrolled_form),
    ("routing_dual_path", 1e-12, dual_path),
    ("state_decomposition", 1e-10, state_decomposition),
    ("output_decomposition", 1e-10, output_decomposition),
    ("kernel_composition", 1e-10, kernel_composition),
    ("attenuation_bound", 1e-14, attenuation_bound),
    ("reachability", 1e-10, reachability),
    ("containment", 0.0, containment),
    ("containment_probe", 0.0, containment_probe),
    ("route_jvp", 1e-5, jvp),
    ("window_sizes", 0.0, window_sizes),
];

/// Runs every check. A check that errors is reported as failed with the
/// error message; the suite itself never aborts.
pub fn run_checks(cfg: &RunConfig) -> VerificationReport {
    let mut checks = Vec::with_capacity(CHECKS.len());
    for (k, (name, default_tol, check)) in CHECKS.iter().enumerate() {
        let tolerance = cfg.tolerance_or(*default_tol);
        let mut rng = sub_rng(cfg.seed, k as u64 + 1);
        let start = Instant::now();
        let outcome = check(cfg, &mut rng);
        let wall_time_s = start.elapsed().as_secs_f64();
        let (max_error, cases, error) = match outcome {
            Ok((e, n)) => (e, n, None),
            Err(e) => (f64::INFINITY, 0, Some(e.to_string())),
        };
        let ok = error.is_none() && max_error <= tolerance;
        checks.push(CheckResult {
            name: name.to_string(),
            status: if ok { Status::Pass } else { Status::Fail },
            max_error,
            tolerance,
            cases,
            wall_time_s,
            error,
        });
    }
    VerificationReport {
        schema: SCHEMA_VERSION,
        passed: checks.iter().all(|c| c.status == Status::Pass),
        config: cfg.clone(),
        checks,
    }
}
