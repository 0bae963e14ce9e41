//! Stage shapes and analytic counts for a backbone variant.

use std::fmt::Write as _;

use graphscan::backbone::{count_params_flops_at, BackboneConfig, Complexity};
use serde::Serialize;

/// Published parameter and FLOP figures at 224², by variant.
pub const TARGETS: [(&str, f64, f64); 3] = [
    ("tiny", 28e6, 5.2e9),
    ("small", 49e6, 11.1e9),
    ("base", 93e6, 17.8e9),
];

/// Relative band around a target that counts as a match.
pub const BAND: f64 = 0.15;

#[derive(Debug, Clone, Serialize)]
pub struct TargetCheck {
    pub params_target: f64,
    pub flops_target: f64,
    pub params_rel_err: f64,
    pub flops_rel_err: f64,
    pub within_band: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BackboneReport {
    pub variant: String,
    pub resolution: usize,
    pub config: BackboneConfig,
    pub stage_shapes: Vec<[usize; 3]>,
    pub params: u64,
    /// Multiply-accumulates at `resolution²`.
    pub flops: u64,
    /// Counts at 224², compared with the published figures when the
    /// variant is a named preset.
    pub params_224: u64,
    pub flops_224: u64,
    pub target: Option<TargetCheck>,
}

pub fn target_for(name: &str) -> Option<(f64, f64)> {
    TARGETS.iter().find(|t| t.0 == name).map(|t| (t.1, t.2))
}

pub fn check_target(c: Complexity, params_target: f64, flops_target: f64) -> TargetCheck {
    let params_rel_err = c.params as f64 / params_target - 1.0;
    let flops_rel_err = c.flops as f64 / flops_target - 1.0;
    TargetCheck {
        params_target,
        flops_target,
        params_rel_err,
        flops_rel_err,
        within_band: params_rel_err.abs() <= BAND && flops_rel_err.abs() <= BAND,
    }
}

/// `variant` names a preset or is `"custom"` for a config-file table.
pub fn report(
    variant: &str,
    cfg: &BackboneConfig,
    resolution: usize,
) -> graphscan::Result<BackboneReport> {
    cfg.validate()?;
    let shapes = cfg.stage_shapes(resolution, resolution)?;
    let at_res = count_params_flops_at(cfg, resolution);
    let at_224 = count_params_flops_at(cfg, 224);
    let target = target_for(variant).map(|(p, f)| check_target(at_224, p, f));
    Ok(BackboneReport {
        variant: variant.to_string(),
        resolution,
        config: cfg.clone(),
        stage_shapes: shapes.iter().map(|&(h, w, c)| [h, w, c]).collect(),
        params: at_res.params,
        flops: at_res.flops,
        params_224: at_224.params,
        flops_224: at_224.flops,
        target,
    })
}

pub fn to_text(r: &BackboneReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "variant {} at {}x{}",
        r.variant, r.resolution, r.resolution
    );
    for (k, [h, w, c]) in r.stage_shapes.iter().enumerate() {
        let _ = writeln!(s, "  stage {}: {h} x {w} x {c}", k + 1);
    }
    let _ = writeln!(
        s,
        "params {:.2}M  MACs {:.2}G (at {}²)",
        r.params as f64 / 1e6,
        r.flops as f64 / 1e9,
        r.resolution
    );
    if let Some(t) = &r.target {
        let _ = writeln!(
            s,
            "at 224²: params {:.2}M vs {:.0}M ({:+.1}%)  MACs {:.2}G vs {:.1}G ({:+.1}%)  band ±{:.0}%: {}",
            r.params_224 as f64 / 1e6,
            t.params_target / 1e6,
            100.0 * t.params_rel_err,
            r.flops_224 as f64 / 1e9,
            t.flops_target / 1e9,
            100.0 * t.flops_rel_err,
            100.0 * BAND,
            if t.within_band { "within" } else { "OUTSIDE" }
        );
    }
    s
}
