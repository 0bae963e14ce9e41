//! Routed-versus-base analysis of a selective scan fed by GraphScan.
//!
//! Both runs share one [`SsmCore`]; the routed run consumes `x'_t = x_t + m_t`
//! so its selective coefficients are generated from the routed tokens.
//! Everything here evaluates the identities relating the two runs through an
//! independent computational route (sums over survival factors, kernel
//! applications) so they can be compared against direct subtraction.

use crate::error::{dim_err, Error, Result};
use crate::graphscan::{
    compute_affinities, messages, ProjectionSet, RoutingField, SparseRouting, TokenGrid,
};
use crate::selective_scan::{
    readout, recurrent_scan, run_recurrence, token_slice, DiscretizedSequence, SsmCore,
};
use crate::tensor::DenseArray;

/// Base and routed scans plus their exact differences.
#[derive(Debug, Clone)]
pub struct RoutedScanResult {
    /// `L × D` base tokens `x_t`.
    pub base_inputs: DenseArray,
    /// `L × D` routed tokens `x'_t`.
    pub routed_inputs: DenseArray,
    /// `L × D` messages `m_t = x'_t − x_t`.
    pub messages: DenseArray,
    pub base: DiscretizedSequence,
    pub routed: DiscretizedSequence,
    pub field: RoutingField,
    /// `M = W_v W_o`
    pub mixing: DenseArray,
    pub delta_abar: DenseArray,
    pub delta_bbar: DenseArray,
    pub delta_c: DenseArray,
    pub delta_states: DenseArray,
    pub delta_outputs: DenseArray,
}

impl RoutedScanResult {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.base.d_model()
    }

    pub fn d_state(&self) -> usize {
        self.base.d_state()
    }
}

/// Runs GraphScan on `grid`, then the same core on `X` and on `X'`.
pub fn routed_scan(
    core: &SsmCore,
    grid: &TokenGrid,
    proj: &ProjectionSet,
) -> Result<RoutedScanResult> {
    let field = compute_affinities(grid, proj)?;
    let msgs = messages(grid, &field, proj)?;
    let base_inputs = grid.sequence();
    let routed_inputs = base_inputs.add(&msgs)?;
    let base = recurrent_scan(core, &base_inputs)?;
    let routed = recurrent_scan(core, &routed_inputs)?;
    Ok(RoutedScanResult {
        delta_abar: routed.coeffs.abar.sub(&base.coeffs.abar)?,
        delta_bbar: routed.coeffs.bbar.sub(&base.coeffs.bbar)?,
        delta_c: routed.coeffs.c.sub(&base.coeffs.c)?,
        delta_states: routed.states.sub(&base.states)?,
        delta_outputs: routed.outputs.sub(&base.outputs)?,
        base_inputs,
        routed_inputs,
        messages: msgs,
        base,
        routed,
        field,
        mixing: proj.mixing(),
    })
}

/// The three hidden-state pathways of `δH_t`, each `L × D × N_s`.
#[derive(Debug, Clone)]
pub struct StateDecomposition {
    /// `Σ_i G'_{t,i} ⊙ B̄'_i ⊙ m_i↑`
    pub value_injection: DenseArray,
    /// `Σ_i G'_{t,i} ⊙ δB̄_i ⊙ x_i↑`
    pub write_modulation: DenseArray,
    /// `Σ_i G'_{t,i} ⊙ δĀ_i ⊙ H_{i−1}`
    pub transition_modulation: DenseArray,
    pub total: DenseArray,
}

/// Sums `Σ_{i≤t} G'_{t,i} ⊙ terms_i` for every `t`, with `terms` and the
/// routed transitions both `L × D × N_s`.
fn survival_weighted_sums(abar: &DenseArray, terms: &[f64]) -> Vec<f64> {
    let len = abar.shape()[0];
    let width = abar.len() / len;
    let mut out = vec![0.0; len * width];
    let mut g = vec![0.0; width];
    for t in 0..len {
        g.fill(1.0);
        let acc = &mut out[t * width..(t + 1) * width];
        for i in (0..=t).rev() {
            if i < t {
                for (gv, a) in g.iter_mut().zip(token_slice(abar, i + 1)) {
                    *gv *= a;
                }
            }
            for ((o, gv), term) in acc
                .iter_mut()
                .zip(&g)
                .zip(&terms[i * width..(i + 1) * width])
            {
                *o += gv * term;
            }
        }
    }
    out
}

pub fn exact_state_decomposition(res: &RoutedScanResult) -> Result<StateDecomposition> {
    let (len, dm, ds) = (res.len(), res.d_model(), res.d_state());
    let width = dm * ds;
    let mut inject = vec![0.0; len * width];
    let mut write = vec![0.0; len * width];
    let mut transition = vec![0.0; len * width];
    for i in 0..len {
        let b_routed = res.routed.bbar(i);
        let db = token_slice(&res.delta_bbar, i);
        let da = token_slice(&res.delta_abar, i);
        let m_i = token_slice(&res.messages, i);
        let x_i = token_slice(&res.base_inputs, i);
        for k in 0..width {
            let d = k / ds;
            inject[i * width + k] = b_routed[k] * m_i[d];
            write[i * width + k] = db[k] * x_i[d];
            if i > 0 {
                transition[i * width + k] = da[k] * res.base.state(i - 1)[k];
            }
        }
    }
    let abar = &res.routed.coeffs.abar;
    let shape = vec![len, dm, ds];
    let value_injection = DenseArray::new(shape.clone(), survival_weighted_sums(abar, &inject))?;
    let write_modulation = DenseArray::new(shape.clone(), survival_weighted_sums(abar, &write))?;
    let transition_modulation = DenseArray::new(shape, survival_weighted_sums(abar, &transition))?;
    let total = value_injection
        .add(&write_modulation)?
        .add(&transition_modulation)?;
    Ok(StateDecomposition {
        value_injection,
        write_modulation,
        transition_modulation,
        total,
    })
}

/// `δy_t = ⟨δH_t, c'_t⟩ + ⟨H_t, δc_t⟩`, each term `L × D`.
#[derive(Debug, Clone)]
pub struct OutputDecomposition {
    pub state_term: DenseArray,
    /// Readout modulation through `δc_t`.
    pub readout_term: DenseArray,
    pub total: DenseArray,
}

pub fn exact_output_decomposition(
    res: &RoutedScanResult,
    state: &StateDecomposition,
) -> Result<OutputDecomposition> {
    let state_term = readout(&state.total, &res.routed.coeffs.c)?;
    let readout_term = readout(&res.base.states, &res.delta_c)?;
    let total = state_term.add(&readout_term)?;
    Ok(OutputDecomposition {
        state_term,
        readout_term,
        total,
    })
}

fn kernel_with_survival(g: &[f64], bbar_i: &[f64], c_t: &[f64], z: &[f64]) -> Vec<f64> {
    let ds = c_t.len();
    z.iter()
        .enumerate()
        .map(|(d, &zd)| {
            (0..ds)
                .map(|n| g[d * ds + n] * bbar_i[d * ds + n] * zd * c_t[n])
                .sum()
        })
        .collect()
}

/// `K'_{t,i}(z) = ⟨G'_{t,i} ⊙ B̄'_i ⊙ z↑, c'_t⟩`; zero for `i > t`.
pub fn kernel_apply(res: &RoutedScanResult, t: usize, i: usize, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != res.d_model() {
        return Err(dim_err("kernel_apply", &[z.len()], &[res.d_model()]));
    }
    if t >= res.len() || i >= res.len() {
        return Err(Error::Index(format!(
            "kernel position ({t}, {i}) outside sequence of length {}",
            res.len()
        )));
    }
    if i > t {
        return Ok(vec![0.0; z.len()]);
    }
    let g = res.routed.survival_factor(t, i)?;
    Ok(kernel_with_survival(
        g.data(),
        res.routed.bbar(i),
        res.routed.c(t),
        z,
    ))
}

/// Direct routed value contribution to `δy_t`, evaluated three ways.
#[derive(Debug, Clone)]
pub struct KernelComposition {
    /// `Σ_{i≤t} K'_{t,i}(m_i)`
    pub by_slot: DenseArray,
    /// `Σ_j Σ_{i≤t : j∈S_r(i)} α_ij K'_{t,i}(x_j M)`
    pub by_source: DenseArray,
    /// Value-injection pathway contracted with `c'_t`.
    pub pathway: DenseArray,
}

impl KernelComposition {
    pub fn max_disagreement(&self) -> f64 {
        let a = self
            .by_slot
            .max_abs_diff(&self.by_source)
            .expect("same shape");
        let b = self
            .by_slot
            .max_abs_diff(&self.pathway)
            .expect("same shape");
        let c = self
            .by_source
            .max_abs_diff(&self.pathway)
            .expect("same shape");
        a.max(b).max(c)
    }
}

pub fn local_global_kernel_sum(res: &RoutedScanResult) -> Result<KernelComposition> {
    let (len, dm, ds) = (res.len(), res.d_model(), res.d_state());
    let width = dm * ds;
    let routing = SparseRouting::from_field(&res.field, res.mixing.clone())?;
    let columns = routing.columns();
    let xm = res.base_inputs.matmul(&res.mixing)?;

    let mut by_slot = vec![0.0; len * dm];
    let mut by_source = vec![0.0; len * dm];
    // survival[i] holds G'_{t,i} for the current t.
    let mut survival = vec![vec![0.0; width]; len];
    for t in 0..len {
        survival[t].fill(1.0);
        for i in (0..t).rev() {
            let (lo, hi) = survival.split_at_mut(i + 1);
            for ((g, &g_next), a) in lo[i].iter_mut().zip(&hi[0]).zip(res.routed.abar(i + 1)) {
                *g = g_next * a;
            }
        }
        let c_t = res.routed.c(t);
        let slot_row = &mut by_slot[t * dm..(t + 1) * dm];
        for i in 0..=t {
            let k = kernel_with_survival(
                &survival[i],
                res.routed.bbar(i),
                c_t,
                token_slice(&res.messages, i),
            );
            for (o, v) in slot_row.iter_mut().zip(k) {
                *o += v;
            }
        }
        let source_row = &mut by_source[t * dm..(t + 1) * dm];
        for (j, col) in columns.iter().enumerate() {
            let z = token_slice(&xm, j);
            for &(i, alpha) in col.iter().filter(|&&(i, _)| i <= t) {
                let k = kernel_with_survival(&survival[i], res.routed.bbar(i), c_t, z);
                for (o, v) in source_row.iter_mut().zip(k) {
                    *o += alpha * v;
                }
            }
        }
    }
    let state = exact_state_decomposition(res)?;
    Ok(KernelComposition {
        by_slot: DenseArray::new(vec![len, dm], by_slot)?,
        by_source: DenseArray::new(vec![len, dm], by_source)?,
        pathway: readout(&state.value_injection, &res.routed.coeffs.c)?,
    })
}

/// One evaluated instance of the attenuation inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEntry {
    pub t: usize,
    pub i: usize,
    pub trial: usize,
    pub lhs: f64,
    pub rhs: f64,
}

/// Relative allowance for rounding when comparing the two sides of the
/// attenuation bound. Both sides are short products of the same measured
/// factors taken in different orders, so where the bound is tight they can
/// differ by a few units in the last place.
pub const BOUND_ROUNDING: f64 = 8.0 * f64::EPSILON;

impl BoundEntry {
    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }

    /// True when `lhs` exceeds `rhs` by more than rounding can explain.
    pub fn violated(&self) -> bool {
        self.lhs > self.rhs * (1.0 + BOUND_ROUNDING)
    }
}

#[derive(Debug, Clone)]
pub struct AttenuationReport {
    /// Largest routed transition entry.
    pub rho: f64,
    pub b_max: f64,
    pub c_max: f64,
    pub d_state: usize,
    pub entries: Vec<BoundEntry>,
}

impl AttenuationReport {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated()).count()
    }

    pub fn min_margin(&self) -> f64 {
        self.entries
            .iter()
            .map(BoundEntry::margin)
            .fold(f64::INFINITY, f64::min)
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Checks `‖K'_{t,i}(z)‖∞ ≤ N_s B_max C_max ρ^{t−i} ‖z‖∞` for all `i ≤ t`
/// and every trial vector, with the constants measured from the routed run.
pub fn attenuation_bound_check(
    res: &RoutedScanResult,
    trials: &[Vec<f64>],
) -> Result<AttenuationReport> {
    let rho = max_abs(res.routed.coeffs.abar.data());
    if rho >= 1.0 {
        return Err(Error::Precondition(format!(
            "routed transitions must stay below 1, found rho = {rho}"
        )));
    }
    let b_max = max_abs(res.routed.coeffs.bbar.data());
    let c_max = max_abs(res.routed.coeffs.c.data());
    let ds = res.d_state();
    let mut entries = Vec::new();
    for t in 0..res.len() {
        for i in 0..=t {
            let g = res.routed.survival_factor(t, i)?;
            for (trial, z) in trials.iter().enumerate() {
                if z.len() != res.d_model() {
                    return Err(dim_err(
                        "attenuation_bound_check",
                        &[z.len()],
                        &[res.d_model()],
                    ));
                }
                let k = kernel_with_survival(g.data(), res.routed.bbar(i), res.routed.c(t), z);
                entries.push(BoundEntry {
                    t,
                    i,
                    trial,
                    lhs: max_abs(&k),
                    rhs: ds as f64 * b_max * c_max * rho.powi((t - i) as i32) * max_abs(z),
                });
            }
        }
    }
    Ok(AttenuationReport {
        rho,
        b_max,
        c_max,
        d_state: ds,
        entries,
    })
}

/// Externally supplied, token-independent discretized coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCoefficients {
    /// `L × D × N_s`
    pub abar: DenseArray,
    /// `L × D × N_s`
    pub bbar: DenseArray,
}

impl FrozenCoefficients {
    pub fn new(abar: DenseArray, bbar: DenseArray) -> Result<Self> {
        if abar.shape().len() != 3 || abar.shape() != bbar.shape() {
            return Err(dim_err(
                "FrozenCoefficients::new",
                abar.shape(),
                bbar.shape(),
            ));
        }
        Ok(Self { abar, bbar })
    }

    pub fn len(&self) -> usize {
        self.abar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs the plain recurrence with these coefficients on `inputs`.
    pub fn recurrence(&self, inputs: &DenseArray) -> Result<DenseArray> {
        run_recurrence(&self.abar, &self.bbar, inputs)
    }
}

/// Finite-horizon input-to-state maps under frozen coefficients.
#[derive(Debug, Clone)]
pub struct ReachabilityMaps {
    /// `H_t = Σ_i G_{t,i} ⊙ B̄_i ⊙ x_i↑`
    pub base: DenseArray,
    /// `H^gs_t = Σ_i G_{t,i} ⊙ B̄_i ⊙ (x_i + Σ_j α_ij x_j M)↑`
    pub routed: DenseArray,
}

pub fn frozen_reachability(
    coeffs: &FrozenCoefficients,
    grid: &TokenGrid,
    field: &RoutingField,
    proj: &ProjectionSet,
) -> Result<ReachabilityMaps> {
    let [len, dm, ds] = match *coeffs.abar.shape() {
        [l, d, n] => [l, d, n],
        _ => unreachable!("checked in FrozenCoefficients::new"),
    };
    if len != grid.len() || dm != grid.channels() || field.len() != len {
        return Err(dim_err(
            "frozen_reachability",
            coeffs.abar.shape(),
            &[grid.len(), grid.channels()],
        ));
    }
    let mixing = proj.mixing();
    let xm = grid.sequence().matmul(&mixing)?;
    let width = dm * ds;
    let mut base_terms = vec![0.0; len * width];
    let mut routed_terms = vec![0.0; len * width];
    for i in 0..len {
        let mut routed = grid.token(i).to_vec();
        for (s, &j) in field.candidates(i).iter().enumerate() {
            let a = field.alpha(0, i)[s];
            for (r, v) in routed.iter_mut().zip(token_slice(&xm, j)) {
                *r += a * v;
            }
        }
        let b_i = token_slice(&coeffs.bbar, i);
        for k in 0..width {
            base_terms[i * width + k] = b_i[k] * grid.token(i)[k / ds];
            routed_terms[i * width + k] = b_i[k] * routed[k / ds];
        }
    }
    let shape = vec![len, dm, ds];
    Ok(ReachabilityMaps {
        base: DenseArray::new(
            shape.clone(),
            survival_weighted_sums(&coeffs.abar, &base_terms),
        )?,
        routed: DenseArray::new(shape, survival_weighted_sums(&coeffs.abar, &routed_terms))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainmentReport {
    pub routed_equals_input: bool,
    pub states_equal: bool,
    pub outputs_equal: bool,
}

impl ContainmentReport {
    pub fn holds(&self) -> bool {
        self.routed_equals_input && self.states_equal && self.outputs_equal
    }
}

fn exactly_equal(a: &DenseArray, b: &DenseArray) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x == y)
}

/// Compares routed and base runs for exact equality, whatever `W_o` is.
pub fn compare_runs(
    core: &SsmCore,
    grid: &TokenGrid,
    proj: &ProjectionSet,
) -> Result<ContainmentReport> {
    let res = routed_scan(core, grid, proj)?;
    Ok(ContainmentReport {
        routed_equals_input: exactly_equal(&res.routed_inputs, &res.base_inputs),
        states_equal: exactly_equal(&res.routed.states, &res.base.states),
        outputs_equal: exactly_equal(&res.routed.outputs, &res.base.outputs),
    })
}

/// With `W_o = 0` the routed run must reproduce the base run exactly.
pub fn containment_check(
    core: &SsmCore,
    grid: &TokenGrid,
    proj: &ProjectionSet,
) -> Result<ContainmentReport> {
    if !proj.output_is_zero() {
        return Err(Error::Precondition("containment needs W_o = 0".into()));
    }
    compare_runs(core, grid, proj)
}
