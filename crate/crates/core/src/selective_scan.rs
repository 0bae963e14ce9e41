//! Selective state-space scan (S6 interface).
//!
//! Per token `u_t` of width `D`, the core generates a positive step size
//! `Δ_t` (softplus of a biased projection) and selective vectors `b_t`,
//! `c_t` of width `N_s`. Discretization uses zero-order hold for the
//! transition and an Euler step for the write:
//!
//! ```text
//! Ā_t[d,n] = exp(Δ_t[d] · A[d,n])      B̄_t[d,n] = Δ_t[d] · b_t[n]
//! H_t = Ā_t ⊙ H_{t-1} + B̄_t ⊙ u_t↑      y_t[d] = Σ_n H_t[d,n] · c_t[n]
//! ```
//!
//! with `H_{-1} = 0`. Positions are 0-based throughout.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{uniform_init, DenseArray, SeededRng};

/// How the per-token selective quantities are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGenerator {
    /// `Δ = softplus(u W_Δ + bias)`, `b = u W_b`, `c = u W_c`.
    Projected {
        w_delta: DenseArray,
        bias_delta: Vec<f64>,
        w_b: DenseArray,
        w_c: DenseArray,
    },
    /// Token-independent constants; used for frozen-coefficient analysis.
    Frozen {
        delta: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
}

/// Static SSM parameters plus the selective-parameter generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCore {
    d_model: usize,
    d_state: usize,
    a: DenseArray,
    generator: ParamGenerator,
}

/// Selective quantities generated from a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveParams {
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_negative(a: &DenseArray) -> Result<()> {
    if a.data().iter().all(|&v| v < 0.0) {
        Ok(())
    } else {
        Err(Error::Parameter(
            "every entry of the transition parameter A must be strictly negative".into(),
        ))
    }
}

impl SsmCore {
    pub fn new(
        a: DenseArray,
        w_delta: DenseArray,
        bias_delta: Vec<f64>,
        w_b: DenseArray,
        w_c: DenseArray,
    ) -> Result<Self> {
        let (d_model, d_state) = matrix_dims(&a)?;
        check_negative(&a)?;
        if w_delta.shape() != [d_model, d_model] {
            return Err(dim_err(
                "SsmCore::new (W_delta)",
                w_delta.shape(),
                &[d_model, d_model],
            ));
        }
        if bias_delta.len() != d_model {
            return Err(dim_err(
                "SsmCore::new (bias_delta)",
                &[bias_delta.len()],
                &[d_model],
            ));
        }
        for w in [&w_b, &w_c] {
            if w.shape() != [d_model, d_state] {
                return Err(dim_err(
                    "SsmCore::new (W_b/W_c)",
                    w.shape(),
                    &[d_model, d_state],
                ));
            }
        }
        Ok(Self {
            d_model,
            d_state,
            a,
            generator: ParamGenerator::Projected {
                w_delta,
                bias_delta,
                w_b,
                w_c,
            },
        })
    }

    /// A core whose generators ignore the token and return stored constants.
    pub fn frozen(a: DenseArray, delta: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let (d_model, d_state) = matrix_dims(&a)?;
        check_negative(&a)?;
        if delta.len() != d_model || b.len() != d_state || c.len() != d_state {
            return Err(dim_err(
                "SsmCore::frozen",
                &[delta.len(), b.len(), c.len()],
                &[d_model, d_state, d_state],
            ));
        }
        if delta.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Parameter(
                "frozen step sizes must be positive".into(),
            ));
        }
        Ok(Self {
            d_model,
            d_state,
            a,
            generator: ParamGenerator::Frozen { delta, b, c },
        })
    }

    /// `A[d,n] = -(n+1)`.
    pub fn s4d_real(d_model: usize, d_state: usize) -> DenseArray {
        DenseArray::from_fn(&[d_model, d_state], |k| -((k % d_state) as f64 + 1.0))
    }

    /// Random projections with scale `1/√D` and the S4D-real transition.
    pub fn random(rng: &mut SeededRng, d_model: usize, d_state: usize) -> Result<Self> {
        Self::random_scaled(rng, d_model, d_state, 1.0 / (d_model as f64).sqrt())
    }

    pub fn random_scaled(
        rng: &mut SeededRng,
        d_model: usize,
        d_state: usize,
        scale: f64,
    ) -> Result<Self> {
        let w_delta = uniform_init(rng, &[d_model, d_model], scale)?;
        let bias_delta = rng.vector(d_model, scale);
        let w_b = uniform_init(rng, &[d_model, d_state], scale)?;
        let w_c = uniform_init(rng, &[d_model, d_state], scale)?;
        Self::new(
            Self::s4d_real(d_model, d_state),
            w_delta,
            bias_delta,
            w_b,
            w_c,
        )
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_state(&self) -> usize {
        self.d_state
    }

    pub fn a(&self) -> &DenseArray {
        &self.a
    }

    pub fn generator(&self) -> &ParamGenerator {
        &self.generator
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.generator, ParamGenerator::Frozen { .. })
    }

    /// Number of stored scalars.
    pub fn num_params(&self) -> usize {
        self.a.len()
            + match &self.generator {
                ParamGenerator::Projected {
                    w_delta,
                    bias_delta,
                    w_b,
                    w_c,
                } => w_delta.len() + bias_delta.len() + w_b.len() + w_c.len(),
                ParamGenerator::Frozen { delta, b, c } => delta.len() + b.len() + c.len(),
            }
    }

    pub fn generate_params(&self, u: &[f64]) -> Result<SelectiveParams> {
        if u.len() != self.d_model {
            return Err(dim_err("generate_params", &[u.len()], &[self.d_model]));
        }
        match &self.generator {
            ParamGenerator::Projected {
                w_delta,
                bias_delta,
                w_b,
                w_c,
            } => {
                let mut delta = vec_mat(u, w_delta);
                for (v, b) in delta.iter_mut().zip(bias_delta) {
                    *v = softplus(*v + b);
                }
                Ok(SelectiveParams {
                    delta,
                    b: vec_mat(u, w_b),
                    c: vec_mat(u, w_c),
                })
            }
            ParamGenerator::Frozen { delta, b, c } => Ok(SelectiveParams {
                delta: delta.clone(),
                b: b.clone(),
                c: c.clone(),
            }),
        }
    }

    /// Zero-order hold for `Ā`, Euler for `B̄`; both `D × N_s`.
    pub fn discretize(&self, p: &SelectiveParams) -> Result<(DenseArray, DenseArray)> {
        let (dm, ds) = (self.d_model, self.d_state);
        if p.delta.len() != dm || p.b.len() != ds {
            return Err(dim_err(
                "discretize",
                &[p.delta.len(), p.b.len()],
                &[dm, ds],
            ));
        }
        let mut abar = vec![0.0; dm * ds];
        let mut bbar = vec![0.0; dm * ds];
        self.discretize_into(p, &mut abar, &mut bbar);
        Ok((
            DenseArray::new(vec![dm, ds], abar)?,
            DenseArray::new(vec![dm, ds], bbar)?,
        ))
    }

    fn discretize_into(&self, p: &SelectiveParams, abar: &mut [f64], bbar: &mut [f64]) {
        let ds = self.d_state;
        let a = self.a.data();
        for d in 0..self.d_model {
            let step = p.delta[d];
            for n in 0..ds {
                abar[d * ds + n] = (step * a[d * ds + n]).exp();
                bbar[d * ds + n] = step * p.b[n];
            }
        }
    }

    /// Generates and discretizes the selective quantities for every token.
    pub fn coefficients(&self, u: &DenseArray) -> Result<Coefficients> {
        let len = self.check_sequence(u)?;
        let (dm, ds) = (self.d_model, self.d_state);
        let mut delta = Vec::with_capacity(len * dm);
        let mut abar = vec![0.0; len * dm * ds];
        let mut bbar = vec![0.0; len * dm * ds];
        let mut c = Vec::with_capacity(len * ds);
        for (t, row) in u.data().chunks(dm).enumerate() {
            let p = self.generate_params(row)?;
            let span = t * dm * ds..(t + 1) * dm * ds;
            self.discretize_into(&p, &mut abar[span.clone()], &mut bbar[span]);
            delta.extend_from_slice(&p.delta);
            c.extend_from_slice(&p.c);
        }
        Ok(Coefficients {
            delta: DenseArray::new(vec![len, dm], delta)?,
            abar: DenseArray::new(vec![len, dm, ds], abar)?,
            bbar: DenseArray::new(vec![len, dm, ds], bbar)?,
            c: DenseArray::new(vec![len, ds], c)?,
        })
    }

    fn check_sequence(&self, u: &DenseArray) -> Result<usize> {
        match u.shape() {
            [len, d] if *d == self.d_model => Ok(*len),
            other => Err(dim_err("selective scan input", other, &[0, self.d_model])),
        }
    }
}

fn matrix_dims(a: &DenseArray) -> Result<(usize, usize)> {
    match a.shape() {
        [d, n] => Ok((*d, *n)),
        other => Err(Error::Parameter(format!(
            "A must be a D × N_s matrix, got {other:?}"
        ))),
    }
}

/// Row vector times matrix.
pub(crate) fn vec_mat(u: &[f64], w: &DenseArray) -> Vec<f64> {
    let n = w.shape()[1];
    let mut out = vec![0.0; n];
    for (k, &uk) in u.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[k * n..(k + 1) * n]) {
            *o += uk * wv;
        }
    }
    out
}

/// Discretized per-token coefficients for a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    /// `L × D`
    pub delta: DenseArray,
    /// `L × D × N_s`
    pub abar: DenseArray,
    /// `L × D × N_s`
    pub bbar: DenseArray,
    /// `L × N_s`
    pub c: DenseArray,
}

impl Coefficients {
    pub fn len(&self) -> usize {
        self.abar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Coefficients, hidden states and outputs of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSequence {
    pub coeffs: Coefficients,
    /// `L × D × N_s`
    pub states: DenseArray,
    /// `L × D`
    pub outputs: DenseArray,
}

impl DiscretizedSequence {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn d_state(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn abar(&self, t: usize) -> &[f64] {
        token_slice(&self.coeffs.abar, t)
    }

    pub fn bbar(&self, t: usize) -> &[f64] {
        token_slice(&self.coeffs.bbar, t)
    }

    pub fn c(&self, t: usize) -> &[f64] {
        token_slice(&self.coeffs.c, t)
    }

    pub fn state(&self, t: usize) -> &[f64] {
        token_slice(&self.states, t)
    }

    pub fn output(&self, t: usize) -> &[f64] {
        token_slice(&self.outputs, t)
    }

    /// `G_{t,i} = Ā_{i+1} ⊙ … ⊙ Ā_t`; all-ones when `i == t`.
    pub fn survival_factor(&self, t: usize, i: usize) -> Result<DenseArray> {
        survival_factor(&self.coeffs.abar, t, i)
    }
}

pub(crate) fn token_slice(a: &DenseArray, t: usize) -> &[f64] {
    let width = a.len() / a.shape()[0];
    &a.data()[t * width..(t + 1) * width]
}

/// Entrywise product of `abar[i+1..=t]` over an `L × D × N_s` tensor.
pub fn survival_factor(abar: &DenseArray, t: usize, i: usize) -> Result<DenseArray> {
    let len = abar.shape()[0];
    if i > t {
        return Err(Error::Index(format!(
            "survival factor needs i <= t, got i={i}, t={t}"
        )));
    }
    if t >= len {
        return Err(Error::Index(format!(
            "position {t} outside sequence of length {len}"
        )));
    }
    let shape = &abar.shape()[1..];
    let mut g = DenseArray::filled(shape, 1.0);
    for j in i + 1..=t {
        for (gv, av) in g.data_mut().iter_mut().zip(token_slice(abar, j)) {
            *gv *= av;
        }
    }
    Ok(g)
}

/// Runs `H_t = Ā_t ⊙ H_{t-1} + B̄_t ⊙ u_t↑` from a zero state.
///
/// `abar`, `bbar` are `L × D × N_s`, `u` is `L × D`. Returns the states.
pub fn run_recurrence(abar: &DenseArray, bbar: &DenseArray, u: &DenseArray) -> Result<DenseArray> {
    let [len, dm, ds] = rank3(abar)?;
    if bbar.shape() != abar.shape() {
        return Err(dim_err("run_recurrence", abar.shape(), bbar.shape()));
    }
    if u.shape() != [len, dm] {
        return Err(dim_err("run_recurrence", u.shape(), &[len, dm]));
    }
    let width = dm * ds;
    let mut states = vec![0.0; len * width];
    let mut h = vec![0.0; width];
    for t in 0..len {
        let a_t = &abar.data()[t * width..(t + 1) * width];
        let b_t = &bbar.data()[t * width..(t + 1) * width];
        let u_t = &u.data()[t * dm..(t + 1) * dm];
        for d in 0..dm {
            for n in 0..ds {
                let k = d * ds + n;
                h[k] = a_t[k] * h[k] + b_t[k] * u_t[d];
            }
        }
        states[t * width..(t + 1) * width].copy_from_slice(&h);
    }
    DenseArray::new(vec![len, dm, ds], states)
}

fn rank3(a: &DenseArray) -> Result<[usize; 3]> {
    match a.shape() {
        [l, d, n] => Ok([*l, *d, *n]),
        other => Err(Error::Parameter(format!(
            "expected an L × D × N_s tensor, got {other:?}"
        ))),
    }
}

/// `y_t[d] = Σ_n H_t[d,n] c_t[n]`.
pub fn readout(states: &DenseArray, c: &DenseArray) -> Result<DenseArray> {
    let [len, dm, ds] = rank3(states)?;
    if c.shape() != [len, ds] {
        return Err(dim_err("readout", c.shape(), &[len, ds]));
    }
    let mut out = vec![0.0; len * dm];
    for t in 0..len {
        let c_t = &c.data()[t * ds..(t + 1) * ds];
        let h_t = token_slice(states, t);
        for d in 0..dm {
            out[t * dm + d] = h_t[d * ds..(d + 1) * ds]
                .iter()
                .zip(c_t)
                .map(|(h, c)| h * c)
                .sum();
        }
    }
    DenseArray::new(vec![len, dm], out)
}

/// Sequential selective scan.
pub fn recurrent_scan(core: &SsmCore, u: &DenseArray) -> Result<DiscretizedSequence> {
    let coeffs = core.coefficients(u)?;
    let states = run_recurrence(&coeffs.abar, &coeffs.bbar, u)?;
    let outputs = readout(&states, &coeffs.c)?;
    Ok(DiscretizedSequence {
        coeffs,
        states,
        outputs,
    })
}

/// An affine update `H ↦ a ⊙ H + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePair {
    pub a: Vec<f64>,
    pub u: Vec<f64>,
}

impl AffinePair {
    pub fn identity(width: usize) -> Self {
        Self {
            a: vec![1.0; width],
            u: vec![0.0; width],
        }
    }

    /// `later ∘ earlier = (A_l ⊙ A_e, A_l ⊙ U_e + U_l)`.
    pub fn compose(later: &AffinePair, earlier: &AffinePair) -> AffinePair {
        AffinePair {
            a: later.a.iter().zip(&earlier.a).map(|(l, e)| l * e).collect(),
            u: later
                .a
                .iter()
                .zip(&earlier.u)
                .zip(&later.u)
                .map(|((al, ue), ul)| al * ue + ul)
                .collect(),
        }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.u)
            .zip(h)
            .map(|((a, u), h)| a * h + u)
            .collect()
    }
}

/// Inclusive prefix composition of `pairs` in balanced-tree order
/// (up-sweep then down-sweep). Element `t` of the result is
/// `pairs[t] ∘ … ∘ pairs[0]`.
pub fn inclusive_scan(mut pairs: Vec<AffinePair>) -> Vec<AffinePair> {
    let n = pairs.len();
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            pairs[i] = AffinePair::compose(&pairs[i], &pairs[i - stride]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            pairs[i] = AffinePair::compose(&pairs[i], &pairs[i - stride]);
            i += 2 * stride;
        }
        stride /= 2;
    }
    pairs
}

/// Selective scan evaluated through the associative affine-pair scan.
pub fn prefix_scan(core: &SsmCore, u: &DenseArray) -> Result<DiscretizedSequence> {
    let coeffs = core.coefficients(u)?;
    let [len, dm, ds] = rank3(&coeffs.abar)?;
    let width = dm * ds;
    let pairs = (0..len)
        .map(|t| {
            let a = token_slice(&coeffs.abar, t).to_vec();
            let b = token_slice(&coeffs.bbar, t);
            let u_t = &u.data()[t * dm..(t + 1) * dm];
            let w = (0..width).map(|k| b[k] * u_t[k / ds]).collect();
            AffinePair { a, u: w }
        })
        .collect();
    // With a zero initial state H_t is the additive part of the prefix.
    let mut states = Vec::with_capacity(len * width);
    for p in inclusive_scan(pairs) {
        states.extend(p.u);
    }
    let states = DenseArray::new(vec![len, dm, ds], states)?;
    let outputs = readout(&states, &coeffs.c)?;
    Ok(DiscretizedSequence {
        coeffs,
        states,
        outputs,
    })
}

/// `H_t = Σ_{i≤t} G_{t,i} ⊙ B̄_i ⊙ u_i↑`, evaluated directly.
pub fn unrolled_state(core: &SsmCore, u: &DenseArray, t: usize) -> Result<DenseArray> {
    let coeffs = core.coefficients(u)?;
    unrolled_from_coefficients(&coeffs.abar, &coeffs.bbar, u, t)
}

pub(crate) fn unrolled_from_coefficients(
    abar: &DenseArray,
    bbar: &DenseArray,
    u: &DenseArray,
    t: usize,
) -> Result<DenseArray> {
    let [len, dm, ds] = rank3(abar)?;
    if t >= len {
        return Err(Error::Index(format!(
            "position {t} outside sequence of length {len}"
        )));
    }
    let mut h = DenseArray::zeros(&[dm, ds]);
    for i in 0..=t {
        let g = survival_factor(abar, t, i)?;
        let b_i = token_slice(bbar, i);
        let u_i = &u.data()[i * dm..(i + 1) * dm];
        for (k, hv) in h.data_mut().iter_mut().enumerate() {
            *hv += g.data()[k] * b_i[k] * u_i[k / ds];
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_frozen(abar: f64, bbar: f64, c: f64) -> SsmCore {
        // Δ = 1, so Ā = exp(A) and B̄ = b.
        let a = DenseArray::new(vec![1, 1], vec![abar.ln()]).unwrap();
        SsmCore::frozen(a, vec![1.0], vec![bbar], vec![c]).unwrap()
    }

    fn seq(rows: &[&[f64]]) -> DenseArray {
        let d = rows[0].len();
        DenseArray::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn zero_token_gives_ln2_steps() {
        let mut rng = SeededRng::new(5);
        let core = SsmCore::random(&mut rng, 3, 2).unwrap();
        let core = match core.generator {
            ParamGenerator::Projected {
                w_delta, w_b, w_c, ..
            } => SsmCore::new(core.a, w_delta, vec![0.0; 3], w_b, w_c).unwrap(),
            _ => unreachable!(),
        };
        let p = core.generate_params(&[0.0; 3]).unwrap();
        for v in &p.delta {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(p.b.iter().chain(&p.c).all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_positive() {
        for x in [-800.0, -40.0, -1.0, 0.0, 3.0, 50.0, 800.0] {
            assert!(softplus(x) > 0.0 || x < -700.0, "softplus({x})");
        }
        assert!(softplus(-40.0) > 0.0);
    }

    #[test]
    fn hand_computed_params() {
        // D = 2, N_s = 1
        let a = DenseArray::new(vec![2, 1], vec![-1.0, -2.0]).unwrap();
        let w_delta = DenseArray::new(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0]).unwrap();
        let w_b = DenseArray::new(vec![2, 1], vec![3.0, -1.0]).unwrap();
        let w_c = DenseArray::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        let core = SsmCore::new(a, w_delta, vec![0.1, -0.2], w_b, w_c).unwrap();
        let u = [0.3, -0.7];
        let p = core.generate_params(&u).unwrap();
        let pre0 = 0.3 * 0.5 + -0.7 * 0.25 + 0.1;
        let pre1 = -0.3 + -0.7 * 2.0 - 0.2;
        assert!((p.delta[0] - (1.0 + f64::exp(pre0)).ln()).abs() <= 1e-12);
        assert!((p.delta[1] - (1.0 + f64::exp(pre1)).ln()).abs() <= 1e-12);
        assert!((p.b[0] - (0.9 + 0.7)).abs() <= 1e-12);
        assert!((p.c[0] - (0.15 - 0.35)).abs() <= 1e-12);
    }

    #[test]
    fn generate_params_checks_length() {
        let core = SsmCore::random(&mut SeededRng::new(0), 3, 2).unwrap();
        assert!(matches!(
            core.generate_params(&[1.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn discretize_closed_forms() {
        let a = DenseArray::new(vec![1, 1], vec![-1.0]).unwrap();
        let core = SsmCore::frozen(a, vec![1.0], vec![0.0], vec![0.0]).unwrap();
        let (ab, bb) = core
            .discretize(&SelectiveParams {
                delta: vec![1.0],
                b: vec![0.0],
                c: vec![0.0],
            })
            .unwrap();
        assert!((ab.data()[0] - 0.36787944117144233).abs() < 1e-15);
        assert_eq!(bb.data()[0], 0.0);

        let a = DenseArray::new(vec![1, 1], vec![-0.5]).unwrap();
        let core = SsmCore::frozen(a, vec![2.0], vec![3.0], vec![0.0]).unwrap();
        let (ab, bb) = core
            .discretize(&SelectiveParams {
                delta: vec![2.0],
                b: vec![3.0],
                c: vec![0.0],
            })
            .unwrap();
        assert!((ab.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bb.data()[0], 6.0);
    }

    #[test]
    fn rejects_nonnegative_transition() {
        let a = DenseArray::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        assert!(SsmCore::frozen(a, vec![1.0], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn zero_input_zero_state() {
        let core = SsmCore::random(&mut SeededRng::new(1), 4, 3).unwrap();
        let out = recurrent_scan(&core, &DenseArray::zeros(&[6, 4])).unwrap();
        assert!(out.states.data().iter().all(|&v| v == 0.0));
        assert!(out.outputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_has_no_retention() {
        let mut rng = SeededRng::new(2);
        let core = SsmCore::random(&mut rng, 3, 2).unwrap();
        let u = DenseArray::new(vec![1, 3], rng.vector(3, 1.0)).unwrap();
        let out = recurrent_scan(&core, &u).unwrap();
        let b = out.bbar(0);
        for (k, &h) in out.state(0).iter().enumerate() {
            assert_eq!(h, b[k] * u.data()[k / 2]);
        }
    }

    #[test]
    fn two_step_hand_unroll() {
        let core = tiny_frozen(0.5, 1.0, 1.0);
        let out = recurrent_scan(&core, &seq(&[&[1.0], &[1.0]])).unwrap();
        let h = out.states.data();
        assert!((h[0] - 1.0).abs() < 1e-15 && (h[1] - 1.5).abs() < 1e-15);
        let y = out.outputs.data();
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn transitions_contract() {
        let mut rng = SeededRng::new(9);
        let core = SsmCore::random_scaled(&mut rng, 5, 4, 2.0).unwrap();
        let u = DenseArray::new(vec![20, 5], rng.vector(100, 3.0)).unwrap();
        let out = recurrent_scan(&core, &u).unwrap();
        assert!(out.coeffs.abar.data().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(out.coeffs.delta.data().iter().all(|&d| d > 0.0));
        assert_eq!(out.outputs.shape(), &[20, 5]);
    }

    #[test]
    fn identity_pair_is_neutral() {
        let mut rng = SeededRng::new(4);
        let p = AffinePair {
            a: rng.vector(6, 1.0),
            u: rng.vector(6, 1.0),
        };
        let id = AffinePair::identity(6);
        assert_eq!(AffinePair::compose(&id, &p), p);
        assert_eq!(AffinePair::compose(&p, &id), p);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = SeededRng::new(6);
        for _ in 0..50 {
            let mut pair = || AffinePair {
                a: rng.vector(8, 1.0),
                u: rng.vector(8, 1.0),
            };
            let (p1, p2, p3) = (pair(), pair(), pair());
            let left = AffinePair::compose(&AffinePair::compose(&p3, &p2), &p1);
            let right = AffinePair::compose(&p3, &AffinePair::compose(&p2, &p1));
            assert!(crate::tensor::max_abs_diff(&left.a, &right.a) <= 1e-12);
            assert!(crate::tensor::max_abs_diff(&left.u, &right.u) <= 1e-12);
        }
    }

    #[test]
    fn prefix_scan_matches_recurrence_l64() {
        let mut rng = SeededRng::new(8);
        let core = SsmCore::random(&mut rng, 4, 4).unwrap();
        let u = DenseArray::new(vec![64, 4], rng.vector(256, 1.0)).unwrap();
        let a = recurrent_scan(&core, &u).unwrap();
        let b = prefix_scan(&core, &u).unwrap();
        assert!(a.states.max_abs_diff(&b.states).unwrap() <= 1e-10);
        assert!(a.outputs.max_abs_diff(&b.outputs).unwrap() <= 1e-10);
    }

    #[test]
    fn inclusive_scan_matches_sequential_fold() {
        let mut rng = SeededRng::new(10);
        for n in 1..40 {
            let pairs: Vec<_> = (0..n)
                .map(|_| AffinePair {
                    a: rng.vector(3, 1.0),
                    u: rng.vector(3, 1.0),
                })
                .collect();
            let tree = inclusive_scan(pairs.clone());
            let mut acc = AffinePair::identity(3);
            for (p, t) in pairs.iter().zip(&tree) {
                acc = AffinePair::compose(p, &acc);
                assert!(crate::tensor::max_abs_diff(&acc.u, &t.u) <= 1e-12);
                assert!(crate::tensor::max_abs_diff(&acc.a, &t.a) <= 1e-12);
            }
        }
    }

    #[test]
    fn survival_factor_cases() {
        let core = tiny_frozen(0.5, 1.0, 1.0);
        let u = DenseArray::filled(&[6, 1], 1.0);
        let out = recurrent_scan(&core, &u).unwrap();
        assert_eq!(out.survival_factor(3, 3).unwrap().data(), &[1.0]);
        assert_eq!(out.survival_factor(3, 2).unwrap().data(), out.abar(3));
        assert!((out.survival_factor(4, 1).unwrap().data()[0] - 0.125).abs() < 1e-15);
        assert!(matches!(out.survival_factor(1, 2), Err(Error::Index(_))));
    }

    #[test]
    fn unrolled_first_token_and_zero_input() {
        let mut rng = SeededRng::new(12);
        let core = SsmCore::random(&mut rng, 3, 2).unwrap();
        let u = DenseArray::new(vec![5, 3], rng.vector(15, 1.0)).unwrap();
        let rec = recurrent_scan(&core, &u).unwrap();
        let h0 = unrolled_state(&core, &u, 0).unwrap();
        for (k, &h) in h0.data().iter().enumerate() {
            assert_eq!(h, rec.bbar(0)[k] * u.data()[k / 2]);
        }
        let z = unrolled_state(&core, &DenseArray::zeros(&[5, 3]), 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(unrolled_state(&core, &u, 5), Err(Error::Index(_))));
    }

    #[test]
    fn unrolled_matches_recurrence_l16() {
        let mut rng = SeededRng::new(13);
        let core = SsmCore::random(&mut rng, 4, 3).unwrap();
        let u = DenseArray::new(vec![16, 4], rng.vector(64, 1.0)).unwrap();
        let rec = recurrent_scan(&core, &u).unwrap();
        for t in 0..16 {
            let h = unrolled_state(&core, &u, t).unwrap();
            assert!(crate::tensor::max_abs_diff(h.data(), rec.state(t)) <= 1e-10);
        }
    }
}
