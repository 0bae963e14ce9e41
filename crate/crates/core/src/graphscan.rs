//! GraphScan: local semantic routing of visual tokens.
//!
//! For token `i` the candidate set is the `(2r+1)²` window of lattice
//! positions around it, clamped into the grid (replicate padding), so every
//! token has the same number of slots. Affinities are
//!
//! ```text
//! s_ij = q_i · k_j / √d + b_rel(slot)      α_i = softmax_j(s_ij)
//! x'_i = x_i + (Σ_j α_ij v_j) W_o
//! ```
//!
//! Lattice coordinates are 0-based `(row, col)`; normalized coordinates are
//! `[row, col]` pairs in `[-1, 1]²`.

use crate::error::{dim_err, Error, Result};
use crate::selective_scan::vec_mat;
use crate::tensor::{matmul_into, softmax_in_place, uniform_init, DenseArray, SeededRng};

/// An `H × W × D` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    channels: usize,
    features: DenseArray,
}

/// Maps lattice index `k ∈ 0..n` to `[-1, 1]`; a 1-wide axis maps to 0.
pub fn normalize_axis(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

impl TokenGrid {
    pub fn new(features: DenseArray) -> Result<Self> {
        match *features.shape() {
            [height, width, channels] => Ok(Self {
                height,
                width,
                channels,
                features,
            }),
            _ => Err(Error::Parameter(format!(
                "token grid needs an H × W × D array, got {:?}",
                features.shape()
            ))),
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(DenseArray::zeros(&[height, width, channels])).expect("rank 3")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl FnMut(usize) -> f64,
    ) -> Self {
        Self::new(DenseArray::from_fn(&[height, width, channels], f)).expect("rank 3")
    }

    pub fn random(
        rng: &mut SeededRng,
        height: usize,
        width: usize,
        channels: usize,
        scale: f64,
    ) -> Result<Self> {
        Self::new(uniform_init(rng, &[height, width, channels], scale)?)
    }

    /// Reshapes an `L × D` raster sequence back onto an `H × W` lattice.
    pub fn from_sequence(height: usize, width: usize, seq: DenseArray) -> Result<Self> {
        match *seq.shape() {
            [len, d] if len == height * width => Self::new(seq.reshape(&[height, width, d])?),
            _ => Err(dim_err(
                "TokenGrid::from_sequence",
                seq.shape(),
                &[height * width, 0],
            )),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of tokens `L = H·W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &DenseArray {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut DenseArray {
        &mut self.features
    }

    pub fn data(&self) -> &[f64] {
        self.features.data()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.features.data()[i * self.channels..(i + 1) * self.channels]
    }

    /// Raster-order `L × D` view (copied).
    pub fn sequence(&self) -> DenseArray {
        DenseArray::new(
            vec![self.len(), self.channels],
            self.features.data().to_vec(),
        )
        .expect("consistent extents")
    }

    pub fn lattice(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    pub fn normalized(&self, i: usize) -> [f64; 2] {
        let (r, c) = self.lattice(i);
        [
            normalize_axis(r, self.height),
            normalize_axis(c, self.width),
        ]
    }

    pub fn same_layout(&self, other: &TokenGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Window side `2r + 1` squared.
pub fn window_size(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Window offsets `(δrow, δcol)` in row-major slot order.
pub fn window_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r)
        .flat_map(|dr| (-r..=r).map(move |dc| (dr, dc)))
        .collect()
}

/// Candidate lattice positions for `g`, clamped into the grid.
pub fn candidate_set(
    g: (usize, usize),
    radius: usize,
    height: usize,
    width: usize,
) -> Result<Vec<(usize, usize)>> {
    if g.0 >= height || g.1 >= width {
        return Err(Error::Index(format!(
            "lattice coordinate {g:?} outside {height} × {width}"
        )));
    }
    Ok(window_offsets(radius)
        .into_iter()
        .map(|(dr, dc)| {
            (
                (g.0 as isize + dr).clamp(0, height as isize - 1) as usize,
                (g.1 as isize + dc).clamp(0, width as isize - 1) as usize,
            )
        })
        .collect())
}

/// Learnable bias indexed by nominal window offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBias {
    radius: usize,
    table: Vec<f64>,
}

impl RelativeBias {
    pub fn zeros(radius: usize) -> Self {
        Self {
            radius,
            table: vec![0.0; window_size(radius)],
        }
    }

    pub fn new(radius: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != window_size(radius) {
            return Err(dim_err(
                "RelativeBias::new",
                &[table.len()],
                &[window_size(radius)],
            ));
        }
        Ok(Self { radius, table })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn slot(&self, dr: isize, dc: isize) -> Result<usize> {
        let r = self.radius as isize;
        if dr.abs() > r || dc.abs() > r {
            return Err(Error::Index(format!(
                "offset ({dr}, {dc}) outside radius {r}"
            )));
        }
        Ok(((dr + r) * (2 * r + 1) + dc + r) as usize)
    }

    pub fn get(&self, dr: isize, dc: isize) -> Result<f64> {
        Ok(self.table[self.slot(dr, dc)?])
    }

    pub fn set(&mut self, dr: isize, dc: isize, value: f64) -> Result<()> {
        let k = self.slot(dr, dc)?;
        self.table[k] = value;
        Ok(())
    }
}

/// Query/key/value/output projections and the shared relative bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: DenseArray,
    pub w_k: DenseArray,
    pub w_v: DenseArray,
    pub w_o: DenseArray,
    pub bias: RelativeBias,
    heads: usize,
}

impl ProjectionSet {
    pub fn new(
        w_q: DenseArray,
        w_k: DenseArray,
        w_v: DenseArray,
        w_o: DenseArray,
        bias: RelativeBias,
        heads: usize,
    ) -> Result<Self> {
        let channels = w_q.shape()[0];
        let qk = w_q.shape().get(1).copied().unwrap_or(0);
        let dv = w_v.shape().get(1).copied().unwrap_or(0);
        if w_q.shape() != [channels, qk] || w_k.shape() != [channels, qk] {
            return Err(dim_err("ProjectionSet (W_q/W_k)", w_q.shape(), w_k.shape()));
        }
        if w_v.shape() != [channels, dv] || w_o.shape() != [dv, channels] {
            return Err(dim_err("ProjectionSet (W_v/W_o)", w_v.shape(), w_o.shape()));
        }
        if heads == 0 || qk % heads != 0 || dv % heads != 0 {
            return Err(Error::Parameter(format!(
                "head count {heads} must divide d = {qk} and d_v = {dv}"
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            bias,
            heads,
        })
    }

    /// `W_q, W_k, W_v ~ U[±1/√D]`, `W_o = 0`, zero bias.
    pub fn random(
        rng: &mut SeededRng,
        channels: usize,
        qk_dim: usize,
        value_dim: usize,
        radius: usize,
        heads: usize,
    ) -> Result<Self> {
        let scale = 1.0 / (channels as f64).sqrt();
        Self::new(
            uniform_init(rng, &[channels, qk_dim], scale)?,
            uniform_init(rng, &[channels, qk_dim], scale)?,
            uniform_init(rng, &[channels, value_dim], scale)?,
            DenseArray::zeros(&[value_dim, channels]),
            RelativeBias::zeros(radius),
            heads,
        )
    }

    /// Every weight and bias entry drawn from `U[±scale]`, including `W_o`.
    pub fn random_full(
        rng: &mut SeededRng,
        channels: usize,
        qk_dim: usize,
        value_dim: usize,
        radius: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Self> {
        Self::new(
            uniform_init(rng, &[channels, qk_dim], scale)?,
            uniform_init(rng, &[channels, qk_dim], scale)?,
            uniform_init(rng, &[channels, value_dim], scale)?,
            uniform_init(rng, &[value_dim, channels], scale)?,
            RelativeBias::new(radius, rng.vector(window_size(radius), scale))?,
            heads,
        )
    }

    /// All projections and the bias set to zero.
    pub fn zeros(channels: usize, qk_dim: usize, value_dim: usize, radius: usize) -> Self {
        Self::new(
            DenseArray::zeros(&[channels, qk_dim]),
            DenseArray::zeros(&[channels, qk_dim]),
            DenseArray::zeros(&[channels, value_dim]),
            DenseArray::zeros(&[value_dim, channels]),
            RelativeBias::zeros(radius),
            1,
        )
        .expect("consistent shapes")
    }

    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        if heads == 0
            || !self.qk_dim().is_multiple_of(heads)
            || !self.value_dim().is_multiple_of(heads)
        {
            return Err(Error::Parameter(format!(
                "head count {heads} must divide d = {} and d_v = {}",
                self.qk_dim(),
                self.value_dim()
            )));
        }
        self.heads = heads;
        Ok(self)
    }

    pub fn with_output(mut self, w_o: DenseArray) -> Result<Self> {
        if w_o.shape() != self.w_o.shape() {
            return Err(dim_err(
                "ProjectionSet::with_output",
                w_o.shape(),
                self.w_o.shape(),
            ));
        }
        self.w_o = w_o;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn qk_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.shape()[1]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn radius(&self) -> usize {
        self.bias.radius()
    }

    pub fn output_is_zero(&self) -> bool {
        self.w_o.data().iter().all(|&v| v == 0.0)
    }

    /// `M = W_v W_o`.
    pub fn mixing(&self) -> DenseArray {
        self.w_v.matmul(&self.w_o).expect("consistent shapes")
    }

    pub fn num_params(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len() + self.bias.table.len()
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.channels() != self.channels() {
            return Err(dim_err("GraphScan", &grid.dims(), self.w_q.shape()));
        }
        Ok(())
    }
}

/// Candidate sets and affinities for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingField {
    height: usize,
    width: usize,
    radius: usize,
    heads: usize,
    /// `L × S` clamped raster indices.
    candidates: Vec<usize>,
    /// `heads × L × S`
    scores: Vec<f64>,
    /// `heads × L × S`
    alpha: Vec<f64>,
}

impl RoutingField {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn slots(&self) -> usize {
        window_size(self.radius)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn candidates(&self, i: usize) -> &[usize] {
        let s = self.slots();
        &self.candidates[i * s..(i + 1) * s]
    }

    pub fn scores(&self, head: usize, i: usize) -> &[f64] {
        let s = self.slots();
        let base = (head * self.len() + i) * s;
        &self.scores[base..base + s]
    }

    pub fn alpha(&self, head: usize, i: usize) -> &[f64] {
        let s = self.slots();
        let base = (head * self.len() + i) * s;
        &self.alpha[base..base + s]
    }

    /// Affinities averaged over heads.
    pub fn mean_alpha(&self, i: usize) -> Vec<f64> {
        let mut out = self.alpha(0, i).to_vec();
        for h in 1..self.heads {
            for (o, a) in out.iter_mut().zip(self.alpha(h, i)) {
                *o += a;
            }
        }
        if self.heads > 1 {
            for o in &mut out {
                *o /= self.heads as f64;
            }
        }
        out
    }

    /// Builds a field from explicit affinities (single head, scores unset).
    pub fn from_alpha(height: usize, width: usize, radius: usize, alpha: Vec<f64>) -> Result<Self> {
        let s = window_size(radius);
        let len = height * width;
        if alpha.len() != len * s {
            return Err(dim_err(
                "RoutingField::from_alpha",
                &[alpha.len()],
                &[len * s],
            ));
        }
        Ok(Self {
            height,
            width,
            radius,
            heads: 1,
            candidates: candidate_table(height, width, radius),
            scores: vec![0.0; len * s],
            alpha,
        })
    }
}

fn candidate_table(height: usize, width: usize, radius: usize) -> Vec<usize> {
    let offsets = window_offsets(radius);
    let mut out = Vec::with_capacity(height * width * offsets.len());
    for row in 0..height {
        for col in 0..width {
            for &(dr, dc) in &offsets {
                let r = (row as isize + dr).clamp(0, height as isize - 1) as usize;
                let c = (col as isize + dc).clamp(0, width as isize - 1) as usize;
                out.push(r * width + c);
            }
        }
    }
    out
}

fn project(grid: &TokenGrid, w: &DenseArray) -> Vec<f64> {
    let (len, n) = (grid.len(), w.shape()[1]);
    let mut out = vec![0.0; len * n];
    matmul_into(grid.data(), w.data(), &mut out, len, grid.channels(), n);
    out
}

/// Scores and softmax affinities over each token's window.
pub fn compute_affinities(grid: &TokenGrid, proj: &ProjectionSet) -> Result<RoutingField> {
    proj.check_grid(grid)?;
    let (len, radius, heads) = (grid.len(), proj.radius(), proj.heads());
    let slots = window_size(radius);
    let d = proj.qk_dim();
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q = project(grid, &proj.w_q);
    let k = project(grid, &proj.w_k);
    let candidates = candidate_table(grid.height(), grid.width(), radius);
    let bias = proj.bias.table();

    let mut scores = vec![0.0; heads * len * slots];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..len {
            let q_i = &q[i * d..(i + 1) * d][cols.clone()];
            let row = &mut scores[(h * len + i) * slots..(h * len + i + 1) * slots];
            for (s, out) in row.iter_mut().enumerate() {
                let j = candidates[i * slots + s];
                let k_j = &k[j * d..(j + 1) * d][cols.clone()];
                let dot: f64 = q_i.iter().zip(k_j).map(|(a, b)| a * b).sum();
                *out = dot * inv_sqrt + bias[s];
            }
        }
    }
    let mut alpha = scores.clone();
    for row in alpha.chunks_mut(slots) {
        softmax_in_place(row)?;
    }
    Ok(RoutingField {
        height: grid.height(),
        width: grid.width(),
        radius,
        heads,
        candidates,
        scores,
        alpha,
    })
}

fn check_field(grid: &TokenGrid, field: &RoutingField, proj: &ProjectionSet) -> Result<()> {
    proj.check_grid(grid)?;
    if field.height != grid.height() || field.width != grid.width() {
        return Err(dim_err(
            "routing field",
            &[field.height, field.width],
            &[grid.height(), grid.width()],
        ));
    }
    if field.heads != proj.heads() || field.radius != proj.radius() {
        return Err(Error::Parameter(format!(
            "field (heads {}, radius {}) does not match projections (heads {}, radius {})",
            field.heads,
            field.radius,
            proj.heads(),
            proj.radius()
        )));
    }
    Ok(())
}

/// Per-token messages `m_i = (Σ_j α_ij v_j) W_o`, as an `L × D` array.
pub fn messages(
    grid: &TokenGrid,
    field: &RoutingField,
    proj: &ProjectionSet,
) -> Result<DenseArray> {
    check_field(grid, field, proj)?;
    let (len, slots, heads) = (grid.len(), field.slots(), field.heads);
    let dv = proj.value_dim();
    let dvh = dv / heads;
    let v = project(grid, &proj.w_v);
    let mut agg = vec![0.0; len * dv];
    for h in 0..heads {
        for i in 0..len {
            let alpha = field.alpha(h, i);
            let out = &mut agg[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for (s, &a) in alpha.iter().enumerate() {
                let j = field.candidates[i * slots + s];
                let v_j = &v[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                for (o, &vv) in out.iter_mut().zip(v_j) {
                    *o += a * vv;
                }
            }
        }
    }
    let mut m = vec![0.0; len * grid.channels()];
    matmul_into(&agg, proj.w_o.data(), &mut m, len, dv, grid.channels());
    DenseArray::new(vec![len, grid.channels()], m)
}

/// `x'_i = x_i + m_i`; the grid keeps its shape.
pub fn route_tokens(
    grid: &TokenGrid,
    field: &RoutingField,
    proj: &ProjectionSet,
) -> Result<TokenGrid> {
    let m = messages(grid, field, proj)?;
    let mut out = grid.clone();
    for (x, mv) in out.features.data_mut().iter_mut().zip(m.data()) {
        *x += mv;
    }
    Ok(out)
}

/// Affinities followed by routing; the head count comes from `proj`.
pub fn multi_head_route(grid: &TokenGrid, proj: &ProjectionSet) -> Result<TokenGrid> {
    let field = compute_affinities(grid, proj)?;
    route_tokens(grid, &field, proj)
}

/// Row-stochastic sparse routing matrix `P` in compressed-row form, plus
/// the mixing matrix `M = W_v W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRouting {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    mixing: DenseArray,
}

impl SparseRouting {
    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn mixing(&self) -> &DenseArray {
        &self.mixing
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    /// Entry `P_ij`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `P · X` for a dense `L × n` matrix.
    pub fn mul_dense(&self, x: &DenseArray) -> Result<DenseArray> {
        let rows = self.rows();
        if x.shape().len() != 2 || x.shape()[0] != rows {
            return Err(dim_err(
                "SparseRouting::mul_dense",
                &[rows, rows],
                x.shape(),
            ));
        }
        let n = x.shape()[1];
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let o = &mut out[i * n..(i + 1) * n];
            for (j, p) in self.row(i) {
                for (ov, xv) in o.iter_mut().zip(&x.data()[j * n..(j + 1) * n]) {
                    *ov += p * xv;
                }
            }
        }
        DenseArray::new(vec![rows, n], out)
    }

    /// For every column `j`, the rows `i` with `P_ij ≠ 0` and their weights.
    pub fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.rows()];
        for i in 0..self.rows() {
            for (j, p) in self.row(i) {
                cols[j].push((i, p));
            }
        }
        cols
    }
}

/// Merges each token's window slots into a sparse row (duplicates summed).
pub fn routing_matrix(field: &RoutingField, proj: &ProjectionSet) -> Result<SparseRouting> {
    SparseRouting::from_field(field, proj.mixing())
}

impl SparseRouting {
    pub fn from_field(field: &RoutingField, mixing: DenseArray) -> Result<Self> {
        if field.heads != 1 {
            return Err(Error::Parameter(format!(
                "a single routing matrix exists only for one head, field has {}",
                field.heads
            )));
        }
        let (len, slots) = (field.len(), field.slots());
        let mut row_ptr = Vec::with_capacity(len + 1);
        let mut cols = Vec::with_capacity(len * slots);
        let mut vals = Vec::with_capacity(len * slots);
        row_ptr.push(0);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(slots);
        for i in 0..len {
            entries.clear();
            entries.extend(
                field
                    .candidates(i)
                    .iter()
                    .copied()
                    .zip(field.alpha(0, i).iter().copied()),
            );
            entries.sort_by_key(|&(j, _)| j);
            for &(j, a) in &entries {
                match cols.last() {
                    Some(&last) if last == j && cols.len() > row_ptr[i] => {
                        *vals.last_mut().expect("paired with cols") += a;
                    }
                    _ => {
                        cols.push(j);
                        vals.push(a);
                    }
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(SparseRouting {
            row_ptr,
            cols,
            vals,
            mixing,
        })
    }
}

/// `X' = X + P X M`.
pub fn route_via_matrix(grid: &TokenGrid, routing: &SparseRouting) -> Result<TokenGrid> {
    let d = grid.channels();
    if routing.rows() != grid.len() || routing.mixing.shape() != [d, d] {
        return Err(dim_err(
            "route_via_matrix",
            &[routing.rows(), routing.mixing.shape()[0]],
            &[grid.len(), d],
        ));
    }
    let xm = grid.sequence().matmul(&routing.mixing)?;
    let pxm = routing.mul_dense(&xm)?;
    let mut out = grid.clone();
    for (x, m) in out.features.data_mut().iter_mut().zip(pxm.data()) {
        *x += m;
    }
    Ok(out)
}

/// Expected source positions `p̂_i = Σ α_ij p_j` and displacements `p̂_i − p_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub expected: Vec<[f64; 2]>,
    pub displacement: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn magnitude(&self, i: usize) -> f64 {
        let [dr, dc] = self.displacement[i];
        dr.hypot(dc)
    }
}

/// Head-averaged affinities are used when the field has several heads.
pub fn displacement_field(field: &RoutingField, grid: &TokenGrid) -> Result<DisplacementField> {
    if field.height != grid.height() || field.width != grid.width() {
        return Err(dim_err(
            "displacement_field",
            &[field.height, field.width],
            &[grid.height(), grid.width()],
        ));
    }
    let len = grid.len();
    let mut expected = Vec::with_capacity(len);
    let mut displacement = Vec::with_capacity(len);
    for i in 0..len {
        let alpha = field.mean_alpha(i);
        let mut p_hat = [0.0; 2];
        for (&j, a) in field.candidates(i).iter().zip(&alpha) {
            let p_j = grid.normalized(j);
            p_hat[0] += a * p_j[0];
            p_hat[1] += a * p_j[1];
        }
        let p_i = grid.normalized(i);
        expected.push(p_hat);
        displacement.push([p_hat[0] - p_i[0], p_hat[1] - p_i[1]]);
    }
    Ok(DisplacementField {
        height: grid.height(),
        width: grid.width(),
        expected,
        displacement,
    })
}

/// Bilinear four-corner resampling at `p_i + Δp_i` (clamped to `[-1, 1]²`).
/// Offsets are `[row, col]` in normalized units.
pub fn bilinear_offset_scan(grid: &TokenGrid, offsets: &[[f64; 2]]) -> Result<TokenGrid> {
    if offsets.len() != grid.len() {
        return Err(dim_err(
            "bilinear_offset_scan",
            &[offsets.len()],
            &[grid.len()],
        ));
    }
    let (h, w, d) = (grid.height(), grid.width(), grid.channels());
    let to_lattice = |p: f64, n: usize| {
        if n <= 1 {
            0.0
        } else {
            (p.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64
        }
    };
    let mut out = TokenGrid::zeros(h, w, d);
    for i in 0..grid.len() {
        let p = grid.normalized(i);
        let y = to_lattice(p[0] + offsets[i][0], h);
        let x = to_lattice(p[1] + offsets[i][1], w);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        let o = &mut out.features.data_mut()[i * d..(i + 1) * d];
        for (r, c, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            for (ov, xv) in o.iter_mut().zip(grid.token(r * w + c)) {
                *ov += wgt * xv;
            }
        }
    }
    Ok(out)
}

/// Directional derivative of `X ↦ route_tokens(X)` along `direction`,
/// including the dependence of the affinities on `X`.
pub fn route_jvp(
    grid: &TokenGrid,
    proj: &ProjectionSet,
    direction: &TokenGrid,
) -> Result<TokenGrid> {
    if !grid.same_layout(direction) {
        return Err(dim_err("route_jvp", &grid.dims(), &direction.dims()));
    }
    let field = compute_affinities(grid, proj)?;
    let (len, slots, heads) = (grid.len(), field.slots(), field.heads);
    let (d, dv) = (proj.qk_dim(), proj.value_dim());
    let (dh, dvh) = (d / heads, dv / heads);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q = project(grid, &proj.w_q);
    let k = project(grid, &proj.w_k);
    let v = project(grid, &proj.w_v);
    let dq = project(direction, &proj.w_q);
    let dk = project(direction, &proj.w_k);
    let dvv = project(direction, &proj.w_v);

    let mut dagg = vec![0.0; len * dv];
    let mut ds = vec![0.0; slots];
    for h in 0..heads {
        let qc = h * dh..(h + 1) * dh;
        let vc = h * dvh..(h + 1) * dvh;
        for i in 0..len {
            let alpha = field.alpha(h, i);
            let cands = field.candidates(i);
            for (s, out) in ds.iter_mut().enumerate() {
                let j = cands[s];
                let qi = &q[i * d..(i + 1) * d][qc.clone()];
                let dqi = &dq[i * d..(i + 1) * d][qc.clone()];
                let kj = &k[j * d..(j + 1) * d][qc.clone()];
                let dkj = &dk[j * d..(j + 1) * d][qc.clone()];
                let dot: f64 = dqi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                    + qi.iter().zip(dkj).map(|(a, b)| a * b).sum::<f64>();
                *out = dot * inv_sqrt;
            }
            let mean: f64 = alpha.iter().zip(&ds).map(|(a, s)| a * s).sum();
            let o = &mut dagg[i * dv..(i + 1) * dv][vc.clone()];
            for s in 0..slots {
                let j = cands[s];
                let dalpha = alpha[s] * (ds[s] - mean);
                let vj = &v[j * dv..(j + 1) * dv][vc.clone()];
                let dvj = &dvv[j * dv..(j + 1) * dv][vc.clone()];
                for ((ov, a), b) in o.iter_mut().zip(vj).zip(dvj) {
                    *ov += dalpha * a + alpha[s] * b;
                }
            }
        }
    }
    let mut out = direction.clone();
    for i in 0..len {
        let m = vec_mat(&dagg[i * dv..(i + 1) * dv], &proj.w_o);
        for (o, mv) in out.features.data_mut()[i * grid.channels()..(i + 1) * grid.channels()]
            .iter_mut()
            .zip(&m)
        {
            *o += mv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn random_proj(rng: &mut SeededRng, d: usize, r: usize, heads: usize) -> ProjectionSet {
        ProjectionSet::random_full(rng, d, d, d, r, heads, 0.8).unwrap()
    }

    #[test]
    fn corner_candidates_are_a_multiset() {
        let c = candidate_set((0, 0), 1, 4, 4).unwrap();
        assert_eq!(c.len(), 9);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for p in c {
            *counts.entry(p).or_default() += 1;
        }
        assert_eq!(counts[&(0, 0)], 4);
        assert_eq!(counts[&(0, 1)], 2);
        assert_eq!(counts[&(1, 0)], 2);
        assert_eq!(counts[&(1, 1)], 1);
        assert_eq!(counts.len(), 4);
    }

    #[test]
    fn interior_candidates_are_distinct() {
        let mut c = candidate_set((2, 2), 1, 4, 4).unwrap();
        c.sort();
        c.dedup();
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn window_sizes() {
        assert_eq!(window_size(1), 9);
        assert_eq!(window_size(2), 25);
        assert_eq!(window_size(3), 49);
        assert!(matches!(
            candidate_set((4, 0), 1, 4, 4),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn zero_features_give_uniform_affinity() {
        let grid = TokenGrid::zeros(3, 4, 2);
        let proj = ProjectionSet::random(&mut SeededRng::new(1), 2, 2, 2, 1, 1).unwrap();
        let field = compute_affinities(&grid, &proj).unwrap();
        for i in 0..grid.len() {
            for &a in field.alpha(0, i) {
                assert!((a - 1.0 / 9.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bias_spike_concentrates_on_right_slot() {
        let grid = TokenGrid::zeros(3, 3, 2);
        let mut proj = ProjectionSet::zeros(2, 2, 2, 1);
        proj.bias.set(0, 1, 10.0).unwrap();
        let field = compute_affinities(&grid, &proj).unwrap();
        let right = proj.bias.slot(0, 1).unwrap();
        let expected_peak = 10f64.exp() / (10f64.exp() + 8.0);
        for i in 0..grid.len() {
            let a = field.alpha(0, i);
            assert!((a[right] - expected_peak).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_affinities_2x2() {
        // D = d = 1, x = [1, 2, 3, 4] on a 2 × 2 grid, r = 1.
        let grid = TokenGrid::from_fn(2, 2, 1, |k| (k + 1) as f64);
        let bias: Vec<f64> = (0..9).map(|s| 0.1 * s as f64).collect();
        let proj = ProjectionSet::new(
            DenseArray::new(vec![1, 1], vec![0.5]).unwrap(),
            DenseArray::new(vec![1, 1], vec![-0.3]).unwrap(),
            DenseArray::new(vec![1, 1], vec![1.0]).unwrap(),
            DenseArray::new(vec![1, 1], vec![1.0]).unwrap(),
            RelativeBias::new(1, bias.clone()).unwrap(),
            1,
        )
        .unwrap();
        let field = compute_affinities(&grid, &proj).unwrap();
        // token 3 at (1,1): window offsets clamp to tokens
        // (-1,-1)->0 (-1,0)->1 (-1,1)->1 (0,-1)->2 (0,0)->3 (0,1)->3 (1,-1)->2 (1,0)->3 (1,1)->3
        let x = [1.0, 2.0, 3.0, 4.0];
        let cands = [0, 1, 1, 2, 3, 3, 2, 3, 3];
        let q = 0.5 * 4.0;
        let scores: Vec<f64> = cands
            .iter()
            .enumerate()
            .map(|(s, &j)| q * (-0.3 * x[j]) + bias[s])
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (s, a) in field.alpha(0, 3).iter().enumerate() {
            assert!((a - scores[s].exp() / z).abs() <= 1e-12);
        }
        assert_eq!(field.candidates(3), &cands);
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = SeededRng::new(3);
        let grid = TokenGrid::random(&mut rng, 4, 5, 3, 1.0).unwrap();
        let proj = ProjectionSet::random(&mut rng, 3, 3, 3, 2, 1).unwrap();
        let field = compute_affinities(&grid, &proj).unwrap();
        assert_eq!(route_tokens(&grid, &field, &proj).unwrap(), grid);
    }

    #[test]
    fn radius_zero_routes_to_self() {
        let mut rng = SeededRng::new(4);
        let grid = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let proj = random_proj(&mut rng, 2, 0, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        assert_eq!(field.slots(), 1);
        let out = route_tokens(&grid, &field, &proj).unwrap();
        let m = proj.mixing();
        for i in 0..grid.len() {
            assert_eq!(field.alpha(0, i), &[1.0]);
            let expect = vec_mat(grid.token(i), &m);
            for (k, o) in out.token(i).iter().enumerate() {
                assert!((o - (grid.token(i)[k] + expect[k])).abs() < 1e-14);
            }
        }
    }

    /// Per-token gather loop written from the formulas directly.
    fn naive_route(grid: &TokenGrid, proj: &ProjectionSet) -> TokenGrid {
        let (h, w, d) = (grid.height(), grid.width(), grid.channels());
        let r = proj.radius();
        let heads = proj.heads();
        let (dq, dv) = (proj.qk_dim() / heads, proj.value_dim() / heads);
        let mut out = grid.clone();
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let xi = grid.token(i);
                let mut agg = vec![0.0; proj.value_dim()];
                for head in 0..heads {
                    let mut scores = Vec::new();
                    let mut values = Vec::new();
                    for (slot, (nr, nc)) in candidate_set((row, col), r, h, w)
                        .unwrap()
                        .into_iter()
                        .enumerate()
                    {
                        let xj = grid.token(nr * w + nc);
                        let mut dot = 0.0;
                        for c in head * dq..(head + 1) * dq {
                            let mut qc = 0.0;
                            let mut kc = 0.0;
                            for e in 0..d {
                                qc += xi[e] * proj.w_q.get(&[e, c]).unwrap();
                                kc += xj[e] * proj.w_k.get(&[e, c]).unwrap();
                            }
                            dot += qc * kc;
                        }
                        scores.push(dot / (dq as f64).sqrt() + proj.bias.table()[slot]);
                        let v: Vec<f64> = (head * dv..(head + 1) * dv)
                            .map(|c| (0..d).map(|e| xj[e] * proj.w_v.get(&[e, c]).unwrap()).sum())
                            .collect();
                        values.push(v);
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for (s, v) in scores.iter().zip(values) {
                        let a = (s - mx).exp() / z;
                        for (c, vv) in v.iter().enumerate() {
                            agg[head * dv + c] += a * vv;
                        }
                    }
                }
                for e in 0..d {
                    let m: f64 = (0..proj.value_dim())
                        .map(|c| agg[c] * proj.w_o.get(&[c, e]).unwrap())
                        .sum();
                    out.features_mut().data_mut()[i * d + e] += m;
                }
            }
        }
        out
    }

    #[test]
    fn route_matches_gather_loop_oracle() {
        let mut rng = SeededRng::new(5);
        let grid = TokenGrid::random(&mut rng, 4, 4, 3, 1.0).unwrap();
        let proj = random_proj(&mut rng, 3, 1, 1);
        let got = multi_head_route(&grid, &proj).unwrap();
        assert!(
            got.features()
                .max_abs_diff(naive_route(&grid, &proj).features())
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn uniform_rows_of_routing_matrix() {
        let grid = TokenGrid::zeros(4, 4, 2);
        let proj = ProjectionSet::zeros(2, 2, 2, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let p = routing_matrix(&field, &proj).unwrap();
        let interior = 4 + 1;
        let row: Vec<_> = p.row(interior).collect();
        assert_eq!(row.len(), 9);
        assert!(row.iter().all(|&(_, v)| (v - 1.0 / 9.0).abs() < 1e-15));
        let corner: Vec<f64> = p.row(0).map(|(_, v)| v).collect();
        let expect = [4.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        assert_eq!(corner.len(), 4);
        for (a, b) in corner.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            p.row(0).map(|(j, _)| j).collect::<Vec<_>>(),
            vec![0, 1, 4, 5]
        );
    }

    #[test]
    fn matrix_path_matches_route_tokens() {
        let mut rng = SeededRng::new(6);
        let grid = TokenGrid::random(&mut rng, 5, 3, 4, 1.0).unwrap();
        let proj = random_proj(&mut rng, 4, 2, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let direct = route_tokens(&grid, &field, &proj).unwrap();
        let p = routing_matrix(&field, &proj).unwrap();
        let via = route_via_matrix(&grid, &p).unwrap();
        assert!(direct.features().max_abs_diff(via.features()).unwrap() <= 1e-12);
        for i in 0..grid.len() {
            assert!((p.row_sum(i) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn self_weight_matrix_with_zero_mixing_is_identity() {
        let mut rng = SeededRng::new(7);
        let grid = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let proj = ProjectionSet::zeros(2, 2, 2, 0);
        let field = compute_affinities(&grid, &proj).unwrap();
        let p = routing_matrix(&field, &proj).unwrap();
        assert!(p.row(4).eq([(4, 1.0)]));
        assert_eq!(route_via_matrix(&grid, &p).unwrap(), grid);
    }

    #[test]
    fn routing_matrix_needs_single_head() {
        let mut rng = SeededRng::new(8);
        let grid = TokenGrid::random(&mut rng, 3, 3, 4, 1.0).unwrap();
        let proj = random_proj(&mut rng, 4, 1, 2);
        let field = compute_affinities(&grid, &proj).unwrap();
        assert!(matches!(
            routing_matrix(&field, &proj),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn displacement_symmetry_and_right_shift() {
        let grid = TokenGrid::zeros(5, 5, 1);
        let proj = ProjectionSet::zeros(1, 1, 1, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let disp = displacement_field(&field, &grid).unwrap();
        let centre = 2 * 5 + 2;
        assert!(disp.displacement[centre][0].abs() < 1e-15);
        assert!(disp.displacement[centre][1].abs() < 1e-15);

        let mut alpha = vec![0.0; 25 * 9];
        let right = RelativeBias::zeros(1).slot(0, 1).unwrap();
        for i in 0..25 {
            alpha[i * 9 + right] = 1.0;
        }
        let field = RoutingField::from_alpha(5, 5, 1, alpha).unwrap();
        let disp = displacement_field(&field, &grid).unwrap();
        let p = grid.normalized(centre);
        let pr = grid.normalized(centre + 1);
        assert_eq!(disp.displacement[centre], [pr[0] - p[0], pr[1] - p[1]]);
    }

    #[test]
    fn displacement_matches_direct_sum() {
        let mut rng = SeededRng::new(9);
        let grid = TokenGrid::random(&mut rng, 6, 4, 3, 1.0).unwrap();
        let proj = random_proj(&mut rng, 3, 2, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let disp = displacement_field(&field, &grid).unwrap();
        for i in 0..grid.len() {
            let (row, col) = grid.lattice(i);
            let mut acc = [0.0; 2];
            for (s, (nr, nc)) in candidate_set((row, col), 2, 6, 4)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                let a = field.alpha(0, i)[s];
                acc[0] += a * normalize_axis(nr, 6);
                acc[1] += a * normalize_axis(nc, 4);
            }
            assert!((disp.expected[i][0] - acc[0]).abs() <= 1e-12);
            assert!((disp.expected[i][1] - acc[1]).abs() <= 1e-12);
            assert!(disp.expected[i].iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn single_head_split_is_bitwise_route_tokens() {
        let mut rng = SeededRng::new(10);
        let grid = TokenGrid::random(&mut rng, 4, 4, 4, 1.0).unwrap();
        let proj = random_proj(&mut rng, 4, 1, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let a = route_tokens(&grid, &field, &proj).unwrap();
        let b = multi_head_route(&grid, &proj).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zeroed_head_leaves_other_half() {
        let mut rng = SeededRng::new(11);
        let grid = TokenGrid::random(&mut rng, 3, 4, 4, 1.0).unwrap();
        let mut proj = random_proj(&mut rng, 4, 1, 2);
        // zero head-0 value columns (0..2) of W_v
        for e in 0..4 {
            for c in 0..2 {
                proj.w_v.set(&[e, c], 0.0).unwrap();
            }
        }
        let field = compute_affinities(&grid, &proj).unwrap();
        let m = messages(&grid, &field, &proj).unwrap();
        // Oracle: head 1 alone, aggregated and projected by the lower half of W_o.
        let v = project(&grid, &proj.w_v);
        for i in 0..grid.len() {
            let mut agg = [0.0; 2];
            for (s, &j) in field.candidates(i).iter().enumerate() {
                for c in 0..2 {
                    agg[c] += field.alpha(1, i)[s] * v[j * 4 + 2 + c];
                }
            }
            for e in 0..4 {
                let expect: f64 = (0..2)
                    .map(|c| agg[c] * proj.w_o.get(&[2 + c, e]).unwrap())
                    .sum();
                assert!((m.data()[i * 4 + e] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn four_heads_match_per_head_oracle() {
        let mut rng = SeededRng::new(12);
        let grid = TokenGrid::random(&mut rng, 4, 3, 8, 1.0).unwrap();
        let proj = random_proj(&mut rng, 8, 1, 4);
        let got = multi_head_route(&grid, &proj).unwrap();
        assert!(
            got.features()
                .max_abs_diff(naive_route(&grid, &proj).features())
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = SeededRng::new(13);
        assert!(matches!(
            ProjectionSet::random(&mut rng, 3, 3, 3, 1, 2),
            Err(Error::Parameter(_))
        ));
    }

    fn bilinear_oracle(grid: &TokenGrid, i: usize, off: [f64; 2]) -> Vec<f64> {
        let (h, w) = (grid.height(), grid.width());
        let p = grid.normalized(i);
        let y = ((p[0] + off[0]).clamp(-1.0, 1.0) + 1.0) / 2.0 * (h - 1) as f64;
        let x = ((p[1] + off[1]).clamp(-1.0, 1.0) + 1.0) / 2.0 * (w - 1) as f64;
        let mut out = vec![0.0; grid.channels()];
        for r in 0..h {
            for c in 0..w {
                let wy = (1.0 - (y - r as f64).abs()).max(0.0);
                let wx = (1.0 - (x - c as f64).abs()).max(0.0);
                for (o, v) in out.iter_mut().zip(grid.token(r * w + c)) {
                    *o += wy * wx * v;
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = SeededRng::new(14);
        let grid = TokenGrid::random(&mut rng, 5, 5, 2, 1.0).unwrap();
        let same = bilinear_offset_scan(&grid, &vec![[0.0, 0.0]; 25]).unwrap();
        assert!(same.features().max_abs_diff(grid.features()).unwrap() < 1e-15);

        // half a lattice step to the right: 2/(w-1)/2 = 0.25
        let mut offs = vec![[0.0, 0.0]; 25];
        offs[12] = [0.0, 0.25];
        let half = bilinear_offset_scan(&grid, &offs).unwrap();
        for c in 0..2 {
            let expect = 0.5 * grid.token(12)[c] + 0.5 * grid.token(13)[c];
            assert!((half.token(12)[c] - expect).abs() < 1e-15);
        }

        let offs: Vec<[f64; 2]> = (0..25)
            .map(|_| [rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)])
            .collect();
        let got = bilinear_offset_scan(&grid, &offs).unwrap();
        for i in 0..25 {
            let o = bilinear_oracle(&grid, i, offs[i]);
            assert!(crate::tensor::max_abs_diff(got.token(i), &o) <= 1e-12);
        }
    }

    #[test]
    fn jvp_trivial_cases() {
        let mut rng = SeededRng::new(15);
        let grid = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let dir = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let proj = ProjectionSet::random(&mut rng, 2, 2, 2, 1, 1).unwrap();
        assert_eq!(route_jvp(&grid, &proj, &dir).unwrap(), dir);
        let proj = random_proj(&mut rng, 2, 1, 1);
        let zero = TokenGrid::zeros(3, 3, 2);
        assert!(route_jvp(&grid, &proj, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = SeededRng::new(16);
        let grid = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let dir = TokenGrid::random(&mut rng, 3, 3, 2, 1.0).unwrap();
        let proj = ProjectionSet::random_full(&mut rng, 2, 2, 2, 1, 1, 1.5).unwrap();
        let jvp = route_jvp(&grid, &proj, &dir).unwrap();
        let h = 1e-5;
        let shifted = |sign: f64| {
            let mut g = grid.clone();
            for (x, dx) in g.features_mut().data_mut().iter_mut().zip(dir.data()) {
                *x += sign * h * dx;
            }
            multi_head_route(&g, &proj).unwrap()
        };
        let (plus, minus) = (shifted(1.0), shifted(-1.0));
        let fd: Vec<f64> = plus
            .data()
            .iter()
            .zip(minus.data())
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        let num = crate::tensor::max_abs_diff(jvp.data(), &fd);
        let den = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(num / den <= 1e-5, "relative error {}", num / den);
    }

    #[test]
    fn perturbation_locality() {
        let mut rng = SeededRng::new(17);
        let grid = TokenGrid::random(&mut rng, 6, 6, 3, 1.0).unwrap();
        let proj = random_proj(&mut rng, 3, 1, 1);
        let field = compute_affinities(&grid, &proj).unwrap();
        let base = messages(&grid, &field, &proj).unwrap();
        let j = 2 * 6 + 3;
        let mut g2 = grid.clone();
        g2.features_mut().data_mut()[j * 3] += 0.5;
        let field2 = compute_affinities(&g2, &proj).unwrap();
        let pert = messages(&g2, &field2, &proj).unwrap();
        for i in 0..grid.len() {
            let (ri, ci) = grid.lattice(i);
            let (rj, cj) = grid.lattice(j);
            let dist = ri.abs_diff(rj).max(ci.abs_diff(cj));
            let changed = (0..3).any(|c| base.data()[i * 3 + c] != pert.data()[i * 3 + c]);
            if dist > 1 {
                assert!(!changed, "token {i} changed at distance {dist}");
            } else {
                assert!(changed, "token {i} unchanged at distance {dist}");
            }
        }
    }
}
