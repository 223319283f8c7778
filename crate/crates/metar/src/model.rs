//! Forward computation: relation-meta learner, translational scoring, margin
//! losses, the closed-form support-loss gradient, and the rapid update.
//!
//! The task forward pass records every intermediate the backward pass needs
//! in a [`TaskForwardTrace`], so gradients never recompute activations.

use crate::data::EntityId;
use crate::episode::EpisodeTask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols: n_cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = W x.
    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.cols, x.len(), "matrix-vector dimension mismatch");
        let mut y = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = S::zero();
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            y.push(acc);
        }
        y
    }

    /// y = Wᵀ x.
    pub fn mul_vec_transpose(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.rows, x.len(), "transposed matrix-vector dimension mismatch");
        let mut y = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (acc, w) in y.iter_mut().zip(row) {
                *acc += *w * xr;
            }
        }
        y
    }

    /// Self += scale · y xᵀ (outer product accumulation).
    pub fn add_outer(&mut self, y: &[S], x: &[S], scale: S) {
        assert_eq!(self.rows, y.len());
        assert_eq!(self.cols, x.len());
        for (r, yr) in y.iter().enumerate() {
            let factor = *yr * scale;
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (acc, xv) in row.iter_mut().zip(x) {
                *acc += factor * *xv;
            }
        }
    }
}

/// Entity embeddings: one row of dimension `dim` per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn zeros(n_rows: usize, dim: usize) -> Self {
        Self { dim, data: vec![S::zero(); n_rows * dim] }
    }

    pub fn from_fn(n_rows: usize, dim: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(n_rows * dim);
        for r in 0..n_rows {
            for c in 0..dim {
                data.push(f(r, c));
            }
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        if self.dim == 0 { 0 } else { self.data.len() / self.dim }
    }

    pub fn row(&self, id: EntityId) -> &[S] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn try_row(&self, id: EntityId) -> Result<&[S]> {
        if id >= self.n_rows() {
            return Err(Error::EntityOutOfBounds { id, rows: self.n_rows() });
        }
        Ok(self.row(id))
    }

    pub fn row_mut(&mut self, id: EntityId) -> &mut [S] {
        &mut self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub w: Matrix<S>,
    pub b: Vec<S>,
}

/// The relation-meta learner: an L-layer fully connected net from the
/// concatenated (head, tail) embedding pair (2d) to a relation vector (d).
/// Hidden layers apply LeakyReLU; the final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerParams<S> {
    pub layers: Vec<Layer<S>>,
    /// LeakyReLU negative slope.
    pub slope: S,
}

impl<S: Scalar> MetaLearnerParams<S> {
    /// Verify the layer chain runs 2d → hidden… → d.
    pub fn check_chain(&self, dim: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
                context: "meta learner must have at least one layer",
            });
        }
        let mut width = 2 * dim;
        for layer in &self.layers {
            if layer.w.cols != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    got: layer.w.cols,
                    context: "meta learner layer input",
                });
            }
            if layer.b.len() != layer.w.rows {
                return Err(Error::DimensionMismatch {
                    expected: layer.w.rows,
                    got: layer.b.len(),
                    context: "meta learner bias length",
                });
            }
            width = layer.w.rows;
        }
        if width != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: width,
                context: "meta learner output",
            });
        }
        Ok(())
    }
}

/// Full trainable state. `version` increments on every mutation so a stale
/// forward trace cannot silently feed the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub embeddings: EmbeddingTable<S>,
    pub learner: MetaLearnerParams<S>,
    version: u64,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(embeddings: EmbeddingTable<S>, learner: MetaLearnerParams<S>) -> Self {
        Self { embeddings, learner, version: 0 }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Total scalar parameter count (embeddings + weights + biases).
    pub fn n_scalars(&self) -> usize {
        self.embeddings.data.len()
            + self
                .learner
                .layers
                .iter()
                .map(|l| l.w.data.len() + l.b.len())
                .sum::<usize>()
    }
}

/// Model-shape and loss hyperparameters (configuration-level, so plain f64).
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Embedding dimension d.
    pub dim: usize,
    /// Hinge margin γ.
    pub gamma: f64,
    /// Rapid-update step β.
    pub beta: f64,
    /// LeakyReLU negative slope.
    pub leaky_slope: f64,
    /// Hidden layer widths of the meta learner (may be empty: single linear layer).
    pub hidden_sizes: Vec<usize>,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".to_string()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".to_string()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be finite and >= 0".to_string()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig("leaky_slope must lie in (0, 1)".to_string()));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden sizes must be positive".to_string()));
        }
        Ok(())
    }

    /// Layer widths including input (2d) and output (d).
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_sizes.len() + 2);
        widths.push(2 * self.dim);
        widths.extend_from_slice(&self.hidden_sizes);
        widths.push(self.dim);
        widths
    }
}

/// Whether the rapid update runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Full method: gradient meta and rapid update before query scoring.
    Standard,
    /// Ablation: queries are scored with the un-updated relation meta.
    NoGradientMeta,
}

/// A score's difference vector v = h + R − t and its norm (the score itself).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTerm<S> {
    pub diff: Vec<S>,
    pub norm: S,
}

/// Layer activations for one support pair: `x[0]` is the concatenated input,
/// `x[l]` the post-activation output of layer l, `preact[l-1]` its
/// pre-activation. The final layer is linear, so `x[L] == preact[L-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairActivations<S> {
    pub x: Vec<Vec<S>>,
    pub preact: Vec<Vec<S>>,
}

/// Every intermediate of one task forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskForwardTrace<S> {
    pub params_version: u64,
    pub mode: ForwardMode,
    pub support_acts: Vec<PairActivations<S>>,
    /// R before the rapid update (the support mean).
    pub relation_meta: Vec<S>,
    pub support_pos: Vec<ScoreTerm<S>>,
    pub support_neg: Vec<ScoreTerm<S>>,
    pub support_active: Vec<bool>,
    pub support_loss: S,
    /// Zero vector in NoGradientMeta mode.
    pub gradient_meta: Vec<S>,
    /// R′ actually used for query scoring.
    pub updated_meta: Vec<S>,
    pub query_pos: Vec<ScoreTerm<S>>,
    pub query_neg: Vec<Vec<ScoreTerm<S>>>,
    pub query_active: Vec<Vec<bool>>,
    pub query_loss: S,
}

#[inline]
fn leaky<S: Scalar>(x: S, slope: S) -> S {
    if x > S::zero() {
        x
    } else {
        slope * x
    }
}

/// LeakyReLU derivative; the kink at exactly 0 uses the negative-side slope.
#[inline]
pub(crate) fn leaky_deriv<S: Scalar>(preact: S, slope: S) -> S {
    if preact > S::zero() {
        S::one()
    } else {
        slope
    }
}

/// Run the meta learner on one (head, tail) pair, keeping all activations.
pub fn entity_pair_meta_trace<S: Scalar>(
    h: &[S],
    t: &[S],
    learner: &MetaLearnerParams<S>,
) -> Result<PairActivations<S>> {
    let first = learner.layers.first().ok_or(Error::DimensionMismatch {
        expected: 1,
        got: 0,
        context: "meta learner must have at least one layer",
    })?;
    if first.w.cols != h.len() + t.len() {
        return Err(Error::DimensionMismatch {
            expected: first.w.cols,
            got: h.len() + t.len(),
            context: "meta learner input",
        });
    }

    let mut x0 = Vec::with_capacity(h.len() + t.len());
    x0.extend_from_slice(h);
    x0.extend_from_slice(t);

    let n_layers = learner.layers.len();
    let mut x = Vec::with_capacity(n_layers + 1);
    let mut preact = Vec::with_capacity(n_layers);
    x.push(x0);
    for (l, layer) in learner.layers.iter().enumerate() {
        if layer.w.cols != x[l].len() {
            return Err(Error::DimensionMismatch {
                expected: layer.w.cols,
                got: x[l].len(),
                context: "meta learner layer input",
            });
        }
        let mut a = layer.w.mul_vec(&x[l]);
        for (av, bv) in a.iter_mut().zip(&layer.b) {
            *av += *bv;
        }
        let out = if l + 1 == n_layers {
            a.clone()
        } else {
            a.iter().map(|&v| leaky(v, learner.slope)).collect()
        };
        preact.push(a);
        x.push(out);
    }
    Ok(PairActivations { x, preact })
}

/// The entity-pair specific relation meta: final layer output only.
pub fn entity_pair_meta<S: Scalar>(
    h: &[S],
    t: &[S],
    learner: &MetaLearnerParams<S>,
) -> Result<Vec<S>> {
    entity_pair_meta_trace(h, t, learner).map(|acts| acts.x.last().unwrap().clone())
}

/// Elementwise mean of the per-pair relation metas.
pub fn aggregate_meta<S: Scalar>(metas: &[Vec<S>]) -> Result<Vec<S>> {
    let first = metas.first().ok_or(Error::DimensionMismatch {
        expected: 1,
        got: 0,
        context: "aggregate_meta needs at least one meta",
    })?;
    let dim = first.len();
    let mut mean = vec![S::zero(); dim];
    for meta in metas {
        if meta.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: meta.len(),
                context: "aggregate_meta dimensions",
            });
        }
        for (acc, v) in mean.iter_mut().zip(meta) {
            *acc += *v;
        }
    }
    let inv = S::one() / S::from_f64(metas.len() as f64);
    for v in &mut mean {
        *v *= inv;
    }
    Ok(mean)
}

/// Difference vector and its norm for the translational score ‖h + R − t‖₂.
pub fn score_term<S: Scalar>(h: &[S], r: &[S], t: &[S]) -> ScoreTerm<S> {
    assert_eq!(h.len(), r.len(), "score dimension mismatch");
    assert_eq!(h.len(), t.len(), "score dimension mismatch");
    let diff: Vec<S> = h
        .iter()
        .zip(r)
        .zip(t)
        .map(|((hv, rv), tv)| *hv + *rv - *tv)
        .collect();
    let norm = diff.iter().map(|v| *v * *v).sum::<S>().sqrt();
    ScoreTerm { diff, norm }
}

/// Translational score; lower is truer.
pub fn score<S: Scalar>(h: &[S], r: &[S], t: &[S]) -> S {
    score_term(h, r, t).norm
}

/// Margin ranking loss Σᵢ meanₘ [γ + s_pos,i − s_neg,i,m]₊ with per-term
/// active flags. A hinge argument of exactly 0 counts as inactive (the
/// subgradient convention used throughout).
pub fn hinge_loss<S: Scalar>(pos: &[S], negs: &[Vec<S>], gamma: S) -> (S, Vec<Vec<bool>>) {
    assert_eq!(pos.len(), negs.len(), "one negative group per positive");
    let mut total = S::zero();
    let mut flags = Vec::with_capacity(pos.len());
    for (s_pos, group) in pos.iter().zip(negs) {
        let mut group_flags = Vec::with_capacity(group.len());
        let mut group_sum = S::zero();
        for s_neg in group {
            let arg = gamma + *s_pos - *s_neg;
            let active = arg > S::zero();
            if active {
                group_sum += arg;
            }
            group_flags.push(active);
        }
        if !group.is_empty() {
            total += group_sum / S::from_f64(group.len() as f64);
        }
        flags.push(group_flags);
    }
    (total, flags)
}

fn add_scaled_unit<S: Scalar>(acc: &mut [S], term: &ScoreTerm<S>, sign: S) {
    // Zero-norm difference vectors take the zero subgradient.
    if term.norm > S::zero() {
        let inv = sign / term.norm;
        for (a, d) in acc.iter_mut().zip(&term.diff) {
            *a += inv * *d;
        }
    }
}

/// Closed-form ∇_R of the support loss: active pairs contribute
/// v_pos/‖v_pos‖ − v_neg/‖v_neg‖, inactive pairs contribute zero.
pub fn gradient_meta<S: Scalar>(
    support_pos: &[ScoreTerm<S>],
    support_neg: &[ScoreTerm<S>],
    active: &[bool],
) -> Vec<S> {
    assert_eq!(support_pos.len(), support_neg.len());
    assert_eq!(support_pos.len(), active.len());
    let dim = support_pos.first().map_or(0, |t| t.diff.len());
    let mut g = vec![S::zero(); dim];
    for ((pos, neg), &is_active) in support_pos.iter().zip(support_neg).zip(active) {
        if is_active {
            add_scaled_unit(&mut g, pos, S::one());
            add_scaled_unit(&mut g, neg, -S::one());
        }
    }
    g
}

/// R′ = R − β·G.
pub fn rapid_update<S: Scalar>(r: &[S], g: &[S], beta: S) -> Vec<S> {
    assert_eq!(r.len(), g.len(), "rapid update dimension mismatch");
    r.iter().zip(g).map(|(rv, gv)| *rv - beta * *gv).collect()
}

/// Relation meta adapted to a support set: the support mean R, the gradient
/// meta G, and the rapidly updated R′. In NoGradientMeta mode (or with no
/// support negatives) G is zero and R′ = R.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedMeta<S> {
    pub relation_meta: Vec<S>,
    pub gradient_meta: Vec<S>,
    pub updated_meta: Vec<S>,
    pub support_loss: S,
}

/// Compute the adapted relation meta from raw support pairs. Shared by the
/// task forward pass and ranking evaluation.
pub fn adapt_to_support<S: Scalar>(
    support_pos: &[(EntityId, EntityId)],
    support_neg: &[(EntityId, EntityId)],
    params: &ModelParams<S>,
    hp: &Hyperparams,
    mode: ForwardMode,
) -> Result<AdaptedMeta<S>> {
    let emb = &params.embeddings;
    let mut metas = Vec::with_capacity(support_pos.len());
    for &(head, tail) in support_pos {
        metas.push(entity_pair_meta(emb.try_row(head)?, emb.try_row(tail)?, &params.learner)?);
    }
    let relation_meta = aggregate_meta(&metas)?;

    if mode == ForwardMode::NoGradientMeta || support_neg.is_empty() {
        return Ok(AdaptedMeta {
            gradient_meta: vec![S::zero(); relation_meta.len()],
            updated_meta: relation_meta.clone(),
            relation_meta,
            support_loss: S::zero(),
        });
    }

    if support_neg.len() != support_pos.len() {
        return Err(Error::DimensionMismatch {
            expected: support_pos.len(),
            got: support_neg.len(),
            context: "one support negative per positive",
        });
    }
    let mut pos_terms = Vec::with_capacity(support_pos.len());
    let mut neg_terms = Vec::with_capacity(support_pos.len());
    for (&(head, tail), &(neg_head, neg_tail)) in support_pos.iter().zip(support_neg) {
        pos_terms.push(score_term(emb.try_row(head)?, &relation_meta, emb.try_row(tail)?));
        neg_terms.push(score_term(emb.try_row(neg_head)?, &relation_meta, emb.try_row(neg_tail)?));
    }
    let pos_scores: Vec<S> = pos_terms.iter().map(|t| t.norm).collect();
    let neg_groups: Vec<Vec<S>> = neg_terms.iter().map(|t| vec![t.norm]).collect();
    let (support_loss, flags) = hinge_loss(&pos_scores, &neg_groups, S::from_f64(hp.gamma));
    let active: Vec<bool> = flags.iter().map(|g| g[0]).collect();
    let g = gradient_meta(&pos_terms, &neg_terms, &active);
    let updated_meta = rapid_update(&relation_meta, &g, S::from_f64(hp.beta));
    Ok(AdaptedMeta { relation_meta, gradient_meta: g, updated_meta, support_loss })
}

/// One full task forward pass. Returns the query loss and the trace holding
/// every intermediate the backward pass consumes.
pub fn forward_task<S: Scalar>(
    task: &EpisodeTask,
    params: &ModelParams<S>,
    hp: &Hyperparams,
    mode: ForwardMode,
) -> Result<(S, TaskForwardTrace<S>)> {
    if task.support_pos.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
            context: "task needs at least one support positive",
        });
    }
    if task.support_neg.len() != task.support_pos.len() {
        return Err(Error::DimensionMismatch {
            expected: task.support_pos.len(),
            got: task.support_neg.len(),
            context: "one support negative per positive",
        });
    }
    if task.query_neg.len() != task.query_pos.len() {
        return Err(Error::DimensionMismatch {
            expected: task.query_pos.len(),
            got: task.query_neg.len(),
            context: "one negative group per query positive",
        });
    }
    let emb = &params.embeddings;
    let gamma = S::from_f64(hp.gamma);

    let mut support_acts = Vec::with_capacity(task.support_pos.len());
    let mut metas = Vec::with_capacity(task.support_pos.len());
    for &(head, tail) in &task.support_pos {
        let acts =
            entity_pair_meta_trace(emb.try_row(head)?, emb.try_row(tail)?, &params.learner)?;
        metas.push(acts.x.last().unwrap().clone());
        support_acts.push(acts);
    }
    let relation_meta = aggregate_meta(&metas)?;

    let mut support_pos = Vec::with_capacity(task.support_pos.len());
    let mut support_neg = Vec::with_capacity(task.support_neg.len());
    for (&(head, tail), &(neg_head, neg_tail)) in task.support_pos.iter().zip(&task.support_neg) {
        support_pos.push(score_term(emb.try_row(head)?, &relation_meta, emb.try_row(tail)?));
        support_neg.push(score_term(
            emb.try_row(neg_head)?,
            &relation_meta,
            emb.try_row(neg_tail)?,
        ));
    }
    let pos_scores: Vec<S> = support_pos.iter().map(|t| t.norm).collect();
    let neg_groups: Vec<Vec<S>> = support_neg.iter().map(|t| vec![t.norm]).collect();
    let (support_loss, support_flags) = hinge_loss(&pos_scores, &neg_groups, gamma);
    let support_active: Vec<bool> = support_flags.iter().map(|g| g[0]).collect();

    let (g_meta, updated_meta) = match mode {
        ForwardMode::Standard => {
            let g = gradient_meta(&support_pos, &support_neg, &support_active);
            let updated = rapid_update(&relation_meta, &g, S::from_f64(hp.beta));
            (g, updated)
        }
        ForwardMode::NoGradientMeta => {
            (vec![S::zero(); relation_meta.len()], relation_meta.clone())
        }
    };

    let mut query_pos = Vec::with_capacity(task.query_pos.len());
    let mut query_neg = Vec::with_capacity(task.query_pos.len());
    for (&(head, tail), negs) in task.query_pos.iter().zip(&task.query_neg) {
        let head_row = emb.try_row(head)?;
        query_pos.push(score_term(head_row, &updated_meta, emb.try_row(tail)?));
        let mut neg_terms = Vec::with_capacity(negs.len());
        for &neg_tail in negs {
            neg_terms.push(score_term(head_row, &updated_meta, emb.try_row(neg_tail)?));
        }
        query_neg.push(neg_terms);
    }
    let q_pos_scores: Vec<S> = query_pos.iter().map(|t| t.norm).collect();
    let q_neg_scores: Vec<Vec<S>> =
        query_neg.iter().map(|g| g.iter().map(|t| t.norm).collect()).collect();
    let (query_loss, query_active) = hinge_loss(&q_pos_scores, &q_neg_scores, gamma);

    let trace = TaskForwardTrace {
        params_version: params.version(),
        mode,
        support_acts,
        relation_meta,
        support_pos,
        support_neg,
        support_active,
        support_loss,
        gradient_meta: g_meta,
        updated_meta,
        query_pos,
        query_neg,
        query_active,
        query_loss,
    };
    Ok((query_loss, trace))
}
