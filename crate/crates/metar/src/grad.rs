//! Hand-derived backward pass for one task.
//!
//! The query loss depends on parameters along two routes: directly through
//! the query scores, and through the rapid update R′ = R − β·G, whose G is
//! itself a function of the relation meta and the support embeddings. The
//! full chain is differentiated exactly; the second-order piece uses the
//! closed-form Hessian-vector product of the support score terms,
//! P(v)·z = (z − u(u·z))/‖v‖ with u = v/‖v‖. `FirstOrder` drops that piece,
//! treating G as a constant.

use std::collections::BTreeMap;

use crate::data::EntityId;
use crate::episode::EpisodeTask;
use crate::error::{Error, Result};
use crate::model::{
    forward_task, leaky_deriv, ForwardMode, Hyperparams, Matrix, ModelParams, ScoreTerm,
    TaskForwardTrace,
};
use crate::scalar::Scalar;

/// How the rapid update is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Exact gradient, including the Hessian-vector term through G.
    FullSecondOrder,
    /// G treated as a constant; cheaper, approximate.
    FirstOrder,
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::FullSecondOrder => "full",
            GradMode::FirstOrder => "first",
        })
    }
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GradMode::FullSecondOrder),
            "first" => Ok(GradMode::FirstOrder),
            other => Err(Error::InvalidConfig(format!(
                "unknown grad mode {other:?} (expected full|first)"
            ))),
        }
    }
}

/// Gradients of one task's query loss: sparse rows for the embedding table,
/// dense matrices for the meta-learner layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients<S> {
    pub embedding_rows: BTreeMap<EntityId, Vec<S>>,
    pub layer_w: Vec<Matrix<S>>,
    pub layer_b: Vec<Vec<S>>,
}

impl<S: Scalar> TaskGradients<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        Self {
            embedding_rows: BTreeMap::new(),
            layer_w: params
                .learner
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.w.rows, l.w.cols))
                .collect(),
            layer_b: params.learner.layers.iter().map(|l| vec![S::zero(); l.b.len()]).collect(),
        }
    }

    fn row_mut(&mut self, id: EntityId, dim: usize) -> &mut Vec<S> {
        self.embedding_rows.entry(id).or_insert_with(|| vec![S::zero(); dim])
    }

    /// Accumulate another task's gradients (minibatch objectives are plain
    /// sums of task losses, so gradients add).
    pub fn merge(&mut self, other: &TaskGradients<S>) {
        for (&id, row) in &other.embedding_rows {
            let acc = self.row_mut(id, row.len());
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v;
            }
        }
        for (acc, w) in self.layer_w.iter_mut().zip(&other.layer_w) {
            for (a, v) in acc.data.iter_mut().zip(&w.data) {
                *a += *v;
            }
        }
        for (acc, b) in self.layer_b.iter_mut().zip(&other.layer_b) {
            for (a, v) in acc.iter_mut().zip(b) {
                *a += *v;
            }
        }
    }

    /// Embedding-row gradient as a dense lookup (zero when untouched).
    pub fn embedding_grad(&self, id: EntityId, col: usize) -> S {
        self.embedding_rows.get(&id).map_or_else(S::zero, |row| row[col])
    }
}

fn add_scaled<S: Scalar>(acc: &mut [S], v: &[S], scale: S) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += *x * scale;
    }
}

/// Unit vector of a score term, or None at zero norm (zero subgradient).
fn unit<S: Scalar>(term: &ScoreTerm<S>) -> Option<Vec<S>> {
    if term.norm > S::zero() {
        let inv = S::one() / term.norm;
        Some(term.diff.iter().map(|&d| d * inv).collect())
    } else {
        None
    }
}

/// P(v)·z = (z − u(u·z))/‖v‖, the Hessian of ‖v‖ applied to z; zero at ‖v‖=0.
fn hessian_vec<S: Scalar>(term: &ScoreTerm<S>, z: &[S]) -> Vec<S> {
    match unit(term) {
        Some(u) => {
            let dot: S = u.iter().zip(z).map(|(a, b)| *a * *b).sum();
            let inv_n = S::one() / term.norm;
            u.iter().zip(z).map(|(uv, zv)| (*zv - *uv * dot) * inv_n).collect()
        }
        None => vec![S::zero(); z.len()],
    }
}

/// Differentiate one task's query loss with respect to every parameter it
/// touches. The trace must come from `forward_task` on the same parameters.
pub fn backward_task<S: Scalar>(
    trace: &TaskForwardTrace<S>,
    task: &EpisodeTask,
    params: &ModelParams<S>,
    hp: &Hyperparams,
    mode: GradMode,
) -> Result<TaskGradients<S>> {
    if trace.params_version != params.version() {
        return Err(Error::StaleTrace {
            trace: trace.params_version,
            params: params.version(),
        });
    }
    let dim = params.embeddings.dim();
    let mut grads = TaskGradients::zeros_like(params);

    // Query hinge → query scores → R′ and the query embeddings directly.
    let mut g_meta_updated = vec![S::zero(); dim];
    for (j, &(head, tail)) in task.query_pos.iter().enumerate() {
        let negs = &task.query_neg[j];
        let weight = S::one() / S::from_f64(negs.len() as f64);
        let c: S = trace.query_active[j]
            .iter()
            .map(|&active| if active { weight } else { S::zero() })
            .sum();
        if c > S::zero() {
            if let Some(u) = unit(&trace.query_pos[j]) {
                add_scaled(&mut g_meta_updated, &u, c);
                add_scaled(grads.row_mut(head, dim), &u, c);
                add_scaled(grads.row_mut(tail, dim), &u, -c);
            }
        }
        for (m, &neg_tail) in negs.iter().enumerate() {
            if !trace.query_active[j][m] {
                continue;
            }
            if let Some(u) = unit(&trace.query_neg[j][m]) {
                add_scaled(&mut g_meta_updated, &u, -weight);
                add_scaled(grads.row_mut(head, dim), &u, -weight);
                add_scaled(grads.row_mut(neg_tail, dim), &u, weight);
            }
        }
    }

    // Gradient arriving at R. The identity path contributes g_meta_updated;
    // the second-order path routes −β·g_meta_updated through G's dependence
    // on R and on the support embeddings.
    let mut g_meta = g_meta_updated.clone();
    let second_order = mode == GradMode::FullSecondOrder
        && trace.mode == ForwardMode::Standard
        && hp.beta != 0.0;
    if second_order {
        let z: Vec<S> = {
            let neg_beta = -S::from_f64(hp.beta);
            g_meta_updated.iter().map(|&v| v * neg_beta).collect()
        };
        for (i, &active) in trace.support_active.iter().enumerate() {
            if !active {
                continue;
            }
            let q_pos = hessian_vec(&trace.support_pos[i], &z);
            let q_neg = hessian_vec(&trace.support_neg[i], &z);
            // ∂G/∂R = Σ (P_pos − P_neg) over active pairs.
            for ((g, qp), qn) in g_meta.iter_mut().zip(&q_pos).zip(&q_neg) {
                *g += *qp - *qn;
            }
            let (head, tail) = task.support_pos[i];
            let neg_tail = task.support_neg[i].1;
            add_scaled(grads.row_mut(head, dim), &q_pos, S::one());
            add_scaled(grads.row_mut(head, dim), &q_neg, -S::one());
            add_scaled(grads.row_mut(tail, dim), &q_pos, -S::one());
            add_scaled(grads.row_mut(neg_tail, dim), &q_neg, S::one());
        }
    }

    // R is the support mean of the meta-learner outputs: backpropagate
    // g_meta/K through each support pair's network.
    let k_inv = S::one() / S::from_f64(task.support_pos.len() as f64);
    let delta_out: Vec<S> = g_meta.iter().map(|&v| v * k_inv).collect();
    let n_layers = params.learner.layers.len();
    for (i, acts) in trace.support_acts.iter().enumerate() {
        let mut delta = delta_out.clone();
        for l in (0..n_layers).rev() {
            // delta holds ∂L/∂x[l+1]; the final layer is linear, hidden
            // layers fold in the LeakyReLU derivative at their preactivation.
            if l + 1 != n_layers {
                for (d, &a) in delta.iter_mut().zip(&acts.preact[l]) {
                    *d *= leaky_deriv(a, params.learner.slope);
                }
            }
            grads.layer_w[l].add_outer(&delta, &acts.x[l], S::one());
            add_scaled(&mut grads.layer_b[l], &delta, S::one());
            delta = params.learner.layers[l].w.mul_vec_transpose(&delta);
        }
        let (head, tail) = task.support_pos[i];
        add_scaled(grads.row_mut(head, dim), &delta[..dim], S::one());
        add_scaled(grads.row_mut(tail, dim), &delta[dim..], S::one());
    }

    Ok(grads)
}

/// Finite-difference verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Human-readable location of the worst parameter.
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub n_checked: usize,
}

/// Relative error with the conventional floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

enum ParamSlot {
    Embedding { row: usize, col: usize },
    Weight { layer: usize, r: usize, c: usize },
    Bias { layer: usize, idx: usize },
}

fn slot_of(params: &ModelParams<f64>, idx: usize) -> ParamSlot {
    let dim = params.embeddings.dim();
    let n_emb = params.embeddings.data().len();
    if idx < n_emb {
        return ParamSlot::Embedding { row: idx / dim, col: idx % dim };
    }
    let mut rest = idx - n_emb;
    for (layer, l) in params.learner.layers.iter().enumerate() {
        if rest < l.w.data.len() {
            return ParamSlot::Weight { layer, r: rest / l.w.cols, c: rest % l.w.cols };
        }
        rest -= l.w.data.len();
        if rest < l.b.len() {
            return ParamSlot::Bias { layer, idx: rest };
        }
        rest -= l.b.len();
    }
    unreachable!("scalar index {idx} out of range");
}

fn read_slot(params: &ModelParams<f64>, slot: &ParamSlot) -> f64 {
    match *slot {
        ParamSlot::Embedding { row, col } => params.embeddings.row(row)[col],
        ParamSlot::Weight { layer, r, c } => params.learner.layers[layer].w.get(r, c),
        ParamSlot::Bias { layer, idx } => params.learner.layers[layer].b[idx],
    }
}

fn write_slot(params: &mut ModelParams<f64>, slot: &ParamSlot, value: f64) {
    match *slot {
        ParamSlot::Embedding { row, col } => params.embeddings.row_mut(row)[col] = value,
        ParamSlot::Weight { layer, r, c } => *params.learner.layers[layer].w.get_mut(r, c) = value,
        ParamSlot::Bias { layer, idx } => params.learner.layers[layer].b[idx] = value,
    }
}

fn describe_slot(slot: &ParamSlot) -> String {
    match *slot {
        ParamSlot::Embedding { row, col } => format!("emb[{row}][{col}]"),
        ParamSlot::Weight { layer, r, c } => format!("w{layer}[{r},{c}]"),
        ParamSlot::Bias { layer, idx } => format!("b{layer}[{idx}]"),
    }
}

fn analytic_of_slot(grads: &TaskGradients<f64>, slot: &ParamSlot) -> f64 {
    match *slot {
        ParamSlot::Embedding { row, col } => grads.embedding_grad(row, col),
        ParamSlot::Weight { layer, r, c } => grads.layer_w[layer].get(r, c),
        ParamSlot::Bias { layer, idx } => grads.layer_b[layer][idx],
    }
}

/// Perturb every scalar parameter ± step and compare the central difference
/// of the query loss against `backward_task`'s output. Double precision only:
/// the step size is meaningless at f32.
pub fn finite_diff_check(
    task: &EpisodeTask,
    params: &ModelParams<f64>,
    hp: &Hyperparams,
    mode: GradMode,
    step: f64,
) -> Result<FdReport> {
    let (_, trace) = forward_task(task, params, hp, ForwardMode::Standard)?;
    let grads = backward_task(&trace, task, params, hp, mode)?;

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        n_checked: params.n_scalars(),
    };
    for idx in 0..params.n_scalars() {
        let slot = slot_of(params, idx);
        let base = read_slot(params, &slot);

        write_slot(&mut work, &slot, base + step);
        let (loss_plus, _) = forward_task(task, &work, hp, ForwardMode::Standard)?;
        write_slot(&mut work, &slot, base - step);
        let (loss_minus, _) = forward_task(task, &work, hp, ForwardMode::Standard)?;
        write_slot(&mut work, &slot, base);

        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let analytic = analytic_of_slot(&grads, &slot);
        let err = rel_err(analytic, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = describe_slot(&slot);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingTable, Layer, MetaLearnerParams};
    use crate::rng::derive_stream;
    use rand::Rng;

    fn random_instance(seed: u64) -> (ModelParams<f64>, Hyperparams, EpisodeTask) {
        let hp = Hyperparams {
            dim: 4,
            gamma: 1.0,
            beta: 1.0,
            leaky_slope: 0.01,
            hidden_sizes: vec![6],
        };
        let mut rng = derive_stream(seed, "grad-test", 0);
        let embeddings = EmbeddingTable::from_fn(10, hp.dim, |_, _| rng.gen_range(-1.0..1.0));
        let widths = hp.layer_widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    w: Matrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-limit..limit)),
                    b: (0..w[1]).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                }
            })
            .collect();
        let learner = MetaLearnerParams { layers, slope: hp.leaky_slope };
        let params = ModelParams::new(embeddings, learner);

        let pick = |rng: &mut rand_chacha::ChaCha12Rng| rng.gen_range(0..10usize);
        let task = EpisodeTask {
            relation: 0,
            support_pos: vec![(pick(&mut rng), pick(&mut rng)), (pick(&mut rng), pick(&mut rng))],
            support_neg: vec![(0, pick(&mut rng)), (0, pick(&mut rng))],
            query_pos: vec![(pick(&mut rng), pick(&mut rng)), (pick(&mut rng), pick(&mut rng))],
            query_neg: vec![
                vec![pick(&mut rng), pick(&mut rng)],
                vec![pick(&mut rng), pick(&mut rng)],
            ],
        };
        // Support negatives must keep their positive's head.
        let mut task = task;
        for i in 0..task.support_neg.len() {
            task.support_neg[i].0 = task.support_pos[i].0;
        }
        (params, hp, task)
    }

    /// Hinge margins, score norms, and hidden preactivations all bounded away
    /// from their kinks, with at least one active support and query hinge, so
    /// a finite-difference step of 1e-5 stays inside one smooth region.
    fn well_conditioned(trace: &crate::model::TaskForwardTrace<f64>, hp: &Hyperparams) -> bool {
        let margin_ok = |pos: f64, neg: f64| (hp.gamma + pos - neg).abs() > 1e-3;
        let norms_ok = |terms: &[ScoreTerm<f64>]| terms.iter().all(|t| t.norm > 1e-2);
        if !norms_ok(&trace.support_pos)
            || !norms_ok(&trace.support_neg)
            || !norms_ok(&trace.query_pos)
            || !trace.query_neg.iter().all(|g| norms_ok(g))
        {
            return false;
        }
        for (p, n) in trace.support_pos.iter().zip(&trace.support_neg) {
            if !margin_ok(p.norm, n.norm) {
                return false;
            }
        }
        for (j, p) in trace.query_pos.iter().enumerate() {
            for n in &trace.query_neg[j] {
                if !margin_ok(p.norm, n.norm) {
                    return false;
                }
            }
        }
        let preacts_ok = trace.support_acts.iter().all(|acts| {
            acts.preact[..acts.preact.len() - 1]
                .iter()
                .all(|layer| layer.iter().all(|a| a.abs() > 1e-3))
        });
        preacts_ok
            && trace.support_active.iter().any(|&a| a)
            && trace.query_active.iter().flatten().any(|&a| a)
    }

    fn conditioned_instance(start_seed: u64) -> (ModelParams<f64>, Hyperparams, EpisodeTask) {
        for seed in start_seed.. {
            let (params, hp, task) = random_instance(seed);
            let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
            if well_conditioned(&trace, &hp) {
                return (params, hp, task);
            }
        }
        unreachable!()
    }

    #[test]
    fn full_second_order_matches_finite_differences() {
        for base in [0u64, 1000, 2000, 3000, 4000] {
            let (params, hp, task) = conditioned_instance(base);
            let report =
                finite_diff_check(&task, &params, &hp, GradMode::FullSecondOrder, 1e-5).unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "seed base {base}: {} at {}",
                report.max_rel_err,
                report.worst_param
            );
        }
    }

    #[test]
    fn first_order_is_a_worse_approximation_when_beta_positive() {
        let mut full_worse = 0;
        let mut n = 0;
        for base in [0u64, 1000, 2000, 3000, 4000, 5000, 6000, 7000] {
            let (params, hp, task) = conditioned_instance(base);
            let full =
                finite_diff_check(&task, &params, &hp, GradMode::FullSecondOrder, 1e-5).unwrap();
            let first =
                finite_diff_check(&task, &params, &hp, GradMode::FirstOrder, 1e-5).unwrap();
            // The second-order term only matters when some support hinge is
            // active, which conditioning guarantees.
            if first.max_rel_err > full.max_rel_err {
                full_worse += 1;
            }
            n += 1;
        }
        assert_eq!(full_worse, n, "FirstOrder should always be the worse approximation here");
    }

    #[test]
    fn beta_zero_makes_modes_bit_identical() {
        let (params, mut hp, task) = conditioned_instance(42);
        hp.beta = 0.0;
        let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
        let full = backward_task(&trace, &task, &params, &hp, GradMode::FullSecondOrder).unwrap();
        let first = backward_task(&trace, &task, &params, &hp, GradMode::FirstOrder).unwrap();
        assert_eq!(full, first);
    }

    #[test]
    fn inactive_query_hinges_give_zero_gradients() {
        let (params, mut hp, task) = conditioned_instance(7);
        // A negative margin disables every query hinge.
        hp.gamma = -100.0;
        let (loss, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
        assert_eq!(loss, 0.0);
        let grads = backward_task(&trace, &task, &params, &hp, GradMode::FullSecondOrder).unwrap();
        assert!(grads.embedding_rows.values().flatten().all(|&g| g == 0.0));
        assert!(grads.layer_w.iter().flat_map(|w| &w.data).all(|&g| g == 0.0));
        assert!(grads.layer_b.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_keys_stay_inside_the_task() {
        let (params, hp, task) = conditioned_instance(13);
        let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
        let grads = backward_task(&trace, &task, &params, &hp, GradMode::FullSecondOrder).unwrap();
        let mut touched: std::collections::BTreeSet<usize> = Default::default();
        for &(h, t) in task.support_pos.iter().chain(&task.query_pos) {
            touched.insert(h);
            touched.insert(t);
        }
        for &(h, t) in &task.support_neg {
            touched.insert(h);
            touched.insert(t);
        }
        for negs in &task.query_neg {
            touched.extend(negs.iter().copied());
        }
        for key in grads.embedding_rows.keys() {
            assert!(touched.contains(key), "gradient for entity {key} outside the task");
        }
    }

    #[test]
    fn merged_gradients_equal_gradient_of_summed_loss() {
        // Finite differences of loss(task_a) + loss(task_b) against the
        // merge of the two analytic gradients.
        let (params, hp, task_a) = conditioned_instance(100);
        let (_, _, task_b) = {
            // Reuse the same parameters; only the task varies.
            let (_, _, t) = conditioned_instance(200);
            (0, 0, t)
        };
        let (_, trace_a) = forward_task(&task_a, &params, &hp, ForwardMode::Standard).unwrap();
        let (_, trace_b) = forward_task(&task_b, &params, &hp, ForwardMode::Standard).unwrap();
        let mut merged =
            backward_task(&trace_a, &task_a, &params, &hp, GradMode::FullSecondOrder).unwrap();
        let grads_b =
            backward_task(&trace_b, &task_b, &params, &hp, GradMode::FullSecondOrder).unwrap();
        merged.merge(&grads_b);

        let mut work = params.clone();
        let step = 1e-5;
        let mut max_err = 0.0f64;
        for idx in 0..params.n_scalars() {
            let slot = slot_of(&params, idx);
            let base = read_slot(&params, &slot);
            write_slot(&mut work, &slot, base + step);
            let plus = forward_task(&task_a, &work, &hp, ForwardMode::Standard).unwrap().0
                + forward_task(&task_b, &work, &hp, ForwardMode::Standard).unwrap().0;
            write_slot(&mut work, &slot, base - step);
            let minus = forward_task(&task_a, &work, &hp, ForwardMode::Standard).unwrap().0
                + forward_task(&task_b, &work, &hp, ForwardMode::Standard).unwrap().0;
            write_slot(&mut work, &slot, base);
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic_of_slot(&merged, &slot), numeric));
        }
        assert!(max_err < 1e-3, "merged gradient mismatch: {max_err}");
    }

    #[test]
    fn stale_trace_is_rejected() {
        let (mut params, hp, task) = conditioned_instance(3);
        let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
        params.bump_version();
        assert!(matches!(
            backward_task(&trace, &task, &params, &hp, GradMode::FullSecondOrder).unwrap_err(),
            Error::StaleTrace { .. }
        ));
    }

    #[test]
    fn no_gradient_meta_trace_backward_matches_beta_zero() {
        // Differentiating the ablation forward pass equals differentiating
        // the standard pass with beta = 0: both score queries with R.
        let (params, hp, task) = conditioned_instance(55);
        let (_, trace_ng) =
            forward_task(&task, &params, &hp, ForwardMode::NoGradientMeta).unwrap();
        let g_ng =
            backward_task(&trace_ng, &task, &params, &hp, GradMode::FullSecondOrder).unwrap();

        let mut hp0 = hp.clone();
        hp0.beta = 0.0;
        let (_, trace0) = forward_task(&task, &params, &hp0, ForwardMode::Standard).unwrap();
        let g0 = backward_task(&trace0, &task, &params, &hp0, GradMode::FullSecondOrder).unwrap();
        assert_eq!(g_ng, g0);
    }
}
