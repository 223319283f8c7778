//! Outer optimization: minibatch episodic training with Adam, periodic dev
//! evaluation, early stopping on Hits@10, and checkpoint selection.

pub mod checkpoint;
pub mod transe;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::data::DatasetBundle;
use crate::data::Split;
use crate::episode::{sample_episode, EpisodeTask, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Ablation, EvalConfig};
use crate::grad::{backward_task, GradMode, TaskGradients};
use crate::model::{
    forward_task, EmbeddingTable, ForwardMode, Hyperparams, Layer, Matrix, MetaLearnerParams,
    ModelParams,
};
use crate::rng::{derive_stream, STREAM_INIT, STREAM_SAMPLER};
use crate::scalar::Scalar;

pub use checkpoint::{config_fingerprint, load_checkpoint, save_checkpoint, Checkpoint};
pub use transe::{
    load_transe, pretrain_on_triples, pretrain_transe, pretraining_corpus, save_transe,
    TransEConfig, TransEModel,
};

/// Where initial embeddings come from; meta-learner weights are always drawn
/// fresh, from a stream independent of the embedding draws so both sources
/// get identical weights under the same seed.
#[derive(Debug, Clone, Copy)]
pub enum InitSource<'a, S> {
    Random,
    FromPretrained(&'a EmbeddingTable<S>),
}

/// Embeddings uniform in [−6/√d, +6/√d] (or copied verbatim from a
/// pretrained table), weights Xavier-uniform, biases zero.
pub fn init_params<S: Scalar>(
    hp: &Hyperparams,
    n_entities: usize,
    source: InitSource<'_, S>,
    seed: u64,
) -> Result<ModelParams<S>> {
    hp.validate()?;
    if n_entities == 0 {
        return Err(Error::InvalidConfig("entity vocabulary is empty".into()));
    }
    let embeddings = match source {
        InitSource::Random => {
            let mut rng = derive_stream(seed, STREAM_INIT, 0);
            let limit = 6.0 / (hp.dim as f64).sqrt();
            EmbeddingTable::from_fn(n_entities, hp.dim, |_, _| {
                S::from_f64(rng.gen_range(-limit..limit))
            })
        }
        InitSource::FromPretrained(table) => {
            if table.dim() != hp.dim {
                return Err(Error::DimensionMismatch {
                    expected: hp.dim,
                    got: table.dim(),
                    context: "pretrained embedding width",
                });
            }
            if table.n_rows() != n_entities {
                return Err(Error::DimensionMismatch {
                    expected: n_entities,
                    got: table.n_rows(),
                    context: "pretrained embedding rows",
                });
            }
            table.clone()
        }
    };
    let mut wrng = derive_stream(seed, STREAM_INIT, 1);
    let widths = hp.layer_widths();
    let layers: Vec<Layer<S>> = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                w: Matrix::from_fn(fan_out, fan_in, |_, _| {
                    S::from_f64(wrng.gen_range(-limit..limit))
                }),
                b: vec![S::zero(); fan_out],
            }
        })
        .collect();
    let learner = MetaLearnerParams { layers, slope: S::from_f64(hp.leaky_slope) };
    learner.check_chain(hp.dim)?;
    Ok(ModelParams::new(embeddings, learner))
}

/// Adam moments shaped like the parameters, with one global step counter.
/// Embedding moments update lazily: only rows touched by a step decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub t: u64,
    pub emb_m: EmbeddingTable<S>,
    pub emb_v: EmbeddingTable<S>,
    pub w_m: Vec<Matrix<S>>,
    pub w_v: Vec<Matrix<S>>,
    pub b_m: Vec<Vec<S>>,
    pub b_v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>, lr: f64) -> Self {
        let zeros_w: Vec<Matrix<S>> =
            params.learner.layers.iter().map(|l| Matrix::zeros(l.w.rows, l.w.cols)).collect();
        let zeros_b: Vec<Vec<S>> =
            params.learner.layers.iter().map(|l| vec![S::zero(); l.b.len()]).collect();
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            emb_m: EmbeddingTable::zeros(params.embeddings.n_rows(), params.embeddings.dim()),
            emb_v: EmbeddingTable::zeros(params.embeddings.n_rows(), params.embeddings.dim()),
            w_m: zeros_w.clone(),
            w_v: zeros_w,
            b_m: zeros_b.clone(),
            b_v: zeros_b,
        }
    }
}

/// One bias-corrected Adam step over the aggregate gradients. Dense layer
/// tensors always update; embedding updates touch exactly the rows present
/// in the gradient. Bumps the parameter version.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &TaskGradients<S>,
    state: &mut AdamState<S>,
    iteration: u64,
) -> Result<()> {
    let finite = grads.embedding_rows.values().flatten().all(|&g| g.to_f64().is_finite())
        && grads.layer_w.iter().flat_map(|m| &m.data).all(|&g| g.to_f64().is_finite())
        && grads.layer_b.iter().flatten().all(|&g| g.to_f64().is_finite());
    if !finite {
        return Err(Error::NonFinite { what: "gradient", iteration });
    }

    state.t += 1;
    let lr = S::from_f64(state.lr);
    let b1 = S::from_f64(state.b1);
    let b2 = S::from_f64(state.b2);
    let one_m_b1 = S::from_f64(1.0 - state.b1);
    let one_m_b2 = S::from_f64(1.0 - state.b2);
    let eps = S::from_f64(state.eps);
    let bc1 = S::from_f64(1.0 - state.b1.powf(state.t as f64));
    let bc2 = S::from_f64(1.0 - state.b2.powf(state.t as f64));

    let update = |theta: &mut S, m: &mut S, v: &mut S, g: S| {
        *m = b1 * *m + one_m_b1 * g;
        *v = b2 * *v + one_m_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (&id, grow) in &grads.embedding_rows {
        if id >= params.embeddings.n_rows() {
            return Err(Error::EntityOutOfBounds { id, rows: params.embeddings.n_rows() });
        }
        let theta = params.embeddings.row_mut(id);
        let m = state.emb_m.row_mut(id);
        let v = state.emb_v.row_mut(id);
        for c in 0..grow.len() {
            update(&mut theta[c], &mut m[c], &mut v[c], grow[c]);
        }
    }
    for l in 0..params.learner.layers.len() {
        let layer = &mut params.learner.layers[l];
        for i in 0..layer.w.data.len() {
            update(&mut layer.w.data[i], &mut state.w_m[l].data[i], &mut state.w_v[l].data[i], grads.layer_w[l].data[i]);
        }
        for i in 0..layer.b.len() {
            update(&mut layer.b[i], &mut state.b_m[l][i], &mut state.b_v[l][i], grads.layer_b[l][i]);
        }
    }
    params.bump_version();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_tasks: usize,
    pub lr: f64,
    pub eval_every: u64,
    pub patience: usize,
    pub max_iters: u64,
    pub grad_mode: GradMode,
    pub ablation: Ablation,
    /// Seeds dev-evaluation support negatives; episode sampling streams come
    /// from the sampler config's own seed.
    pub seed: u64,
    pub workers: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tasks == 0 {
            return Err(Error::InvalidConfig("batch_tasks must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be positive".into()));
        }
        if self.ablation == Ablation::MinusGMinusR {
            return Err(Error::InvalidConfig(
                "minus_g_minus_r has no meta-learner to train; pretrain a translational model \
                 and evaluate with it instead"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevEval {
    pub iteration: u64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Minibatch loss per iteration (sum of the batch's task query losses).
    pub iteration_losses: Vec<f64>,
    pub evals: Vec<DevEval>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<S> {
    /// Snapshot at the best dev Hits@10 (the final state if no evaluation
    /// ever ran or none improved on a resumed best).
    pub best: Checkpoint<S>,
    pub final_state: Checkpoint<S>,
    pub log: TrainLog,
}

/// Run minibatch training from `start` until `max_iters` total iterations or
/// early stopping: after `patience` consecutive dev evaluations without a new
/// best Hits@10, training halts. Each iteration samples `batch_tasks`
/// episodes from a per-iteration stream, so a resumed run retraces the
/// interrupted one exactly.
pub fn train_loop<S: Scalar>(
    bundle: &DatasetBundle,
    sampler_cfg: &SamplerConfig,
    train_cfg: &TrainConfig,
    hp: &Hyperparams,
    start: Checkpoint<S>,
) -> Result<TrainOutcome<S>> {
    sampler_cfg.validate()?;
    train_cfg.validate()?;
    hp.validate()?;

    let forward_mode = match train_cfg.ablation {
        Ablation::Standard => ForwardMode::Standard,
        Ablation::MinusG => ForwardMode::NoGradientMeta,
        Ablation::MinusGMinusR => unreachable!("rejected by validate"),
    };
    let dev_cfg = EvalConfig {
        split: Split::Dev,
        k: sampler_cfg.k,
        mode: train_cfg.ablation,
        seed: train_cfg.seed,
    };
    let pool = if train_cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(train_cfg.workers)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut state = start;
    let mut best: Option<Checkpoint<S>> = None;
    let mut non_improving = 0usize;
    let mut log = TrainLog::default();

    while state.iteration < train_cfg.max_iters {
        let iter_index = state.iteration;
        let mut rng = derive_stream(sampler_cfg.seed, STREAM_SAMPLER, iter_index);
        let tasks: Vec<EpisodeTask> = (0..train_cfg.batch_tasks)
            .map(|_| sample_episode(bundle, sampler_cfg, &mut rng))
            .collect::<Result<_>>()?;

        let params = &state.params;
        let run_task = |task: &EpisodeTask| -> Result<(f64, TaskGradients<S>)> {
            let (loss, trace) = forward_task(task, params, hp, forward_mode)?;
            debug_assert_eq!(trace.mode, forward_mode);
            let grads = backward_task(&trace, task, params, hp, train_cfg.grad_mode)?;
            Ok((loss.to_f64(), grads))
        };
        // Parallel tasks read one immutable snapshot; the positional collect
        // and sequential merge keep aggregation order fixed.
        let results: Vec<(f64, TaskGradients<S>)> = match &pool {
            Some(p) => p.install(|| tasks.par_iter().map(run_task).collect::<Result<Vec<_>>>())?,
            None => tasks.iter().map(run_task).collect::<Result<Vec<_>>>()?,
        };

        let batch_loss: f64 = results.iter().map(|(l, _)| *l).sum();
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite { what: "minibatch loss", iteration: iter_index });
        }
        let mut total = TaskGradients::zeros_like(&state.params);
        for (_, g) in &results {
            total.merge(g);
        }
        adam_step(&mut state.params, &total, &mut state.adam, iter_index)?;
        state.iteration += 1;
        log.iteration_losses.push(batch_loss);

        if state.iteration % train_cfg.eval_every == 0 {
            let (report, _) = evaluate(&state.params, None, bundle, &dev_cfg, hp)?;
            let improved = match state.best_dev_hits10 {
                None => true,
                Some(b) => report.hits10 > b,
            };
            if improved {
                state.best_dev_hits10 = Some(report.hits10);
                best = Some(state.clone());
                non_improving = 0;
            } else {
                non_improving += 1;
            }
            log.evals.push(DevEval {
                iteration: state.iteration,
                mrr: report.mrr,
                hits1: report.hits1,
                hits5: report.hits5,
                hits10: report.hits10,
                improved,
            });
            if non_improving >= train_cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let best = best.unwrap_or_else(|| state.clone());
    Ok(TrainOutcome { best, final_state: state, log })
}
