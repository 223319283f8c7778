//! Acceptance gate. Each criterion is one test that prints a single
//! PASS/FAIL line with measured details and asserts its thresholds and
//! runtime bound. Criterion 7 (full-benchmark reproduction) is a deliberate
//! SKIP: it needs the published dataset and a multi-hour run.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use metar::data::{generate_synthetic, DatasetBundle, Split, SynthConfig};
use metar::episode::{EpisodeTask, SamplerConfig};
use metar::eval::{
    evaluate, metrics_from_ranks, rank_from_scores, Ablation, EvalConfig, RelationMetrics,
};
use metar::grad::{backward_task, finite_diff_check, rel_err, GradMode};
use metar::model::{
    forward_task, gradient_meta, hinge_loss, score, score_term, EmbeddingTable, ForwardMode,
    Hyperparams, Layer, Matrix, MetaLearnerParams, ModelParams, ScoreTerm, TaskForwardTrace,
};
use metar::rng::derive_stream;
use metar::train::{
    init_params, pretrain_on_triples, train_loop, Checkpoint, InitSource, TrainConfig,
    TrainOutcome, TransEConfig,
};

fn report(n: u32, name: &str, pass: bool, details: &str) {
    println!("criterion {n} ({name}): {} ({details})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {details}");
}

// ---------------------------------------------------------------- criterion 1

struct MetaInstance {
    heads: Vec<Vec<f64>>,
    tails: Vec<Vec<f64>>,
    corrupt: Vec<Vec<f64>>,
    meta: Vec<f64>,
}

const GAMMA: f64 = 1.0;

impl MetaInstance {
    /// Support hinge loss as a function of the relation meta alone.
    fn loss(&self, meta: &[f64]) -> f64 {
        let pos: Vec<f64> =
            (0..self.heads.len()).map(|i| score(&self.heads[i], meta, &self.tails[i])).collect();
        let negs: Vec<Vec<f64>> = (0..self.heads.len())
            .map(|i| vec![score(&self.heads[i], meta, &self.corrupt[i])])
            .collect();
        hinge_loss(&pos, &negs, GAMMA).0
    }

    fn terms(&self) -> (Vec<ScoreTerm<f64>>, Vec<ScoreTerm<f64>>, Vec<bool>) {
        let pos: Vec<ScoreTerm<f64>> = (0..self.heads.len())
            .map(|i| score_term(&self.heads[i], &self.meta, &self.tails[i]))
            .collect();
        let neg: Vec<ScoreTerm<f64>> = (0..self.heads.len())
            .map(|i| score_term(&self.heads[i], &self.meta, &self.corrupt[i]))
            .collect();
        let pos_scores: Vec<f64> = pos.iter().map(|t| t.norm).collect();
        let neg_groups: Vec<Vec<f64>> = neg.iter().map(|t| vec![t.norm]).collect();
        let (_, flags) = hinge_loss(&pos_scores, &neg_groups, GAMMA);
        let active: Vec<bool> = flags.iter().map(|g| g[0]).collect();
        (pos, neg, active)
    }

    /// Margins and norms bounded away from the hinge and norm kinks so a
    /// central difference stays inside one smooth region, with at least one
    /// active pair so the gradient is nontrivial.
    fn well_conditioned(&self) -> bool {
        let (pos, neg, active) = self.terms();
        let margins = pos
            .iter()
            .zip(&neg)
            .all(|(p, n)| (GAMMA + p.norm - n.norm).abs() > 1e-3);
        let norms = pos.iter().chain(&neg).all(|t| t.norm > 0.3);
        margins && norms && active.iter().any(|&a| a)
    }
}

fn conditioned_meta_instance(seed_base: u64, k: usize, dim: usize) -> MetaInstance {
    for seed in seed_base.. {
        let mut rng = derive_stream(seed, "accept-inner", 0);
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let inst = MetaInstance {
            heads: vecs(k),
            tails: vecs(k),
            corrupt: vecs(k),
            meta: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        if inst.well_conditioned() {
            return inst;
        }
    }
    unreachable!()
}

#[test]
fn criterion_1_inner_gradient() {
    let start = Instant::now();
    let dim = 8;
    let step = 1e-5;
    let mut max_err = 0.0f64;
    for i in 0..100u64 {
        let k = if i % 2 == 0 { 1 } else { 5 };
        let inst = conditioned_meta_instance(i * 1000, k, dim);
        let (pos, neg, active) = inst.terms();
        let analytic = gradient_meta(&pos, &neg, &active);
        for c in 0..dim {
            let mut plus = inst.meta.clone();
            plus[c] += step;
            let mut minus = inst.meta.clone();
            minus[c] -= step;
            let numeric = (inst.loss(&plus) - inst.loss(&minus)) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[c], numeric));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        1,
        "inner gradient vs finite differences",
        max_err < 1e-6 && elapsed < 10.0,
        &format!("max rel err {max_err:.3e} over 100 instances, K in {{1,5}}, {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------- criterion 2

fn tiny_instance(seed: u64) -> (ModelParams<f64>, Hyperparams, EpisodeTask) {
    let hp =
        Hyperparams { dim: 4, gamma: 1.0, beta: 1.0, leaky_slope: 0.01, hidden_sizes: vec![6] };
    let mut rng = derive_stream(seed, "accept-outer", 0);
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
    let params =
        ModelParams::new(embeddings, MetaLearnerParams { layers, slope: hp.leaky_slope });

    fn pick(rng: &mut rand_chacha::ChaCha12Rng) -> usize {
        rng.gen_range(0..10)
    }
    // Corrupted tails must differ from the pair's true tail, as the sampler
    // guarantees; a colliding negative makes the two scores cancel exactly
    // and parks the instance on a gradient-free ridge.
    fn corrupt(rng: &mut rand_chacha::ChaCha12Rng, tail: usize) -> usize {
        loop {
            let c = rng.gen_range(0..10);
            if c != tail {
                return c;
            }
        }
    }
    let support_pos = vec![(pick(&mut rng), pick(&mut rng)), (pick(&mut rng), pick(&mut rng))];
    let support_neg = vec![
        (support_pos[0].0, corrupt(&mut rng, support_pos[0].1)),
        (support_pos[1].0, corrupt(&mut rng, support_pos[1].1)),
    ];
    let query_pos = vec![(pick(&mut rng), pick(&mut rng)), (pick(&mut rng), pick(&mut rng))];
    let query_neg = vec![
        vec![corrupt(&mut rng, query_pos[0].1), corrupt(&mut rng, query_pos[0].1)],
        vec![corrupt(&mut rng, query_pos[1].1), corrupt(&mut rng, query_pos[1].1)],
    ];
    let task = EpisodeTask { relation: 0, support_pos, support_neg, query_pos, query_neg };
    (params, hp, task)
}

fn trace_conditioned(trace: &TaskForwardTrace<f64>, hp: &Hyperparams) -> bool {
    let margin_ok = |p: f64, n: f64| (hp.gamma + p - n).abs() > 1e-3;
    let norms_ok = |terms: &[ScoreTerm<f64>]| terms.iter().all(|t| t.norm > 1e-2);
    if !norms_ok(&trace.support_pos)
        || !norms_ok(&trace.support_neg)
        || !norms_ok(&trace.query_pos)
        || !trace.query_neg.iter().all(|g| norms_ok(g))
    {
        return false;
    }
    let support_margins = trace
        .support_pos
        .iter()
        .zip(&trace.support_neg)
        .all(|(p, n)| margin_ok(p.norm, n.norm));
    let query_margins = trace.query_pos.iter().enumerate().all(|(j, p)| {
        trace.query_neg[j].iter().all(|n| margin_ok(p.norm, n.norm))
    });
    let preacts = trace.support_acts.iter().all(|acts| {
        acts.preact[..acts.preact.len() - 1]
            .iter()
            .all(|layer| layer.iter().all(|a| a.abs() > 1e-3))
    });
    support_margins
        && query_margins
        && preacts
        && trace.support_active.iter().any(|&a| a)
        && trace.query_active.iter().flatten().any(|&a| a)
}

fn conditioned_tiny_instance(seed_base: u64) -> (ModelParams<f64>, Hyperparams, EpisodeTask) {
    for seed in seed_base.. {
        let (params, hp, task) = tiny_instance(seed);
        let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
        if trace_conditioned(&trace, &hp) {
            return (params, hp, task);
        }
    }
    unreachable!()
}

#[test]
fn criterion_2_outer_gradient() {
    let start = Instant::now();
    let step = 1e-5;
    let mut max_full = 0.0f64;
    let mut first_order_larger = true;
    for i in 0..100u64 {
        let (params, hp, task) = conditioned_tiny_instance(i * 1000);
        let full =
            finite_diff_check(&task, &params, &hp, GradMode::FullSecondOrder, step).unwrap();
        let first = finite_diff_check(&task, &params, &hp, GradMode::FirstOrder, step).unwrap();
        max_full = max_full.max(full.max_rel_err);
        first_order_larger &= first.max_rel_err > full.max_rel_err;
    }

    // With beta = 0 the rapid update is the identity and both modes must
    // produce bit-identical gradients.
    let (params, mut hp, task) = conditioned_tiny_instance(123_000);
    hp.beta = 0.0;
    let (_, trace) = forward_task(&task, &params, &hp, ForwardMode::Standard).unwrap();
    let g_full = backward_task(&trace, &task, &params, &hp, GradMode::FullSecondOrder).unwrap();
    let g_first = backward_task(&trace, &task, &params, &hp, GradMode::FirstOrder).unwrap();
    let beta_zero_identical = g_full == g_first;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        2,
        "outer gradient vs finite differences",
        max_full < 1e-3 && first_order_larger && beta_zero_identical && elapsed < 60.0,
        &format!(
            "full max rel err {max_full:.3e} on 100 instances, first-order strictly worse on \
             all, beta=0 bit-identical: {beta_zero_identical}, {elapsed:.2}s"
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

fn oracle_rank(true_score: f64, others: &[f64]) -> usize {
    let mut sorted = others.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rank = 1;
    for s in sorted {
        if s < true_score {
            rank += 1;
        } else {
            break;
        }
    }
    rank
}

fn oracle_metrics(ranks: &[usize]) -> RelationMetrics {
    let n = ranks.len() as f64;
    let mut mrr = 0.0;
    let (mut h1, mut h5, mut h10) = (0usize, 0usize, 0usize);
    for &r in ranks {
        mrr += 1.0 / r as f64;
        h1 += usize::from(r <= 1);
        h5 += usize::from(r <= 5);
        h10 += usize::from(r <= 10);
    }
    RelationMetrics {
        mrr: mrr / n,
        hits1: h1 as f64 / n,
        hits5: h5 as f64 / n,
        hits10: h10 as f64 / n,
        n_queries: ranks.len(),
    }
}

#[test]
fn criterion_3_metric_oracle() {
    let start = Instant::now();
    let mut rng = derive_stream(33, "accept-rank", 0);
    let mut ranks = Vec::with_capacity(10_000);
    let mut mismatches = 0usize;
    for case in 0..10_000usize {
        let n = rng.gen_range(1..=20usize);
        // Half the cases draw from a coarse grid so ties are common.
        let sample = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
            if case % 2 == 0 {
                rng.gen_range(0..6) as f64 * 0.5
            } else {
                rng.gen_range(0.0..3.0)
            }
        };
        let others: Vec<f64> = (0..n).map(|_| sample(&mut rng)).collect();
        let true_score = sample(&mut rng);
        let got = rank_from_scores(true_score, &others);
        if got != oracle_rank(true_score, &others) {
            mismatches += 1;
        }
        ranks.push(got);
    }
    // Exhaustive sweep at small candidate counts over a tied alphabet.
    let alphabet = [0.0, 0.5, 1.0];
    for n in 1..=4usize {
        let combos = alphabet.len().pow(n as u32);
        for code in 0..combos {
            let mut others = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                others.push(alphabet[c % alphabet.len()]);
                c /= alphabet.len();
            }
            for &true_score in &alphabet {
                if rank_from_scores(true_score, &others) != oracle_rank(true_score, &others) {
                    mismatches += 1;
                }
            }
        }
    }

    let ours = metrics_from_ranks(&ranks);
    let oracle = oracle_metrics(&ranks);
    let aggregation_exact = ours == oracle;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        3,
        "rank and metric aggregation vs sort oracle",
        mismatches == 0 && aggregation_exact && elapsed < 10.0,
        &format!(
            "0 rank mismatches in 10000 random + exhaustive tied cases, aggregation exact: \
             {aggregation_exact}, {elapsed:.2}s"
        ),
    );
}

// ------------------------------------------------------- criteria 4, 5 and 6

fn synth_config(noise_sigma: f64) -> SynthConfig {
    SynthConfig {
        n_entities: 200,
        dim: 16,
        n_train_rel: 20,
        n_dev_rel: 3,
        n_test_rel: 5,
        triples_per_rel: 30,
        noise_sigma,
        candidate_pool: 50,
        seed: 1234,
    }
}

fn hp16() -> Hyperparams {
    Hyperparams { dim: 16, gamma: 1.0, beta: 1.0, leaky_slope: 0.01, hidden_sizes: vec![64, 32] }
}

fn train_on(bundle: &DatasetBundle, max_iters: u64) -> TrainOutcome<f64> {
    let sampler = SamplerConfig { k: 1, n_query_pos: 3, n_neg_per_pos: 1, seed: 77 };
    let cfg = TrainConfig {
        batch_tasks: 64,
        lr: 0.01,
        eval_every: 500,
        patience: 30,
        max_iters,
        grad_mode: GradMode::FullSecondOrder,
        ablation: Ablation::Standard,
        seed: 99,
        workers: 1,
    };
    let hp = hp16();
    let params = init_params(&hp, bundle.vocab.n_entities(), InitSource::Random, 11).unwrap();
    let start = Checkpoint::fresh(params, cfg.lr, 0);
    train_loop(bundle, &sampler, &cfg, &hp, start).unwrap()
}

fn test_hits10(params: &ModelParams<f64>, bundle: &DatasetBundle, mode: Ablation) -> f64 {
    let cfg = EvalConfig { split: Split::Test, k: 1, mode, seed: 5 };
    let (rep, meta) = evaluate(params, None, bundle, &cfg, &hp16()).unwrap();
    assert!(meta.skipped() == 0, "no relation should be skipped at K=1");
    rep.hits10
}

static NOISELESS_RUN: OnceLock<(DatasetBundle, TrainOutcome<f64>)> = OnceLock::new();

fn noiseless_run() -> &'static (DatasetBundle, TrainOutcome<f64>) {
    NOISELESS_RUN.get_or_init(|| {
        let bundle = generate_synthetic(&synth_config(0.0)).unwrap();
        let out = train_on(&bundle, 20_000);
        (bundle, out)
    })
}

#[test]
fn criterion_4_planted_relation_learning() {
    let start = Instant::now();
    let (bundle, out) = noiseless_run();

    // Recoverability oracle: a plain translational model trained on every
    // stored triple must solve the planted structure.
    let transe_cfg = TransEConfig { dim: 16, epochs: 300, lr: 0.05, margin: 1.0, seed: 6 };
    let oracle = pretrain_on_triples::<f64>(
        bundle.store.triples(),
        bundle.vocab.n_entities(),
        bundle.vocab.n_relations(),
        &transe_cfg,
    )
    .unwrap();
    let hp = hp16();
    let untrained_params =
        init_params::<f64>(&hp, bundle.vocab.n_entities(), InitSource::Random, 2024).unwrap();
    let oracle_cfg = EvalConfig { split: Split::Test, k: 1, mode: Ablation::MinusGMinusR, seed: 5 };
    let (oracle_rep, _) =
        evaluate(&untrained_params, Some(&oracle), bundle, &oracle_cfg, &hp).unwrap();

    let trained = test_hits10(&out.best.params, bundle, Ablation::Standard);
    let untrained = test_hits10(&untrained_params, bundle, Ablation::Standard);

    let elapsed = start.elapsed().as_secs_f64();
    let pass = oracle_rep.hits10 >= 0.9
        && trained >= 0.80
        && (0.05..0.45).contains(&untrained)
        && elapsed < 300.0;
    report(
        4,
        "planted-relation learning",
        pass,
        &format!(
            "oracle Hits@10 {:.3} (>= 0.9), trained {trained:.3} (>= 0.80), untrained \
             {untrained:.3} (~0.20), {elapsed:.1}s single-threaded",
            oracle_rep.hits10
        ),
    );
}

#[test]
fn criterion_5_ablation_direction() {
    let start = Instant::now();
    let bundle = generate_synthetic(&synth_config(0.05)).unwrap();
    let out = train_on(&bundle, 20_000);
    let hp = hp16();

    let standard = test_hits10(&out.best.params, &bundle, Ablation::Standard);
    let minus_g = test_hits10(&out.best.params, &bundle, Ablation::MinusG);
    let untrained_params =
        init_params::<f64>(&hp, bundle.vocab.n_entities(), InitSource::Random, 2024).unwrap();
    let untrained = test_hits10(&untrained_params, &bundle, Ablation::Standard);

    let elapsed = start.elapsed().as_secs_f64();
    report(
        5,
        "ablation direction",
        standard >= minus_g && minus_g >= untrained,
        &format!(
            "Hits@10 standard {standard:.3} >= minus_g {minus_g:.3} >= untrained \
             {untrained:.3}, {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_6_training_sanity() {
    let (_, out) = noiseless_run();
    let losses = &out.log.iteration_losses;
    assert!(losses.len() >= 500, "need at least 500 iterations, got {}", losses.len());
    let early: f64 = losses[0..100].iter().sum::<f64>() / 100.0;
    let late: f64 = losses[400..500].iter().sum::<f64>() / 100.0;
    report(
        6,
        "training sanity",
        late < early,
        &format!("mean query loss iters 401-500 = {late:.4} < iters 1-100 = {early:.4}"),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_full_benchmark() {
    println!(
        "criterion 7 (full benchmark reproduction): SKIP (multi-hour full-scale run on the \
         published dataset; reported but not gating, desk-scale acceptance rests on criteria 1-6)"
    );
}
