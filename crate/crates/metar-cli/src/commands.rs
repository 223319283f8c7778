//! Subcommand implementations. Every command validates its configuration
//! before touching the filesystem and is deterministic given (config, seed).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use metar::data::{
    dataset_stats, generate_synthetic, load_benchmark, write_benchmark_dir, BackgroundMode,
    DatasetBundle,
};
use metar::eval::{evaluate, write_report, write_report_to, Ablation, EvalReport};
use metar::model::{Hyperparams, ModelParams};
use metar::train::{
    config_fingerprint, init_params, load_checkpoint, load_transe, pretrain_transe,
    save_checkpoint, save_transe, train_loop, Checkpoint, InitSource, TransEModel,
};
use metar::{Error, Result};

use crate::config::{InitKind, RunConfig};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.into(), source }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let bundle = generate_synthetic(&cfg.synth())?;
    write_benchmark_dir(&bundle, &cfg.data_dir)?;
    println!(
        "wrote synthetic benchmark to {} ({} entities, {} relations, {} triples)",
        cfg.data_dir.display(),
        bundle.vocab.n_entities(),
        bundle.vocab.n_relations(),
        bundle.store.len()
    );
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let bundle = load_benchmark(&cfg.data_dir, cfg.background)?;
    let stats = dataset_stats(&bundle);
    match cfg.report_format {
        metar::eval::ReportFormat::Json => {
            let text = serde_json::to_string_pretty(&stats)
                .expect("stats serialization cannot fail");
            println!("{text}");
        }
        metar::eval::ReportFormat::Text => {
            println!("entities {}", stats.n_entities);
            println!(
                "relations {} (train {}, dev {}, test {})",
                stats.n_relations,
                stats.train.n_relations,
                stats.dev.n_relations,
                stats.test.n_relations
            );
            println!(
                "triples: train {}, dev {}, test {}, background {}, store {}",
                stats.train.n_triples,
                stats.dev.n_triples,
                stats.test.n_triples,
                stats.n_background_triples,
                stats.n_store_triples
            );
            println!("one-shot entity proportion {:.3}", stats.one_shot_entity_proportion);
        }
    }
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    if cfg.background != BackgroundMode::PreTrain {
        return Err(Error::InvalidConfig(format!(
            "pretraining needs background = pretrain; {} would {} the background graph",
            cfg.background,
            if cfg.background == BackgroundMode::Discard { "drop" } else { "merge away" }
        )));
    }
    cfg.transe().validate()?;
    let bundle = load_benchmark(&cfg.data_dir, BackgroundMode::PreTrain)?;
    let model = pretrain_transe::<f64>(&bundle, &[], &cfg.transe())?;
    save_transe(&model, &cfg.pretrain_path)?;
    println!(
        "wrote pretrained embeddings to {} ({} entities, {} relations, dim {})",
        cfg.pretrain_path.display(),
        model.entities.n_rows(),
        model.relations.n_rows(),
        model.entities.dim()
    );
    Ok(())
}

/// Reject a checkpoint whose tensors do not fit the configured model.
fn check_shapes(params: &ModelParams<f64>, hp: &Hyperparams, n_entities: usize) -> Result<()> {
    let widths = hp.layer_widths();
    let layers = &params.learner.layers;
    let emb = &params.embeddings;
    let ok = emb.dim() == hp.dim
        && emb.n_rows() == n_entities
        && layers.len() + 1 == widths.len()
        && layers
            .iter()
            .enumerate()
            .all(|(i, l)| l.w.rows == widths[i + 1] && l.w.cols == widths[i]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "checkpoint shape ({} rows x dim {}, {} layers) does not match dim {}, \
             hidden_sizes, and the {}-entity dataset",
            emb.n_rows(),
            emb.dim(),
            layers.len(),
            hp.dim,
            n_entities
        )))
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let hp = cfg.hyperparams();
    hp.validate()?;
    let sampler = cfg.sampler();
    sampler.validate()?;
    let train_cfg = cfg.train();
    train_cfg.validate()?;

    let bundle = load_benchmark(&cfg.data_dir, cfg.background)?;
    let pretrained: Option<TransEModel<f64>> = match cfg.init {
        InitKind::Random => None,
        InitKind::Pretrained => Some(load_transe(&cfg.pretrain_path)?),
    };
    let source = match &pretrained {
        None => InitSource::Random,
        Some(model) => InitSource::FromPretrained(&model.entities),
    };
    let params = init_params::<f64>(&hp, bundle.vocab.n_entities(), source, cfg.seed)?;
    let fingerprint = config_fingerprint(&cfg.fingerprint_text());
    let start = Checkpoint::fresh(params, train_cfg.lr, fingerprint);

    let outcome = train_loop(&bundle, &sampler, &train_cfg, &hp, start)?;
    save_checkpoint(&outcome.best, &cfg.checkpoint_path)?;

    let file = File::create(&cfg.log_path).map_err(|e| io_err(&cfg.log_path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &outcome.log)
        .map_err(|e| io_err(&cfg.log_path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(&cfg.log_path, e))?;

    let best = &outcome.best;
    match best.best_dev_hits10 {
        Some(h) => println!(
            "trained {} iterations; best dev Hits@10 {:.4} at iteration {}; wrote {} and {}",
            outcome.final_state.iteration,
            h,
            best.iteration,
            cfg.checkpoint_path.display(),
            cfg.log_path.display()
        ),
        None => println!(
            "trained {} iterations (no dev evaluation ran); wrote {} and {}",
            outcome.final_state.iteration,
            cfg.checkpoint_path.display(),
            cfg.log_path.display()
        ),
    }
    Ok(())
}

fn load_model_for_eval(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    hp: &Hyperparams,
) -> Result<Checkpoint<f64>> {
    let ckpt = load_checkpoint::<f64>(&cfg.checkpoint_path)?;
    check_shapes(&ckpt.params, hp, bundle.vocab.n_entities())?;
    Ok(ckpt)
}

fn run_eval(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    hp: &Hyperparams,
    params: &ModelParams<f64>,
    transe: Option<&TransEModel<f64>>,
    mode: Ablation,
) -> Result<EvalReport> {
    let (report, meta) = evaluate(params, transe, bundle, &cfg.eval(mode), hp)?;
    if meta.skipped() > 0 {
        eprintln!(
            "warning: {} relation(s) skipped for lacking {} support + 1 query pairs",
            meta.skipped(),
            cfg.k
        );
    }
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let hp = cfg.hyperparams();
    hp.validate()?;
    let bundle = load_benchmark(&cfg.data_dir, cfg.background)?;
    let ckpt = load_model_for_eval(cfg, &bundle, &hp)?;
    let transe: Option<TransEModel<f64>> = match cfg.ablation {
        Ablation::MinusGMinusR => Some(load_transe(&cfg.pretrain_path)?),
        _ => None,
    };
    let report = run_eval(cfg, &bundle, &hp, &ckpt.params, transe.as_ref(), cfg.ablation)?;

    match &cfg.report_path {
        Some(path) => {
            write_report(&report, path, cfg.report_format)?;
            println!("wrote report to {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_report_to(&mut lock, &report, cfg.report_format)
                .map_err(|e| io_err(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let hp = cfg.hyperparams();
    hp.validate()?;
    let bundle = load_benchmark(&cfg.data_dir, cfg.background)?;
    let ckpt = load_model_for_eval(cfg, &bundle, &hp)?;
    let transe: TransEModel<f64> = load_transe(&cfg.pretrain_path)?;

    let rows = [
        ("standard", run_eval(cfg, &bundle, &hp, &ckpt.params, None, Ablation::Standard)?),
        ("-g", run_eval(cfg, &bundle, &hp, &ckpt.params, None, Ablation::MinusG)?),
        (
            "-g-r",
            run_eval(cfg, &bundle, &hp, &ckpt.params, Some(&transe), Ablation::MinusGMinusR)?,
        ),
    ];

    println!("ablation on {} ({}-shot, {} queries)", cfg.split.name(), cfg.k, rows[0].1.n_queries);
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "mode", "MRR", "Hits@10", "Hits@5", "Hits@1");
    for (label, report) in &rows {
        println!(
            "{label:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            report.mrr, report.hits10, report.hits5, report.hits1
        );
    }
    Ok(())
}
