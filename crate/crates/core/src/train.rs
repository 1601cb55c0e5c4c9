//! The training loop: batched episodes, AdamW with two rate groups and
//! stepped decay, JSONL metrics, periodic validation, and best/final
//! checkpoints. Everything downstream of the config and seed is
//! deterministic, including the metrics byte stream.

use crate::checkpoint::{save_checkpoint, CheckpointError, MetricSummary};
use crate::config::RunConfig;
use crate::metrics::{average_precision, MetricsError};
use crate::model::{eval_episodes, GateFusionModel, ModelError};
use crate::optim::{adamw_step, lr_schedule, AdamConfig, AdamState, OptimError};
use crate::synthdata::{derive_seed, generate_episode, DataError, EpisodeBatch, EpisodeConfig};
use crate::tape::Tape;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Split streams for seed derivation.
pub const STREAM_TRAIN: u64 = 0;
pub const STREAM_VAL: u64 = 1;
pub const STREAM_TEST: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step}; offending batch seeds {batch_seeds:?}")]
    NonFiniteLoss { step: u64, batch_seeds: Vec<u64> },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_eval: MetricSummary,
    pub best_eval: MetricSummary,
    pub best_step: u64,
    pub steps_run: u64,
    pub out_dir: PathBuf,
}

/// Validation episodes for a config: a fixed set drawn from the val stream.
pub fn validation_set(cfg: &RunConfig) -> Result<Vec<EpisodeBatch>, DataError> {
    (0..cfg.train.val_episodes)
        .map(|i| {
            generate_episode(&EpisodeConfig {
                seed: derive_seed(cfg.episode.seed, STREAM_VAL, i as u64),
                ..cfg.episode.clone()
            })
        })
        .collect()
}

/// Evaluate a model over episodes: per-head average precision using the
/// positive-class probability as the score, plus the loss components.
pub fn evaluate(
    model: &GateFusionModel,
    episodes: &[&EpisodeBatch],
) -> Result<MetricSummary, TrainError> {
    let out = eval_episodes(model, episodes)?;
    Ok(MetricSummary {
        ap_av: average_precision(&out.scores_av, &out.labels)?,
        ap_a: average_precision(&out.scores_a, &out.labels)?,
        ap_v: average_precision(&out.scores_v, &out.labels)?,
        cls: out.cls,
        mal: out.mal,
        opp: out.opp,
        total: out.total,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_record(w: &mut impl Write, path: &Path, record: serde_json::Value) -> Result<(), TrainError> {
    writeln!(w, "{record}").map_err(|e| io_err(path, e))
}

/// Train a model per `cfg`, writing metrics and checkpoints under
/// `cfg.out_dir`. Returns the trained model alongside the outcome summary.
pub fn train(cfg: &RunConfig) -> Result<(GateFusionModel, TrainOutcome), TrainError> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let file = std::fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    write_record(
        &mut log,
        &metrics_path,
        serde_json::json!({"config_hash": cfg.hash(), "seed": cfg.train.seed}),
    )?;

    let mut model = GateFusionModel::new(cfg)?;
    let mut adam_state = AdamState::new(&model.store);
    let adam_cfg = AdamConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    };
    let val_episodes = validation_set(cfg)?;
    let val_refs: Vec<&EpisodeBatch> = val_episodes.iter().collect();

    let episodes_per_batch = (cfg.train.batch_frames / cfg.episode.video_frames).max(1);
    let mut episode_counter: u64 = 0;
    let mut best: Option<(u64, MetricSummary)> = None;
    let mut last_eval: Option<(u64, MetricSummary)> = None;

    for step in 0..cfg.train.steps {
        let mut batch_seeds = Vec::with_capacity(episodes_per_batch);
        let mut batch = Vec::with_capacity(episodes_per_batch);
        for _ in 0..episodes_per_batch {
            let seed = derive_seed(cfg.episode.seed, STREAM_TRAIN, episode_counter);
            episode_counter += 1;
            batch_seeds.push(seed);
            batch.push(generate_episode(&EpisodeConfig {
                seed,
                ..cfg.episode.clone()
            })?);
        }
        let batch_refs: Vec<&EpisodeBatch> = batch.iter().collect();

        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &batch_refs)?;
        let terms = model.loss_terms(&mut tape, &fwd)?;
        let cls_v = tape.scalar(terms.cls);
        let mal_v = tape.scalar(terms.mal);
        let opp_v = tape.scalar(terms.opp);
        let total_v = tape.scalar(terms.total);
        if !total_v.is_finite() {
            write_record(
                &mut log,
                &metrics_path,
                serde_json::json!({
                    "step": step,
                    "error": "non_finite_loss",
                    "batch_seeds": batch_seeds,
                }),
            )?;
            log.flush().map_err(|e| io_err(&metrics_path, e))?;
            return Err(TrainError::NonFiniteLoss { step, batch_seeds });
        }
        write_record(
            &mut log,
            &metrics_path,
            serde_json::json!({
                "step": step,
                "cls": cls_v,
                "mal": mal_v,
                "opp": opp_v,
                "total": total_v,
            }),
        )?;

        let grads = tape
            .backward(terms.total)
            .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
        let bound = tape.bound_params();
        drop(tape);
        for (id, var) in bound {
            if let Some(g) = grads.get(var) {
                model.store.accumulate_grad(id, g);
            }
        }
        let lr_enc = lr_schedule(step, cfg.train.lr_encoder, cfg.train.decay, cfg.train.decay_interval);
        let lr_dec = lr_schedule(step, cfg.train.lr_decoder, cfg.train.decay, cfg.train.decay_interval);
        match adamw_step(&mut model.store, &mut adam_state, lr_enc, lr_dec, &adam_cfg) {
            Ok(()) => {}
            Err(OptimError::NonFiniteGrad { name }) => {
                // Step rejected; record it and move on.
                write_record(
                    &mut log,
                    &metrics_path,
                    serde_json::json!({
                        "step": step,
                        "error": "non_finite_grad",
                        "param": name,
                    }),
                )?;
            }
        }
        model.store.zero_grads();

        if (step + 1) % cfg.train.eval_interval == 0 || step + 1 == cfg.train.steps {
            let summary = evaluate(&model, &val_refs)?;
            write_record(
                &mut log,
                &metrics_path,
                serde_json::json!({
                    "step": step + 1,
                    "ap_av": summary.ap_av,
                    "ap_a": summary.ap_a,
                    "ap_v": summary.ap_v,
                }),
            )?;
            let improved = best
                .as_ref()
                .map(|(_, b)| summary.ap_av > b.ap_av)
                .unwrap_or(true);
            if improved {
                best = Some((step + 1, summary.clone()));
                save_checkpoint(
                    &out_dir.join("checkpoint_best"),
                    &model,
                    cfg,
                    step + 1,
                    Some(&summary),
                )?;
            }
            last_eval = Some((step + 1, summary));
        }
    }

    // A zero-step run still gets one evaluation and its checkpoints.
    let (final_step, final_eval) = match last_eval {
        Some(v) => v,
        None => {
            let summary = evaluate(&model, &val_refs)?;
            (0, summary)
        }
    };
    if best.is_none() {
        best = Some((final_step, final_eval.clone()));
        save_checkpoint(
            &out_dir.join("checkpoint_best"),
            &model,
            cfg,
            final_step,
            Some(&final_eval),
        )?;
    }
    save_checkpoint(
        &out_dir.join("checkpoint_final"),
        &model,
        cfg,
        cfg.train.steps,
        Some(&final_eval),
    )?;
    log.flush().map_err(|e| io_err(&metrics_path, e))?;

    let (best_step, best_eval) = best.expect("set above");
    Ok((
        model,
        TrainOutcome {
            final_eval,
            best_eval,
            best_step,
            steps_run: cfg.train.steps,
            out_dir,
        },
    ))
}

/// A linear per-frame classifier on raw video features, trained with the
/// same step budget and optimizer settings. Its ceiling on this task is
/// what the distractor construction is designed to enforce.
pub fn train_video_probe(cfg: &RunConfig) -> Result<f64, TrainError> {
    use crate::heads::FrameLabels;
    use crate::params::{ParamGroup, ParamStore};

    let mut store = ParamStore::new();
    let w = store.add(
        "probe.w",
        crate::tensor::zeros(cfg.episode.video_width, 2),
        ParamGroup::Decoder,
    );
    let b = store.add("probe.b", crate::tensor::zeros(1, 2), ParamGroup::Decoder);
    let mut adam_state = AdamState::new(&store);
    let adam_cfg = AdamConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    };
    let episodes_per_batch = (cfg.train.batch_frames / cfg.episode.video_frames).max(1);
    let mut episode_counter = 0u64;
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(episodes_per_batch);
        for _ in 0..episodes_per_batch {
            let seed = derive_seed(cfg.episode.seed, STREAM_TRAIN, episode_counter);
            episode_counter += 1;
            batch.push(generate_episode(&EpisodeConfig {
                seed,
                ..cfg.episode.clone()
            })?);
        }
        let mut tape = Tape::new(&store);
        let wv = tape.param(w);
        let bv = tape.param(b);
        let mut logit_parts = Vec::new();
        let mut label_parts: Vec<&FrameLabels> = Vec::new();
        for ep in &batch {
            let raw = tape.constant(ep.video.clone());
            let logits = tape
                .matmul(raw, wv)
                .and_then(|l| tape.add_row(l, bv))
                .map_err(ModelError::Numerics)?;
            logit_parts.push(logits);
            label_parts.push(&ep.labels);
        }
        let logits = tape
            .concat_rows(&logit_parts)
            .map_err(ModelError::Numerics)?;
        let p = tape.softmax_rows(logits).map_err(ModelError::Numerics)?;
        let labels = FrameLabels::concat(&label_parts);
        let loss = crate::heads::cls(&mut tape, p, &labels).map_err(ModelError::Numerics)?;
        let grads = tape
            .backward(loss)
            .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
        let bound = tape.bound_params();
        drop(tape);
        for (id, var) in bound {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(id, g);
            }
        }
        let lr = lr_schedule(step, cfg.train.lr_decoder, cfg.train.decay, cfg.train.decay_interval);
        adamw_step(&mut store, &mut adam_state, 0.0, lr, &adam_cfg)
            .map_err(|e| TrainError::NonFiniteLoss {
                step,
                batch_seeds: vec![match e {
                    OptimError::NonFiniteGrad { .. } => 0,
                }],
            })?;
        store.zero_grads();
    }

    // Validation AP of the probe.
    let val = validation_set(cfg)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut tape = Tape::new(&store);
    let wv = tape.param(w);
    let bv = tape.param(b);
    for ep in &val {
        let raw = tape.constant(ep.video.clone());
        let logits = tape
            .matmul(raw, wv)
            .and_then(|l| tape.add_row(l, bv))
            .map_err(ModelError::Numerics)?;
        let p = tape.softmax_rows(logits).map_err(ModelError::Numerics)?;
        scores.extend(tape.value(p).column(1).iter().cloned());
        labels.extend(ep.labels.y.iter().map(|&y| y == 1));
    }
    Ok(average_precision(&scores, &labels)?)
}
