//! The assembled model: two encoders, final projections, one of four
//! fusion decoders, and the classifier heads, wired into the three-term
//! objective over a batch of episodes.

use crate::baselines::{
    concat_fuse, crossatten_fuse, sum_fuse, ConcatParams, CrossAttenParams, DecoderKind,
    SumParams,
};
use crate::config::RunConfig;
use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderParams};
use crate::heads::{
    classify_av, cls, mal, opp, predict, total_loss, ClassifierParams, FrameLabels, LossWeights,
    PredictionBundle,
};
use crate::higate::{combine, higate_forward, project, FusionError, FusionSpec, HiGateParams};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::synthdata::EpisodeBatch;
use crate::tape::{Tape, Var};
use crate::tensor::NumericsError;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Head count of the cross-attention baseline.
pub const CROSSATTEN_HEADS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("batch must contain at least one episode")]
    EmptyBatch,
    #[error("episode shape mismatch: expected audio width {expected_a} and video width {expected_v}, got {got_a} and {got_v}")]
    EpisodeShape {
        expected_a: usize,
        expected_v: usize,
        got_a: usize,
        got_v: usize,
    },
}

#[derive(Debug, Clone)]
pub enum DecoderParams {
    Higate(HiGateParams),
    Sum(SumParams),
    Concat(ConcatParams),
    CrossAtten(CrossAttenParams),
}

pub struct GateFusionModel {
    pub store: ParamStore,
    pub enc_a: EncoderParams,
    pub enc_v: EncoderParams,
    pub phi_a_w: ParamId,
    pub phi_a_b: ParamId,
    pub phi_v_w: ParamId,
    pub phi_v_b: ParamId,
    pub decoder: DecoderParams,
    pub classifier: ClassifierParams,
    pub weights: LossWeights,
}

/// Batch-wide prediction bundle plus the concatenated labels.
pub struct BatchForward {
    pub bundle: PredictionBundle,
    pub labels: FrameLabels,
}

pub struct LossTerms {
    pub cls: Var,
    pub mal: Var,
    pub opp: Var,
    pub total: Var,
}

impl GateFusionModel {
    /// Build and initialize all parameters. Construction order is fixed, so
    /// a seed fully determines the initial state.
    pub fn new(cfg: &RunConfig) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(cfg.train.seed));
        let enc_cfg_a = EncoderConfig {
            layers: cfg.encoder.layers,
            width: cfg.encoder.width,
            heads: cfg.encoder.heads,
            ffn_mult: cfg.encoder.ffn_mult,
            input_width: cfg.episode.audio_width,
            max_positions: cfg.encoder.max_positions,
        };
        let enc_cfg_v = EncoderConfig {
            input_width: cfg.episode.video_width,
            ..enc_cfg_a.clone()
        };
        let enc_a = EncoderParams::new(&mut store, &mut init, "enc_a", enc_cfg_a, ParamGroup::Encoder)?;
        let enc_v = EncoderParams::new(&mut store, &mut init, "enc_v", enc_cfg_v, ParamGroup::Encoder)?;
        let d = cfg.encoder.width;
        let f = cfg.fusion.width;
        let phi_a_w = store.add("phi_a.w", init.normal(d, f), ParamGroup::Decoder);
        let phi_a_b = store.add("phi_a.b", init.zeros(1, f), ParamGroup::Decoder);
        let phi_v_w = store.add("phi_v.w", init.normal(d, f), ParamGroup::Decoder);
        let phi_v_b = store.add("phi_v.b", init.zeros(1, f), ParamGroup::Decoder);
        let decoder = match cfg.decoder {
            DecoderKind::Higate => {
                let spec = FusionSpec {
                    fusion_layers: cfg.fusion.layers.clone(),
                    width: f,
                    scalar_gate: cfg.fusion.scalar_gate,
                };
                spec.validate(cfg.encoder.layers)?;
                DecoderParams::Higate(HiGateParams::new(&mut store, &mut init, spec, d))
            }
            DecoderKind::Sum => DecoderParams::Sum(SumParams::new(&mut store, &mut init, f)),
            DecoderKind::Concat => {
                DecoderParams::Concat(ConcatParams::new(&mut store, &mut init, f))
            }
            DecoderKind::Crossatten => DecoderParams::CrossAtten(CrossAttenParams::new(
                &mut store,
                &mut init,
                f,
                CROSSATTEN_HEADS,
            )),
        };
        let classifier = ClassifierParams::new(&mut store, &mut init, f);
        Ok(GateFusionModel {
            store,
            enc_a,
            enc_v,
            phi_a_w,
            phi_a_b,
            phi_v_w,
            phi_v_b,
            decoder,
            classifier,
            weights: LossWeights {
                lambda_mal: cfg.loss.lambda_mal,
                lambda_opp: cfg.loss.lambda_opp,
            },
        })
    }

    /// Forward one batch of episodes to the prediction bundle. Episode
    /// sequences run the encoders independently; the per-frame probability
    /// rows are then concatenated in batch order.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        episodes: &[&EpisodeBatch],
    ) -> Result<BatchForward, ModelError> {
        if episodes.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut f_av_parts = Vec::with_capacity(episodes.len());
        let mut f_a_aligned_parts = Vec::with_capacity(episodes.len());
        let mut f_v_parts = Vec::with_capacity(episodes.len());
        let mut label_parts: Vec<&FrameLabels> = Vec::with_capacity(episodes.len());
        for ep in episodes {
            if ep.audio.ncols() != self.enc_a.cfg.input_width
                || ep.video.ncols() != self.enc_v.cfg.input_width
            {
                return Err(ModelError::EpisodeShape {
                    expected_a: self.enc_a.cfg.input_width,
                    expected_v: self.enc_v.cfg.input_width,
                    got_a: ep.audio.ncols(),
                    got_v: ep.video.ncols(),
                });
            }
            let t_v = ep.video.nrows();
            let raw_a = tape.constant(ep.audio.clone());
            let raw_v = tape.constant(ep.video.clone());
            let stack_a = encode(tape, raw_a, &self.enc_a)?;
            let stack_v = encode(tape, raw_v, &self.enc_v)?;
            let f_a = project(tape, stack_a.top(), self.phi_a_w, self.phi_a_b)?;
            let f_v = project(tape, stack_v.top(), self.phi_v_w, self.phi_v_b)?;
            let f_av = match &self.decoder {
                DecoderParams::Higate(p) => {
                    let refined_a =
                        higate_forward(tape, f_a, &stack_v, &p.audio_primary, &p.spec)?;
                    let refined_v =
                        higate_forward(tape, f_v, &stack_a, &p.video_primary, &p.spec)?;
                    combine(tape, refined_a, refined_v)?
                }
                DecoderParams::Sum(p) => sum_fuse(tape, f_a, f_v, p)?,
                DecoderParams::Concat(p) => concat_fuse(tape, f_a, f_v, p)?,
                DecoderParams::CrossAtten(p) => crossatten_fuse(tape, f_a, f_v, p)?,
            };
            let f_a_aligned = tape.align_rows(f_a, t_v)?;
            f_av_parts.push(f_av);
            f_a_aligned_parts.push(f_a_aligned);
            f_v_parts.push(f_v);
            label_parts.push(&ep.labels);
        }
        let f_av = tape.concat_rows(&f_av_parts)?;
        let f_a_aligned = tape.concat_rows(&f_a_aligned_parts)?;
        let f_v = tape.concat_rows(&f_v_parts)?;
        let logits_av = classify_av(tape, f_av, &self.classifier)?;
        let bundle = predict(tape, logits_av, f_a_aligned, f_v, &self.classifier)?;
        Ok(BatchForward {
            bundle,
            labels: FrameLabels::concat(&label_parts),
        })
    }

    /// The three objective terms and their weighted sum for one batch.
    pub fn loss_terms(&self, tape: &mut Tape, fwd: &BatchForward) -> Result<LossTerms, ModelError> {
        let cls_term = cls(tape, fwd.bundle.p_av_live, &fwd.labels)?;
        let mal_term = mal(tape, &fwd.bundle, &fwd.labels)?;
        let opp_term = opp(tape, fwd.bundle.p_v, &fwd.labels)?;
        let total = total_loss(tape, cls_term, mal_term, opp_term, &self.weights)?;
        Ok(LossTerms {
            cls: cls_term,
            mal: mal_term,
            opp: opp_term,
            total,
        })
    }
}

/// Total training loss with the detached multimodal distribution frozen at
/// externally supplied values.
///
/// Central-difference verification of the objective must hold the
/// stop-gradient branch fixed while parameters are perturbed; otherwise the
/// quotient picks up the very path the stop-gradient removes. Evaluated at
/// the point where `frozen_p_av` was captured, this function has the same
/// value and the same analytic gradient as the real objective.
pub fn loss_with_frozen_detached(
    model: &GateFusionModel,
    tape: &mut Tape,
    episodes: &[&EpisodeBatch],
    frozen_p_av: &crate::tensor::Matrix,
) -> Result<Var, ModelError> {
    let fwd = model.forward_batch(tape, episodes)?;
    let frozen = tape.constant(frozen_p_av.clone());
    let bundle = PredictionBundle {
        p_av_live: fwd.bundle.p_av_live,
        p_av_detached: frozen,
        p_a: fwd.bundle.p_a,
        p_v: fwd.bundle.p_v,
    };
    let cls_term = cls(tape, bundle.p_av_live, &fwd.labels)?;
    let mal_term = mal(tape, &bundle, &fwd.labels)?;
    let opp_term = opp(tape, bundle.p_v, &fwd.labels)?;
    Ok(total_loss(tape, cls_term, mal_term, opp_term, &model.weights)?)
}

/// Capture the detached multimodal probabilities at the current parameters.
pub fn detached_probabilities(
    model: &GateFusionModel,
    episodes: &[&EpisodeBatch],
) -> Result<crate::tensor::Matrix, ModelError> {
    let mut tape = Tape::inference(&model.store);
    let fwd = model.forward_batch(&mut tape, episodes)?;
    Ok(tape.value(fwd.bundle.p_av_detached).clone())
}

/// Deterministic per-head scores and loss values over a set of episodes,
/// computed without gradients.
pub struct EvalOutput {
    pub scores_av: Vec<f64>,
    pub scores_a: Vec<f64>,
    pub scores_v: Vec<f64>,
    pub labels: Vec<bool>,
    pub cls: f64,
    pub mal: f64,
    pub opp: f64,
    pub total: f64,
}

pub fn eval_episodes(
    model: &GateFusionModel,
    episodes: &[&EpisodeBatch],
) -> Result<EvalOutput, ModelError> {
    let mut tape = Tape::inference(&model.store);
    let fwd = model.forward_batch(&mut tape, episodes)?;
    let terms = model.loss_terms(&mut tape, &fwd)?;
    let positive_column =
        |t: &Tape, v: Var| -> Vec<f64> { t.value(v).column(1).iter().cloned().collect() };
    Ok(EvalOutput {
        scores_av: positive_column(&tape, fwd.bundle.p_av_live),
        scores_a: positive_column(&tape, fwd.bundle.p_a),
        scores_v: positive_column(&tape, fwd.bundle.p_v),
        labels: fwd.labels.y.iter().map(|&y| y == 1).collect(),
        cls: tape.scalar(terms.cls),
        mal: tape.scalar(terms.mal),
        opp: tape.scalar(terms.opp),
        total: tape.scalar(terms.total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_episode, EpisodeConfig};

    fn tiny_config(decoder: DecoderKind) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.layers = 2;
        cfg.encoder.width = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.max_positions = 64;
        cfg.fusion.layers = vec![1, 2];
        cfg.fusion.width = 8;
        cfg.episode.video_frames = 8;
        cfg.episode.audio_rate = 2;
        cfg.episode.audio_width = 4;
        cfg.episode.video_width = 4;
        cfg.episode.segment_frames = 4;
        cfg.decoder = decoder;
        cfg.validate().unwrap();
        cfg
    }

    fn episode(cfg: &RunConfig, seed: u64) -> EpisodeBatch {
        let ep_cfg = EpisodeConfig {
            seed,
            ..cfg.episode.clone()
        };
        generate_episode(&ep_cfg).unwrap()
    }

    #[test]
    fn forward_shapes_and_probability_rows() {
        for decoder in DecoderKind::ALL {
            let cfg = tiny_config(decoder);
            let model = GateFusionModel::new(&cfg).unwrap();
            let ep0 = episode(&cfg, 1);
            let ep1 = episode(&cfg, 2);
            let mut tape = Tape::new(&model.store);
            let fwd = model.forward_batch(&mut tape, &[&ep0, &ep1]).unwrap();
            let t_total = 16;
            assert_eq!(fwd.labels.len(), t_total);
            for head in [fwd.bundle.p_av_live, fwd.bundle.p_a, fwd.bundle.p_v] {
                let p = tape.value(head);
                assert_eq!(p.dim(), (t_total, 2));
                for row in p.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
            assert_eq!(
                tape.value(fwd.bundle.p_av_live),
                tape.value(fwd.bundle.p_av_detached),
                "{decoder:?}: live and detached heads must agree forward"
            );
        }
    }

    #[test]
    fn loss_terms_are_finite_and_weighted() {
        let cfg = tiny_config(DecoderKind::Higate);
        let model = GateFusionModel::new(&cfg).unwrap();
        let ep = episode(&cfg, 3);
        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &[&ep]).unwrap();
        let terms = model.loss_terms(&mut tape, &fwd).unwrap();
        let c = tape.scalar(terms.cls);
        let m = tape.scalar(terms.mal);
        let o = tape.scalar(terms.opp);
        let t = tape.scalar(terms.total);
        assert!(c.is_finite() && m >= 0.0 && (0.0..=1.0).contains(&o));
        assert!((t - (c + 0.01 * m + 0.1 * o)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = tiny_config(DecoderKind::Sum);
        let model = GateFusionModel::new(&cfg).unwrap();
        let mut tape = Tape::new(&model.store);
        assert!(matches!(
            model.forward_batch(&mut tape, &[]),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = tiny_config(DecoderKind::Higate);
        let a = GateFusionModel::new(&cfg).unwrap();
        let b = GateFusionModel::new(&cfg).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (ea, eb) in a.store.entries().iter().zip(b.store.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value, eb.value);
        }
    }

    #[test]
    fn mal_gradient_avoids_params_reachable_only_via_multimodal_head() {
        // The multimodal classifier, the combine path, and every gated
        // fusion parameter feed the prediction bundle only through the
        // detached head, so MAL must not touch them; CLS must.
        let cfg = tiny_config(DecoderKind::Higate);
        let model = GateFusionModel::new(&cfg).unwrap();
        // MAL needs at least one positive frame to produce a gradient.
        let ep = (0..100)
            .map(|s| episode(&cfg, s))
            .find(|ep| ep.labels.positive_count() > 0)
            .expect("an episode with speech");

        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &[&ep]).unwrap();
        let terms = model.loss_terms(&mut tape, &fwd).unwrap();

        let mut blocked: Vec<ParamId> = vec![
            model.classifier.av_w1,
            model.classifier.av_b1,
            model.classifier.av_w2,
            model.classifier.av_b2,
        ];
        if let DecoderParams::Higate(p) = &model.decoder {
            for dir in [&p.audio_primary, &p.video_primary] {
                for l in &dir.layers {
                    blocked.extend([l.proj_w, l.proj_b, l.gate.w, l.gate.b, l.ln_gamma, l.ln_beta]);
                }
            }
        }

        let bound = tape.bound_params();
        let var_of = |id: ParamId| bound.iter().find(|(b, _)| *b == id).map(|(_, v)| *v);

        let mal_grads = tape.backward(terms.mal).unwrap();
        for id in &blocked {
            if let Some(var) = var_of(*id) {
                let leaked = mal_grads
                    .get(var)
                    .map(|g| g.iter().any(|&v| v != 0.0))
                    .unwrap_or(false);
                assert!(!leaked, "MAL leaked into {}", model.store.name(*id));
            }
        }

        let cls_grads = tape.backward(terms.cls).unwrap();
        let mut reached = 0;
        for id in &blocked {
            if let Some(var) = var_of(*id) {
                if cls_grads
                    .get(var)
                    .map(|g| g.iter().any(|&v| v != 0.0))
                    .unwrap_or(false)
                {
                    reached += 1;
                }
            }
        }
        assert!(reached > 0, "CLS must reach the multimodal path");

        // MAL does reach the encoders through the unimodal branches.
        let enc_param = var_of(model.enc_a.stem_w).expect("stem bound");
        assert!(mal_grads.get(enc_param).is_some());
    }

    #[test]
    fn full_model_loss_passes_grad_check() {
        use crate::gradcheck::{grad_check, GradCheckConfig};
        let mut cfg = tiny_config(DecoderKind::Higate);
        cfg.encoder.layers = 1;
        cfg.encoder.width = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.max_positions = 16;
        cfg.fusion.layers = vec![1];
        cfg.fusion.width = 8;
        cfg.episode.video_frames = 4;
        cfg.episode.segment_frames = 2;
        let mut model = GateFusionModel::new(&cfg).unwrap();
        model.store.jitter(400, 0.1);
        let ep = (0..100)
            .map(|s| episode(&cfg, s))
            .find(|ep| {
                let pos = ep.labels.positive_count();
                pos > 0 && pos < ep.labels.len()
            })
            .expect("a mixed-label episode");
        let frozen = detached_probabilities(&model, &[&ep]).unwrap();
        let report = grad_check(
            &model.store,
            |t| loss_with_frozen_detached(&model, t, &[&ep], &frozen).map_err(flatten),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "\n{}", report.render());
    }

    fn flatten(e: ModelError) -> NumericsError {
        match e {
            ModelError::Numerics(n) => n,
            ModelError::Encoder(EncoderError::Numerics(n)) => n,
            ModelError::Fusion(FusionError::Numerics(n)) => n,
            other => panic!("{other}"),
        }
    }
}
