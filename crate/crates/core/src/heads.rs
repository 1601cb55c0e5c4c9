//! Classification heads and the three-term training objective.
//!
//! The multimodal head is a two-layer GELU classifier; each unimodal branch
//! gets a single linear classifier. The objective combines frame-level
//! cross-entropy on the multimodal head, a KL alignment term from the
//! detached multimodal distribution to each unimodal distribution restricted
//! to positive frames, and a penalty on video positive probability over
//! negative frames.

use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, NumericsError};

/// Per-frame binary ground truth for one batch (video frame rate).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub y: Vec<u8>,
}

impl FrameLabels {
    pub fn new(y: Vec<u8>) -> Self {
        assert!(y.iter().all(|&v| v <= 1), "labels must be 0/1");
        FrameLabels { y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Indices of positive frames (the set S).
    pub fn positives(&self) -> Vec<usize> {
        self.y
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    pub fn concat(parts: &[&FrameLabels]) -> FrameLabels {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&p.y);
        }
        FrameLabels { y }
    }
}

/// Which unimodal branch a single-layer classifier serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Audio,
    Video,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub av_w1: ParamId,
    pub av_b1: ParamId,
    pub av_w2: ParamId,
    pub av_b2: ParamId,
    pub a_w: ParamId,
    pub a_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
}

impl ClassifierParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize) -> Self {
        let g = ParamGroup::Decoder;
        ClassifierParams {
            av_w1: store.add("cls.av.w1", init.normal(width, width), g),
            av_b1: store.add("cls.av.b1", init.zeros(1, width), g),
            av_w2: store.add("cls.av.w2", init.normal(width, 2), g),
            av_b2: store.add("cls.av.b2", init.zeros(1, 2), g),
            a_w: store.add("cls.a.w", init.normal(width, 2), g),
            a_b: store.add("cls.a.b", init.zeros(1, 2), g),
            v_w: store.add("cls.v.w", init.normal(width, 2), g),
            v_b: store.add("cls.v.b", init.zeros(1, 2), g),
        }
    }
}

/// Per-frame class probabilities for the batch. The detached copy shares the
/// live head's forward values exactly; only its gradient path differs.
pub struct PredictionBundle {
    pub p_av_live: Var,
    pub p_av_detached: Var,
    pub p_a: Var,
    pub p_v: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mal: f64,
    pub lambda_opp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mal: 0.01,
            lambda_opp: 0.1,
        }
    }
}

/// Two-layer MLP with GELU: linear(F -> F), GELU, linear(F -> 2).
pub fn classify_av(
    tape: &mut Tape,
    f_av: Var,
    params: &ClassifierParams,
) -> Result<Var, NumericsError> {
    let w1 = tape.param(params.av_w1);
    let b1 = tape.param(params.av_b1);
    let w2 = tape.param(params.av_w2);
    let b2 = tape.param(params.av_b2);
    let hidden = tape.matmul(f_av, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let act = tape.gelu(hidden);
    let logits = tape.matmul(act, w2)?;
    tape.add_row(logits, b2)
}

/// Single linear classifier for one unimodal branch. Audio features must
/// already be aligned to the video frame rate by the caller.
pub fn classify_uni(
    tape: &mut Tape,
    f: Var,
    branch: Branch,
    params: &ClassifierParams,
) -> Result<Var, NumericsError> {
    let (w, b) = match branch {
        Branch::Audio => (params.a_w, params.a_b),
        Branch::Video => (params.v_w, params.v_b),
    };
    let w = tape.param(w);
    let b = tape.param(b);
    let logits = tape.matmul(f, w)?;
    tape.add_row(logits, b)
}

/// Assemble the prediction bundle from multimodal logits and unimodal
/// inputs: the detached head reuses the same logits behind a stop-gradient,
/// so the two multimodal softmax outputs are numerically identical.
pub fn predict(
    tape: &mut Tape,
    logits_av: Var,
    f_a_aligned: Var,
    f_v: Var,
    params: &ClassifierParams,
) -> Result<PredictionBundle, NumericsError> {
    let p_av_live = tape.softmax_rows(logits_av)?;
    let detached_logits = tape.stop_grad(logits_av);
    let p_av_detached = tape.softmax_rows(detached_logits)?;
    let logits_a = classify_uni(tape, f_a_aligned, Branch::Audio, params)?;
    let p_a = tape.softmax_rows(logits_a)?;
    let logits_v = classify_uni(tape, f_v, Branch::Video, params)?;
    let p_v = tape.softmax_rows(logits_v)?;
    Ok(PredictionBundle {
        p_av_live,
        p_av_detached,
        p_a,
        p_v,
    })
}

/// Masked alignment loss: mean over positive frames of the KL divergence
/// from the detached multimodal distribution to each unimodal distribution,
/// averaged over the two branches. An empty positive set yields zero.
pub fn mal(
    tape: &mut Tape,
    bundle: &PredictionBundle,
    labels: &FrameLabels,
) -> Result<Var, NumericsError> {
    let positives = labels.positives();
    if positives.is_empty() {
        return Ok(tape.constant(Matrix::zeros((1, 1))));
    }
    let p_av = tape.select_rows(bundle.p_av_detached, &positives)?;
    let log_p_av = tape.log(p_av);
    let branch_sum = |tape: &mut Tape, p_m: Var| -> Result<Var, NumericsError> {
        let sel = tape.select_rows(p_m, &positives)?;
        let log_sel = tape.log(sel);
        let diff = tape.sub(log_p_av, log_sel)?;
        let terms = tape.mul(p_av, diff)?;
        Ok(tape.sum_all(terms))
    };
    let kl_a = branch_sum(tape, bundle.p_a)?;
    let kl_v = branch_sum(tape, bundle.p_v)?;
    let total = tape.add(kl_a, kl_v)?;
    Ok(tape.scale(total, 1.0 / (2.0 * positives.len() as f64)))
}

/// Over-positive penalty: mean video positive-class probability over frames
/// labeled silent.
pub fn opp(tape: &mut Tape, p_v: Var, labels: &FrameLabels) -> Result<Var, NumericsError> {
    let m = labels.len();
    assert_eq!(tape.value(p_v).nrows(), m, "label count matches frames");
    let mut mask = Matrix::zeros((m, 2));
    for (i, &y) in labels.y.iter().enumerate() {
        mask[(i, 1)] = 1.0 - y as f64;
    }
    let mask = tape.constant(mask);
    let weighted = tape.mul(p_v, mask)?;
    let sum = tape.sum_all(weighted);
    Ok(tape.scale(sum, 1.0 / m as f64))
}

/// Frame-averaged cross-entropy of the live multimodal probabilities
/// against one-hot targets.
pub fn cls(tape: &mut Tape, p_av_live: Var, labels: &FrameLabels) -> Result<Var, NumericsError> {
    let m = labels.len();
    assert_eq!(tape.value(p_av_live).nrows(), m, "label count matches frames");
    let mut onehot = Matrix::zeros((m, 2));
    for (i, &y) in labels.y.iter().enumerate() {
        onehot[(i, y as usize)] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let log_p = tape.log(p_av_live);
    let picked = tape.mul(onehot, log_p)?;
    let sum = tape.sum_all(picked);
    Ok(tape.scale(sum, -1.0 / m as f64))
}

/// Weighted sum of the three objective terms.
pub fn total_loss(
    tape: &mut Tape,
    cls_term: Var,
    mal_term: Var,
    opp_term: Var,
    w: &LossWeights,
) -> Result<Var, NumericsError> {
    let mal_scaled = tape.scale(mal_term, w.lambda_mal);
    let opp_scaled = tape.scale(opp_term, w.lambda_opp);
    let aux = tape.add(mal_scaled, opp_scaled)?;
    tape.add(cls_term, aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matrix_from_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn probs(rows: &[[f64; 2]]) -> Matrix {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        matrix_from_rows(&refs)
    }

    fn bundle_from(
        tape: &mut Tape,
        p_av: &Matrix,
        p_a: &Matrix,
        p_v: &Matrix,
    ) -> PredictionBundle {
        let live = tape.constant(p_av.clone());
        let detached = tape.constant(p_av.clone());
        let a = tape.constant(p_a.clone());
        let v = tape.constant(p_v.clone());
        PredictionBundle {
            p_av_live: live,
            p_av_detached: detached,
            p_a: a,
            p_v: v,
        }
    }

    #[test]
    fn classify_av_zero_network_gives_uniform_rows() {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(1));
        let params = ClassifierParams::new(&mut store, &mut init, 3);
        for e in store.entries_mut() {
            e.value.fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let f = tape.constant(Matrix::from_elem((4, 3), 1.3));
        let logits = classify_av(&mut tape, f, &params).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let p = tape.softmax_rows(logits).unwrap();
        assert!(tape.value(p).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classify_av_gelu_hand_case() {
        // F=1: first layer weight 1, second layer [1, -1]; input 1 gives
        // logits [gelu(1), -gelu(1)] with the exact erf form.
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(1));
        let params = ClassifierParams::new(&mut store, &mut init, 1);
        for e in store.entries_mut() {
            e.value.fill(0.0);
        }
        store.value_mut(params.av_w1).fill(1.0);
        store
            .value_mut(params.av_w2)
            .assign(&matrix_from_rows(&[&[1.0, -1.0]]));
        let mut tape = Tape::new(&store);
        let f = tape.constant(matrix_from_rows(&[&[1.0]]));
        let logits = classify_av(&mut tape, f, &params).unwrap();
        assert!((tape.value(logits)[(0, 0)] - 0.841345).abs() < 1e-6);
        assert!((tape.value(logits)[(0, 1)] + 0.841345).abs() < 1e-6);
    }

    #[test]
    fn classify_uni_examples() {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(1));
        let params = ClassifierParams::new(&mut store, &mut init, 1);
        for e in store.entries_mut() {
            e.value.fill(0.0);
        }
        // Zero weights: uniform probabilities.
        {
            let mut tape = Tape::new(&store);
            let f = tape.constant(matrix_from_rows(&[&[0.7], &[-0.9]]));
            let logits = classify_uni(&mut tape, f, Branch::Video, &params).unwrap();
            assert_eq!(tape.value(logits).dim(), (2, 2), "T x 2 shape");
            let p = tape.softmax_rows(logits).unwrap();
            assert!(tape.value(p).iter().all(|&v| v == 0.5));
        }

        // Weight [2, 0]: logits [2, 0] -> probs [0.880797, 0.119203].
        store
            .value_mut(params.a_w)
            .assign(&matrix_from_rows(&[&[2.0, 0.0]]));
        let mut tape = Tape::new(&store);
        let f = tape.constant(matrix_from_rows(&[&[1.0]]));
        let logits = classify_uni(&mut tape, f, Branch::Audio, &params).unwrap();
        let p = tape.softmax_rows(logits).unwrap();
        assert!((tape.value(p)[(0, 0)] - 0.880797).abs() < 1e-6);
        assert!((tape.value(p)[(0, 1)] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn mal_zero_when_distributions_match() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p = probs(&[[0.7, 0.3], [0.2, 0.8]]);
        let b = bundle_from(&mut tape, &p, &p, &p);
        let labels = FrameLabels::new(vec![1, 1]);
        let m = mal(&mut tape, &b, &labels).unwrap();
        assert!(tape.scalar(m).abs() < 1e-15);
    }

    #[test]
    fn mal_empty_positive_set_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p_av = probs(&[[0.9, 0.1]]);
        let p_a = probs(&[[0.1, 0.9]]);
        let b = bundle_from(&mut tape, &p_av, &p_a, &p_a);
        let labels = FrameLabels::new(vec![0]);
        let m = mal(&mut tape, &b, &labels).unwrap();
        assert_eq!(tape.scalar(m), 0.0);
    }

    #[test]
    fn mal_worked_example() {
        // One positive frame: p_av=(0.8,0.2), p_a=(0.5,0.5), p_v=(0.8,0.2).
        // KL_a = 0.192745, KL_v = 0, MAL = 0.096372.
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p_av = probs(&[[0.8, 0.2]]);
        let p_a = probs(&[[0.5, 0.5]]);
        let p_v = probs(&[[0.8, 0.2]]);
        let b = bundle_from(&mut tape, &p_av, &p_a, &p_v);
        let labels = FrameLabels::new(vec![1]);
        let m = mal(&mut tape, &b, &labels).unwrap();
        assert!((tape.scalar(m) - 0.096372).abs() < 1e-6);
    }

    #[test]
    fn mal_is_nonnegative_and_ignores_negative_frames() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = rng.gen_range(1..8);
            let rand_probs = |rng: &mut ChaCha20Rng, t: usize| {
                let mut m = Matrix::zeros((t, 2));
                for i in 0..t {
                    let p: f64 = rng.gen_range(0.01..0.99);
                    m[(i, 0)] = p;
                    m[(i, 1)] = 1.0 - p;
                }
                m
            };
            let p_av = rand_probs(&mut rng, t);
            let p_a = rand_probs(&mut rng, t);
            let p_v = rand_probs(&mut rng, t);
            let y: Vec<u8> = (0..t).map(|_| rng.gen_range(0..=1)).collect();
            let labels = FrameLabels::new(y.clone());

            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let b = bundle_from(&mut tape, &p_av, &p_a, &p_v);
            let m1 = mal(&mut tape, &b, &labels).unwrap();
            let v1 = tape.scalar(m1);
            assert!(v1 >= 0.0, "Gibbs inequality");

            // Perturb unimodal probabilities on negative frames only.
            let mut p_a2 = p_a.clone();
            let mut p_v2 = p_v.clone();
            for (i, &yi) in y.iter().enumerate() {
                if yi == 0 {
                    let p: f64 = rng.gen_range(0.01..0.99);
                    p_a2[(i, 0)] = p;
                    p_a2[(i, 1)] = 1.0 - p;
                    let q: f64 = rng.gen_range(0.01..0.99);
                    p_v2[(i, 0)] = q;
                    p_v2[(i, 1)] = 1.0 - q;
                }
            }
            let mut tape2 = Tape::new(&store);
            let b2 = bundle_from(&mut tape2, &p_av, &p_a2, &p_v2);
            let m2 = mal(&mut tape2, &b2, &labels).unwrap();
            assert_eq!(tape2.scalar(m2), v1, "mask invariance is exact");
        }
    }

    #[test]
    fn opp_examples() {
        let mut store = ParamStore::new();

        // All frames positive: mask annihilates.
        let mut tape = Tape::new(&store);
        let p_v = tape.constant(probs(&[[0.1, 0.9], [0.2, 0.8]]));
        let labels = FrameLabels::new(vec![1, 1]);
        let o = opp(&mut tape, p_v, &labels).unwrap();
        assert_eq!(tape.scalar(o), 0.0);

        // Zero positive-class probability everywhere.
        let mut tape = Tape::new(&store);
        let p_v = tape.constant(probs(&[[1.0, 0.0], [1.0, 0.0]]));
        let labels = FrameLabels::new(vec![0, 0]);
        let o = opp(&mut tape, p_v, &labels).unwrap();
        assert_eq!(tape.scalar(o), 0.0);

        // Worked example: y=[1,0], p_v[1]=[0.9,0.6] -> 0.6/2 = 0.3.
        let mut tape = Tape::new(&store);
        let p_v = tape.constant(probs(&[[0.1, 0.9], [0.4, 0.6]]));
        let labels = FrameLabels::new(vec![1, 0]);
        let o = opp(&mut tape, p_v, &labels).unwrap();
        assert!((tape.scalar(o) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn opp_bounds_and_monotonicity() {
        // In [0,1], and nondecreasing in each negative-frame p_v[1].
        let mut store = ParamStore::new();
        let labels = FrameLabels::new(vec![0, 1, 0]);
        let mut prev = -1.0;
        for step in 0..5 {
            let p1 = 0.1 + 0.2 * step as f64;
            let mut tape = Tape::new(&store);
            let p_v = tape.constant(probs(&[[1.0 - p1, p1], [0.3, 0.7], [0.9, 0.1]]));
            let o = opp(&mut tape, p_v, &labels).unwrap();
            let v = tape.scalar(o);
            assert!((0.0..=1.0).contains(&v));
            assert!(v > prev);
            prev = v;
        }

        // Perturbing p_v on positive frames leaves OPP exactly unchanged.
        let mut t1 = Tape::new(&store);
        let a = t1.constant(probs(&[[0.5, 0.5], [0.3, 0.7], [0.9, 0.1]]));
        let o1 = opp(&mut t1, a, &labels).unwrap();
        let mut t2 = Tape::new(&store);
        let b = t2.constant(probs(&[[0.5, 0.5], [0.99, 0.01], [0.9, 0.1]]));
        let o2 = opp(&mut t2, b, &labels).unwrap();
        assert_eq!(t1.scalar(o1), t2.scalar(o2));
    }

    #[test]
    fn cls_examples() {
        let mut store = ParamStore::new();

        // Uniform predictions give ln 2 for any labels.
        let mut tape = Tape::new(&store);
        let p = tape.constant(probs(&[[0.5, 0.5], [0.5, 0.5]]));
        let labels = FrameLabels::new(vec![0, 1]);
        let c = cls(&mut tape, p, &labels).unwrap();
        assert!((tape.scalar(c) - 0.693147).abs() < 1e-6);

        // Perfect one-hot predictions: loss is the clamp floor, effectively 0.
        let mut tape = Tape::new(&store);
        let p = tape.constant(probs(&[[1.0, 0.0], [0.0, 1.0]]));
        let labels = FrameLabels::new(vec![0, 1]);
        let c = cls(&mut tape, p, &labels).unwrap();
        assert!(tape.scalar(c).abs() < 1e-10);

        // Single frame, y=1, p=(0.25,0.75) -> -ln 0.75.
        let mut tape = Tape::new(&store);
        let p = tape.constant(probs(&[[0.25, 0.75]]));
        let labels = FrameLabels::new(vec![1]);
        let c = cls(&mut tape, p, &labels).unwrap();
        assert!((tape.scalar(c) - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn cls_gradient_matches_softmax_minus_onehot() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let t = 5;
        let logits_m = Matrix::from_shape_fn((t, 2), |_| rng.gen_range(-2.0..2.0));
        let y: Vec<u8> = (0..t).map(|_| rng.gen_range(0..=1)).collect();
        let labels = FrameLabels::new(y.clone());

        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.leaf(logits_m.clone());
        let p = tape.softmax_rows(logits).unwrap();
        let c = cls(&mut tape, p, &labels).unwrap();
        let grads = tape.backward(c).unwrap();
        let got = grads.get(logits).unwrap();

        let probs_m = tape.value(p).clone();
        for i in 0..t {
            for k in 0..2 {
                let onehot = if y[i] as usize == k { 1.0 } else { 0.0 };
                let expected = (probs_m[(i, k)] - onehot) / t as f64;
                assert!(
                    (got[(i, k)] - expected).abs() < 1e-10,
                    "({i},{k}): {} vs {expected}",
                    got[(i, k)]
                );
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Matrix::from_elem((1, 1), 0.693147));
        let m = tape.constant(Matrix::from_elem((1, 1), 0.096372));
        let o = tape.constant(Matrix::from_elem((1, 1), 0.3));

        let w0 = LossWeights {
            lambda_mal: 0.0,
            lambda_opp: 0.0,
        };
        let t0 = total_loss(&mut tape, c, m, o, &w0).unwrap();
        assert_eq!(tape.scalar(t0), 0.693147, "reduces to CLS exactly");

        let t1 = total_loss(&mut tape, c, m, o, &LossWeights::default()).unwrap();
        assert!((tape.scalar(t1) - 0.724111).abs() < 1e-6);
    }

    #[test]
    fn stop_gradient_keeps_mal_away_from_multimodal_head() {
        // Build a miniature pipeline: f_av, f_a, f_v are leaves; MAL must
        // leave the multimodal classifier and f_av untouched while CLS
        // reaches them; MAL must reach the unimodal classifiers.
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(2));
        let params = ClassifierParams::new(&mut store, &mut init, 3);
        let t = 4;
        let f_av_m = Matrix::from_shape_fn((t, 3), |_| rng.gen_range(-1.0..1.0));
        let f_a_m = Matrix::from_shape_fn((t, 3), |_| rng.gen_range(-1.0..1.0));
        let f_v_m = Matrix::from_shape_fn((t, 3), |_| rng.gen_range(-1.0..1.0));
        let labels = FrameLabels::new(vec![1, 0, 1, 1]);

        let mut tape = Tape::new(&store);
        let f_av = tape.leaf(f_av_m);
        let f_a = tape.leaf(f_a_m);
        let f_v = tape.leaf(f_v_m);
        let logits_av = classify_av(&mut tape, f_av, &params).unwrap();
        let bundle = predict(&mut tape, logits_av, f_a, f_v, &params).unwrap();

        // Detached and live heads are numerically identical forward.
        assert_eq!(
            tape.value(bundle.p_av_live),
            tape.value(bundle.p_av_detached)
        );

        let mal_term = mal(&mut tape, &bundle, &labels).unwrap();
        let grads = tape.backward(mal_term).unwrap();
        let av_params = [params.av_w1, params.av_b1, params.av_w2, params.av_b2];
        let bound = tape.bound_params();
        for id in av_params {
            let var = bound.iter().find(|(b, _)| *b == id).map(|(_, v)| *v);
            if let Some(var) = var {
                assert!(
                    grads.get(var).is_none()
                        || grads.get(var).unwrap().iter().all(|&g| g == 0.0),
                    "MAL leaked into the multimodal classifier"
                );
            }
        }
        assert!(grads.get(f_av).is_none(), "MAL leaked into f_av");
        // The unimodal paths do receive alignment gradient.
        assert!(grads.get(f_a).is_some());
        assert!(grads.get(f_v).is_some());

        // CLS, in contrast, reaches the multimodal classifier.
        let mut tape2 = Tape::new(&store);
        let f_av2 = tape2.leaf(tape.value(f_av).clone());
        let logits2 = classify_av(&mut tape2, f_av2, &params).unwrap();
        let p2 = tape2.softmax_rows(logits2).unwrap();
        let c2 = cls(&mut tape2, p2, &labels).unwrap();
        let grads2 = tape2.backward(c2).unwrap();
        let bound2 = tape2.bound_params();
        for id in av_params {
            let var = bound2
                .iter()
                .find(|(b, _)| *b == id)
                .map(|(_, v)| *v)
                .expect("bound");
            let g = grads2.get(var).expect("CLS reaches the classifier");
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn losses_pass_grad_check_end_to_end() {
        use crate::gradcheck::{grad_check, GradCheckConfig};
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(3));
        let params = ClassifierParams::new(&mut store, &mut init, 2);
        let t = 3;
        let f_av_m = Matrix::from_shape_fn((t, 2), |_| rng.gen_range(-1.0..1.0));
        let f_a_m = Matrix::from_shape_fn((t, 2), |_| rng.gen_range(-1.0..1.0));
        let f_v_m = Matrix::from_shape_fn((t, 2), |_| rng.gen_range(-1.0..1.0));
        let labels = FrameLabels::new(vec![1, 0, 1]);
        let report = grad_check(
            &store,
            |t| {
                let f_av = t.constant(f_av_m.clone());
                let f_a = t.constant(f_a_m.clone());
                let f_v = t.constant(f_v_m.clone());
                let logits_av = classify_av(t, f_av, &params)?;
                let bundle = predict(t, logits_av, f_a, f_v, &params)?;
                let c = cls(t, bundle.p_av_live, &labels)?;
                let m = mal(t, &bundle, &labels)?;
                let o = opp(t, bundle.p_v, &labels)?;
                total_loss(t, c, m, o, &LossWeights::default())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "\n{}", report.render());
    }
}
