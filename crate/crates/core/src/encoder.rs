//! Toy transformer encoder that exposes every layer's hidden state.
//!
//! One encoder per modality stands in for a truncated pretrained backbone:
//! a linear embedding stem with learned absolute positions, followed by
//! pre-LN blocks (y = h + MHSA(LN(h)); out = y + FFN(LN(y))). The full
//! hidden stack h^0..h^L is returned so the fusion decoder can tap
//! intermediate depths.

use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{NumericsError, LN_EPS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence length {t} exceeds configured max positions {max}")]
    TooManyPositions { t: usize, max: usize },
    #[error("encoder width {width} not divisible by {heads} heads")]
    BadHeadSplit { width: usize, heads: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Transformer block count L (0 is allowed; the stack is then just h^0).
    pub layers: usize,
    /// Hidden width D.
    pub width: usize,
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Raw token width consumed by the stem.
    pub input_width: usize,
    /// Capacity of the learned positional table.
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(EncoderError::BadHeadSplit {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub heads: Vec<AttentionHeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub stem_w: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Per-layer hidden states of one encoder; layer 0 is the stem output, so
/// the stack holds L+1 sequences of identical length.
pub struct HiddenStack {
    pub layers: Vec<Var>,
}

impl HiddenStack {
    pub fn top(&self) -> Var {
        *self.layers.last().expect("stack never empty")
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

impl EncoderParams {
    /// Allocate and initialize all encoder parameters under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: EncoderConfig,
        group: ParamGroup,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.width;
        let dh = cfg.head_width();
        let stem_w = store.add(
            format!("{prefix}.stem.w"),
            init.normal(cfg.input_width, d),
            group,
        );
        let pos = store.add(
            format!("{prefix}.pos"),
            init.normal(cfg.max_positions, d),
            group,
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for b in 0..cfg.layers {
            let ln1_gamma = store.add(format!("{prefix}.b{b}.ln1.g"), init.ones(1, d), group);
            let ln1_beta = store.add(format!("{prefix}.b{b}.ln1.b"), init.zeros(1, d), group);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                heads.push(AttentionHeadParams {
                    wq: store.add(format!("{prefix}.b{b}.h{h}.wq"), init.normal(d, dh), group),
                    bq: store.add(format!("{prefix}.b{b}.h{h}.bq"), init.zeros(1, dh), group),
                    wk: store.add(format!("{prefix}.b{b}.h{h}.wk"), init.normal(d, dh), group),
                    bk: store.add(format!("{prefix}.b{b}.h{h}.bk"), init.zeros(1, dh), group),
                    wv: store.add(format!("{prefix}.b{b}.h{h}.wv"), init.normal(d, dh), group),
                    bv: store.add(format!("{prefix}.b{b}.h{h}.bv"), init.zeros(1, dh), group),
                });
            }
            let wo = store.add(format!("{prefix}.b{b}.attn.wo"), init.normal(d, d), group);
            let bo = store.add(format!("{prefix}.b{b}.attn.bo"), init.zeros(1, d), group);
            let ln2_gamma = store.add(format!("{prefix}.b{b}.ln2.g"), init.ones(1, d), group);
            let ln2_beta = store.add(format!("{prefix}.b{b}.ln2.b"), init.zeros(1, d), group);
            let hidden = d * cfg.ffn_mult;
            let ffn_w1 = store.add(format!("{prefix}.b{b}.ffn.w1"), init.normal(d, hidden), group);
            let ffn_b1 = store.add(format!("{prefix}.b{b}.ffn.b1"), init.zeros(1, hidden), group);
            let ffn_w2 = store.add(format!("{prefix}.b{b}.ffn.w2"), init.normal(hidden, d), group);
            let ffn_b2 = store.add(format!("{prefix}.b{b}.ffn.b2"), init.zeros(1, d), group);
            blocks.push(BlockParams {
                ln1_gamma,
                ln1_beta,
                heads,
                wo,
                bo,
                ln2_gamma,
                ln2_beta,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        Ok(EncoderParams {
            cfg,
            stem_w,
            pos,
            blocks,
        })
    }
}

/// Linear embedding of raw feature rows plus the learned positional table.
pub fn embed_stem(
    tape: &mut Tape,
    raw: Var,
    enc: &EncoderParams,
) -> Result<Var, EncoderError> {
    let t = tape.value(raw).nrows();
    if t > enc.cfg.max_positions {
        return Err(EncoderError::TooManyPositions {
            t,
            max: enc.cfg.max_positions,
        });
    }
    let w = tape.param(enc.stem_w);
    let embedded = tape.matmul(raw, w)?;
    let pos_full = tape.param(enc.pos);
    let pos = tape.slice_rows(pos_full, 0, t)?;
    Ok(tape.add(embedded, pos)?)
}

/// Pre-LN residual block: y = h + MHSA(LN(h)); out = y + FFN(LN(y)).
pub fn transformer_block(
    tape: &mut Tape,
    h: Var,
    block: &BlockParams,
    cfg: &EncoderConfig,
) -> Result<Var, NumericsError> {
    let g1 = tape.param(block.ln1_gamma);
    let b1 = tape.param(block.ln1_beta);
    let normed = tape.layer_norm(h, g1, b1, LN_EPS)?;

    let scale = 1.0 / (cfg.head_width() as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for head in &block.heads {
        let wq = tape.param(head.wq);
        let bq = tape.param(head.bq);
        let wk = tape.param(head.wk);
        let bk = tape.param(head.bk);
        let wv = tape.param(head.wv);
        let bv = tape.param(head.bv);
        let q0 = tape.matmul(normed, wq)?;
        let q = tape.add_row(q0, bq)?;
        let k0 = tape.matmul(normed, wk)?;
        let k = tape.add_row(k0, bk)?;
        let v0 = tape.matmul(normed, wv)?;
        let v = tape.add_row(v0, bv)?;
        let scores = tape.matmul_ext(q, k, true, scale)?;
        let probs = tape.softmax_rows_any(scores);
        head_outs.push(tape.matmul(probs, v)?);
    }
    let att = tape.concat_cols(&head_outs)?;
    let wo = tape.param(block.wo);
    let bo = tape.param(block.bo);
    let projected = tape.matmul(att, wo)?;
    let projected = tape.add_row(projected, bo)?;
    let y = tape.add(h, projected)?;

    let g2 = tape.param(block.ln2_gamma);
    let b2 = tape.param(block.ln2_beta);
    let normed2 = tape.layer_norm(y, g2, b2, LN_EPS)?;
    let w1 = tape.param(block.ffn_w1);
    let b1f = tape.param(block.ffn_b1);
    let w2 = tape.param(block.ffn_w2);
    let b2f = tape.param(block.ffn_b2);
    let hidden = tape.matmul(normed2, w1)?;
    let hidden = tape.add_row(hidden, b1f)?;
    let act = tape.gelu(hidden);
    let out = tape.matmul(act, w2)?;
    let out = tape.add_row(out, b2f)?;
    tape.add(y, out)
}

/// Run the stem plus all blocks, returning every hidden state h^0..h^L.
pub fn encode(
    tape: &mut Tape,
    raw: Var,
    enc: &EncoderParams,
) -> Result<HiddenStack, EncoderError> {
    let mut layers = Vec::with_capacity(enc.cfg.layers + 1);
    let mut h = embed_stem(tape, raw, enc)?;
    layers.push(h);
    for block in &enc.blocks {
        h = transformer_block(tape, h, block, &enc.cfg)?;
        layers.push(h);
    }
    Ok(HiddenStack { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matrix_from_rows, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_cfg(layers: usize, input_width: usize, width: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            width,
            heads,
            ffn_mult: 2,
            input_width,
            max_positions: 16,
        }
    }

    fn build(cfg: EncoderConfig) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha20Rng::seed_from_u64(1));
        let enc = EncoderParams::new(&mut store, &mut init, "enc", cfg, ParamGroup::Encoder)
            .unwrap();
        (store, enc)
    }

    fn zero_all(store: &mut ParamStore) {
        for e in store.entries_mut() {
            e.value.fill(0.0);
        }
    }

    #[test]
    fn stem_zero_weights_give_zero_output() {
        let (mut store, enc) = build(test_cfg(0, 3, 4, 2));
        zero_all(&mut store);
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Matrix::from_elem((5, 3), 1.7));
        let out = embed_stem(&mut tape, raw, &enc).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stem_identity_passthrough() {
        let (mut store, enc) = build(test_cfg(0, 4, 4, 2));
        zero_all(&mut store);
        store
            .value_mut(enc.stem_w)
            .assign(&Matrix::eye(4));
        let mut tape = Tape::new(&store);
        let input = Matrix::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let raw = tape.constant(input.clone());
        let out = embed_stem(&mut tape, raw, &enc).unwrap();
        assert_eq!(tape.value(out), &input);
    }

    #[test]
    fn stem_hand_case() {
        // T=3, D_in=1, D=2, weight [[1,-1]], zero positions.
        let (mut store, enc) = build(test_cfg(0, 1, 2, 1));
        zero_all(&mut store);
        store
            .value_mut(enc.stem_w)
            .assign(&matrix_from_rows(&[&[1.0, -1.0]]));
        let mut tape = Tape::new(&store);
        let raw = tape.constant(matrix_from_rows(&[&[1.0], &[2.0], &[3.0]]));
        let out = embed_stem(&mut tape, raw, &enc).unwrap();
        assert_eq!(
            tape.value(out),
            &matrix_from_rows(&[&[1.0, -1.0], &[2.0, -2.0], &[3.0, -3.0]])
        );
    }

    #[test]
    fn stem_rejects_overlong_sequences() {
        let (store, enc) = build(test_cfg(0, 2, 4, 2));
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Matrix::zeros((17, 2)));
        assert!(matches!(
            embed_stem(&mut tape, raw, &enc),
            Err(EncoderError::TooManyPositions { t: 17, max: 16 })
        ));
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let (mut store, enc) = build(test_cfg(1, 4, 4, 2));
        zero_all(&mut store);
        // Restore LN affine to identity; projection weights stay zero.
        for b in &enc.blocks {
            store.value_mut(b.ln1_gamma).fill(1.0);
            store.value_mut(b.ln2_gamma).fill(1.0);
        }
        let mut tape = Tape::new(&store);
        let h = tape.constant(Matrix::from_shape_fn((3, 4), |(i, j)| {
            (i as f64) - 0.5 * (j as f64)
        }));
        let out = transformer_block(&mut tape, h, &enc.blocks[0], &enc.cfg).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn block_preserves_shape() {
        for (t, d, heads) in [(2usize, 4usize, 1usize), (7, 8, 4), (1, 4, 2)] {
            let (store, enc) = build(test_cfg(1, d, d, heads));
            let mut tape = Tape::new(&store);
            let h = tape.constant(Matrix::from_elem((t, d), 0.3));
            let out = transformer_block(&mut tape, h, &enc.blocks[0], &enc.cfg).unwrap();
            assert_eq!(tape.value(out).dim(), (t, d));
        }
    }

    #[test]
    fn single_head_attention_matches_manual_computation() {
        // Identity Q/K/V projections, zero biases, identity output
        // projection: the block's attention sub-layer must reproduce
        // softmax(LN(h) . LN(h)^T / sqrt(D)) . LN(h) computed by hand.
        let d = 2;
        let (mut store, enc) = build(test_cfg(1, d, d, 1));
        zero_all(&mut store);
        let b = &enc.blocks[0];
        store.value_mut(b.ln1_gamma).fill(1.0);
        store.value_mut(b.ln2_gamma).fill(1.0);
        store.value_mut(b.heads[0].wq).assign(&Matrix::eye(d));
        store.value_mut(b.heads[0].wk).assign(&Matrix::eye(d));
        store.value_mut(b.heads[0].wv).assign(&Matrix::eye(d));
        store.value_mut(b.wo).assign(&Matrix::eye(d));
        // FFN weights stay zero, so the second half adds nothing.

        let h_in = matrix_from_rows(&[&[0.2, -1.0], &[1.5, 0.5]]);
        let mut tape = Tape::new(&store);
        let h = tape.constant(h_in.clone());
        let out = transformer_block(&mut tape, h, b, &enc.cfg).unwrap();

        // Manual path.
        let ln = |row: [f64; 2]| {
            let mean = (row[0] + row[1]) / 2.0;
            let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            [(row[0] - mean) * istd, (row[1] - mean) * istd]
        };
        let n0 = ln([0.2, -1.0]);
        let n1 = ln([1.5, 0.5]);
        let normed = [n0, n1];
        let scale = 1.0 / (d as f64).sqrt();
        let mut expected = h_in.clone();
        for i in 0..2 {
            let s0 = (normed[i][0] * normed[0][0] + normed[i][1] * normed[0][1]) * scale;
            let s1 = (normed[i][0] * normed[1][0] + normed[i][1] * normed[1][1]) * scale;
            let m = s0.max(s1);
            let e0 = (s0 - m).exp();
            let e1 = (s1 - m).exp();
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            for j in 0..2 {
                expected[(i, j)] += p0 * normed[0][j] + p1 * normed[1][j];
            }
        }
        for (a, b) in tape.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_stack_structure() {
        let (store, enc) = build(test_cfg(0, 3, 4, 2));
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Matrix::zeros((5, 3)));
        let stack = encode(&mut tape, raw, &enc).unwrap();
        assert_eq!(stack.layers.len(), 1, "L=0 keeps only the stem output");

        let (store, enc) = build(test_cfg(3, 3, 4, 2));
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Matrix::zeros((5, 3)));
        let stack = encode(&mut tape, raw, &enc).unwrap();
        assert_eq!(stack.layers.len(), 4);
        for &l in &stack.layers {
            assert_eq!(tape.value(l).dim(), (5, 4));
        }
    }

    #[test]
    fn zero_weight_blocks_repeat_the_stem() {
        let (mut store, enc) = build(test_cfg(2, 3, 4, 2));
        zero_all(&mut store);
        for b in &enc.blocks {
            store.value_mut(b.ln1_gamma).fill(1.0);
            store.value_mut(b.ln2_gamma).fill(1.0);
        }
        // Give the stem something nonzero.
        store
            .value_mut(enc.stem_w)
            .assign(&Matrix::from_shape_fn((3, 4), |(i, j)| {
                 0.3 * (i as f64) - 0.2 * (j as f64)
            }));
        let mut tape = Tape::new(&store);
        let raw = tape.constant(Matrix::from_elem((4, 3), 1.0));
        let stack = encode(&mut tape, raw, &enc).unwrap();
        let stem = tape.value(stack.layers[0]).clone();
        for &l in &stack.layers[1..] {
            assert_eq!(tape.value(l), &stem);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, enc) = build(test_cfg(2, 3, 8, 2));
        let input = Matrix::from_shape_fn((6, 3), |(i, j)| ((i + j) as f64).sin());
        let run = || {
            let mut tape = Tape::new(&store);
            let raw = tape.constant(input.clone());
            let stack = encode(&mut tape, raw, &enc).unwrap();
            tape.value(stack.top()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        use crate::gradcheck::{grad_check, GradCheckConfig};
        let (store, enc) = build(test_cfg(1, 2, 4, 2));
        let input = Matrix::from_shape_fn((3, 2), |(i, j)| 0.4 * (i as f64) - 0.3 * (j as f64));
        let report = grad_check(
            &store,
            |t| {
                let raw = t.constant(input.clone());
                let stack = encode(t, raw, &enc).map_err(|e| match e {
                    EncoderError::Numerics(n) => n,
                    other => panic!("{other}"),
                })?;
                // Square the readout so second derivatives are exercised.
                let top = stack.top();
                let sq = t.mul(top, top)?;
                Ok(t.sum_all(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "\n{}", report.render());
    }
}
