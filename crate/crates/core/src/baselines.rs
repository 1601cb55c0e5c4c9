//! Alternative fusion decoders for controlled comparisons: elementwise sum,
//! feature concatenation, and bidirectional cross-attention. All three
//! consume the projected unimodal features, preserve the video frame rate,
//! and feed the same two-layer classifier the gated decoder uses, so the
//! fusion mechanism is the only variable between ablation arms.

use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{NumericsError, LN_EPS};
use serde::{Deserialize, Serialize};

/// Fusion decoder selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Higate,
    Sum,
    Concat,
    Crossatten,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [
        DecoderKind::Higate,
        DecoderKind::Sum,
        DecoderKind::Concat,
        DecoderKind::Crossatten,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Higate => "higate",
            DecoderKind::Sum => "sum",
            DecoderKind::Concat => "concat",
            DecoderKind::Crossatten => "crossatten",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higate" => Ok(DecoderKind::Higate),
            "sum" => Ok(DecoderKind::Sum),
            "concat" => Ok(DecoderKind::Concat),
            "crossatten" => Ok(DecoderKind::Crossatten),
            other => Err(format!("unknown decoder kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SumParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl SumParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize) -> Self {
        SumParams {
            w: store.add("sum.proj.w", init.normal(width, width), ParamGroup::Decoder),
            b: store.add("sum.proj.b", init.zeros(1, width), ParamGroup::Decoder),
        }
    }
}

/// align(f_a, T_v) + f_v, then one linear projection.
pub fn sum_fuse(
    tape: &mut Tape,
    f_a: Var,
    f_v: Var,
    params: &SumParams,
) -> Result<Var, NumericsError> {
    let t_v = tape.value(f_v).nrows();
    let aligned = tape.align_rows(f_a, t_v)?;
    let summed = tape.add(aligned, f_v)?;
    let w = tape.param(params.w);
    let b = tape.param(params.b);
    let projected = tape.matmul(summed, w)?;
    tape.add_row(projected, b)
}

#[derive(Debug, Clone)]
pub struct ConcatParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConcatParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize) -> Self {
        ConcatParams {
            w: store.add(
                "concat.proj.w",
                init.normal(2 * width, width),
                ParamGroup::Decoder,
            ),
            b: store.add("concat.proj.b", init.zeros(1, width), ParamGroup::Decoder),
        }
    }
}

/// [align(f_a, T_v); f_v] along the feature axis, then linear 2F -> F.
pub fn concat_fuse(
    tape: &mut Tape,
    f_a: Var,
    f_v: Var,
    params: &ConcatParams,
) -> Result<Var, NumericsError> {
    let t_v = tape.value(f_v).nrows();
    let aligned = tape.align_rows(f_a, t_v)?;
    let cat = tape.concat_cols(&[aligned, f_v])?;
    let w = tape.param(params.w);
    let b = tape.param(params.b);
    let projected = tape.matmul(cat, w)?;
    tape.add_row(projected, b)
}

/// One multi-head attention stage: per-head q/k/v projections without
/// biases, heads concatenated. No output projection, so with a single key
/// the output row is exactly the value projection of that key.
#[derive(Debug, Clone)]
pub struct AttentionStageParams {
    pub heads: Vec<(ParamId, ParamId, ParamId)>,
    pub head_width: usize,
}

impl AttentionStageParams {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "head split for {prefix}");
        let dh = width / heads;
        let heads = (0..heads)
            .map(|h| {
                (
                    store.add(format!("{prefix}.h{h}.wq"), init.normal(width, dh), ParamGroup::Decoder),
                    store.add(format!("{prefix}.h{h}.wk"), init.normal(width, dh), ParamGroup::Decoder),
                    store.add(format!("{prefix}.h{h}.wv"), init.normal(width, dh), ParamGroup::Decoder),
                )
            })
            .collect();
        AttentionStageParams {
            heads,
            head_width: dh,
        }
    }
}

fn attention_stage(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    params: &AttentionStageParams,
) -> Result<Var, NumericsError> {
    let scale = 1.0 / (params.head_width as f64).sqrt();
    let mut outs = Vec::with_capacity(params.heads.len());
    for &(wq, wk, wv) in &params.heads {
        let wq = tape.param(wq);
        let wk = tape.param(wk);
        let wv = tape.param(wv);
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(keys, wk)?;
        let v = tape.matmul(keys, wv)?;
        let scores = tape.matmul_ext(q, k, true, scale)?;
        let probs = tape.softmax_rows_any(scores);
        outs.push(tape.matmul(probs, v)?);
    }
    tape.concat_cols(&outs)
}

#[derive(Debug, Clone)]
pub struct CrossAttenParams {
    /// Video queries attending over audio.
    pub video_query: AttentionStageParams,
    /// Audio queries attending over video.
    pub audio_query: AttentionStageParams,
    /// Self-attention over the concatenated 2F stream.
    pub self_stage: AttentionStageParams,
    pub self_ln_gamma: ParamId,
    pub self_ln_beta: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl CrossAttenParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize, heads: usize) -> Self {
        let video_query = AttentionStageParams::new(store, init, "xatt.vq", width, heads);
        let audio_query = AttentionStageParams::new(store, init, "xatt.aq", width, heads);
        let self_stage = AttentionStageParams::new(store, init, "xatt.self", 2 * width, heads);
        CrossAttenParams {
            video_query,
            audio_query,
            self_stage,
            self_ln_gamma: store.add("xatt.self.ln.g", init.ones(1, 2 * width), ParamGroup::Decoder),
            self_ln_beta: store.add("xatt.self.ln.b", init.zeros(1, 2 * width), ParamGroup::Decoder),
            out_w: store.add("xatt.out.w", init.normal(2 * width, width), ParamGroup::Decoder),
            out_b: store.add("xatt.out.b", init.zeros(1, width), ParamGroup::Decoder),
        }
    }
}

/// Bidirectional cross-attention with each modality as the query, the
/// results concatenated, passed through a residual self-attention layer
/// with layer norm, and projected back to decoder width.
pub fn crossatten_fuse(
    tape: &mut Tape,
    f_a: Var,
    f_v: Var,
    params: &CrossAttenParams,
) -> Result<Var, NumericsError> {
    let t_v = tape.value(f_v).nrows();
    let x_v = attention_stage(tape, f_v, f_a, &params.video_query)?;
    let x_a = attention_stage(tape, f_a, f_v, &params.audio_query)?;
    let x_a = tape.align_rows(x_a, t_v)?;
    let cat = tape.concat_cols(&[x_v, x_a])?;
    let selfed = attention_stage(tape, cat, cat, &params.self_stage)?;
    let residual = tape.add(cat, selfed)?;
    let gamma = tape.param(params.self_ln_gamma);
    let beta = tape.param(params.self_ln_beta);
    let normed = tape.layer_norm(residual, gamma, beta, LN_EPS)?;
    let w = tape.param(params.out_w);
    let b = tape.param(params.out_b);
    let projected = tape.matmul(normed, w)?;
    tape.add_row(projected, b)
}
