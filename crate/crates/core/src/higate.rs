//! Hierarchical gated fusion decoder.
//!
//! The final feature of the primary modality is refined once per fusion
//! layer: the context modality's hidden state at that depth is projected to
//! decoder width, aligned to the primary frame rate, scaled by a learned
//! sigmoid gate computed from both features, added residually, and
//! layer-normalized. Both directions (audio refined by video, video refined
//! by audio) run with independent parameters; their outputs are combined by
//! aligning the audio side to the video frame rate and summing.

use crate::encoder::HiddenStack;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{NumericsError, LN_EPS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion layer index {index} exceeds encoder depth {depth}")]
    IndexBeyondDepth { index: usize, depth: usize },
    #[error("fusion layer indices must be strictly increasing and start at 1, got {got:?}")]
    BadIndices { got: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which fusion layers to tap and how wide the decoder is.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    /// Strictly increasing 1-based encoder layer indices.
    pub fusion_layers: Vec<usize>,
    /// Decoder width F.
    pub width: usize,
    /// Gate per feature (false) or one gate per frame (true).
    pub scalar_gate: bool,
}

impl FusionSpec {
    pub fn validate(&self, encoder_depth: usize) -> Result<(), FusionError> {
        let mut prev = 0usize;
        for &l in &self.fusion_layers {
            if l == 0 || l <= prev {
                return Err(FusionError::BadIndices {
                    got: self.fusion_layers.clone(),
                });
            }
            if l > encoder_depth {
                return Err(FusionError::IndexBeyondDepth {
                    index: l,
                    depth: encoder_depth,
                });
            }
            prev = l;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GateUnitParams {
    /// 2F x F map from the concatenated features (F x 1 under scalar gating).
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct FusionLayerParams {
    /// Context projection for this fusion layer (D_enc -> F).
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub gate: GateUnitParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// Parameters for one fusion direction, one entry per fusion layer.
#[derive(Debug, Clone)]
pub struct DirectionParams {
    pub layers: Vec<FusionLayerParams>,
}

#[derive(Debug, Clone)]
pub struct HiGateParams {
    pub spec: FusionSpec,
    pub audio_primary: DirectionParams,
    pub video_primary: DirectionParams,
}

impl HiGateParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        spec: FusionSpec,
        enc_width: usize,
    ) -> Self {
        let mut build_dir = |dir: &str| {
            let mut layers = Vec::new();
            for &l in &spec.fusion_layers {
                let f = spec.width;
                let gate_out = if spec.scalar_gate { 1 } else { f };
                layers.push(FusionLayerParams {
                    proj_w: store.add(
                        format!("higate.{dir}.l{l}.proj.w"),
                        init.normal(enc_width, f),
                        ParamGroup::Decoder,
                    ),
                    proj_b: store.add(
                        format!("higate.{dir}.l{l}.proj.b"),
                        init.zeros(1, f),
                        ParamGroup::Decoder,
                    ),
                    gate: GateUnitParams {
                        w: store.add(
                            format!("higate.{dir}.l{l}.gate.w"),
                            init.normal(2 * f, gate_out),
                            ParamGroup::Decoder,
                        ),
                        b: store.add(
                            format!("higate.{dir}.l{l}.gate.b"),
                            init.zeros(1, gate_out),
                            ParamGroup::Decoder,
                        ),
                    },
                    ln_gamma: store.add(
                        format!("higate.{dir}.l{l}.ln.g"),
                        init.ones(1, f),
                        ParamGroup::Decoder,
                    ),
                    ln_beta: store.add(
                        format!("higate.{dir}.l{l}.ln.b"),
                        init.zeros(1, f),
                        ParamGroup::Decoder,
                    ),
                });
            }
            DirectionParams { layers }
        };
        let audio_primary = build_dir("ap");
        let video_primary = build_dir("vp");
        HiGateParams {
            spec,
            audio_primary,
            video_primary,
        }
    }
}

/// Single linear map to decoder width.
pub fn project(tape: &mut Tape, h: Var, w: ParamId, b: ParamId) -> Result<Var, NumericsError> {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let projected = tape.matmul(h, wv)?;
    tape.add_row(projected, bv)
}

/// Temporal alignment of a feature sequence to `t_target` frames.
pub fn align(tape: &mut Tape, x: Var, t_target: usize) -> Result<Var, NumericsError> {
    tape.align_rows(x, t_target)
}

/// Learned gate from the concatenated primary and context features.
pub fn gate(
    tape: &mut Tape,
    f_p: Var,
    h_c: Var,
    unit: &GateUnitParams,
) -> Result<Var, NumericsError> {
    let cat = tape.concat_cols(&[f_p, h_c])?;
    let w = tape.param(unit.w);
    let b = tape.param(unit.b);
    let pre = tape.matmul(cat, w)?;
    let pre = tape.add_row(pre, b)?;
    Ok(tape.sigmoid(pre))
}

/// Gated residual injection followed by this step's layer norm.
pub fn fuse_step(
    tape: &mut Tape,
    f_p: Var,
    h_c: Var,
    g: Var,
    ln_gamma: ParamId,
    ln_beta: ParamId,
) -> Result<Var, NumericsError> {
    let gated = if tape.value(g).ncols() == 1 {
        tape.mul_col(h_c, g)?
    } else {
        tape.mul(g, h_c)?
    };
    let sum = tape.add(f_p, gated)?;
    let gamma = tape.param(ln_gamma);
    let beta = tape.param(ln_beta);
    tape.layer_norm(sum, gamma, beta, LN_EPS)
}

/// Refine the primary feature through every fusion layer in ascending
/// depth order. With no fusion layers this is the identity on `f_p`.
pub fn higate_forward(
    tape: &mut Tape,
    f_p: Var,
    context: &HiddenStack,
    dir: &DirectionParams,
    spec: &FusionSpec,
) -> Result<Var, FusionError> {
    spec.validate(context.depth())?;
    let t_p = tape.value(f_p).nrows();
    let mut refined = f_p;
    for (layer, &l) in dir.layers.iter().zip(&spec.fusion_layers) {
        let h_l = context.layers[l];
        let projected = project(tape, h_l, layer.proj_w, layer.proj_b)?;
        let aligned = align(tape, projected, t_p)?;
        let g = gate(tape, refined, aligned, &layer.gate)?;
        refined = fuse_step(tape, refined, aligned, g, layer.ln_gamma, layer.ln_beta)?;
    }
    Ok(refined)
}

/// Combine the two refined streams: audio aligned to the video frame rate,
/// then an elementwise sum.
pub fn combine(tape: &mut Tape, f_a: Var, f_v: Var) -> Result<Var, NumericsError> {
    let t_v = tape.value(f_v).nrows();
    let aligned = tape.align_rows(f_a, t_v)?;
    tape.add(aligned, f_v)
}
