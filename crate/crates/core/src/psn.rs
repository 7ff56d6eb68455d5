//! Part sequence network.
//!
//! Backbone features `X [C, Hf, Wf]` are average-pooled with an
//! `[Hf, Wf/N]` kernel into `N` vectors ordered left to right, a
//! bi-directional LSTM maps them to per-step states, and the flattened
//! `N x U` state matrix feeds the part head. A second head classifies the
//! spatially pooled features directly.

use crate::nn::{Backbone, LinearLayer, LstmCell};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::{invalid, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PartBranch {
    pub lstm_fwd: LstmCell,
    pub lstm_bwd: LstmCell,
    /// `N * U -> K`
    pub part_head: LinearLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsnModel {
    pub backbone: Backbone,
    /// `None` is the "without part" ablation.
    pub part: Option<PartBranch>,
    /// `C -> K`
    pub global_head: LinearLayer,
    pub seq_len: usize,
    /// Concatenated state width `U`; each direction has `U / 2` units.
    pub hidden: usize,
    pub gap_mode: PoolMode,
}

/// `Y`, shape `[B, N, C]`.
#[derive(Debug, Clone, Copy)]
pub struct PartSequence(pub Var);

/// `P_P`, shape `[B, N, U]`.
#[derive(Debug, Clone, Copy)]
pub struct PartRepresentation(pub Var);

#[derive(Debug, Clone, Copy)]
pub struct PsnOutput {
    pub features: Var,
    /// `P_g`, `[B, C]`
    pub pooled: Var,
    pub logits_global: Var,
    pub parts: Option<PartRepresentation>,
    pub logits_part: Option<Var>,
}

/// Checks that `seq_len` tiles a feature map of width `feature_width`.
pub fn check_seq_len(seq_len: usize, feature_width: usize) -> Result<()> {
    if seq_len == 0 || !feature_width.is_multiple_of(seq_len) {
        return Err(invalid(
            "psn",
            format!("sequence length {seq_len} must divide feature width {feature_width}"),
        ));
    }
    Ok(())
}

/// `[B, C, Hf, Wf] -> [B, N, C]`, each row the mean over full height and one
/// width slab of `Wf / N` columns.
pub fn serialize_features<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    seq_len: usize,
) -> Result<PartSequence> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(invalid("serialize_features", format!("need [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    check_seq_len(seq_len, w)?;
    let pooled = tape.avg_pool_rect(features, h, w / seq_len)?;
    let flat = tape.reshape(pooled, &[b, c, seq_len])?;
    Ok(PartSequence(tape.transpose_last2(flat)?))
}

fn run_direction<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cell: &LstmCell,
    steps: &[Var],
    batch: usize,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Var>>> {
    let mut h = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut states = vec![None; steps.len()];
    for t in order {
        (h, c) = cell.step(tape, store, steps[t], h, c)?;
        states[t] = Some(h);
    }
    Ok(states)
}

/// Forward LSTM over `Y_1..Y_N`, backward LSTM over `Y_N..Y_1`, both from
/// zero state; step `i` of the output is `[h_fwd(i), h_bwd(i)]`.
pub fn bilstm_map<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    branch: &PartBranch,
    seq: PartSequence,
) -> Result<PartRepresentation> {
    let s = tape.shape(seq.0).to_vec();
    let input_dim = branch.lstm_fwd.input_dim;
    if s.len() != 3 || s[2] != input_dim {
        return Err(invalid(
            "bilstm_map",
            format!("expected [B, N, {input_dim}], got {s:?}"),
        ));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    let steps = (0..n)
        .map(|t| {
            let x = tape.narrow(seq.0, 1, t, 1)?;
            tape.reshape(x, &[b, c])
        })
        .collect::<Result<Vec<_>>>()?;
    let fwd = run_direction(tape, store, &branch.lstm_fwd, &steps, b, 0..n)?;
    let bwd = run_direction(tape, store, &branch.lstm_bwd, &steps, b, (0..n).rev())?;
    let per_step = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, r)| tape.concat(&[f.expect("visited"), r.expect("visited")], 1))
        .collect::<Result<Vec<_>>>()?;
    let flat = tape.concat(&per_step, 1)?;
    let hidden = branch.lstm_fwd.hidden + branch.lstm_bwd.hidden;
    Ok(PartRepresentation(tape.reshape(flat, &[b, n, hidden])?))
}

/// Flattens `P_P` row-major and applies the part head.
pub fn part_logits<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    branch: &PartBranch,
    parts: PartRepresentation,
) -> Result<Var> {
    let s = tape.shape(parts.0).to_vec();
    let flat = tape.reshape(parts.0, &[s[0], s[1..].iter().product()])?;
    branch.part_head.forward(tape, store, flat)
}

pub fn psn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    model: &PsnModel,
    regions: Var,
) -> Result<PsnOutput> {
    let features = model.backbone.forward(tape, store, regions)?;
    let pooled = tape.global_pool(features, model.gap_mode)?;
    let logits_global = model.global_head.forward(tape, store, pooled)?;
    let (parts, logits_part) = match &model.part {
        Some(branch) => {
            let seq = serialize_features(tape, features, model.seq_len)?;
            let parts = bilstm_map(tape, store, branch, seq)?;
            let logits = part_logits(tape, store, branch, parts)?;
            (Some(parts), Some(logits))
        }
        None => (None, None),
    };
    Ok(PsnOutput {
        features,
        pooled,
        logits_global,
        parts,
        logits_part,
    })
}
