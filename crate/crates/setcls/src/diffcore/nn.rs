//! Composite network building blocks recorded on the tape.

use super::tape::{Tape, Var};
use crate::{Error, Result};

/// Tape handles for one attention block's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `y = xW + b` with `x [m,in]`, `W [in,out]`, `b [out]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    tape.add_row(xw, bias)
}

/// Scaled dot-product self-attention over all tokens, split into `heads`
/// heads. No positional encoding anywhere: the block is permutation
/// equivariant in its token rows.
pub fn multi_head_attention(
    tape: &mut Tape,
    tokens: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let (_, d) = tape.value(tokens).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let q = linear(tape, tokens, params.wq, params.bq)?;
    let k = linear(tape, tokens, params.wk, params.bk)?;
    let v = linear(tape, tokens, params.wv, params.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    linear(tape, merged, params.wo, params.bo)
}
