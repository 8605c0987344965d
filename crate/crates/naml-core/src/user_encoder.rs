//! User encoder: news-level additive attention over browsed-news vectors.

use crate::error::TensorError;
use crate::model::{BoundParams, ModelDims, ParamStore};
use crate::news_encoder::attention_pool;
use crate::tensor::{Tape, TensorId};

/// User vector plus the attention weights over the history.
pub struct UserEncodeOutput {
    /// `[1, N_f]` tensor on the tape.
    pub u: TensorId,
    pub history_alpha: Vec<f64>,
}

/// Pool `history` (each `[1, N_f]`) into a user vector. Empty history is
/// the cold-start case and yields the zero vector. With
/// `news_attention == false` the pooling is a plain mean.
pub fn encode_user(
    tape: &mut Tape,
    bound: &BoundParams,
    history: &[TensorId],
    n_filters: usize,
    news_attention: bool,
) -> Result<UserEncodeOutput, TensorError> {
    if history.is_empty() {
        let u = tape.zeros(vec![1, n_filters]);
        return Ok(UserEncodeOutput { u, history_alpha: Vec::new() });
    }
    let stacked = tape.stack_rows(history)?;
    let (u, history_alpha) = attention_pool(
        tape,
        stacked,
        bound.id("user_attn.proj"),
        bound.id("user_attn.bias"),
        bound.id("user_attn.query"),
        news_attention,
    )?;
    Ok(UserEncodeOutput { u, history_alpha })
}

/// Eval-mode user vector from detached news vectors.
pub fn encode_user_vector(
    params: &ParamStore,
    dims: &ModelDims,
    history: &[Vec<f64>],
    news_attention: bool,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let ids: Vec<TensorId> = history
        .iter()
        .map(|r| tape.leaf(r.clone(), vec![1, dims.n_filters], false))
        .collect();
    let out = encode_user(&mut tape, &bound, &ids, dims.n_filters, news_attention)?;
    Ok((tape.data(out.u).to_vec(), out.history_alpha))
}
