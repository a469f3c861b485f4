//! Time-aware convolutional decoders. A query is scored by stacking the
//! subject, relation and timestamp vectors as a short signal, convolving
//! along the feature axis, projecting back to d, and taking inner products
//! with all candidate embeddings.
//!
//! Two softmax distributions are produced per query: the historical one,
//! restricted to candidates the indicator has seen (masked entries are
//! excluded from the softmax, with a literal logit-zeroing variant behind
//! a flag), and the raw one over all candidates. The final score blends
//! them with a fixed rate; an all-zero indicator degrades the historical
//! side to the raw distribution.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::act::{dropout, RunMode};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{BnMode, NodeId, Tape};

const MASK_OFFSET: f64 = -1e30;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// One batch-norm site: affine parameters plus running statistics (the
/// latter live in the store but never receive gradients).
pub struct BnSite {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub group_width: usize,
}

impl BnSite {
    fn new(store: &mut ParamStore, prefix: &str, groups: usize, group_width: usize) -> Self {
        Self {
            gamma: store.add_ones(&format!("{prefix}.gamma"), 1, groups),
            beta: store.add_zeros(&format!("{prefix}.beta"), 1, groups),
            running_mean: store.add_zeros(&format!("{prefix}.running_mean"), 1, groups),
            running_var: store.add_ones(&format!("{prefix}.running_var"), 1, groups),
            group_width,
        }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        binding: &Binding,
        mode: &RunMode,
        updates: &mut Vec<BnUpdate>,
    ) -> NodeId {
        let bn_mode = if mode.bn_train {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: store.value(self.running_mean).row(0).to_vec(),
                var: store.value(self.running_var).row(0).to_vec(),
            }
        };
        let out = tape.batch_norm(
            x,
            binding.node(self.gamma),
            binding.node(self.beta),
            self.group_width,
            BN_EPS,
            bn_mode,
        );
        if mode.bn_train {
            updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                node: out,
            });
        }
        out
    }
}

/// Pending running-statistics refresh recorded during a training forward.
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub node: NodeId,
}

/// Applies recorded batch statistics to the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, tape: &Tape, updates: &[BnUpdate]) {
    for u in updates {
        let Some((mean, var)) = tape.bn_batch_stats(u.node) else {
            continue;
        };
        for (j, &m) in mean.iter().enumerate() {
            let slot = &mut store.value_mut(u.mean)[[0, j]];
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * m;
        }
        for (j, &v) in var.iter().enumerate() {
            let slot = &mut store.value_mut(u.var)[[0, j]];
            *slot = (1.0 - BN_MOMENTUM) * *slot + BN_MOMENTUM * v;
        }
    }
}

/// Convolutional decoder parameters for a fixed number of input rows
/// (3 with the timestamp row, 2 without).
pub struct DecoderParams {
    pub rows: usize,
    pub channels: usize,
    pub width: usize,
    pub kernel: ParamId,
    pub proj: ParamId,
    pub proj_bias: ParamId,
    /// Batch-norm sites: per input row, after the convolution, after the
    /// projection. Absent when normalization is disabled.
    pub bn: Option<(Vec<BnSite>, BnSite, BnSite)>,
}

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rows: usize,
        dim: usize,
        channels: usize,
        width: usize,
        use_batch_norm: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let kernel = store.add_xavier(&format!("{prefix}.kernel"), channels, rows * width, rng);
        let proj = store.add_xavier(&format!("{prefix}.proj"), channels * dim, dim, rng);
        let proj_bias = store.add_zeros(&format!("{prefix}.proj_bias"), 1, dim);
        let bn = use_batch_norm.then(|| {
            let input = (0..rows)
                .map(|i| BnSite::new(store, &format!("{prefix}.bn_in{i}"), 1, dim))
                .collect();
            let feature = BnSite::new(store, &format!("{prefix}.bn_feat"), channels, dim);
            let hidden = BnSite::new(store, &format!("{prefix}.bn_hidden"), dim, 1);
            (input, feature, hidden)
        });
        Self {
            rows,
            channels,
            width,
            kernel,
            proj,
            proj_bias,
            bn,
        }
    }
}

/// Maps stacked query rows to one d-vector per query.
pub fn convtranse_time(
    tape: &mut Tape,
    store: &ParamStore,
    rows: &[NodeId],
    params: &DecoderParams,
    binding: &Binding,
    mode: &mut RunMode,
    updates: &mut Vec<BnUpdate>,
) -> NodeId {
    assert_eq!(rows.len(), params.rows);
    let rows: Vec<NodeId> = match &params.bn {
        Some((input_sites, _, _)) => rows
            .iter()
            .zip(input_sites)
            .map(|(&x, site)| site.apply(tape, store, x, binding, mode, updates))
            .collect(),
        None => rows.to_vec(),
    };
    let rows: Vec<NodeId> = rows.iter().map(|&x| dropout(tape, x, mode)).collect();
    let mut x = tape.conv1d_rows(&rows, binding.node(params.kernel), params.width);
    if let Some((_, feature, _)) = &params.bn {
        x = feature.apply(tape, store, x, binding, mode, updates);
    }
    x = tape.relu(x);
    x = dropout(tape, x, mode);
    x = tape.matmul(x, binding.node(params.proj));
    x = tape.add_row_vec(x, binding.node(params.proj_bias));
    x = dropout(tape, x, mode);
    if let Some((_, _, hidden)) = &params.bn {
        x = hidden.apply(tape, store, x, binding, mode, updates);
    }
    tape.relu(x)
}

/// The three distributions produced for a query batch.
pub struct ScoreNodes {
    /// Blended distribution `alpha * historical + (1 - alpha) * raw`.
    pub combined: NodeId,
    pub historical: NodeId,
    pub raw: NodeId,
}

/// Scores query vectors against candidate embeddings and blends the
/// masked and unmasked softmax distributions.
pub fn score_candidates(
    tape: &mut Tape,
    query_vecs: NodeId,
    candidates: NodeId,
    masks: &Array2<f64>,
    alpha: f64,
    zero_logits_variant: bool,
) -> ScoreNodes {
    let logits = tape.matmul_trans_b(query_vecs, candidates);
    debug_assert_eq!(tape.value(logits).dim(), masks.dim());
    let raw = tape.softmax_rows(logits);
    let historical = if zero_logits_variant {
        let masked = tape.mul_const(logits, masks.clone());
        tape.softmax_rows(masked)
    } else {
        // Excluded candidates get a -inf surrogate; rows with an all-zero
        // indicator keep their logits so the historical side degrades to
        // the raw distribution.
        let mut offsets = Array2::zeros(masks.dim());
        for (mut off_row, mask_row) in offsets.rows_mut().into_iter().zip(masks.rows()) {
            if mask_row.iter().any(|&m| m != 0.0) {
                for (o, &m) in off_row.iter_mut().zip(mask_row) {
                    if m == 0.0 {
                        *o = MASK_OFFSET;
                    }
                }
            }
        }
        let masked = tape.add_const(logits, offsets);
        tape.softmax_rows(masked)
    };
    let h_part = tape.scale(historical, alpha);
    let r_part = tape.scale(raw, 1.0 - alpha);
    let combined = tape.add(h_part, r_part);
    ScoreNodes {
        combined,
        historical,
        raw,
    }
}

/// Entity scoring: rows are (subject, relation, timestamp) gathered from
/// the gated entity matrix, evolved relations, and temporal embeddings;
/// candidates are all entities.
#[allow(clippy::too_many_arguments)]
pub fn score_entities(
    tape: &mut Tape,
    store: &ParamStore,
    subjects: &[usize],
    relations: &[usize],
    entity_emb: NodeId,
    relation_emb: NodeId,
    time_row: NodeId,
    masks: &Array2<f64>,
    alpha: f64,
    params: &DecoderParams,
    binding: &Binding,
    mode: &mut RunMode,
    updates: &mut Vec<BnUpdate>,
    zero_logits_variant: bool,
) -> ScoreNodes {
    let n = subjects.len();
    let s_rows = tape.gather_rows(entity_emb, subjects.to_vec());
    let r_rows = tape.gather_rows(relation_emb, relations.to_vec());
    let rows = if params.rows == 3 {
        let t_rows = tape.gather_rows(time_row, vec![0; n]);
        vec![s_rows, r_rows, t_rows]
    } else {
        vec![s_rows, r_rows]
    };
    let q = convtranse_time(tape, store, &rows, params, binding, mode, updates);
    score_candidates(tape, q, entity_emb, masks, alpha, zero_logits_variant)
}

/// Relation scoring: rows are (subject, object, timestamp); candidates are
/// all (augmented) relations.
#[allow(clippy::too_many_arguments)]
pub fn score_relations(
    tape: &mut Tape,
    store: &ParamStore,
    subjects: &[usize],
    objects: &[usize],
    entity_emb: NodeId,
    relation_emb: NodeId,
    time_row: NodeId,
    masks: &Array2<f64>,
    alpha: f64,
    params: &DecoderParams,
    binding: &Binding,
    mode: &mut RunMode,
    updates: &mut Vec<BnUpdate>,
    zero_logits_variant: bool,
) -> ScoreNodes {
    let n = subjects.len();
    let s_rows = tape.gather_rows(entity_emb, subjects.to_vec());
    let o_rows = tape.gather_rows(entity_emb, objects.to_vec());
    let rows = if params.rows == 3 {
        let t_rows = tape.gather_rows(time_row, vec![0; n]);
        vec![s_rows, o_rows, t_rows]
    } else {
        vec![s_rows, o_rows]
    };
    let q = convtranse_time(tape, store, &rows, params, binding, mode, updates);
    score_candidates(tape, q, relation_emb, masks, alpha, zero_logits_variant)
}
