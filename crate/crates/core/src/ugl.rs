//! Union graph learning: a query-specific multigraph over the recent
//! window, aggregated with time-conditioned attention and fused with the
//! evolutional embeddings by a per-entity adaptive gate.
//!
//! The union graph keeps every historical fact that touches a query
//! subject (as subject or object) and retains the fact's original
//! timestamp as an edge attribute; parallel edges at different source
//! timestamps stay distinct so attention can weigh them separately.

use std::collections::HashSet;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::act::{apply_activation, dropout, Activation, RunMode, LEAKY_SLOPE};
use crate::dataset::Quadruple;
use crate::egl::CompositionParams;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};

/// Cross-timestamp multigraph around the query subjects.
#[derive(Debug, Clone, Default)]
pub struct UnionGraph {
    /// Edges keep their source timestamp (the `timestamp` field).
    pub edges: Vec<Quadruple>,
    /// Sorted entity ids present as an endpoint.
    pub nodes: Vec<u32>,
}

impl UnionGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge-list text dump (`s r o tau` per line) for oracle comparison.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for q in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                q.subject, q.relation, q.object, q.timestamp
            ));
        }
        out
    }
}

/// Collects the historical facts touching any query subject. With
/// `entirety` the filter is skipped and the whole window is taken.
pub fn build_union_graph(
    history: &[Vec<Quadruple>],
    query_subjects: &HashSet<u32>,
    entirety: bool,
) -> UnionGraph {
    let mut edges = Vec::new();
    for snapshot in history {
        for q in snapshot {
            if entirety || query_subjects.contains(&q.subject) || query_subjects.contains(&q.object)
            {
                edges.push(*q);
            }
        }
    }
    let mut nodes: Vec<u32> = edges
        .iter()
        .flat_map(|q| [q.subject, q.object])
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    nodes.sort_unstable();
    UnionGraph { edges, nodes }
}

/// One attention layer: scorer vector, score transform, message and
/// self-loop transforms, plus the convolutional composition.
pub struct UgatLayerParams {
    /// Attention scorer, `[4d, 1]`.
    pub w_att: ParamId,
    /// Score-feature transform, `[4d, 4d]`.
    pub w_feat: ParamId,
    /// Message transform.
    pub w_msg: ParamId,
    /// Self-loop transform.
    pub w_self: ParamId,
    pub psi: CompositionParams,
}

impl UgatLayerParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        channels: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w_att = store.add_xavier(&format!("{prefix}.w_att"), 4 * dim, 1, rng);
        let w_feat = store.add_xavier(&format!("{prefix}.w_feat"), 4 * dim, 4 * dim, rng);
        let w_msg = store.add_xavier(&format!("{prefix}.w_msg"), dim, dim, rng);
        let w_self = store.add_xavier(&format!("{prefix}.w_self"), dim, dim, rng);
        let psi = CompositionParams::new(store, &format!("{prefix}.psi"), 2, dim, channels, width, rng);
        Self {
            w_att,
            w_feat,
            w_msg,
            w_self,
            psi,
        }
    }
}

/// Gate parameters: per-entity embedding and the scoring row.
pub struct GateParams {
    pub theta: ParamId,
    pub w_score: ParamId,
    /// Learned map for the linear-fusion ablation, `[2d, d]`.
    pub linear: Option<ParamId>,
}

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        num_entities: usize,
        dim: usize,
        with_linear: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let theta = store.add_xavier("gate.theta", num_entities, dim, rng);
        let w_score = store.add_xavier("gate.w_score", dim, 1, rng);
        let linear = with_linear.then(|| store.add_xavier("gate.linear", 2 * dim, dim, rng));
        Self {
            theta,
            w_score,
            linear,
        }
    }
}

/// Element-wise mean of the evolution outputs (the union-graph
/// initialization). Errors on an empty list.
pub fn init_union_embeddings(tape: &mut Tape, e_list: &[NodeId]) -> NodeId {
    assert!(!e_list.is_empty(), "evolution output list must be nonempty");
    tape.mean_of(e_list)
}

/// Edge attention scores before normalization, exposed for tests.
fn attention_scores(
    tape: &mut Tape,
    edge_feat: NodeId,
    params: &UgatLayerParams,
    binding: &Binding,
) -> NodeId {
    let transformed = tape.matmul(edge_feat, binding.node(params.w_feat));
    let activated = tape.leaky_relu(transformed, LEAKY_SLOPE);
    tape.matmul(activated, binding.node(params.w_att))
}

/// One union-graph attention layer. Incoming messages of every object are
/// softmax-weighted (per object), transformed, summed, and combined with
/// the self-loop; entities outside the union graph keep their input rows.
#[allow(clippy::too_many_arguments)]
pub fn ugl_layer(
    tape: &mut Tape,
    ug: &UnionGraph,
    entities: NodeId,
    relations: NodeId,
    time_emb: NodeId,
    params: &UgatLayerParams,
    binding: &Binding,
    zero_time: bool,
    act: Activation,
    mode: &mut RunMode,
) -> NodeId {
    let num_entities = tape.value(entities).nrows();
    if ug.is_empty() {
        return entities;
    }
    let subjects: Vec<usize> = ug.edges.iter().map(|q| q.subject as usize).collect();
    let rels: Vec<usize> = ug.edges.iter().map(|q| q.relation as usize).collect();
    let objects: Vec<usize> = ug.edges.iter().map(|q| q.object as usize).collect();
    let taus: Vec<usize> = ug.edges.iter().map(|q| q.timestamp as usize).collect();

    let s_rows = tape.gather_rows(entities, subjects);
    let r_rows = tape.gather_rows(relations, rels);
    let o_rows = tape.gather_rows(entities, objects.clone());
    let dim = tape.value(entities).ncols();
    let t_rows = if zero_time {
        tape.constant(Array2::zeros((ug.edges.len(), dim)))
    } else {
        tape.gather_rows(time_emb, taus)
    };

    let edge_feat = tape.concat_cols(&[s_rows, r_rows, o_rows, t_rows]);
    let scores = attention_scores(tape, edge_feat, params, binding);
    let alpha = tape.segment_softmax(scores, objects.clone());

    let composed = params.psi.apply(tape, &[s_rows, r_rows], binding);
    let msg = tape.matmul(composed, binding.node(params.w_msg));
    let weighted = tape.mul_col_vec(msg, alpha);
    let weighted = dropout(tape, weighted, mode);
    let agg = tape.scatter_add_rows(weighted, objects, num_entities, None);

    let self_term = tape.matmul(entities, binding.node(params.w_self));
    let combined = tape.add(agg, self_term);
    let transformed = apply_activation(tape, combined, act, mode);

    // Entities outside the union graph carry their input forward.
    let mut in_graph = Array2::zeros((num_entities, 1));
    for &n in &ug.nodes {
        in_graph[[n as usize, 0]] = 1.0;
    }
    let mask = tape.constant(in_graph.clone());
    let inv_mask = tape.constant(1.0 - in_graph);
    let kept = tape.mul_col_vec(transformed, mask);
    let passed = tape.mul_col_vec(entities, inv_mask);
    tape.add(kept, passed)
}

/// Normalized attention weights of a layer over a union graph, grouped by
/// object (diagnostic surface used by the normalization suite).
pub fn attention_weights(
    tape: &mut Tape,
    ug: &UnionGraph,
    entities: NodeId,
    relations: NodeId,
    time_emb: NodeId,
    params: &UgatLayerParams,
    binding: &Binding,
) -> Option<(NodeId, Vec<usize>)> {
    if ug.is_empty() {
        return None;
    }
    let subjects: Vec<usize> = ug.edges.iter().map(|q| q.subject as usize).collect();
    let rels: Vec<usize> = ug.edges.iter().map(|q| q.relation as usize).collect();
    let objects: Vec<usize> = ug.edges.iter().map(|q| q.object as usize).collect();
    let taus: Vec<usize> = ug.edges.iter().map(|q| q.timestamp as usize).collect();
    let s_rows = tape.gather_rows(entities, subjects);
    let r_rows = tape.gather_rows(relations, rels);
    let o_rows = tape.gather_rows(entities, objects.clone());
    let t_rows = tape.gather_rows(time_emb, taus);
    let edge_feat = tape.concat_cols(&[s_rows, r_rows, o_rows, t_rows]);
    let scores = attention_scores(tape, edge_feat, params, binding);
    Some((tape.segment_softmax(scores, objects.clone()), objects))
}

/// Per-entity sigmoid blend of evolutional and union embeddings:
/// `out[e] = g_e * evo[e] + (1 - g_e) * union[e]`.
pub fn adaptive_gate(
    tape: &mut Tape,
    evolutional: NodeId,
    union: NodeId,
    gate: &GateParams,
    binding: &Binding,
) -> NodeId {
    let logit = tape.matmul(binding.node(gate.theta), binding.node(gate.w_score));
    let g = tape.sigmoid(logit);
    let keep = tape.mul_col_vec(evolutional, g);
    let one_minus = {
        let neg = tape.scale(g, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let take = tape.mul_col_vec(union, one_minus);
    tape.add(keep, take)
}
