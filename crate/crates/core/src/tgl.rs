//! Temporal graph learning: timestamp nodes linked by periodic relations,
//! embedded with a sine feature map and refined by one relational
//! convolution layer.
//!
//! With daily granularity the default periods are 3 days, 1 week, 2 weeks
//! and 1 month (offsets 3, 7, 14, 30); every period also has an inverse
//! direction, so a table of P periods yields 2P directed edge types.

use crate::act::{apply_activation, Activation, RunMode};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};
use rand_chacha::ChaCha12Rng;

/// Static periodic graph over time indices `0..num_timestamps`.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    pub num_timestamps: usize,
    /// Period offsets in time-index units, one per forward type.
    pub offsets: Vec<u32>,
    /// `edges[ty]` holds `(src, dst)` pairs; types `0..P` point forward in
    /// time (`dst = src + offset`), types `P..2P` are the inverses.
    pub edges: Vec<Vec<(u32, u32)>>,
    /// Total neighbor count per node across all types.
    pub neighbor_count: Vec<usize>,
}

impl TemporalGraph {
    pub fn num_types(&self) -> usize {
        self.edges.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Inverse of a directed type id.
    pub fn inverse_type(&self, ty: usize) -> usize {
        let p = self.offsets.len();
        if ty < p {
            ty + p
        } else {
            ty - p
        }
    }
}

/// Builds the complete periodic edge set for all in-range pairs. Offsets
/// not smaller than `num_timestamps` simply contribute no edges.
pub fn build_temporal_graph(num_timestamps: usize, offsets: &[u32]) -> TemporalGraph {
    let p = offsets.len();
    let mut edges = vec![Vec::new(); 2 * p];
    let mut neighbor_count = vec![0usize; num_timestamps];
    for (ty, &off) in offsets.iter().enumerate() {
        let off_us = off as usize;
        for i in 0..num_timestamps.saturating_sub(off_us) {
            let j = i + off_us;
            edges[ty].push((i as u32, j as u32));
            edges[ty + p].push((j as u32, i as u32));
            neighbor_count[i] += 1;
            neighbor_count[j] += 1;
        }
    }
    TemporalGraph {
        num_timestamps,
        offsets: offsets.to_vec(),
        edges,
        neighbor_count,
    }
}

/// Trainable pieces of the temporal encoder.
pub struct TglParams {
    /// Learned initial features, one row per timestamp.
    pub t_raw: ParamId,
    /// Linear slot of the feature map.
    pub w_lin: ParamId,
    /// Sine slot of the feature map.
    pub w_per: ParamId,
    /// Projection of the concatenated slots to d.
    pub w_proj: ParamId,
    /// One matrix per directed period type.
    pub w_rel: Vec<ParamId>,
    /// Self-loop matrix of the relational layer.
    pub w_self: ParamId,
}

impl TglParams {
    pub fn new(
        store: &mut ParamStore,
        num_timestamps: usize,
        time_dim: usize,
        dim: usize,
        num_types: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let t_raw = store.add_xavier("tgl.t_raw", num_timestamps, time_dim, rng);
        let w_lin = store.add_xavier("tgl.w_lin", time_dim, dim, rng);
        let w_per = store.add_xavier("tgl.w_per", time_dim, dim, rng);
        let w_proj = store.add_xavier("tgl.w_proj", 2 * dim, dim, rng);
        let w_rel = (0..num_types)
            .map(|ty| store.add_xavier(&format!("tgl.rel{ty}.w"), dim, dim, rng))
            .collect();
        let w_self = store.add_xavier("tgl.w_self", dim, dim, rng);
        Self {
            t_raw,
            w_lin,
            w_per,
            w_proj,
            w_rel,
            w_self,
        }
    }
}

/// Sine-based feature map: each raw row `t` becomes
/// `proj([W_lin t || sin(W_per t)])`.
pub fn time2vec(tape: &mut Tape, t_raw: NodeId, params: &TglParams, binding: &Binding) -> NodeId {
    let lin = tape.matmul(t_raw, binding.node(params.w_lin));
    let pre = tape.matmul(t_raw, binding.node(params.w_per));
    let per = tape.sin(pre);
    let cat = tape.concat_cols(&[lin, per]);
    tape.matmul(cat, binding.node(params.w_proj))
}

/// Single relational layer over the periodic graph:
/// `t''_i = act( sum_ty sum_{j in N_ty(i)} (1/N_i) W_ty t'_j + W_self t'_i )`.
/// Isolated nodes receive the self-loop term only.
pub fn rgcn_update(
    tape: &mut Tape,
    tg: &TemporalGraph,
    t1: NodeId,
    params: &TglParams,
    binding: &Binding,
    act: Activation,
    mode: &mut RunMode,
) -> NodeId {
    let n = tg.num_timestamps;
    let mut acc = tape.matmul(t1, binding.node(params.w_self));
    for (ty, edges) in tg.edges.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let src: Vec<usize> = edges.iter().map(|&(s, _)| s as usize).collect();
        let dst: Vec<usize> = edges.iter().map(|&(_, d)| d as usize).collect();
        let weights: Vec<f64> = dst
            .iter()
            .map(|&d| 1.0 / tg.neighbor_count[d] as f64)
            .collect();
        let gathered = tape.gather_rows(t1, src);
        let transformed = tape.matmul(gathered, binding.node(params.w_rel[ty]));
        let agg = tape.scatter_add_rows(transformed, dst, n, Some(weights));
        acc = tape.add(acc, agg);
    }
    apply_activation(tape, acc, act, mode)
}

/// Full temporal embedding pass: feature map, then the relational layer
/// unless `skip_refinement` (the Time2Vec-only variant).
pub fn temporal_embeddings(
    tape: &mut Tape,
    tg: &TemporalGraph,
    params: &TglParams,
    binding: &Binding,
    skip_refinement: bool,
    act: Activation,
    mode: &mut RunMode,
) -> NodeId {
    let t_raw = binding.node(params.t_raw);
    let t1 = time2vec(tape, t_raw, params, binding);
    if skip_refinement {
        t1
    } else {
        rgcn_update(tape, tg, t1, params, binding, act, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn store_with_tgl(
        num_t: usize,
        time_dim: usize,
        dim: usize,
        types: usize,
        seed: u64,
    ) -> (ParamStore, TglParams) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = TglParams::new(&mut store, num_t, time_dim, dim, types, &mut rng);
        (store, params)
    }

    #[test]
    fn daily_table_links_one_week_later() {
        let tg = build_temporal_graph(365, &[3, 7, 14, 30]);
        // Type 1 is the 7-day period.
        assert!(tg.edges[1].contains(&(0, 7)));
        // No type links 0 to 6.
        for edges in &tg.edges {
            assert!(!edges.contains(&(0, 6)));
        }
        // Inverse of (0, 7) exists as type 1 + P.
        assert!(tg.edges[1 + 4].contains(&(7, 0)));
    }

    #[test]
    fn out_of_range_offsets_contribute_nothing() {
        let tg = build_temporal_graph(2, &[3, 7, 14, 30]);
        assert_eq!(tg.num_edges(), 0);
    }

    #[test]
    fn edge_count_matches_pair_scan_oracle() {
        let offsets = [3u32, 7, 14, 30];
        let tg = build_temporal_graph(40, &offsets);
        // 2 * sum_p max(0, 40 - offset) = 2 * (37 + 33 + 26 + 10) = 212
        assert_eq!(tg.num_edges(), 212);

        // Exhaustive O(T^2) oracle: every ordered pair at an exact offset.
        let mut expected = 0;
        for i in 0..40u32 {
            for j in 0..40u32 {
                if offsets.iter().any(|&o| j as i64 - i as i64 == o as i64)
                    || offsets.iter().any(|&o| i as i64 - j as i64 == o as i64)
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(tg.num_edges(), expected);
    }

    #[test]
    fn period_exactness_and_inverse_bijection() {
        let tg = build_temporal_graph(60, &[3, 7, 14, 30]);
        let p = tg.offsets.len();
        for (ty, edges) in tg.edges.iter().enumerate() {
            for &(i, j) in edges {
                if ty < p {
                    assert_eq!(j - i, tg.offsets[ty], "forward offset violated");
                } else {
                    assert_eq!(i - j, tg.offsets[ty - p], "inverse offset violated");
                }
                // Bijection with the inverse type.
                let inv = tg.inverse_type(ty);
                assert!(tg.edges[inv].contains(&(j, i)));
            }
        }
    }

    #[test]
    fn neighbor_count_is_total_degree() {
        let tg = build_temporal_graph(12, &[3, 7]);
        for i in 0..12u32 {
            let mut expect = 0;
            for &o in &[3u32, 7] {
                if i >= o {
                    expect += 1;
                }
                if i + o < 12 {
                    expect += 1;
                }
            }
            // Each neighbor contributes one incoming edge (forward from the
            // earlier node or inverse from the later one).
            let incoming: usize = tg
                .edges
                .iter()
                .flatten()
                .filter(|&&(_, d)| d == i)
                .count();
            assert_eq!(incoming, expect);
            assert_eq!(tg.neighbor_count[i as usize], expect);
        }
    }

    #[test]
    fn time2vec_zero_row_maps_to_zero() {
        let (mut store, params) = store_with_tgl(3, 4, 5, 2, 1);
        store.value_mut(params.t_raw).row_mut(1).fill(0.0);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let out = time2vec(&mut tape, binding.node(params.t_raw), &params, &binding);
        for &x in tape.value(out).row(1) {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn time2vec_sine_slot_vanishes_at_pi() {
        // One raw feature equal to pi with identity-like W_per makes the
        // sine slot zero for that coordinate.
        let (mut store, params) = store_with_tgl(1, 1, 1, 2, 2);
        store.value_mut(params.t_raw)[[0, 0]] = std::f64::consts::PI;
        store.value_mut(params.w_per)[[0, 0]] = 1.0;
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let t_raw = binding.node(params.t_raw);
        let pre = tape.matmul(t_raw, binding.node(params.w_per));
        let per = tape.sin(pre);
        assert!(tape.value(per)[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn time2vec_matches_scalar_loop() {
        let (store, params) = store_with_tgl(4, 6, 5, 2, 3);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let out = time2vec(&mut tape, binding.node(params.t_raw), &params, &binding);
        let t_raw = store.value(params.t_raw);
        let w_lin = store.value(params.w_lin);
        let w_per = store.value(params.w_per);
        let w_proj = store.value(params.w_proj);
        let (time_dim, d) = (6, 5);
        for i in 0..4 {
            for c in 0..d {
                // scalar evaluation of proj([lin || sin(per)])
                let mut acc = 0.0;
                for m in 0..2 * d {
                    let slot = if m < d {
                        (0..time_dim).map(|k| t_raw[[i, k]] * w_lin[[k, m]]).sum::<f64>()
                    } else {
                        (0..time_dim)
                            .map(|k| t_raw[[i, k]] * w_per[[k, m - d]])
                            .sum::<f64>()
                            .sin()
                    };
                    acc += slot * w_proj[[m, c]];
                }
                let got = tape.value(out)[[i, c]];
                let denom = (acc.abs() + got.abs()).max(1e-12);
                assert!((acc - got).abs() / denom < 1e-7, "({i},{c}): {acc} vs {got}");
            }
        }
    }

    #[test]
    fn isolated_node_keeps_self_loop_only() {
        // Offsets larger than the graph leave every node isolated.
        let tg = build_temporal_graph(3, &[10]);
        let (store, params) = store_with_tgl(3, 4, 5, 2, 4);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let t1 = tape.constant(Array2::from_shape_fn((3, 5), |(i, j)| (i + j) as f64 * 0.1));
        let mut mode = RunMode::eval();
        let out = rgcn_update(&mut tape, &tg, t1, &params, &binding, Activation::Identity, &mut mode);
        let expect = tape.value(t1).dot(store.value(params.w_self));
        let got = tape.value(out);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_swap_with_identity_weights() {
        let tg = build_temporal_graph(2, &[1]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = TglParams::new(&mut store, 2, 4, 3, 2, &mut rng);
        for ty in 0..2 {
            store
                .value_mut(params.w_rel[ty])
                .assign(&Array2::eye(3));
        }
        store.value_mut(params.w_self).fill(0.0);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let t1 = tape.constant(ndarray::array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let mut mode = RunMode::eval();
        let out = rgcn_update(&mut tape, &tg, t1, &params, &binding, Activation::Identity, &mut mode);
        let got = tape.value(out);
        assert_eq!(got.row(0).to_vec(), vec![4.0, 5.0, 6.0]);
        assert_eq!(got.row(1).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rgcn_matches_dense_neighbor_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let num_t = 40;
        let dim = 4;
        let tg = build_temporal_graph(num_t, &[3, 7, 14, 30]);
        let mut store = ParamStore::new();
        let params = TglParams::new(&mut store, num_t, 4, dim, 8, &mut rng);
        let t1_val = Array2::from_shape_fn((num_t, dim), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let t1 = tape.constant(t1_val.clone());
        let mut mode = RunMode::eval();
        let out = rgcn_update(&mut tape, &tg, t1, &params, &binding, Activation::Identity, &mut mode);

        // Dense per-node oracle over all typed neighbor pairs.
        for i in 0..num_t {
            let mut expect = t1_val.row(i).dot(store.value(params.w_self));
            for (ty, edges) in tg.edges.iter().enumerate() {
                for &(s, d) in edges {
                    if d as usize == i {
                        let msg = t1_val.row(s as usize).dot(store.value(params.w_rel[ty]));
                        expect = expect + &(&msg / tg.neighbor_count[i] as f64);
                    }
                }
            }
            for (a, b) in tape.value(out).row(i).iter().zip(expect.iter()) {
                let denom = (a.abs() + b.abs()).max(1e-9);
                assert!((a - b).abs() / denom < 1e-6, "node {i}: {a} vs {b}");
            }
        }
    }
}
