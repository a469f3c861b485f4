//! Full model assembly: parameters for every component and the one-step
//! forward pass from a history window to blended score distributions.

use std::collections::HashSet;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::act::{Activation, RunMode};
use crate::config::{Config, Variant};
use crate::dataset::Quadruple;
use crate::decoder::{self, BnUpdate, DecoderParams, ScoreNodes};
use crate::egl::{run_egl, AggregateOpts, EglParams};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};
use crate::tgl::{build_temporal_graph, temporal_embeddings, TemporalGraph, TglParams};
use crate::ugl::{adaptive_gate, build_union_graph, init_union_embeddings, ugl_layer, GateParams, UgatLayerParams};

/// All trainable state plus the static temporal graph.
pub struct LmsModel {
    pub cfg: Config,
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub num_timestamps: usize,
    pub store: ParamStore,
    pub entity_init: ParamId,
    pub relation_init: ParamId,
    pub egl: EglParams,
    pub ugl_layers: Vec<UgatLayerParams>,
    pub gate: GateParams,
    pub tgl: TglParams,
    pub temporal_graph: TemporalGraph,
    pub entity_decoder: DecoderParams,
    pub relation_decoder: DecoderParams,
}

/// Inputs of one prediction step at time `t`.
pub struct StepInput<'a> {
    pub history: &'a [Vec<Quadruple>],
    /// Augmented queries at `t`: entity queries read (subject, relation),
    /// relation queries read (subject, object).
    pub queries: &'a [Quadruple],
    pub t: u32,
    /// Indicator rows per query over all entities.
    pub ent_masks: Array2<f64>,
    /// Relation-side indicator rows per query over all augmented relations.
    pub rel_masks: Array2<f64>,
    /// Carried evolutional states; `None` falls back to the learned
    /// initial embeddings.
    pub e_state: Option<&'a Array2<f64>>,
    pub r_state: Option<&'a Array2<f64>>,
    /// Blend weight of the historical decoder for this step.
    pub alpha: f64,
}

/// Tape handles produced by one forward step.
pub struct StepOutput {
    pub entity_scores: ScoreNodes,
    pub relation_scores: ScoreNodes,
    /// Final evolutional entity state (to carry forward, detached).
    pub e_final: NodeId,
    /// Final evolved relation state.
    pub r_final: NodeId,
    /// Gated entity representations used by the decoders.
    pub gated: NodeId,
    /// Per-step evolution outputs.
    pub e_list: Vec<NodeId>,
    pub bn_updates: Vec<BnUpdate>,
}

impl LmsModel {
    pub fn new(
        cfg: Config,
        num_entities: usize,
        num_base_relations: usize,
        num_timestamps: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.dim;
        let mut store = ParamStore::new();
        let entity_init = store.add_unit_rows("embeddings.entities", num_entities, dim, rng);
        let relation_init =
            store.add_xavier("embeddings.relations", 2 * num_base_relations, dim, rng);
        let egl = EglParams::new(
            &mut store,
            cfg.egl_layers,
            dim,
            cfg.channels,
            cfg.kernel_width,
            rng,
        );
        let ugl_layers = (0..cfg.ugl_layers)
            .map(|l| {
                UgatLayerParams::new(
                    &mut store,
                    &format!("ugl.layer{l}"),
                    dim,
                    cfg.channels,
                    cfg.kernel_width,
                    rng,
                )
            })
            .collect();
        let gate = GateParams::new(
            &mut store,
            num_entities,
            dim,
            cfg.variant == Variant::GateLinear,
            rng,
        );
        let temporal_graph = build_temporal_graph(num_timestamps, &cfg.periods);
        let tgl = TglParams::new(
            &mut store,
            num_timestamps,
            cfg.time_dim,
            dim,
            temporal_graph.num_types(),
            rng,
        );
        let decoder_rows = if cfg.variant == Variant::NoTimeInDecoder {
            2
        } else {
            3
        };
        let entity_decoder = DecoderParams::new(
            &mut store,
            "decoder.entity",
            decoder_rows,
            dim,
            cfg.channels,
            cfg.kernel_width,
            cfg.use_batch_norm,
            rng,
        );
        let relation_decoder = DecoderParams::new(
            &mut store,
            "decoder.relation",
            decoder_rows,
            dim,
            cfg.channels,
            cfg.kernel_width,
            cfg.use_batch_norm,
            rng,
        );
        Ok(Self {
            cfg,
            num_entities,
            num_base_relations,
            num_timestamps,
            store,
            entity_init,
            relation_init,
            egl,
            ugl_layers,
            gate,
            tgl,
            temporal_graph,
            entity_decoder,
            relation_decoder,
        })
    }

    pub fn aggregate_opts(&self) -> AggregateOpts {
        AggregateOpts {
            mean_normalize: !self.cfg.sum_aggregation,
            activation: Activation::Rrelu,
        }
    }

    /// One prediction step. Builds the full computation on `tape` and
    /// returns the score nodes; the caller owns backward sweeps, state
    /// carrying, and running-statistics refresh.
    pub fn forward(&self, tape: &mut Tape, input: &StepInput, mode: &mut RunMode) -> StepOutput {
        let cfg = &self.cfg;
        let binding = self.store.bind(tape);
        let e0 = match input.e_state {
            Some(state) => tape.constant(state.clone()),
            None => binding.node(self.entity_init),
        };
        let r0 = match input.r_state {
            Some(state) => tape.constant(state.clone()),
            None => binding.node(self.relation_init),
        };
        let r_init_node = binding.node(self.relation_init);

        let opts = self.aggregate_opts();
        let (e_list, r_final) = if cfg.variant == Variant::NoEgl {
            (vec![e0], r0)
        } else {
            run_egl(
                tape,
                input.history,
                e0,
                r0,
                r_init_node,
                &self.egl,
                &binding,
                &opts,
                mode,
            )
        };
        let e_final = *e_list.last().expect("evolution output is never empty");

        let t2 = temporal_embeddings(
            tape,
            &self.temporal_graph,
            &self.tgl,
            &binding,
            cfg.variant == Variant::NoTgl,
            Activation::Rrelu,
            mode,
        );

        let gated = if cfg.variant == Variant::NoUgl {
            e_final
        } else {
            let subjects: HashSet<u32> = input.queries.iter().map(|q| q.subject).collect();
            let ug = build_union_graph(
                input.history,
                &subjects,
                cfg.variant == Variant::UglEntirety,
            );
            let mut union_emb = init_union_embeddings(tape, &e_list);
            for layer in &self.ugl_layers {
                union_emb = ugl_layer(
                    tape,
                    &ug,
                    union_emb,
                    r_final,
                    t2,
                    layer,
                    &binding,
                    cfg.variant == Variant::NoTimeInUgl,
                    Activation::Rrelu,
                    mode,
                );
            }
            match cfg.variant {
                Variant::NoEgl => union_emb,
                Variant::GateSum => {
                    let sum = tape.add(e_final, union_emb);
                    tape.scale(sum, 0.5)
                }
                Variant::GateLinear => {
                    let cat = tape.concat_cols(&[e_final, union_emb]);
                    let linear = self.gate.linear.expect("linear gate parameters exist");
                    tape.matmul(cat, binding.node(linear))
                }
                _ => adaptive_gate(tape, e_final, union_emb, &self.gate, &binding),
            }
        };

        let t_row = tape.gather_rows(t2, vec![input.t as usize]);
        let subjects: Vec<usize> = input.queries.iter().map(|q| q.subject as usize).collect();
        let relations: Vec<usize> = input.queries.iter().map(|q| q.relation as usize).collect();
        let objects: Vec<usize> = input.queries.iter().map(|q| q.object as usize).collect();

        let mut bn_updates = Vec::new();
        let entity_scores = decoder::score_entities(
            tape,
            &self.store,
            &subjects,
            &relations,
            gated,
            r_final,
            t_row,
            &input.ent_masks,
            input.alpha,
            &self.entity_decoder,
            &binding,
            mode,
            &mut bn_updates,
            cfg.indicator_zeroes_logits,
        );
        let relation_scores = decoder::score_relations(
            tape,
            &self.store,
            &subjects,
            &objects,
            gated,
            r_final,
            t_row,
            &input.rel_masks,
            input.alpha,
            &self.relation_decoder,
            &binding,
            mode,
            &mut bn_updates,
            cfg.indicator_zeroes_logits,
        );

        StepOutput {
            entity_scores,
            relation_scores,
            e_final,
            r_final,
            gated,
            e_list,
            bn_updates,
        }
    }
}
