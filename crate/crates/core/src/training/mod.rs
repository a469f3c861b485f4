//! Joint optimization and evaluation: the chronological training loop,
//! the cross-entropy objective over blended distributions, and raw /
//! time-filtered ranking.
//!
//! Within an epoch timestamps are visited in order; each timestamp's
//! augmented facts form one query batch, and the optimizer steps once per
//! timestamp. The evolutional state is carried across timestamps (reset
//! at every epoch start to the learned initial embeddings) and the
//! indicator frontier tracks the loop exactly, so no parameter update or
//! indicator entry ever reflects facts at or after the prediction time.

pub mod metrics;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::act::RunMode;
use crate::config::Config;
use crate::dataset::{
    augment_inverse, build_snapshots, slice_history, DatasetSplits, Quadruple, SnapshotSequence,
    SplitName,
};
use crate::error::{LmsError, Result};
use crate::history::{IndicatorStore, RelationIndicator};
use crate::model::{LmsModel, StepInput};
use crate::params::{param_gradients, Adam, ParamStore};
use crate::tensor::{NodeId, Tape};
pub use metrics::{rank_of, MetricSet, MetricsReport, RankCollector};

/// Mean negative log-probability of the truth labels; probabilities are
/// clamped at 1e-12 before the log.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, truths: &[usize]) -> NodeId {
    let coords: Vec<(usize, usize)> = truths.iter().copied().enumerate().collect();
    let picked = tape.gather_scalars(probs, coords);
    let logs = tape.log_clamped(picked, 1e-12);
    let total = tape.sum_all(logs);
    tape.scale(total, -1.0 / truths.len().max(1) as f64)
}

/// Joint objective: `beta * CE(entities) + (1 - beta) * CE(relations)`.
pub fn compute_loss(
    tape: &mut Tape,
    entity_scores: NodeId,
    truth_entities: &[usize],
    relation_scores: NodeId,
    truth_relations: &[usize],
    beta: f64,
) -> NodeId {
    let ent = cross_entropy(tape, entity_scores, truth_entities);
    let rel = cross_entropy(tape, relation_scores, truth_relations);
    let ent_part = tape.scale(ent, beta);
    let rel_part = tape.scale(rel, 1.0 - beta);
    tape.add(ent_part, rel_part)
}

/// Chronological cursor over a snapshot sequence: carried evolutional
/// states plus the two indicator stores, advanced one timestamp at a time.
pub struct EngineState {
    e_state: Option<Array2<f64>>,
    r_state: Option<Array2<f64>>,
    indicator: IndicatorStore,
    rel_indicator: RelationIndicator,
    cursor: u32,
}

impl EngineState {
    pub fn new() -> Self {
        Self {
            e_state: None,
            r_state: None,
            indicator: IndicatorStore::new(),
            rel_indicator: RelationIndicator::new(),
            cursor: 0,
        }
    }

    /// Resumes at `cursor` with carried states; the indicator stores are
    /// replayed over the preceding snapshots.
    pub fn resume(
        seq: &SnapshotSequence,
        e_state: Option<Array2<f64>>,
        r_state: Option<Array2<f64>>,
        cursor: u32,
    ) -> Result<Self> {
        let mut engine = Self::new();
        for t in 0..cursor {
            engine.absorb(seq, t, false)?;
        }
        engine.e_state = e_state;
        engine.r_state = r_state;
        engine.cursor = cursor;
        Ok(engine)
    }

    pub fn cursor(&self) -> u32 {
        self.cursor
    }

    pub fn states(&self) -> (Option<&Array2<f64>>, Option<&Array2<f64>>) {
        (self.e_state.as_ref(), self.r_state.as_ref())
    }

    fn masks_for(
        &self,
        model: &LmsModel,
        queries: &[Quadruple],
        t: u32,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.indicator.frontier() != t {
            return Err(LmsError::Ordering {
                got: t,
                expected: self.indicator.frontier(),
            });
        }
        let ne = model.num_entities;
        let nr2 = 2 * model.num_base_relations;
        let mut ent = Array2::zeros((queries.len(), ne));
        let mut rel = Array2::zeros((queries.len(), nr2));
        for (i, q) in queries.iter().enumerate() {
            let ev = self.indicator.lookup(q.subject, q.relation, ne);
            ent.row_mut(i).assign(&ndarray::ArrayView1::from(&ev));
            let rv = self.rel_indicator.lookup(q.subject, q.object, nr2);
            rel.row_mut(i).assign(&ndarray::ArrayView1::from(&rv));
        }
        Ok((ent, rel))
    }

    fn absorb(&mut self, seq: &SnapshotSequence, t: u32, strict: bool) -> Result<()> {
        let snapshot = &seq.snapshots[t as usize];
        if strict {
            self.indicator.skip(t)?;
            self.rel_indicator.skip(t)?;
        } else {
            self.indicator.advance(snapshot, t)?;
            self.rel_indicator.advance(snapshot, t)?;
        }
        Ok(())
    }

    /// One training timestamp: forward, loss, backward, optimizer step,
    /// state carry, indicator absorption. Returns the loss when a step
    /// was taken (non-empty snapshot past t = 0).
    pub fn train_timestamp(
        &mut self,
        model: &mut LmsModel,
        seq: &SnapshotSequence,
        t: u32,
        adam: &mut Adam,
        rng: &mut ChaCha12Rng,
        epoch: usize,
    ) -> Result<Option<f64>> {
        debug_assert_eq!(t, self.cursor);
        let queries = seq.snapshots[t as usize].clone();
        let mut stepped = None;
        if t > 0 && !queries.is_empty() {
            let (ent_masks, rel_masks) = self.masks_for(model, &queries, t)?;
            let history = slice_history(seq, t, model.cfg.history_window);
            let mut tape = Tape::new();
            let out = {
                let mut mode = RunMode::train(model.cfg.dropout, rng);
                let input = StepInput {
                    history,
                    queries: &queries,
                    t,
                    ent_masks,
                    rel_masks,
                    e_state: self.e_state.as_ref(),
                    r_state: self.r_state.as_ref(),
                    alpha: model.cfg.alpha,
                };
                model.forward(&mut tape, &input, &mut mode)
            };
            let truth_e: Vec<usize> = queries.iter().map(|q| q.object as usize).collect();
            let truth_r: Vec<usize> = queries.iter().map(|q| q.relation as usize).collect();
            let loss = compute_loss(
                &mut tape,
                out.entity_scores.combined,
                &truth_e,
                out.relation_scores.combined,
                &truth_r,
                model.cfg.beta,
            );
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                let max_param = model
                    .store
                    .ids()
                    .map(|id| {
                        model
                            .store
                            .value(id)
                            .iter()
                            .fold(0.0f64, |m, &x| m.max(x.abs()))
                    })
                    .fold(0.0f64, f64::max);
                return Err(LmsError::NonFiniteLoss {
                    epoch,
                    t,
                    detail: format!("loss={loss_value}; max |param| = {max_param:.3e}"),
                });
            }
            let grads = tape.backward(loss);
            let param_grads = param_gradients(&model.store, &tape, &grads);
            adam.step(&mut model.store, &param_grads);
            crate::decoder::apply_bn_updates(&mut model.store, &tape, &out.bn_updates);
            self.e_state = Some(tape.value(out.e_final).clone());
            self.r_state = Some(tape.value(out.r_final).clone());
            stepped = Some(loss_value);
        }
        self.absorb(seq, t, false)?;
        self.cursor += 1;
        Ok(stepped)
    }

    /// Evaluation forward at one timestamp; returns the combined and raw
    /// entity score matrices (row order matches the snapshot's facts).
    /// Carries states and advances the indicator frontier.
    pub fn eval_timestamp_scores(
        &mut self,
        model: &LmsModel,
        seq: &SnapshotSequence,
        t: u32,
        alpha: f64,
        strict: bool,
    ) -> Result<Option<(Array2<f64>, Array2<f64>)>> {
        debug_assert_eq!(t, self.cursor);
        let queries = &seq.snapshots[t as usize];
        let mut scores = None;
        if t > 0 && !queries.is_empty() {
            let (ent_masks, rel_masks) = self.masks_for(model, queries, t)?;
            let history = slice_history(seq, t, model.cfg.history_window);
            let mut tape = Tape::new();
            let mut mode = RunMode::eval();
            let input = StepInput {
                history,
                queries,
                t,
                ent_masks,
                rel_masks,
                e_state: self.e_state.as_ref(),
                r_state: self.r_state.as_ref(),
                alpha,
            };
            let out = model.forward(&mut tape, &input, &mut mode);
            scores = Some((
                tape.value(out.entity_scores.combined).clone(),
                tape.value(out.entity_scores.raw).clone(),
            ));
            self.e_state = Some(tape.value(out.e_final).clone());
            self.r_state = Some(tape.value(out.r_final).clone());
        }
        self.absorb(seq, t, strict)?;
        self.cursor += 1;
        Ok(scores)
    }

    /// Evaluation step: ranks every query at `t` (when `collector` is
    /// given) in both raw and time-filtered modes.
    pub fn eval_timestamp(
        &mut self,
        model: &LmsModel,
        seq: &SnapshotSequence,
        t: u32,
        alpha: f64,
        strict: bool,
        collector: Option<&mut RankCollector>,
    ) -> Result<()> {
        let queries = seq.snapshots[t as usize].clone();
        let scores = self.eval_timestamp_scores(model, seq, t, alpha, strict)?;
        let (Some(collector), Some((combined, _raw))) = (collector, scores) else {
            return Ok(());
        };
        // Other true objects of the same (s, r) at this timestamp.
        let mut truth_map: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for q in &queries {
            truth_map
                .entry((q.subject, q.relation))
                .or_default()
                .insert(q.object as usize);
        }
        let empty = HashSet::new();
        for (i, q) in queries.iter().enumerate() {
            let row: Vec<f64> = combined.row(i).to_vec();
            let truth = q.object as usize;
            let raw_rank = rank_of(&row, truth, &empty);
            let mut removed = truth_map[&(q.subject, q.relation)].clone();
            removed.remove(&truth);
            let filtered_rank = rank_of(&row, truth, &removed);
            collector.push(t, raw_rank, filtered_rank);
        }
        Ok(())
    }
}

impl Default for EngineState {
    fn default() -> Self {
        Self::new()
    }
}

/// Builds the augmented full-history snapshot sequence shared by training
/// and evaluation.
pub fn full_sequence(splits: &DatasetSplits) -> Result<SnapshotSequence> {
    let augmented = augment_inverse(&splits.all_facts(), splits.num_base_relations);
    build_snapshots(
        &augmented,
        splits.num_timestamps,
        splits.num_entities,
        splits.num_base_relations,
    )
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: Config,
    num_entities: usize,
    num_base_relations: usize,
    num_timestamps: usize,
    best_epoch: usize,
    epochs_run: usize,
    best_valid_filtered_mrr: f64,
}

/// A trained model plus the carried states at the end of the (best-epoch)
/// training range.
pub struct TrainedModel {
    pub model: LmsModel,
    pub e_state: Option<Array2<f64>>,
    pub r_state: Option<Array2<f64>>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub best_valid: Option<MetricsReport>,
}

impl TrainedModel {
    /// Raw and time-filtered metrics over one split. Evaluation walks the
    /// timeline chronologically from the end of training (or from 0 for
    /// the training split), carrying states and absorbing ground truth of
    /// earlier timestamps; `strict` withholds the evaluated split's own
    /// facts from the indicator.
    pub fn evaluate(
        &self,
        splits: &DatasetSplits,
        split: SplitName,
        alpha_override: Option<f64>,
        strict: bool,
    ) -> Result<MetricsReport> {
        let seq = full_sequence(splits)?;
        let alpha = alpha_override.unwrap_or(self.model.cfg.alpha);
        let (Some(first), Some(last)) = (
            splits.first_timestamp(split),
            splits.last_timestamp(split),
        ) else {
            return Ok(RankCollector::default().finalize(&split.to_string(), 0.0));
        };
        let start = Instant::now();
        let mut engine = if split == SplitName::Train {
            EngineState::new()
        } else {
            let train_last = splits
                .last_timestamp(SplitName::Train)
                .ok_or_else(|| LmsError::Config("empty training split".to_string()))?;
            EngineState::resume(
                &seq,
                self.e_state.clone(),
                self.r_state.clone(),
                train_last + 1,
            )?
        };
        let mut collector = RankCollector::default();
        for t in engine.cursor()..=last {
            let scoring = t >= first;
            let strict_here = strict && scoring;
            let slot = if scoring { Some(&mut collector) } else { None };
            engine.eval_timestamp(&self.model, &seq, t, alpha, strict_here, slot)?;
        }
        Ok(collector.finalize(&split.to_string(), start.elapsed().as_secs_f64()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.store.save(&dir.join("params.ckpt"))?;
        if let (Some(e), Some(r)) = (&self.e_state, &self.r_state) {
            let mut states = ParamStore::new();
            states.add("state.entities", e.clone());
            states.add("state.relations", r.clone());
            states.save(&dir.join("state.ckpt"))?;
        }
        let meta = ModelMeta {
            config: self.model.cfg.clone(),
            num_entities: self.model.num_entities,
            num_base_relations: self.model.num_base_relations,
            num_timestamps: self.model.num_timestamps,
            best_epoch: self.best_epoch,
            epochs_run: self.epochs_run,
            best_valid_filtered_mrr: self.best_valid.as_ref().map_or(0.0, |r| r.filtered.mrr),
        };
        let file = std::fs::File::create(dir.join("model.json"))?;
        serde_json::to_writer_pretty(file, &meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_reader(std::fs::File::open(dir.join("model.json"))?)?;
        let mut rng = ChaCha12Rng::seed_from_u64(meta.config.seed);
        let mut model = LmsModel::new(
            meta.config,
            meta.num_entities,
            meta.num_base_relations,
            meta.num_timestamps,
            &mut rng,
        )?;
        let loaded = ParamStore::load(&dir.join("params.ckpt"))?;
        model.store.load_values(&loaded)?;
        let state_path = dir.join("state.ckpt");
        let (e_state, r_state) = if state_path.exists() {
            let states = ParamStore::load(&state_path)?;
            let e = states
                .by_name("state.entities")
                .map(|id| states.value(id).clone());
            let r = states
                .by_name("state.relations")
                .map(|id| states.value(id).clone());
            (e, r)
        } else {
            (None, None)
        };
        Ok(Self {
            model,
            e_state,
            r_state,
            best_epoch: meta.best_epoch,
            epochs_run: meta.epochs_run,
            epoch_losses: Vec::new(),
            best_valid: None,
        })
    }
}

/// Trains with validation-based early stopping (patience in epochs on the
/// time-filtered MRR) and returns the best-epoch model and states.
pub fn train(splits: &DatasetSplits, cfg: &Config, quiet: bool) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = LmsModel::new(
        cfg.clone(),
        splits.num_entities,
        splits.num_base_relations,
        splits.num_timestamps,
        &mut rng,
    )?;
    let seq = full_sequence(splits)?;
    let train_last = splits
        .last_timestamp(SplitName::Train)
        .ok_or_else(|| LmsError::Config("empty training split".to_string()))?;
    let valid_range = match (
        splits.first_timestamp(SplitName::Valid),
        splits.last_timestamp(SplitName::Valid),
    ) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };

    let mut adam = Adam::new(&model.store, cfg.learning_rate, cfg.grad_clip);
    let mut epoch_losses = Vec::new();
    let mut best: Option<(ParamStore, Option<Array2<f64>>, Option<Array2<f64>>, f64, usize, MetricsReport)> =
        None;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut engine = EngineState::new();
        let mut total = 0.0;
        let mut steps = 0usize;
        for t in 0..=train_last {
            if let Some(loss) = engine.train_timestamp(&mut model, &seq, t, &mut adam, &mut rng, epoch)? {
                total += loss;
                steps += 1;
            }
        }
        let epoch_loss = total / steps.max(1) as f64;
        epoch_losses.push(epoch_loss);

        // States at the end of the training range, before validation moves
        // the engine further.
        let (e_snap, r_snap) = (engine.states().0.cloned(), engine.states().1.cloned());

        let report = match valid_range {
            Some((first, last)) => {
                let start = Instant::now();
                let mut collector = RankCollector::default();
                for t in engine.cursor()..=last {
                    let slot = if t >= first { Some(&mut collector) } else { None };
                    engine.eval_timestamp(&model, &seq, t, cfg.alpha, cfg.strict_indicator, slot)?;
                }
                Some(collector.finalize("valid", start.elapsed().as_secs_f64()))
            }
            None => None,
        };
        let mrr = report.as_ref().map_or(f64::NAN, |r| r.filtered.mrr);
        if !quiet {
            eprintln!(
                "epoch {epoch:>3}: loss {epoch_loss:.4}{}",
                report
                    .as_ref()
                    .map_or(String::new(), |r| format!(", valid filtered MRR {:.4}", r.filtered.mrr))
            );
        }

        let improved = match (&best, report.as_ref()) {
            (_, None) => true, // no validation split: keep the last epoch
            (None, Some(_)) => true,
            (Some((_, _, _, best_mrr, _, _)), Some(_)) => mrr > best_mrr + 1e-9,
        };
        if improved {
            let fallback = RankCollector::default().finalize("valid", 0.0);
            best = Some((
                model.store.clone(),
                e_snap,
                r_snap,
                if mrr.is_nan() { 0.0 } else { mrr },
                epoch,
                report.clone().unwrap_or(fallback),
            ));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                if !quiet {
                    eprintln!("early stop after {} stale epochs", stale_epochs);
                }
                break;
            }
        }
    }

    let (store, e_state, r_state, _, best_epoch, best_valid) =
        best.expect("at least one epoch ran");
    model.store.load_values(&store)?;
    Ok(TrainedModel {
        model,
        e_state,
        r_state,
        best_epoch,
        epochs_run,
        epoch_losses,
        best_valid: Some(best_valid),
    })
}

/// Convenience driver: train, then evaluate valid and test with the run's
/// own settings.
pub struct ExperimentResult {
    pub trained: TrainedModel,
    pub valid: MetricsReport,
    pub test: MetricsReport,
}

pub fn run_experiment(splits: &DatasetSplits, cfg: &Config, quiet: bool) -> Result<ExperimentResult> {
    let trained = train(splits, cfg, quiet)?;
    let valid = trained.evaluate(splits, SplitName::Valid, None, cfg.strict_indicator)?;
    let test = trained.evaluate(splits, SplitName::Test, None, cfg.strict_indicator)?;
    Ok(ExperimentResult {
        trained,
        valid,
        test,
    })
}
