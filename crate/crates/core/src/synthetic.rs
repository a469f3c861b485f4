//! Synthetic periodic event stream used by the verification harness and
//! the overfit / ablation-direction experiments.
//!
//! Three fact families over 20 entities, 8 relations and 112 daily
//! timestamps:
//!
//! * weekly facts — relations 0..6 each emit one fact per day whose object
//!   depends only on the day of the week. The symbol sequence is chosen so
//!   that two days of the week share an identical preceding-window context
//!   (for windows up to 4 days) but carry different objects: content alone
//!   cannot tell those days apart, only periodic time semantics can;
//! * marker/echo pairs — relation 6 announces at `t` the object that
//!   relation 7 will carry at `t + 3`; the announced object cycles with
//!   period 5 (deliberately absent from the period table), so the echo is
//!   easiest to recover structurally from the recent window;
//! * noise — uniformly random facts injected into training timestamps
//!   only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::{DatasetSplits, Quadruple};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub num_entities: u32,
    pub num_relations: u32,
    pub num_timestamps: u32,
    pub train_end: u32,
    pub valid_end: u32,
    /// Random facts per training timestamp.
    pub noise_per_timestamp: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_entities: 20,
            num_relations: 8,
            num_timestamps: 112,
            train_end: 80,
            valid_end: 96,
            noise_per_timestamp: 2,
            seed: 0,
        }
    }
}

const NUM_WEEKLY_RELATIONS: u32 = 6;
const MARKER_RELATION: u32 = 6;
const ECHO_RELATION: u32 = 7;
const MARKER_SUBJECT: u32 = 6;
const ECHO_LAG: u32 = 3;
const CYCLE: [u32; 5] = [10, 17, 13, 8, 15];

/// Weekly symbol per day of the week. Days 2 and 4 see the same preceding
/// 4-day context (0,1,0,1) but emit different symbols, so short windows
/// cannot resolve them.
const WEEKLY_SYMBOLS: [u32; 7] = [0, 1, 0, 1, 2, 0, 1];

/// Object of the weekly fact of relation `r` on day-of-week `w`.
fn weekly_object(r: u32, w: u32) -> u32 {
    8 + r + WEEKLY_SYMBOLS[(w % 7) as usize]
}

/// Object carried by the echo relation at time `t`.
fn echo_object(t: u32) -> u32 {
    CYCLE[(t % 5) as usize]
}

/// All pattern facts at one timestamp (noise excluded).
pub fn pattern_facts(t: u32) -> Vec<Quadruple> {
    let mut facts = Vec::with_capacity(NUM_WEEKLY_RELATIONS as usize + 2);
    let w = t % 7;
    for r in 0..NUM_WEEKLY_RELATIONS {
        facts.push(Quadruple::new(r, r, weekly_object(r, w), t));
    }
    // Marker at t announces the echo object of t + ECHO_LAG.
    facts.push(Quadruple::new(
        MARKER_SUBJECT,
        MARKER_RELATION,
        echo_object(t + ECHO_LAG),
        t,
    ));
    facts.push(Quadruple::new(MARKER_SUBJECT, ECHO_RELATION, echo_object(t), t));
    facts
}

/// Generates the full dataset with timestamp-contiguous splits.
pub fn generate(cfg: &SyntheticConfig) -> DatasetSplits {
    assert!(cfg.train_end < cfg.valid_end && cfg.valid_end < cfg.num_timestamps);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for t in 0..cfg.num_timestamps {
        let mut facts = pattern_facts(t);
        if t < cfg.train_end {
            for _ in 0..cfg.noise_per_timestamp {
                facts.push(Quadruple::new(
                    rng.gen_range(0..cfg.num_entities),
                    rng.gen_range(0..cfg.num_relations),
                    rng.gen_range(0..cfg.num_entities),
                    t,
                ));
            }
        }
        if t < cfg.train_end {
            train.extend(facts);
        } else if t < cfg.valid_end {
            valid.extend(facts);
        } else {
            test.extend(facts);
        }
    }
    DatasetSplits {
        train,
        valid,
        test,
        num_entities: cfg.num_entities as usize,
        num_base_relations: cfg.num_relations as usize,
        num_timestamps: cfg.num_timestamps as usize,
        granularity: 1,
        entity_names: None,
        relation_names: None,
    }
}

/// Writes the dataset to `train.txt` / `valid.txt` / `test.txt` /
/// `stat.txt` in the standard tab-separated layout.
pub fn write_files(splits: &DatasetSplits, dir: &std::path::Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::dataset::write_split(&dir.join("train.txt"), &splits.train, splits.granularity)?;
    crate::dataset::write_split(&dir.join("valid.txt"), &splits.valid, splits.granularity)?;
    crate::dataset::write_split(&dir.join("test.txt"), &splits.test, splits.granularity)?;
    std::fs::write(
        dir.join("stat.txt"),
        format!(
            "{}\t{}\t{}\n",
            splits.num_entities, splits.num_base_relations, splits.num_timestamps
        ),
    )?;
    Ok(())
}
