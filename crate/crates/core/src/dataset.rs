//! Event quadruple ingestion: tab-separated fact files, reciprocal relation
//! augmentation, per-timestamp snapshot grouping, and history slicing.
//!
//! Expected layout of a dataset directory:
//!
//! ```text
//! train.txt / valid.txt / test.txt   subject \t relation \t object \t raw-time [\t ...]
//! stat.txt                           |E| \t |R| [\t |T|]          (optional)
//! entity2id.txt / relation2id.txt    name \t id                   (optional)
//! ```
//!
//! Raw times are divided by the configured granularity and densified to
//! consecutive indices starting at 0, shared across the three splits.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use crate::error::{LmsError, Result};

/// One event fact. Relation ids at or above the base count denote inverses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    pub timestamp: u32,
}

impl Quadruple {
    pub fn new(subject: u32, relation: u32, object: u32, timestamp: u32) -> Self {
        Self {
            subject,
            relation,
            object,
            timestamp,
        }
    }

    /// The reciprocal fact `(o, r + |R|, s, t)`; applying it twice (with
    /// relation arithmetic mod `2|R|`) returns the original fact.
    pub fn inverse(&self, num_base_relations: u32) -> Self {
        Self {
            subject: self.object,
            relation: (self.relation + num_base_relations) % (2 * num_base_relations),
            object: self.subject,
            timestamp: self.timestamp,
        }
    }
}

/// Chronologically ordered edge-sets, one per time index.
#[derive(Debug, Clone)]
pub struct SnapshotSequence {
    pub snapshots: Vec<Vec<Quadruple>>,
    pub num_entities: usize,
    pub num_base_relations: usize,
}

impl SnapshotSequence {
    pub fn num_timestamps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn total_edges(&self) -> usize {
        self.snapshots.iter().map(Vec::len).sum()
    }
}

/// Train/valid/test quadruples plus vocabulary metadata.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub num_timestamps: usize,
    pub granularity: u64,
    pub entity_names: Option<Vec<String>>,
    pub relation_names: Option<Vec<String>>,
}

impl DatasetSplits {
    pub fn split(&self, name: SplitName) -> &[Quadruple] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// All splits concatenated (train, then valid, then test).
    pub fn all_facts(&self) -> Vec<Quadruple> {
        let mut all = self.train.clone();
        all.extend_from_slice(&self.valid);
        all.extend_from_slice(&self.test);
        all
    }

    /// Smallest time index present in a split, if non-empty.
    pub fn first_timestamp(&self, name: SplitName) -> Option<u32> {
        self.split(name).iter().map(|q| q.timestamp).min()
    }

    pub fn last_timestamp(&self, name: SplitName) -> Option<u32> {
        self.split(name).iter().map(|q| q.timestamp).max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitName::Train => write!(f, "train"),
            SplitName::Valid => write!(f, "valid"),
            SplitName::Test => write!(f, "test"),
        }
    }
}

struct RawFact {
    subject: u32,
    relation: u32,
    object: u32,
    raw_time: u64,
}

fn parse_file(path: &Path) -> Result<Vec<RawFact>> {
    let file = std::fs::File::open(path).map_err(|source| LmsError::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut facts = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(LmsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected at least 4 columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| LmsError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("{what} `{s}` is not a nonnegative integer"),
            })
        };
        facts.push(RawFact {
            subject: parse(fields[0], "subject")? as u32,
            relation: parse(fields[1], "relation")? as u32,
            object: parse(fields[2], "object")? as u32,
            raw_time: parse(fields[3], "raw time")?,
        });
    }
    Ok(facts)
}

fn read_stat(path: &Path) -> Result<Option<(usize, usize, Option<usize>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|source| LmsError::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(LmsError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "stat file needs at least |E| and |R|".to_string(),
        });
    }
    let num = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| LmsError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("`{s}` is not a count"),
        })
    };
    let e = num(fields[0])?;
    let r = num(fields[1])?;
    let t = if fields.len() > 2 {
        Some(num(fields[2])?)
    } else {
        None
    };
    Ok(Some((e, r, t)))
}

fn read_vocab(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|source| LmsError::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.rsplitn(2, ['\t', ' ']);
        let id_str = it.next().unwrap_or_default();
        let name = it.next().unwrap_or_default().trim().to_string();
        let id: usize = id_str.parse().map_err(|_| LmsError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("`{id_str}` is not an id"),
        })?;
        pairs.push((id, name));
    }
    pairs.sort();
    Ok(Some(pairs.into_iter().map(|(_, n)| n).collect()))
}

/// Loads the three splits from `dir`, dividing raw times by `granularity`
/// and densifying the resulting indices to consecutive integers from 0.
pub fn parse_dataset(dir: &Path, granularity: u64) -> Result<DatasetSplits> {
    if granularity == 0 {
        return Err(LmsError::Config("granularity must be positive".to_string()));
    }
    let train_raw = parse_file(&dir.join("train.txt"))?;
    let valid_raw = parse_file(&dir.join("valid.txt"))?;
    let test_raw = parse_file(&dir.join("test.txt"))?;
    let stat = read_stat(&dir.join("stat.txt"))?;
    let entity_names = read_vocab(&dir.join("entity2id.txt"))?;
    let relation_names = read_vocab(&dir.join("relation2id.txt"))?;

    // Shared dense time map across splits.
    let mut indices: BTreeSet<u64> = BTreeSet::new();
    for fact in train_raw.iter().chain(&valid_raw).chain(&test_raw) {
        indices.insert(fact.raw_time / granularity);
    }
    let time_map: HashMap<u64, u32> = indices
        .iter()
        .enumerate()
        .map(|(rank, &idx)| (idx, rank as u32))
        .collect();

    let (num_entities, num_base_relations) = {
        let declared = stat.map(|(e, r, _)| (e, r));
        match (declared, &entity_names, &relation_names) {
            (Some((e, r)), _, _) => (e, r),
            (None, Some(en), Some(rn)) => (en.len(), rn.len()),
            _ => {
                let mut max_e = 0;
                let mut max_r = 0;
                for f in train_raw.iter().chain(&valid_raw).chain(&test_raw) {
                    max_e = max_e.max(f.subject.max(f.object) as usize + 1);
                    max_r = max_r.max(f.relation as usize + 1);
                }
                (max_e, max_r)
            }
        }
    };

    let convert = |raw: Vec<RawFact>, which: &str| -> Result<Vec<Quadruple>> {
        raw.into_iter()
            .map(|f| {
                if f.subject as usize >= num_entities || f.object as usize >= num_entities {
                    return Err(LmsError::Vocab(format!(
                        "{which}: entity id {} out of range (|E| = {num_entities})",
                        f.subject.max(f.object)
                    )));
                }
                if f.relation as usize >= num_base_relations {
                    return Err(LmsError::Vocab(format!(
                        "{which}: relation id {} out of range (|R| = {num_base_relations})",
                        f.relation
                    )));
                }
                Ok(Quadruple::new(
                    f.subject,
                    f.relation,
                    f.object,
                    time_map[&(f.raw_time / granularity)],
                ))
            })
            .collect()
    };

    let train = convert(train_raw, "train")?;
    let valid = convert(valid_raw, "valid")?;
    let test = convert(test_raw, "test")?;

    let derived_t = indices.len();
    let num_timestamps = match stat.and_then(|(_, _, t)| t) {
        Some(t) if t >= derived_t => t,
        _ => derived_t,
    };

    // Splits must be timestamp-contiguous: train < valid < test.
    let max_t = |s: &[Quadruple]| s.iter().map(|q| q.timestamp).max();
    let min_t = |s: &[Quadruple]| s.iter().map(|q| q.timestamp).min();
    if let (Some(a), Some(b)) = (max_t(&train), min_t(&valid)) {
        if a >= b {
            return Err(LmsError::Vocab(format!(
                "train/valid timestamps overlap: train max {a}, valid min {b}"
            )));
        }
    }
    if let (Some(a), Some(b)) = (max_t(&valid), min_t(&test)) {
        if a >= b {
            return Err(LmsError::Vocab(format!(
                "valid/test timestamps overlap: valid max {a}, test min {b}"
            )));
        }
    }

    Ok(DatasetSplits {
        train,
        valid,
        test,
        num_entities,
        num_base_relations,
        num_timestamps,
        granularity,
        entity_names,
        relation_names,
    })
}

/// Adds the reciprocal fact for every input fact; output order is all
/// originals followed by all inverses.
pub fn augment_inverse(facts: &[Quadruple], num_base_relations: usize) -> Vec<Quadruple> {
    let nr = num_base_relations as u32;
    let mut out = Vec::with_capacity(facts.len() * 2);
    out.extend_from_slice(facts);
    out.extend(facts.iter().map(|q| {
        debug_assert!(q.relation < nr, "augmenting an already augmented fact");
        Quadruple::new(q.object, q.relation + nr, q.subject, q.timestamp)
    }));
    out
}

/// Groups facts into one edge-set per time index. Empty snapshots are kept
/// so that time arithmetic stays exact.
pub fn build_snapshots(
    facts: &[Quadruple],
    num_timestamps: usize,
    num_entities: usize,
    num_base_relations: usize,
) -> Result<SnapshotSequence> {
    let mut snapshots = vec![Vec::new(); num_timestamps];
    for q in facts {
        if q.timestamp as usize >= num_timestamps {
            return Err(LmsError::TimeRange {
                t: q.timestamp,
                limit: num_timestamps,
            });
        }
        snapshots[q.timestamp as usize].push(*q);
    }
    Ok(SnapshotSequence {
        snapshots,
        num_entities,
        num_base_relations,
    })
}

/// History window for a prediction at time `t`: snapshots
/// `max(0, t-k) .. t-1` in chronological order. Empty when `t = 0`.
pub fn slice_history(seq: &SnapshotSequence, t: u32, k: usize) -> &[Vec<Quadruple>] {
    assert!(k >= 1, "window length must be at least 1");
    let t = t as usize;
    let start = t.saturating_sub(k);
    &seq.snapshots[start..t]
}

/// Per-split counts for the preprocess report.
pub fn summary(splits: &DatasetSplits) -> Vec<(String, String)> {
    vec![
        ("num_entities".into(), splits.num_entities.to_string()),
        (
            "num_relations".into(),
            splits.num_base_relations.to_string(),
        ),
        ("num_timestamps".into(), splits.num_timestamps.to_string()),
        ("granularity".into(), splits.granularity.to_string()),
        ("train_facts".into(), splits.train.len().to_string()),
        ("valid_facts".into(), splits.valid.len().to_string()),
        ("test_facts".into(), splits.test.len().to_string()),
    ]
}

/// Writes a split back out in the tab-separated input format.
pub fn write_split(path: &PathBuf, facts: &[Quadruple], granularity: u64) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in facts {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            q.subject,
            q.relation,
            q.object,
            q.timestamp as u64 * granularity
        )?;
    }
    Ok(())
}
