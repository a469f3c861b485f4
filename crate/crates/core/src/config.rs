//! Run configuration, dataset presets, and model variants.

use serde::{Deserialize, Serialize};

use crate::error::{LmsError, Result};

/// Model variants: the full model plus the component substitutions used
/// in ablation runs. Each variant differs from `Full` in exactly one
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Final entity representations come from union-graph aggregation over
    /// the initial embeddings; no recurrent evolution.
    NoEgl,
    /// Evolutional embeddings only; no union graph, no gate.
    NoUgl,
    /// Union graph over all window facts instead of query-specific ones.
    UglEntirety,
    /// Timestamp embeddings from the sine feature map only; the periodic
    /// graph refinement is skipped.
    NoTgl,
    /// Attention scores without the timestamp slot.
    NoTimeInUgl,
    /// Two-row decoder input (no timestamp row).
    NoTimeInDecoder,
    /// Gate replaced by the element-wise average.
    GateSum,
    /// Gate replaced by a learned linear map on the concatenation.
    GateLinear,
}

pub const VARIANT_NAMES: &[(&str, Variant)] = &[
    ("full", Variant::Full),
    ("-EGL", Variant::NoEgl),
    ("-UGL", Variant::NoUgl),
    ("+UGL(Entirety)", Variant::UglEntirety),
    ("-TGL", Variant::NoTgl),
    ("-T(UGL)", Variant::NoTimeInUgl),
    ("-T(Decoder)", Variant::NoTimeInDecoder),
    ("-GATE+Sum", Variant::GateSum),
    ("-GATE+Linear", Variant::GateLinear),
];

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        VARIANT_NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let valid: Vec<&str> = VARIANT_NAMES.iter().map(|(n, _)| *n).collect();
                LmsError::Config(format!(
                    "unknown variant `{name}`; valid names: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn name(&self) -> &'static str {
        VARIANT_NAMES
            .iter()
            .find(|(_, v)| v == self)
            .map(|(n, _)| *n)
            .unwrap()
    }
}

/// Full run configuration. Defaults follow the reference setup: d = 200,
/// 32-dim initial time features, dropout 0.2, layers (2, 2, 1), Adam at
/// 0.001, blend rates alpha = 0.3 / beta = 0.7.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub dim: usize,
    pub time_dim: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub dropout: f64,
    pub egl_layers: usize,
    pub ugl_layers: usize,
    pub tgl_layers: usize,
    /// History window length k (evolution steps and union-graph reach).
    pub history_window: usize,
    /// Blend weight of the historical decoder.
    pub alpha: f64,
    /// Loss weight of the entity task (relations get 1 - beta).
    pub beta: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early-stop patience in epochs on validation filtered MRR.
    pub patience: usize,
    pub seed: u64,
    /// Periodic offsets of the temporal graph, in time-index units.
    pub periods: Vec<u32>,
    pub variant: Variant,
    /// Global-norm gradient clipping, if any.
    pub grad_clip: Option<f64>,
    /// Use the literal unnormalized sum in the evolutional aggregator
    /// instead of in-degree mean normalization.
    pub sum_aggregation: bool,
    /// Apply the indicator by zeroing logits before the softmax instead of
    /// excluding the entries (fidelity switch for the masked decoder).
    pub indicator_zeroes_logits: bool,
    /// Do not absorb evaluation-split ground truth into the indicator.
    pub strict_indicator: bool,
    pub use_batch_norm: bool,
    /// Reserved: static-graph constraint on initial embeddings. Accepted
    /// and ignored; no such module is implemented.
    pub static_graph: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dim: 200,
            time_dim: 32,
            channels: 50,
            kernel_width: 3,
            dropout: 0.2,
            egl_layers: 2,
            ugl_layers: 2,
            tgl_layers: 1,
            history_window: 25,
            alpha: 0.3,
            beta: 0.7,
            learning_rate: 0.001,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            periods: vec![3, 7, 14, 30],
            variant: Variant::Full,
            grad_clip: Some(1.0),
            sum_aggregation: false,
            indicator_zeroes_logits: false,
            strict_indicator: false,
            use_batch_norm: true,
            static_graph: false,
        }
    }
}

/// Per-dataset presets: window length and time granularity (raw-time units
/// per index), plus sub-daily periods for the 15-minute corpus.
#[derive(Debug, Clone, Copy)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub history_window: usize,
    pub granularity: u64,
    pub periods: &'static [u32],
}

pub const DATASET_PRESETS: &[DatasetPreset] = &[
    DatasetPreset {
        name: "icews14s",
        history_window: 25,
        granularity: 24,
        periods: &[3, 7, 14, 30],
    },
    DatasetPreset {
        name: "icews18",
        history_window: 11,
        granularity: 24,
        periods: &[3, 7, 14, 30],
    },
    DatasetPreset {
        name: "icews05-15",
        history_window: 25,
        granularity: 24,
        periods: &[3, 7, 14, 30],
    },
    DatasetPreset {
        name: "gdelt",
        history_window: 45,
        granularity: 15,
        periods: &[4, 48, 96, 672],
    },
    DatasetPreset {
        name: "icews14",
        history_window: 17,
        granularity: 24,
        periods: &[3, 7, 14, 30],
    },
];

pub fn preset_for(name: &str) -> Option<&'static DatasetPreset> {
    let lower = name.to_lowercase();
    DATASET_PRESETS.iter().find(|p| p.name == lower)
}

impl Config {
    pub fn with_preset(mut self, preset: &DatasetPreset) -> Self {
        self.history_window = preset.history_window;
        self.periods = preset.periods.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LmsError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LmsError::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.dim == 0 || self.time_dim == 0 || self.channels == 0 {
            return Err(LmsError::Config("dimensions must be positive".to_string()));
        }
        if self.kernel_width % 2 == 0 {
            return Err(LmsError::Config(
                "kernel width must be odd for same padding".to_string(),
            ));
        }
        if self.history_window == 0 {
            return Err(LmsError::Config(
                "history window must be at least 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LmsError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.periods.is_empty() || self.periods.iter().any(|&p| p == 0) {
            return Err(LmsError::Config(
                "period offsets must be positive".to_string(),
            ));
        }
        Ok(())
    }
}
