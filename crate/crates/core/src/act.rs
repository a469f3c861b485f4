//! Shared activation and regularization helpers built on the tape.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::{NodeId, Tape};

/// Negative-side slope bounds of the randomized leaky unit.
pub const RRELU_LOWER: f64 = 0.125;
pub const RRELU_UPPER: f64 = 1.0 / 3.0;

/// Slope of the attention-score activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How nonlinearities and stochastic pieces behave in one forward pass.
pub struct RunMode<'r> {
    /// Sample per-element negative slopes (training); otherwise the mean
    /// slope is used everywhere.
    pub sample_activations: bool,
    /// Dropout rate; 0 disables.
    pub dropout: f64,
    /// Normalize with batch statistics instead of running statistics.
    pub bn_train: bool,
    pub rng: Option<&'r mut ChaCha12Rng>,
}

impl<'r> RunMode<'r> {
    pub fn train(dropout: f64, rng: &'r mut ChaCha12Rng) -> Self {
        Self {
            sample_activations: true,
            dropout,
            bn_train: true,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self {
            sample_activations: false,
            dropout: 0.0,
            bn_train: false,
            rng: None,
        }
    }

    /// Deterministic but fully differentiable: batch-stat normalization,
    /// mean slopes, no dropout. Used by the finite-difference harness.
    pub fn check() -> Self {
        Self {
            sample_activations: false,
            dropout: 0.0,
            bn_train: true,
            rng: None,
        }
    }
}

/// Pluggable aggregator nonlinearity; `Identity` exists for hand-computable
/// test fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Rrelu,
    Identity,
}

pub fn apply_activation(
    tape: &mut Tape,
    x: NodeId,
    act: Activation,
    mode: &mut RunMode,
) -> NodeId {
    match act {
        Activation::Identity => x,
        Activation::Rrelu => {
            let dim = tape.value(x).dim();
            let slopes = if mode.sample_activations {
                let rng = mode
                    .rng
                    .as_mut()
                    .expect("sampled activations need an rng");
                Array2::from_shape_fn(dim, |_| rng.gen_range(RRELU_LOWER..RRELU_UPPER))
            } else {
                Array2::from_elem(dim, (RRELU_LOWER + RRELU_UPPER) / 2.0)
            };
            tape.rrelu(x, slopes)
        }
    }
}

/// Inverted dropout; identity when the rate is zero or no rng is present.
pub fn dropout(tape: &mut Tape, x: NodeId, mode: &mut RunMode) -> NodeId {
    if mode.dropout <= 0.0 {
        return x;
    }
    let Some(rng) = mode.rng.as_mut() else {
        return x;
    };
    let keep = 1.0 - mode.dropout;
    let dim = tape.value(x).dim();
    let mask = Array2::from_shape_fn(dim, |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}
