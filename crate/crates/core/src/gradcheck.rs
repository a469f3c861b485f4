//! Finite-difference verification of analytic gradients.
//!
//! The builder closure constructs a fresh tape and scalar loss from the
//! current store values; it must be deterministic (no dropout, fixed
//! activation slopes) for central differences to be meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::params::{param_gradients, ParamStore};
use crate::tensor::{NodeId, Tape};

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_entry: (usize, usize),
    pub entries_checked: usize,
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares analytic gradients against central finite differences for a
/// sample of entries of every parameter. `samples_per_param` bounds the
/// number of probed entries per tensor (all entries when the tensor is
/// smaller).
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut build: F,
    step: f64,
    samples_per_param: usize,
    seed: u64,
) -> CheckReport
where
    F: FnMut(&ParamStore) -> (Tape, NodeId),
{
    let (tape, loss) = build(store);
    let grads = tape.backward(loss);
    let analytic = param_gradients(store, &tape, &grads);
    drop(tape);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_entry: (0, 0),
        entries_checked: 0,
    };

    for id in store.ids().collect::<Vec<_>>() {
        let (rows, cols) = store.value(id).dim();
        let total = rows * cols;
        let coords: Vec<(usize, usize)> = if total <= samples_per_param {
            (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .collect()
        } else {
            (0..samples_per_param)
                .map(|_| (rng.gen_range(0..rows), rng.gen_range(0..cols)))
                .collect()
        };
        for (r, c) in coords {
            let original = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = original + step;
            let (tape_p, loss_p) = build(store);
            let plus = tape_p.scalar(loss_p);
            drop(tape_p);
            store.value_mut(id)[[r, c]] = original - step;
            let (tape_m, loss_m) = build(store);
            let minus = tape_m.scalar(loss_m);
            drop(tape_m);
            store.value_mut(id)[[r, c]] = original;

            let fd = (plus - minus) / (2.0 * step);
            let an = analytic[id.0].as_ref().map_or(0.0, |g| g[[r, c]]);
            let err = relative_error(fd, an);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_entry = (r, c);
            }
        }
    }
    report
}
