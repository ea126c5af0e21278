//! Central finite-difference audit of the analytic model gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::batch_loss_with_branches;
use super::{loss_and_grads, NowcastModel};
use crate::error::Result;
use crate::pipeline::STEPS;
use crate::tensor::BatchNormMode;

/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-8;
pub const MAX_DRAWS_PER_ENTRY: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// Candidates dropped because `θ ± h` crossed a ReLU or max-pool kink.
    pub straddled: usize,
    pub max_relative_error: f64,
    /// `(entry, analytic, numeric)` at the worst entry.
    pub worst: (usize, f64, f64),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients with `(f(θ+h) − f(θ−h)) / 2h` for up to
/// `per_group` entries of every parameter group: the largest-magnitude
/// gradient entry plus entries drawn with `seed`.
///
/// The difference quotient only estimates the derivative when `θ − h`, `θ`
/// and `θ + h` share one smooth piece, so a candidate whose branch signature
/// changes is counted in `straddled` and replaced by another draw, at most
/// `MAX_DRAWS_PER_ENTRY × per_group` candidates per group.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &NowcastModel,
    blocks: &[&[f32]],
    samples: &[[usize; STEPS]],
    labels: &[usize],
    mode: BatchNormMode,
    step: f64,
    per_group: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let (_, grads, _) = loss_and_grads(model, blocks, samples, labels, mode)?;
    let (_, base) = batch_loss_with_branches(model, blocks, samples, labels, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params.len());
    for (gi, g) in grads.iter().enumerate() {
        let n = g.len();
        let want = per_group.min(n);
        let argmax = (0..n)
            .max_by(|&a, &b| g.values()[a].abs().total_cmp(&g.values()[b].abs()))
            .unwrap_or(0);
        let mut tried = vec![argmax];
        let mut check = GroupCheck {
            name: model.params[gi].name.clone(),
            checked: 0,
            straddled: 0,
            max_relative_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        let mut next = Some(argmax);
        while let Some(e) = next {
            let original = model.params[gi].value.values()[e];
            let mut eval = |delta: f64| -> Result<(f64, Vec<u64>)> {
                probe.params[gi].value.values_mut()[e] = original + delta;
                batch_loss_with_branches(&probe, blocks, samples, labels, mode)
            };
            let (plus, sig_plus) = eval(step)?;
            let (minus, sig_minus) = eval(-step)?;
            probe.params[gi].value.values_mut()[e] = original;
            if sig_plus != base || sig_minus != base {
                check.straddled += 1;
            } else {
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = g.values()[e];
                let err = relative_error(analytic, numeric);
                if check.checked == 0 || err >= check.max_relative_error {
                    check.max_relative_error = err;
                    check.worst = (e, analytic, numeric);
                }
                check.checked += 1;
            }
            next = None;
            if check.checked < want && tried.len() < (MAX_DRAWS_PER_ENTRY * want).min(n) {
                loop {
                    let c = rng.random_range(0..n);
                    if !tried.contains(&c) {
                        tried.push(c);
                        next = Some(c);
                        break;
                    }
                }
            }
        }
        out.push(check);
    }
    Ok(out)
}
