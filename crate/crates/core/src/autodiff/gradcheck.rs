use super::{Gradients, ParamStore, Tape, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Largest relative error per parameter, in registration order.
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
    /// Tenfold step reductions made because a step straddled a kink.
    pub kink_refinements: usize,
}

/// Largest number of tenfold step reductions tried at a kink.
pub const MAX_REFINEMENTS: usize = 3;

/// Central estimates at steps `h` and `h / 10` further apart than this,
/// relative to their size, mark a step that straddles a point of
/// non-differentiability such as a tie inside a max.
pub const KINK_TOLERANCE: f64 = 1e-5;

/// Size below which two estimates are compared absolutely when looking for
/// kinks, so round-off at the finer step is not mistaken for one.
pub const KINK_FLOOR: f64 = 1e-3;

fn straddles_kink(coarse: f64, fine: f64) -> bool {
    (coarse - fine).abs() > KINK_TOLERANCE * (coarse.abs() + fine.abs()).max(KINK_FLOOR)
}

/// Denominator floor of [`relative_error`]. Central differences carry
/// round-off near `1e-16 / eps` even when the true gradient is exactly zero,
/// so tiny pairs are compared on this absolute scale.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Relative error used by the check: `|a - n| / max(ERROR_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(ERROR_FLOOR)
}

fn evaluate<F>(
    store: &ParamStore,
    training: bool,
    loss: &mut F,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>), TensorError>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var, TensorError>,
{
    let mut tape = if training {
        Tape::training(store, 0)
    } else {
        Tape::new(store)
    };
    let l = loss(&mut tape)?;
    let v = tape.scalar(l);
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    let grads = if with_grad {
        Some(tape.backward(l)?)
    } else {
        None
    };
    Ok((v, grads))
}

/// Checks every entry of every parameter in `store`.
///
/// `loss` builds the scalar objective on the tape it is given and must be
/// deterministic. Training tapes are always seeded identically, so dropout
/// masks repeat across evaluations. Each estimate is compared with the one
/// at a tenfold smaller step; while they disagree the smaller step is taken,
/// up to [`MAX_REFINEMENTS`] times.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    eps: f64,
    training: bool,
    mut loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var, TensorError>,
{
    let (_, grads) = evaluate(store, training, &mut loss, true)?;
    let grads = grads.expect("gradients requested");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(store.len()),
        entries_checked: 0,
        kink_refinements: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let mut worst_here = 0.0_f64;
        for k in 0..n {
            let original = store.value(id).data()[k];
            let mut central = |step: f64| -> Result<f64, TensorError> {
                store.value_mut(id).data_mut()[k] = original + step;
                let plus = evaluate(store, training, &mut loss, false);
                store.value_mut(id).data_mut()[k] = original - step;
                let minus = evaluate(store, training, &mut loss, false);
                store.value_mut(id).data_mut()[k] = original;
                Ok((plus?.0 - minus?.0) / (2.0 * step))
            };
            let mut step = eps;
            let mut numeric = central(step)?;
            for _ in 0..MAX_REFINEMENTS {
                let finer = central(step / 10.0)?;
                if !straddles_kink(numeric, finer) {
                    break;
                }
                report.kink_refinements += 1;
                step /= 10.0;
                numeric = finer;
            }
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric);
            if err > worst_here {
                worst_here = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
            report.entries_checked += 1;
        }
        report.per_param.push((store.get(id).name.clone(), worst_here));
    }
    Ok(report)
}
