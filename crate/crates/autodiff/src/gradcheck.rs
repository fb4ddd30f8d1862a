//! Central finite-difference checks of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per parameter; all of them when the parameter is
    /// smaller than this.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of `loss_fn` against central differences over
/// a sample of coordinates of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let original = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = original + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = original - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = store.get(id).grad.data()[c];
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), c));
            }
        }
    }
    Ok(report)
}
