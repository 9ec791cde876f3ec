//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

struct Tracker {
    worst: f64,
    at: (usize, usize),
    checked: usize,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            worst: 0.0,
            at: (0, 0),
            checked: 0,
        }
    }

    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.at = (tensor, coord);
        }
    }

    fn finish(self) -> GradCheckReport {
        GradCheckReport {
            max_relative_error: self.worst,
            worst: self.at,
            coords_checked: self.checked,
        }
    }
}

/// Compares the tape gradient of `f` w.r.t. each of `inputs` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tracker = Tracker::new();
    let mut values = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for c in coords(input.numel(), &opts, &mut rng) {
            let orig = input.data()[c];
            values[ti].data_mut()[c] = orig + opts.step;
            let plus = eval(&values)?;
            values[ti].data_mut()[c] = orig - opts.step;
            let minus = eval(&values)?;
            values[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(ti, c, analytic[ti].data()[c], numeric);
        }
    }
    Ok(tracker.finish())
}

/// Same check, against every parameter of `store`. Gradients already held by the
/// store are left untouched.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &scratch)?;
    tape.backward(out, &mut scratch)?;
    let analytic: Vec<Tensor> = scratch.iter().map(|p| p.gradient.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tracker = Tracker::new();
    let ids: Vec<_> = scratch.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let len = scratch.get(id).tensor.numel();
        for c in coords(len, &opts, &mut rng) {
            let orig = scratch.get(id).tensor.data()[c];
            let mut probe = |value: f64| -> Result<f64> {
                scratch.get_mut(id).tensor.data_mut()[c] = value;
                let mut tape = Tape::new();
                let out = f(&mut tape, &scratch)?;
                tape.value(out).item()
            };
            let plus = probe(orig + opts.step)?;
            let minus = probe(orig - opts.step)?;
            scratch.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(pi, c, analytic[pi].data()[c], numeric);
        }
    }
    Ok(tracker.finish())
}
