//! Whole-model gradient verification against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{EncoderConfig, EncoderModel, ModelInput};
use crate::error::{Error, Result};
use crate::mode::Mode;
use crate::tensor::{relative_error, BoundParams, Graph, ParamSet, Var};

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<ParamGradError>,
    /// Smallest distance of a ReLU/abs/min argument from its kink at the
    /// checked point.
    pub kink_margin: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamGradError> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the backward pass of `loss_fn` with central differences over
/// every scalar of `params`.
///
/// `loss_fn` must be deterministic and must return a scalar.
pub fn check_gradients<F>(params: &ParamSet, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bound)?;
    let kink_margin = g.kink_margin();
    g.backward(loss)?;
    let analytic = bound.grads(&g)?;
    drop(g);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let loss = loss_fn(&mut g, &bound)?;
        g.value(loss).item()
    };

    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut entries = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(&analytic) {
        let n = grad.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            let orig = work.get(name).expect("name from set").data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(ParamGradError {
            name: name.clone(),
            count: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        entries,
        kink_margin,
        step: h,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Seed of the accepted sample.
    pub seed: u64,
    /// Samples rejected for sitting too close to a kink.
    pub rejected: usize,
}

/// Gradient check of a whole encoder at a generic point.
///
/// Parameters start from the model's own initialisation; tensors that start
/// constant (biases, gains) are jittered so no gradient vanishes by
/// symmetry. Inputs are random with `n_tokens` words, and the dropout masks
/// are fixed by the seed. A sample is accepted once every ReLU/abs/min
/// argument is at least `min_kink_margin` away from its kink; up to
/// `max_attempts` seeds starting at `seed` are tried.
pub fn check_model(
    config: &EncoderConfig,
    seed: u64,
    n_tokens: usize,
    h: f64,
    min_kink_margin: f64,
    max_attempts: usize,
) -> Result<ModelGradCheck> {
    for attempt in 0..max_attempts {
        let s = seed.wrapping_add(attempt as u64);
        let mut model = EncoderModel::new(config.clone(), s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.set_stream(7);
        for (_, t) in model.params_mut().iter_mut() {
            let d = t.data();
            if d.iter().all(|x| *x == d[0]) {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        let cfg = model.config();
        let input = ModelInput {
            tokens: (0..n_tokens).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect(),
            acoustic: (0..n_tokens * cfg.d_a).map(|_| rng.random_range(-1.0..1.0)).collect(),
            visual: (0..n_tokens * cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mode = Mode::Train { seed: s };
        // Probe the kink margin with one cheap forward pass first.
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, true);
        model.forward(&mut g, &b, &input, mode)?;
        if g.kink_margin() < min_kink_margin {
            continue;
        }
        drop(g);
        let report = check_gradients(model.params(), h, |g, b| {
            Ok(model.forward(g, b, &input, mode)?.prediction)
        })?;
        return Ok(ModelGradCheck {
            report,
            seed: s,
            rejected: attempt,
        });
    }
    Err(Error::Contract(format!(
        "no sample with kink margin >= {min_kink_margin} in {max_attempts} attempts"
    )))
}
