//! Multimodal adaptation gate.
//!
//! For each word the gate sees a lexical vector `Z`, an acoustic vector `A`
//! and a visual vector `V`, and produces a shifted lexical vector:
//!
//! ```text
//! g_v = R([Z;V]·W_gv + b_v)          g_a = R([Z;A]·W_ga + b_a)
//! H   = g_a ⊙ (A·W_a) + g_v ⊙ (V·W_v) + b_H
//! α   = min(β·‖Z‖ / (‖H‖ + ε), 1)
//! Z̄   = Dropout(LayerNorm(Z + α·H))
//! ```
//!
//! Vectors are rows, so every weight maps `input_dim × d_z`. `b_v` and `b_a`
//! are scalars broadcast over all `d_z` gate coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::{Dropout, Mode};
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Relu,
    Sigmoid,
}

/// Non-trainable settings of one gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagHyper {
    pub beta: f64,
    pub eps_guard: f64,
    pub dropout_p: f64,
    pub ln_eps: f64,
    pub activation: GateActivation,
}

impl Default for MagHyper {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps_guard: 1e-9,
            dropout_p: 0.1,
            ln_eps: 1e-5,
            activation: GateActivation::Relu,
        }
    }
}

impl MagHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.eps_guard > 0.0) {
            return Err(Error::Config(format!(
                "eps_guard must be > 0, got {}",
                self.eps_guard
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// Weights of one gate. Field names mirror the symbols in the gate formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct MagParams {
    pub w_gv: Tensor,
    pub w_ga: Tensor,
    pub w_v: Tensor,
    pub w_a: Tensor,
    pub b_v: Tensor,
    pub b_a: Tensor,
    pub b_h: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub hyper: MagHyper,
}

const FIELDS: [&str; 9] = [
    "w_gv", "w_ga", "w_v", "w_a", "b_v", "b_a", "b_h", "ln_gain", "ln_bias",
];

impl MagParams {
    /// All weights zero, LayerNorm as identity affine (gain 1, bias 0).
    pub fn zeros(d_z: usize, d_a: usize, d_v: usize, hyper: MagHyper) -> Self {
        Self {
            w_gv: Tensor::zeros(d_z + d_v, d_z),
            w_ga: Tensor::zeros(d_z + d_a, d_z),
            w_v: Tensor::zeros(d_v, d_z),
            w_a: Tensor::zeros(d_a, d_z),
            b_v: Tensor::scalar(0.0),
            b_a: Tensor::scalar(0.0),
            b_h: Tensor::zeros(1, d_z),
            ln_gain: Tensor::ones(1, d_z),
            ln_bias: Tensor::zeros(1, d_z),
            hyper,
        }
    }

    /// Matrices uniform in `±1/√fan_in`; biases zero; LayerNorm identity.
    pub fn init<R: Rng + ?Sized>(
        d_z: usize,
        d_a: usize,
        d_v: usize,
        hyper: MagHyper,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(d_z, d_a, d_v, hyper);
        for w in [&mut p.w_gv, &mut p.w_ga, &mut p.w_v, &mut p.w_a] {
            fill_uniform_fan_in(w, rng);
        }
        p
    }

    pub fn d_z(&self) -> usize {
        self.w_v.cols()
    }

    pub fn d_a(&self) -> usize {
        self.w_a.rows()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.rows()
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_gv,
            &self.w_ga,
            &self.w_v,
            &self.w_a,
            &self.b_v,
            &self.b_a,
            &self.b_h,
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let (dz, da, dv) = (self.d_z(), self.d_a(), self.d_v());
        let expected: [(usize, usize); 9] = [
            (dz + dv, dz),
            (dz + da, dz),
            (dv, dz),
            (da, dz),
            (1, 1),
            (1, 1),
            (1, dz),
            (1, dz),
            (1, dz),
        ];
        for ((name, t), want) in FIELDS.iter().zip(self.tensors()).zip(expected) {
            if t.dims2() != Some(want) {
                return Err(Error::Contract(format!(
                    "gate parameter `{name}` has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Closed-form trainable scalar count of one gate.
    pub fn count_for(d_z: usize, d_a: usize, d_v: usize) -> usize {
        (d_z + d_v) * d_z + (d_z + d_a) * d_z + d_v * d_z + d_a * d_z + 2 + 3 * d_z
    }

    pub fn insert_into(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (name, t) in FIELDS.iter().zip(self.tensors()) {
            params.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_param_set(prefix: &str, params: &ParamSet, hyper: MagHyper) -> Result<Self> {
        let get = |name: &str| params.require(&format!("{prefix}.{name}")).cloned();
        let p = Self {
            w_gv: get("w_gv")?,
            w_ga: get("w_ga")?,
            w_v: get("w_v")?,
            w_a: get("w_a")?,
            b_v: get("b_v")?,
            b_a: get("b_a")?,
            b_h: get("b_h")?,
            ln_gain: get("ln_gain")?,
            ln_bias: get("ln_bias")?,
            hyper,
        };
        p.validate()?;
        Ok(p)
    }

    /// Records every weight as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> MagVars {
        let [w_gv, w_ga, w_v, w_a, b_v, b_a, b_h, ln_gain, ln_bias] =
            self.tensors().map(|t| g.leaf(t.clone(), requires_grad));
        MagVars {
            w_gv,
            w_ga,
            w_v,
            w_a,
            b_v,
            b_a,
            b_h,
            ln_gain,
            ln_bias,
        }
    }
}

pub(crate) fn fill_uniform_fan_in<R: Rng + ?Sized>(w: &mut Tensor, rng: &mut R) {
    let bound = 1.0 / (w.rows() as f64).sqrt();
    for v in w.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Graph handles of one gate's weights.
#[derive(Debug, Clone, Copy)]
pub struct MagVars {
    pub w_gv: Var,
    pub w_ga: Var,
    pub w_v: Var,
    pub w_a: Var,
    pub b_v: Var,
    pub b_a: Var,
    pub b_h: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl MagVars {
    pub fn from_bound(prefix: &str, bound: &BoundParams) -> Result<Self> {
        let v = |name: &str| bound.var(&format!("{prefix}.{name}"));
        Ok(Self {
            w_gv: v("w_gv")?,
            w_ga: v("w_ga")?,
            w_v: v("w_v")?,
            w_a: v("w_a")?,
            b_v: v("b_v")?,
            b_a: v("b_a")?,
            b_h: v("b_h")?,
            ln_gain: v("ln_gain")?,
            ln_bias: v("ln_bias")?,
        })
    }
}

/// Intermediate values of a gate application over `m` rows.
#[derive(Debug, Clone, Copy)]
pub struct MagTrace {
    pub g_a: Var,
    pub g_v: Var,
    pub displacement: Var,
    pub alpha: Var,
    /// `Z + α·H` before normalization.
    pub shifted: Var,
    pub output: Var,
}

fn activate(g: &mut Graph, x: Var, act: GateActivation) -> Result<Var> {
    match act {
        GateActivation::Relu => g.relu(x),
        GateActivation::Sigmoid => g.sigmoid(x),
    }
}

/// Gates for every row: returns `(g_a, g_v)`.
pub fn gates_graph(
    g: &mut Graph,
    z: Var,
    a: Var,
    v: Var,
    w: &MagVars,
    act: GateActivation,
) -> Result<(Var, Var)> {
    let zv = g.concat_cols(&[z, v])?;
    let pre_v = g.matmul(zv, w.w_gv)?;
    let pre_v = g.add_scalar(pre_v, w.b_v)?;
    let g_v = activate(g, pre_v, act)?;

    let za = g.concat_cols(&[z, a])?;
    let pre_a = g.matmul(za, w.w_ga)?;
    let pre_a = g.add_scalar(pre_a, w.b_a)?;
    let g_a = activate(g, pre_a, act)?;
    Ok((g_a, g_v))
}

/// `H = g_a ⊙ (A·W_a) + g_v ⊙ (V·W_v) + b_H`.
pub fn displacement_graph(
    g: &mut Graph,
    g_a: Var,
    g_v: Var,
    a: Var,
    v: Var,
    w: &MagVars,
) -> Result<Var> {
    let pa = g.matmul(a, w.w_a)?;
    let pa = g.mul(g_a, pa)?;
    let pv = g.matmul(v, w.w_v)?;
    let pv = g.mul(g_v, pv)?;
    let h = g.add(pa, pv)?;
    g.add_row(h, w.b_h)
}

/// Per-row `min(β·‖Z‖ / (‖H‖ + ε), 1)` as an `[m×1]` column.
pub fn alpha_graph(g: &mut Graph, z: Var, h: Var, beta: f64, eps_guard: f64) -> Result<Var> {
    let nz = g.row_norms(z)?;
    let nz = g.scale(nz, beta)?;
    let nh = g.row_norms(h)?;
    let nh = g.offset(nh, eps_guard)?;
    let ratio = g.div(nz, nh)?;
    g.min_const(ratio, 1.0)
}

/// Applies the gate to `m` word rows at once. `z: [m×d_z]`, `a: [m×d_a]`,
/// `v: [m×d_v]`; rows are processed independently.
pub fn mag_graph(
    g: &mut Graph,
    z: Var,
    a: Var,
    v: Var,
    w: &MagVars,
    hyper: &MagHyper,
    dropout: &mut Dropout,
) -> Result<MagTrace> {
    let m = g.value(z).rows();
    for (name, x) in [("acoustic", a), ("visual", v)] {
        if g.value(x).rows() != m {
            return Err(Error::Dimension {
                op: if name == "acoustic" { "mag acoustic rows" } else { "mag visual rows" },
                left: g.shape(z).to_vec(),
                right: g.shape(x).to_vec(),
            });
        }
    }
    let (g_a, g_v) = gates_graph(g, z, a, v, w, hyper.activation)?;
    let displacement = displacement_graph(g, g_a, g_v, a, v, w)?;
    let alpha = alpha_graph(g, z, displacement, hyper.beta, hyper.eps_guard)?;
    let shift = g.mul_col(displacement, alpha)?;
    let shifted = g.add(z, shift)?;
    let normed = g.layer_norm(shifted, w.ln_gain, w.ln_bias, hyper.ln_eps)?;
    let output = dropout.apply(g, normed, hyper.dropout_p)?;
    Ok(MagTrace {
        g_a,
        g_v,
        displacement,
        alpha,
        shifted,
        output,
    })
}

/// One word's lexical, acoustic and visual vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTriplet {
    pub lexical: Vec<f64>,
    pub acoustic: Vec<f64>,
    pub visual: Vec<f64>,
}

impl WordTriplet {
    pub fn new(lexical: Vec<f64>, acoustic: Vec<f64>, visual: Vec<f64>) -> Self {
        Self {
            lexical,
            acoustic,
            visual,
        }
    }

    fn check(&self, p: &MagParams) -> Result<()> {
        let pairs = [
            ("lexical", self.lexical.len(), p.d_z()),
            ("acoustic", self.acoustic.len(), p.d_a()),
            ("visual", self.visual.len(), p.d_v()),
        ];
        for (name, got, want) in pairs {
            if got != want {
                return Err(Error::Contract(format!(
                    "{name} vector has {got} entries, gate expects {want}"
                )));
            }
        }
        Ok(())
    }

    fn record(&self, g: &mut Graph) -> (Var, Var, Var) {
        (
            g.constant(Tensor::row(&self.lexical)),
            g.constant(Tensor::row(&self.acoustic)),
            g.constant(Tensor::row(&self.visual)),
        )
    }
}

/// `(g_a, g_v)` for a single word.
pub fn compute_gates(t: &WordTriplet, p: &MagParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    t.check(p)?;
    let mut g = Graph::new();
    let (z, a, v) = t.record(&mut g);
    let w = p.bind(&mut g, false);
    let (ga, gv) = gates_graph(&mut g, z, a, v, &w, p.hyper.activation)?;
    Ok((g.value(ga).data().to_vec(), g.value(gv).data().to_vec()))
}

/// Displacement `H` for a single word given its gates.
pub fn compute_displacement(
    g_a: &[f64],
    g_v: &[f64],
    t: &WordTriplet,
    p: &MagParams,
) -> Result<Vec<f64>> {
    p.validate()?;
    t.check(p)?;
    for (name, gate) in [("g_a", g_a), ("g_v", g_v)] {
        if gate.len() != p.d_z() {
            return Err(Error::Contract(format!(
                "gate {name} has {} entries, expected {}",
                gate.len(),
                p.d_z()
            )));
        }
    }
    let mut g = Graph::new();
    let (_, a, v) = t.record(&mut g);
    let ga = g.constant(Tensor::row(g_a));
    let gv = g.constant(Tensor::row(g_v));
    let w = p.bind(&mut g, false);
    let h = displacement_graph(&mut g, ga, gv, a, v, &w)?;
    Ok(g.value(h).data().to_vec())
}

/// Scaling factor `min(β·‖Z‖ / (‖H‖ + ε), 1)`.
pub fn compute_alpha(z: &[f64], h: &[f64], beta: f64, eps_guard: f64) -> f64 {
    let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    (beta * nz / (nh + eps_guard)).min(1.0)
}

/// Full gate on a single word.
pub fn mag_forward(t: &WordTriplet, p: &MagParams, mode: Mode) -> Result<Vec<f64>> {
    p.validate()?;
    t.check(p)?;
    let mut g = Graph::new();
    let (z, a, v) = t.record(&mut g);
    let w = p.bind(&mut g, false);
    let trace = mag_graph(&mut g, z, a, v, &w, &p.hyper, &mut Dropout::new(mode))?;
    Ok(g.value(trace.output).data().to_vec())
}
