//! Input-level fusion baselines: nonverbal features are merged into the
//! embedder output once, and the encoder stack runs unmodified on top.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mag::fill_uniform_fan_in;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFusion {
    #[default]
    None,
    /// `E + A·P_a + V·P_v`
    Add,
    /// `[E; A; V]·Q`
    Concat,
}

impl fmt::Display for InputFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFusion::None => "none",
            InputFusion::Add => "add",
            InputFusion::Concat => "concat",
        })
    }
}

impl FromStr for InputFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InputFusion::None),
            "add" => Ok(InputFusion::Add),
            "concat" => Ok(InputFusion::Concat),
            other => Err(Error::Config(format!("unknown input fusion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineFusionParams {
    Add { p_a: Tensor, p_v: Tensor },
    Concat { q: Tensor },
}

impl BaselineFusionParams {
    pub fn init_add<R: Rng + ?Sized>(d_model: usize, d_a: usize, d_v: usize, rng: &mut R) -> Self {
        let mut p_a = Tensor::zeros(d_a, d_model);
        let mut p_v = Tensor::zeros(d_v, d_model);
        fill_uniform_fan_in(&mut p_a, rng);
        fill_uniform_fan_in(&mut p_v, rng);
        Self::Add { p_a, p_v }
    }

    pub fn init_concat<R: Rng + ?Sized>(
        d_model: usize,
        d_a: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        let mut q = Tensor::zeros(d_model + d_a + d_v, d_model);
        fill_uniform_fan_in(&mut q, rng);
        Self::Concat { q }
    }

    /// `[I | 0 | 0]ᵀ`: passes the lexical part through untouched.
    pub fn concat_identity(d_model: usize, d_a: usize, d_v: usize) -> Self {
        let mut q = Tensor::zeros(d_model + d_a + d_v, d_model);
        for i in 0..d_model {
            q.data_mut()[i * d_model + i] = 1.0;
        }
        Self::Concat { q }
    }

    /// `(name, tensor)` pairs under the `fusion.` prefix.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Add { p_a, p_v } => vec![("fusion.p_a", p_a), ("fusion.p_v", p_v)],
            Self::Concat { q } => vec![("fusion.q", q)],
        }
    }
}

/// `E + A·P_a + V·P_v` over all rows.
pub fn fuse_add_graph(g: &mut Graph, e: Var, a: Var, v: Var, p_a: Var, p_v: Var) -> Result<Var> {
    let pa = g.matmul(a, p_a)?;
    let pv = g.matmul(v, p_v)?;
    let x = g.add(e, pa)?;
    g.add(x, pv)
}

/// `[E; A; V]·Q` over all rows.
pub fn fuse_concat_graph(g: &mut Graph, e: Var, a: Var, v: Var, q: Var) -> Result<Var> {
    let cat = g.concat_cols(&[e, a, v])?;
    g.matmul(cat, q)
}

fn check_row(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{name} has {got} entries, fusion expects {want}"
        )))
    }
}

/// Additive fusion of one embedding row.
pub fn fuse_add(e_row: &[f64], a: &[f64], v: &[f64], p: &BaselineFusionParams) -> Result<Vec<f64>> {
    let BaselineFusionParams::Add { p_a, p_v } = p else {
        return Err(Error::Contract("fuse_add needs additive fusion parameters".into()));
    };
    check_row("embedding row", e_row.len(), p_a.cols())?;
    check_row("acoustic vector", a.len(), p_a.rows())?;
    check_row("visual vector", v.len(), p_v.rows())?;
    let mut g = Graph::new();
    let (e, a, v) = (
        g.constant(Tensor::row(e_row)),
        g.constant(Tensor::row(a)),
        g.constant(Tensor::row(v)),
    );
    let (pa, pv) = (g.constant(p_a.clone()), g.constant(p_v.clone()));
    let out = fuse_add_graph(&mut g, e, a, v, pa, pv)?;
    Ok(g.value(out).data().to_vec())
}

/// Concatenation fusion of one embedding row.
pub fn fuse_concat(
    e_row: &[f64],
    a: &[f64],
    v: &[f64],
    p: &BaselineFusionParams,
) -> Result<Vec<f64>> {
    let BaselineFusionParams::Concat { q } = p else {
        return Err(Error::Contract("fuse_concat needs concatenation parameters".into()));
    };
    check_row("concatenated input", e_row.len() + a.len() + v.len(), q.rows())?;
    if e_row.len() != q.cols() {
        return Err(Error::dim("fuse_concat", &[e_row.len()], q.shape()));
    }
    let mut g = Graph::new();
    let (e, a, v) = (
        g.constant(Tensor::row(e_row)),
        g.constant(Tensor::row(a)),
        g.constant(Tensor::row(v)),
    );
    let qv = g.constant(q.clone());
    let out = fuse_concat_graph(&mut g, e, a, v, qv)?;
    Ok(g.value(out).data().to_vec())
}
