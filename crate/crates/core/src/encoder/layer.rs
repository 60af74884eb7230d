use crate::error::Result;
use crate::mode::Dropout;
use crate::tensor::{BoundParams, Graph, Var};

/// Graph handles for one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Parameter names of layer `l` (1-based) with their `(rows, cols)`.
pub(crate) fn layer_param_shapes(l: usize, d: usize, d_ff: usize) -> Vec<(String, usize, usize)> {
    let p = |s: &str| format!("layer.{l}.{s}");
    vec![
        (p("attn.w_q"), d, d),
        (p("attn.b_q"), 1, d),
        (p("attn.w_k"), d, d),
        (p("attn.b_k"), 1, d),
        (p("attn.w_v"), d, d),
        (p("attn.b_v"), 1, d),
        (p("attn.w_o"), d, d),
        (p("attn.b_o"), 1, d),
        (p("ln1.gain"), 1, d),
        (p("ln1.bias"), 1, d),
        (p("ffn.w_1"), d, d_ff),
        (p("ffn.b_1"), 1, d_ff),
        (p("ffn.w_2"), d_ff, d),
        (p("ffn.b_2"), 1, d),
        (p("ln2.gain"), 1, d),
        (p("ln2.bias"), 1, d),
    ]
}

impl LayerVars {
    pub fn from_bound(l: usize, b: &BoundParams) -> Result<Self> {
        let v = |s: &str| b.var(&format!("layer.{l}.{s}"));
        Ok(Self {
            w_q: v("attn.w_q")?,
            b_q: v("attn.b_q")?,
            w_k: v("attn.w_k")?,
            b_k: v("attn.b_k")?,
            w_v: v("attn.w_v")?,
            b_v: v("attn.b_v")?,
            w_o: v("attn.w_o")?,
            b_o: v("attn.b_o")?,
            ln1_gain: v("ln1.gain")?,
            ln1_bias: v("ln1.bias")?,
            w_1: v("ffn.w_1")?,
            b_1: v("ffn.b_1")?,
            w_2: v("ffn.w_2")?,
            b_2: v("ffn.b_2")?,
            ln2_gain: v("ln2.gain")?,
            ln2_bias: v("ln2.bias")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSettings {
    pub n_heads: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Scaled dot-product self-attention over all rows, no mask.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    w: &LayerVars,
    s: &LayerSettings,
    dropout: &mut Dropout,
) -> Result<Var> {
    let d = g.value(x).cols();
    let dh = d / s.n_heads;
    let q = affine(g, x, w.w_q, w.b_q)?;
    let k = affine(g, x, w.w_k, w.b_k)?;
    let v = affine(g, x, w.w_v, w.b_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(s.n_heads);
    for h in 0..s.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        let weights = dropout.apply(g, weights, s.dropout_p)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    affine(g, cat, w.w_o, w.b_o)
}

/// `Y = LN(X + MHA(X))`, `out = LN(Y + FFN(Y))`.
pub fn encoder_layer(
    g: &mut Graph,
    x: Var,
    w: &LayerVars,
    s: &LayerSettings,
    dropout: &mut Dropout,
) -> Result<Var> {
    let attn = multi_head_attention(g, x, w, s, dropout)?;
    let res = g.add(x, attn)?;
    let y = g.layer_norm(res, w.ln1_gain, w.ln1_bias, s.ln_eps)?;

    let hidden = affine(g, y, w.w_1, w.b_1)?;
    let hidden = g.relu(hidden)?;
    let ff = affine(g, hidden, w.w_2, w.b_2)?;
    let ff = dropout.apply(g, ff, s.dropout_p)?;
    let res = g.add(y, ff)?;
    g.layer_norm(res, w.ln2_gain, w.ln2_bias, s.ln_eps)
}
