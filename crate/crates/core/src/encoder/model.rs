use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::{ClsPosition, EncoderConfig};
use super::layer::{encoder_layer, layer_param_shapes, LayerSettings, LayerVars};
use crate::error::{Error, Result};
use crate::fusion::{fuse_add_graph, fuse_concat_graph, InputFusion};
use crate::mag::{mag_graph, MagVars};
use crate::mode::{Dropout, Mode};
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    FanIn,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn spec(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        rows,
        cols,
        init,
    }
}

fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = vec![
        spec("embed.token", cfg.vocab_size + 1, d, Init::Normal),
        spec("embed.segment", 1, d, Init::Normal),
        spec("embed.position", cfg.max_len, d, Init::Normal),
    ];
    match cfg.input_fusion {
        InputFusion::None => {}
        InputFusion::Add => {
            out.push(spec("fusion.p_a", cfg.d_a, d, Init::FanIn));
            out.push(spec("fusion.p_v", cfg.d_v, d, Init::FanIn));
        }
        InputFusion::Concat => {
            out.push(spec("fusion.q", d + cfg.d_a + cfg.d_v, d, Init::FanIn));
        }
    }
    for l in 1..=cfg.n_layers {
        for (name, rows, cols) in layer_param_shapes(l, d, cfg.d_ff) {
            let init = if name.ends_with(".gain") {
                Init::Ones
            } else if rows == 1 {
                Init::Zeros
            } else {
                Init::FanIn
            };
            out.push(spec(name, rows, cols, init));
        }
    }
    let mut prefixes: Vec<String> = cfg.mag_sites().iter().map(|&s| cfg.mag_prefix(s)).collect();
    prefixes.dedup();
    for p in prefixes {
        let (dz, da, dv) = (d, cfg.d_a, cfg.d_v);
        out.extend([
            spec(format!("{p}.w_gv"), dz + dv, dz, Init::FanIn),
            spec(format!("{p}.w_ga"), dz + da, dz, Init::FanIn),
            spec(format!("{p}.w_v"), dv, dz, Init::FanIn),
            spec(format!("{p}.w_a"), da, dz, Init::FanIn),
            spec(format!("{p}.b_v"), 1, 1, Init::Zeros),
            spec(format!("{p}.b_a"), 1, 1, Init::Zeros),
            spec(format!("{p}.b_h"), 1, dz, Init::Zeros),
            spec(format!("{p}.ln_gain"), 1, dz, Init::Ones),
            spec(format!("{p}.ln_bias"), 1, dz, Init::Zeros),
        ]);
    }
    out.push(spec("head.w_out", d, 1, Init::FanIn));
    out.push(spec("head.bias", 1, 1, Init::Zeros));
    out
}

/// One example prepared for the model: token ids plus row-major `N×d_a`
/// acoustic and `N×d_v` visual features (CLS excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<u32>,
    pub acoustic: Vec<f64>,
    pub visual: Vec<f64>,
}

impl ModelInput {
    /// Text-only input: all nonverbal features zero.
    pub fn text_only(tokens: Vec<u32>, d_a: usize, d_v: usize) -> Self {
        let n = tokens.len();
        Self {
            tokens,
            acoustic: vec![0.0; n * d_a],
            visual: vec![0.0; n * d_v],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[1×1]` regression output.
    pub prediction: Var,
    /// Sequence state after the embedder (index 0) and after every encoder
    /// layer, each including any gate attached at that depth.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub embeddings: usize,
    pub encoder_layers: usize,
    pub per_layer: usize,
    pub mag: usize,
    pub fusion: usize,
    pub head: usize,
    pub total: usize,
}

/// Embedder, encoder stack, optional gates or input fusion, and a scalar
/// regression head on the CLS state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamSet,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.embedding_init_std)
            .map_err(|e| Error::Config(format!("embedding_init_std: {e}")))?;
        let mut params = ParamSet::new();
        for s in param_specs(&config) {
            let n = s.rows * s.cols;
            let data: Vec<f64> = match s.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::FanIn => {
                    let bound = 1.0 / (s.rows as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(s.name, Tensor::matrix(s.rows, s.cols, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(params.iter()) {
            if s.name != name || t.dims2() != Some((s.rows, s.cols)) {
                return Err(Error::Contract(format!(
                    "parameter `{name}` {:?} does not match expected `{}` [{}, {}]",
                    t.shape(),
                    s.name,
                    s.rows,
                    s.cols
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Fresh model for `config` that copies every parameter whose name and
    /// shape also exist here.
    pub fn transfer(&self, config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut out = Self::new(config, seed)?;
        let names: Vec<String> = out.params.names().map(str::to_owned).collect();
        for name in names {
            if let Some(src) = self.params.get(&name) {
                let dst = out.params.get_mut(&name).expect("listed");
                if dst.shape() == src.shape() {
                    *dst = src.clone();
                }
            }
        }
        Ok(out)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layer_settings(&self) -> LayerSettings {
        LayerSettings {
            n_heads: self.config.n_heads,
            dropout_p: self.config.hidden_dropout_p,
            ln_eps: self.config.ln_eps,
        }
    }

    /// Index of the CLS row in a sequence of `n` words.
    pub fn cls_row(&self, n: usize) -> usize {
        match self.config.cls_position {
            ClsPosition::Front => 0,
            ClsPosition::End => n,
        }
    }

    /// `(N+1)×d_model` embedder output: token + segment + position.
    pub fn embed(&self, g: &mut Graph, b: &BoundParams, tokens: &[u32]) -> Result<Var> {
        let cfg = &self.config;
        let n = tokens.len();
        if n + 1 > cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {n} tokens plus CLS exceeds max_len {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of vocabulary (size {})",
                cfg.vocab_size
            )));
        }
        let mut ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        ids.insert(self.cls_row(n), cfg.cls_token());
        let positions: Vec<usize> = (0..=n).collect();

        let tok = g.gather_rows(b.var("embed.token")?, &ids)?;
        let with_seg = g.add_row(tok, b.var("embed.segment")?)?;
        let pos = g.gather_rows(b.var("embed.position")?, &positions)?;
        g.add(with_seg, pos)
    }

    /// Nonverbal features with a zero row inserted at the CLS position.
    fn nonverbal_with_cls(&self, flat: &[f64], n: usize, width: usize, what: &'static str) -> Result<Tensor> {
        if flat.len() != n * width {
            return Err(Error::Dimension {
                op: what,
                left: vec![n, width],
                right: vec![flat.len()],
            });
        }
        let cls = self.cls_row(n);
        let mut data = Vec::with_capacity((n + 1) * width);
        data.extend_from_slice(&flat[..cls * width]);
        data.extend(std::iter::repeat_n(0.0, width));
        data.extend_from_slice(&flat[cls * width..]);
        Tensor::matrix(n + 1, width, data)
    }

    /// Applies encoder layer `l` (1-based).
    pub fn run_layer(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        l: usize,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let w = LayerVars::from_bound(l, b)?;
        encoder_layer(g, x, &w, &self.layer_settings(), dropout)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        input: &ModelInput,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = input.tokens.len();
        let a = self.nonverbal_with_cls(&input.acoustic, n, cfg.d_a, "forward acoustic rows")?;
        let v = self.nonverbal_with_cls(&input.visual, n, cfg.d_v, "forward visual rows")?;
        let mut dropout = Dropout::new(mode);

        let mut x = self.embed(g, b, &input.tokens)?;
        let a = g.constant(a);
        let v = g.constant(v);
        match cfg.input_fusion {
            InputFusion::None => {}
            InputFusion::Add => {
                x = fuse_add_graph(g, x, a, v, b.var("fusion.p_a")?, b.var("fusion.p_v")?)?;
            }
            InputFusion::Concat => {
                x = fuse_concat_graph(g, x, a, v, b.var("fusion.q")?)?;
            }
        }

        let sites = cfg.mag_sites();
        let hyper = cfg.mag_hyper();
        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        for depth in 0..=cfg.n_layers {
            if depth > 0 {
                x = self.run_layer(g, b, depth, x, &mut dropout)?;
            }
            if sites.contains(&depth) {
                let w = MagVars::from_bound(&cfg.mag_prefix(depth), b)?;
                x = mag_graph(g, x, a, v, &w, &hyper, &mut dropout)?.output;
            }
            hidden.push(x);
        }

        let cls = g.gather_rows(x, &[self.cls_row(n)])?;
        let out = g.matmul(cls, b.var("head.w_out")?)?;
        let prediction = g.add_scalar(out, b.var("head.bias")?)?;
        Ok(ForwardOutput { prediction, hidden })
    }

    /// Eval-mode prediction for one example.
    pub fn predict(&self, input: &ModelInput) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, input, Mode::Eval)?;
        g.value(out.prediction).item()
    }

    /// Eval-mode predictions for several examples recorded on one shared
    /// graph, so all of them read the same parameter leaves.
    pub fn predict_batch(&self, inputs: &[ModelInput]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut preds = Vec::with_capacity(inputs.len());
        for input in inputs {
            let out = self.forward(&mut g, &b, input, Mode::Eval)?;
            preds.push(out.prediction);
        }
        preds.iter().map(|&p| g.value(p).item()).collect()
    }

    /// Eval-mode hidden states, see [`ForwardOutput::hidden`].
    pub fn hidden_states(&self, input: &ModelInput) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, input, Mode::Eval)?;
        Ok(out.hidden.iter().map(|&h| g.value(h).clone()).collect())
    }
}

/// Trainable scalar counts, with gate overhead separated from the encoder.
pub fn count_parameters(model: &EncoderModel) -> ParameterCount {
    let p = model.params();
    let cfg = model.config();
    let embeddings = p.scalar_count_with_prefix("embed.");
    let encoder_layers = p.scalar_count_with_prefix("layer.");
    let per_layer = if cfg.n_layers == 0 {
        0
    } else {
        p.scalar_count_with_prefix("layer.1.")
    };
    let mag = p.scalar_count_with_prefix("mag");
    let fusion = p.scalar_count_with_prefix("fusion.");
    let head = p.scalar_count_with_prefix("head.");
    ParameterCount {
        embeddings,
        encoder_layers,
        per_layer,
        mag,
        fusion,
        head,
        total: p.scalar_count(),
    }
}
