//! Injection-site / fusion ablation sweep.
//!
//! Every variant starts from the same language-only base model: parameters
//! shared with the base are copied, gate and fusion parameters are fresh.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalExample;
use crate::encoder::{EncoderConfig, EncoderModel, Injection};
use crate::error::{Error, Result};
use crate::fusion::InputFusion;
use crate::train::{evaluate, format_metric, train, MetricsReport, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    None,
    Embedding,
    Layer(usize),
    All,
    Add,
    Concat,
}

impl Variant {
    /// Fixed sweep order: none, E, 1..M, all, add, concat.
    pub fn sweep(n_layers: usize) -> Vec<Variant> {
        let mut v = vec![Variant::None, Variant::Embedding];
        v.extend((1..=n_layers).map(Variant::Layer));
        v.extend([Variant::All, Variant::Add, Variant::Concat]);
        v
    }

    pub fn label(&self) -> String {
        match self {
            Variant::None => "none".into(),
            Variant::Embedding => "E".into(),
            Variant::Layer(j) => j.to_string(),
            Variant::All => "all".into(),
            Variant::Add => "add".into(),
            Variant::Concat => "concat".into(),
        }
    }

    pub fn apply(&self, base: &EncoderConfig) -> EncoderConfig {
        let (injection, input_fusion) = match *self {
            Variant::None => (Injection::None, InputFusion::None),
            Variant::Embedding => (Injection::Embedding, InputFusion::None),
            Variant::Layer(j) => (Injection::Layer(j), InputFusion::None),
            Variant::All => (Injection::All, InputFusion::None),
            Variant::Add => (Injection::None, InputFusion::Add),
            Variant::Concat => (Injection::None, InputFusion::Concat),
        };
        EncoderConfig {
            injection,
            input_fusion,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub metrics: MetricsReport,
    pub history: TrainHistory,
}

/// Language-only model every variant is derived from.
pub fn base_model(base: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::new(Variant::None.apply(base), seed)
}

pub fn run_variant(
    base: &EncoderModel,
    variant: Variant,
    seed: u64,
    train_cfg: &TrainConfig,
    train_data: &[MultimodalExample],
    test_data: &[MultimodalExample],
) -> Result<(EncoderModel, VariantOutcome)> {
    let mut model = base.transfer(variant.apply(base.config()), seed)?;
    let history = train(&mut model, train_data, train_cfg, None)?;
    let metrics = evaluate(&model, test_data)?;
    Ok((
        model,
        VariantOutcome {
            variant: variant.label(),
            metrics,
            history,
        },
    ))
}

/// Runs `variants` in parallel; the result keeps the input order.
pub fn run_sweep(
    base_cfg: &EncoderConfig,
    variants: &[Variant],
    seed: u64,
    train_cfg: &TrainConfig,
    train_data: &[MultimodalExample],
    test_data: &[MultimodalExample],
) -> Result<Vec<VariantOutcome>> {
    if test_data.is_empty() {
        return Err(Error::Contract("ablation needs a nonempty test set".into()));
    }
    let base = base_model(base_cfg, seed)?;
    variants
        .par_iter()
        .map(|&v| run_variant(&base, v, seed, train_cfg, train_data, test_data).map(|(_, o)| o))
        .collect()
}

pub const TSV_COLUMNS: [&str; 7] = [
    "variant",
    "ba_nonneg",
    "ba_excl_zero",
    "f1_nonneg",
    "f1_excl_zero",
    "mae",
    "corr",
];

pub fn to_tsv(outcomes: &[VariantOutcome]) -> String {
    let mut out = TSV_COLUMNS.join("\t");
    out.push('\n');
    for o in outcomes {
        let m = &o.metrics;
        let cells = [
            o.variant.clone(),
            format_metric(Some(m.ba_nonneg)),
            format_metric(m.ba_excl_zero),
            format_metric(Some(m.f1_nonneg)),
            format_metric(m.f1_excl_zero),
            format_metric(Some(m.mae)),
            format_metric(m.corr),
        ];
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

/// Early (layers 1..=M/2) versus late (remaining layers) injection, by mean
/// test BA with zero labels excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPreference {
    pub early_layers: Vec<usize>,
    pub late_layers: Vec<usize>,
    pub early_ba: f64,
    pub late_ba: f64,
    pub early_at_least_late: bool,
}

pub fn layer_preference(outcomes: &[VariantOutcome], n_layers: usize) -> Option<LayerPreference> {
    if n_layers < 2 {
        return None;
    }
    let ba = |j: usize| {
        outcomes
            .iter()
            .find(|o| o.variant == j.to_string())
            .and_then(|o| o.metrics.ba_excl_zero)
    };
    let half = n_layers / 2;
    let early_layers: Vec<usize> = (1..=half).collect();
    let late_layers: Vec<usize> = (half + 1..=n_layers).collect();
    let mean = |ls: &[usize]| -> Option<f64> {
        let vals: Option<Vec<f64>> = ls.iter().map(|&j| ba(j)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let early_ba = mean(&early_layers)?;
    let late_ba = mean(&late_layers)?;
    Some(LayerPreference {
        early_layers,
        late_layers,
        early_ba,
        late_ba,
        early_at_least_late: early_ba >= late_ba,
    })
}
