//! Multimodal examples, JSON Lines I/O and the synthetic sentiment generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelInput;
use crate::error::{Error, Result};

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

/// Token ids the generator reserves for positive and negative sentiment.
pub const POSITIVE_TOKEN: u32 = 1;
pub const NEGATIVE_TOKEN: u32 = 2;
const FIRST_NEUTRAL_TOKEN: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalExample {
    pub tokens: Vec<u32>,
    pub acoustic: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub label: f64,
}

impl MultimodalExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d_a(&self) -> usize {
        self.acoustic.first().map_or(0, Vec::len)
    }

    pub fn d_v(&self) -> usize {
        self.visual.first().map_or(0, Vec::len)
    }

    /// Check the example's own invariants. `line` is only used for messages.
    pub fn validate(&self, line: usize) -> Result<()> {
        let err = |field: &str, message: String| Error::Data {
            line,
            field: field.to_string(),
            message,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(err("tokens", "sequence must contain at least one token".into()));
        }
        for (field, rows) in [("acoustic", &self.acoustic), ("visual", &self.visual)] {
            if rows.len() != n {
                return Err(err(field, format!("{} rows for {n} tokens", rows.len())));
            }
            let d = rows[0].len();
            if d == 0 {
                return Err(err(field, "feature rows must be nonempty".into()));
            }
            if let Some(i) = rows.iter().position(|r| r.len() != d) {
                return Err(err(field, format!("row {i} has {} values, expected {d}", rows[i].len())));
            }
            if rows.iter().flatten().any(|x| !x.is_finite()) {
                return Err(err(field, "non-finite feature value".into()));
            }
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(err("label", format!("{} outside [-3, 3]", self.label)));
        }
        Ok(())
    }

    pub fn to_input(&self) -> ModelInput {
        ModelInput {
            tokens: self.tokens.clone(),
            acoustic: self.acoustic.iter().flatten().copied().collect(),
            visual: self.visual.iter().flatten().copied().collect(),
        }
    }
}

/// Parse JSON Lines text. Blank lines are skipped; every example must share
/// the feature widths of the first one.
pub fn parse_dataset(text: &str) -> Result<Vec<MultimodalExample>> {
    if text.starts_with('\u{feff}') {
        return Err(Error::Data {
            line: 1,
            field: "-".into(),
            message: "byte order mark not allowed".into(),
        });
    }
    let mut out: Vec<MultimodalExample> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let ex: MultimodalExample = serde_json::from_str(raw).map_err(|e| Error::Data {
            line,
            field: "-".into(),
            message: e.to_string(),
        })?;
        ex.validate(line)?;
        if let Some(first) = out.first() {
            for (field, want, got) in [
                ("acoustic", first.d_a(), ex.d_a()),
                ("visual", first.d_v(), ex.d_v()),
            ] {
                if want != got {
                    return Err(Error::Data {
                        line,
                        field: field.into(),
                        message: format!("width {got} differs from earlier width {want}"),
                    });
                }
            }
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MultimodalExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_jsonl(examples: &[MultimodalExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Parse {
            context: "dataset".into(),
            message: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[MultimodalExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_jsonl(examples)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub lambda_nv: f64,
    pub noise_sigma: f64,
    /// Per-position probability of each sentiment token (same for both).
    pub sentiment_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            min_len: 4,
            max_len: 16,
            vocab_size: 256,
            d_a: 5,
            d_v: 7,
            lambda_nv: 0.5,
            noise_sigma: 0.1,
            sentiment_rate: 0.15,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("need 1 <= min_len <= max_len, got {}..={}", self.min_len, self.max_len));
        }
        if self.vocab_size <= FIRST_NEUTRAL_TOKEN as usize {
            return bad(format!("vocab_size must exceed {FIRST_NEUTRAL_TOKEN}"));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size does not fit a token id".into());
        }
        if self.d_a == 0 || self.d_v == 0 {
            return bad("d_a and d_v must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_nv) {
            return bad(format!("lambda_nv {} outside [0, 1]", self.lambda_nv));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=0.5).contains(&self.sentiment_rate) {
            return bad(format!("sentiment_rate {} outside [0, 0.5]", self.sentiment_rate));
        }
        Ok(())
    }
}

/// Seeds of the four independent random streams. Tests override a single
/// stream to resample one factor while holding the others fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeeds {
    pub length: u64,
    pub tokens: u64,
    pub nonverbal: u64,
    pub noise: u64,
}

impl StreamSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            length: seed,
            tokens: seed,
            nonverbal: seed,
            noise: seed,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<MultimodalExample>> {
    generate_synthetic_with(cfg, StreamSeeds::from_master(cfg.seed))
}

pub fn generate_synthetic_with(cfg: &SynthConfig, seeds: StreamSeeds) -> Result<Vec<MultimodalExample>> {
    cfg.validate()?;
    let mut len_rng = stream(seeds.length, 1);
    let mut tok_rng = stream(seeds.tokens, 2);
    let mut nv_rng = stream(seeds.nonverbal, 3);
    let mut noise_rng = stream(seeds.noise, 4);
    let vocab = cfg.vocab_size as u32;
    let mut out = Vec::with_capacity(cfg.n_examples);
    for _ in 0..cfg.n_examples {
        let n = len_rng.random_range(cfg.min_len..=cfg.max_len);
        let mut tokens = Vec::with_capacity(n);
        let (mut c_pos, mut c_neg) = (0i64, 0i64);
        for _ in 0..n {
            let u: f64 = tok_rng.random();
            let t = if u < cfg.sentiment_rate {
                c_pos += 1;
                POSITIVE_TOKEN
            } else if u < 2.0 * cfg.sentiment_rate {
                c_neg += 1;
                NEGATIVE_TOKEN
            } else {
                tok_rng.random_range(FIRST_NEUTRAL_TOKEN..vocab)
            };
            tokens.push(t);
        }
        let mut gaussian_rows = |d: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| nv_rng.sample(StandardNormal)).collect())
                .collect()
        };
        let acoustic = gaussian_rows(cfg.d_a);
        let visual = gaussian_rows(cfg.d_v);
        let mean0 = |rows: &[Vec<f64>]| rows.iter().map(|r| r[0]).sum::<f64>() / n as f64;
        let s_text = ((c_pos - c_neg) as f64).tanh();
        let s_nv = (mean0(&acoustic) + mean0(&visual)).tanh();
        let z: f64 = noise_rng.sample(StandardNormal);
        let raw = 3.0 * ((1.0 - cfg.lambda_nv) * s_text + cfg.lambda_nv * s_nv) + cfg.noise_sigma * z;
        out.push(MultimodalExample {
            tokens,
            acoustic,
            visual,
            label: raw.clamp(LABEL_MIN, LABEL_MAX),
        });
    }
    Ok(out)
}
