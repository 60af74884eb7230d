use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::InputFusion;
use crate::mag::{GateActivation, MagHyper};

/// Where the classification token sits: BERT-style in front, or XLNet-style
/// at the right end of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPosition {
    #[default]
    Front,
    End,
}

impl FromStr for ClsPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(ClsPosition::Front),
            "end" => Ok(ClsPosition::End),
            other => Err(Error::Config(format!("unknown cls_position `{other}`"))),
        }
    }
}

impl fmt::Display for ClsPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsPosition::Front => "front",
            ClsPosition::End => "end",
        })
    }
}

/// Gate attachment point. Depth 0 is the embedder output, depth `l` the
/// output of encoder layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Injection {
    #[default]
    None,
    /// Right after the embedder (`E`).
    Embedding,
    /// After encoder layer `j`, `1 ≤ j ≤ M`.
    Layer(usize),
    /// After the embedder and after every layer (`A`).
    All,
}

impl Injection {
    /// Depths at which a gate is applied, ascending.
    pub fn sites(self, n_layers: usize) -> Vec<usize> {
        match self {
            Injection::None => vec![],
            Injection::Embedding => vec![0],
            Injection::Layer(j) => vec![j],
            Injection::All => (0..=n_layers).collect(),
        }
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::None => f.write_str("none"),
            Injection::Embedding => f.write_str("E"),
            Injection::Layer(j) => write!(f, "{j}"),
            Injection::All => f.write_str("all"),
        }
    }
}

impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Injection::None),
            "E" | "e" | "embedding" => Ok(Injection::Embedding),
            "A" | "all" => Ok(Injection::All),
            other => other
                .parse::<usize>()
                .map(Injection::Layer)
                .map_err(|_| Error::Config(format!("unknown injection `{other}`"))),
        }
    }
}

impl From<Injection> for String {
    fn from(i: Injection) -> Self {
        i.to_string()
    }
}

impl TryFrom<String> for Injection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub cls_position: ClsPosition,
    pub injection: Injection,
    pub input_fusion: InputFusion,
    /// One gate shared by every site of `Injection::All`.
    pub share_mag: bool,
    pub hidden_dropout_p: f64,
    /// Gate dropout; `None` ties it to `hidden_dropout_p`.
    pub mag_dropout_p: Option<f64>,
    pub beta_shift: f64,
    pub eps_guard: f64,
    pub gate_activation: GateActivation,
    pub ln_eps: f64,
    /// Standard deviation of the normal initialization of embedding tables.
    pub embedding_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 256,
            max_len: 24,
            d_a: 5,
            d_v: 7,
            cls_position: ClsPosition::Front,
            injection: Injection::Layer(1),
            input_fusion: InputFusion::None,
            share_mag: false,
            hidden_dropout_p: 0.1,
            mag_dropout_p: None,
            beta_shift: 1.0,
            eps_guard: 1e-9,
            gate_activation: GateActivation::Relu,
            ln_eps: 1e-5,
            embedding_init_std: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Injection::Layer(j) = self.injection {
            if j == 0 || j > self.n_layers {
                return Err(Error::Config(format!(
                    "injection layer {j} outside 1..={}",
                    self.n_layers
                )));
            }
        }
        if self.injection != Injection::None && self.input_fusion != InputFusion::None {
            return Err(Error::Config(
                "gate injection and input-level fusion are separate variants".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout_p) {
            return Err(Error::Config(format!(
                "hidden_dropout_p must be in [0, 1), got {}",
                self.hidden_dropout_p
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.embedding_init_std > 0.0) {
            return Err(Error::Config("ln_eps and embedding_init_std must be > 0".into()));
        }
        self.mag_hyper().validate()
    }

    pub fn mag_hyper(&self) -> MagHyper {
        MagHyper {
            beta: self.beta_shift,
            eps_guard: self.eps_guard,
            dropout_p: self.mag_dropout_p.unwrap_or(self.hidden_dropout_p),
            ln_eps: self.ln_eps,
            activation: self.gate_activation,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Row of the token table reserved for the classification token.
    pub fn cls_token(&self) -> usize {
        self.vocab_size
    }

    pub fn mag_sites(&self) -> Vec<usize> {
        self.injection.sites(self.n_layers)
    }

    /// Parameter prefix of the gate applied at `depth`.
    pub fn mag_prefix(&self, depth: usize) -> String {
        if self.share_mag {
            "mag".to_string()
        } else {
            format!("mag.{depth}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injection_round_trips_through_strings() {
        for s in ["none", "E", "3", "all"] {
            let i: Injection = s.parse().unwrap();
            assert_eq!(i.to_string(), s);
        }
        assert_eq!("A".parse::<Injection>().unwrap(), Injection::All);
        assert!("x".parse::<Injection>().is_err());
        let json = serde_json::to_string(&Injection::Layer(2)).unwrap();
        assert_eq!(json, "\"2\"");
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            injection: Injection::Layer(5),
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            injection: Injection::Layer(0),
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            input_fusion: InputFusion::Add,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sites_per_injection() {
        assert!(Injection::None.sites(4).is_empty());
        assert_eq!(Injection::Embedding.sites(4), vec![0]);
        assert_eq!(Injection::Layer(2).sites(4), vec![2]);
        assert_eq!(Injection::All.sites(4), vec![0, 1, 2, 3, 4]);
    }
}
