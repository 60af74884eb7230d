use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Forward-pass mode. Training mode carries the seed of the dropout stream
/// consumed by that single call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Dropout mask source for one forward call.
#[derive(Debug)]
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { rng }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => g.dropout(x, p, rng),
            None => Ok(x),
        }
    }
}
