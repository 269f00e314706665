//! Deterministic token accounting for staged training runs.

use crate::error::{Error, Result};

/// One training stage: context length, per-device batch, gradient
/// accumulation factor, and optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub ctx_len: u64,
    pub batch: u64,
    pub accum: u64,
    pub steps: u64,
}

impl Stage {
    pub fn tokens(&self, gpus: u64) -> u64 {
        self.ctx_len * self.batch * self.accum * self.steps * gpus
    }
}

/// Total token budget: `sum_s L_s * B_s * A_s * U_s * G`.
pub fn token_budget(stages: &[Stage], gpus: u64) -> u64 {
    stages.iter().map(|s| s.tokens(gpus)).sum()
}

/// Parse a semicolon-separated list of `L,B,A,U` quadruples.
pub fn parse_stages(spec: &str) -> Result<Vec<Stage>> {
    let trimmed = spec.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let mut stages = Vec::new();
    for (idx, part) in trimmed.split(';').enumerate() {
        let fields: Vec<&str> = part.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                field: format!("stage {idx}: expected L,B,A,U, got {part:?}"),
            });
        }
        let parse = |name: &str, raw: &str| -> Result<u64> {
            raw.parse().map_err(|_| Error::Parse {
                field: format!("stage {idx} field {name}: {raw:?}"),
            })
        };
        stages.push(Stage {
            ctx_len: parse("L", fields[0])?,
            batch: parse("B", fields[1])?,
            accum: parse("A", fields[2])?,
            steps: parse("U", fields[3])?,
        });
    }
    Ok(stages)
}
