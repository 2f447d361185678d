//! Plain-text run configuration: `key = value` lines, `#` comments.
//! Unknown keys are rejected. Every key has a documented default; the
//! digest of the effective configuration is stamped into all outputs.

use sha2::{Digest, Sha256};

use crate::stages::DeskSteps;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value}")]
    BadValue { key: String, value: String },
    #[error("malformed line: {0}")]
    Malformed(String),
}

/// Run-level knobs. Keys and defaults:
///
/// ```text
/// seed            = 0      global seed
/// n_shapes_min    = 1      scene complexity lower bound
/// n_shapes_max    = 4      scene complexity upper bound
/// sample_steps    = 80     diffusion sampling steps in pipelines
/// s1_tok_steps    = 420    stage-1 tokenizer steps
/// s1_tok_batch    = 16
/// s1_diff_steps   = 420    stage-1 diffusion steps
/// s1_diff_batch   = 16
/// s2_steps        = 120
/// s2_batch        = 16
/// s3_steps        = 300
/// s3_batch        = 8
/// s4_steps        = 120
/// s4_batch        = 4
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_shapes_min: usize,
    pub n_shapes_max: usize,
    pub sample_steps: usize,
    pub steps: DeskSteps,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_shapes_min: 1,
            n_shapes_max: 4,
            sample_steps: 80,
            steps: DeskSteps::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed(raw.to_string()))?;
            let key = key.trim();
            let value = value.trim();
            let bad = || ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            };
            let as_usize = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "n_shapes_min" => cfg.n_shapes_min = as_usize()?,
                "n_shapes_max" => cfg.n_shapes_max = as_usize()?,
                "sample_steps" => cfg.sample_steps = as_usize()?,
                "s1_tok_steps" => cfg.steps.s1_tok_steps = as_usize()?,
                "s1_tok_batch" => cfg.steps.s1_tok_batch = as_usize()?,
                "s1_diff_steps" => cfg.steps.s1_diff_steps = as_usize()?,
                "s1_diff_batch" => cfg.steps.s1_diff_batch = as_usize()?,
                "s2_steps" => cfg.steps.s2_steps = as_usize()?,
                "s2_batch" => cfg.steps.s2_batch = as_usize()?,
                "s3_steps" => cfg.steps.s3_steps = as_usize()?,
                "s3_batch" => cfg.steps.s3_batch = as_usize()?,
                "s4_steps" => cfg.steps.s4_steps = as_usize()?,
                "s4_batch" => cfg.steps.s4_batch = as_usize()?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        format!(
            "seed = {}\nn_shapes_min = {}\nn_shapes_max = {}\nsample_steps = {}\n\
             s1_tok_steps = {}\ns1_tok_batch = {}\ns1_diff_steps = {}\ns1_diff_batch = {}\n\
             s2_steps = {}\ns2_batch = {}\ns3_steps = {}\ns3_batch = {}\ns4_steps = {}\ns4_batch = {}\n",
            self.seed,
            self.n_shapes_min,
            self.n_shapes_max,
            self.sample_steps,
            self.steps.s1_tok_steps,
            self.steps.s1_tok_batch,
            self.steps.s1_diff_steps,
            self.steps.s1_diff_batch,
            self.steps.s2_steps,
            self.steps.s2_batch,
            self.steps.s3_steps,
            self.steps.s3_batch,
            self.steps.s4_steps,
            self.steps.s4_batch,
        )
    }

    /// Digest over the effective run config plus the model configuration.
    pub fn digest(&self, model_digest: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.render().as_bytes());
        h.update(model_digest.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = RunConfig::parse("seed = 9\ns3_steps = 77 # comment\n\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.steps.s3_steps, 77);
        assert_eq!(cfg.n_shapes_max, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("nope = 3").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "nope"));
    }

    #[test]
    fn roundtrip_and_digest_stability() {
        let cfg = RunConfig::default();
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest("m"), again.digest("m"));
        assert_ne!(cfg.digest("m"), cfg.digest("other"));
    }
}
