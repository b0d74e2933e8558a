//! Experiment configuration: defaults, TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use pbs_core::decode::{DecoderConfig, Strategy};
use pbs_core::env::RiskyChainSpec;
use pbs_core::portfolio::RegularizationMode;
use pbs_core::tokens::BinCounts;

use crate::ValidationError;

pub const BUILTIN_RISKY_CHAIN: &str = "risky-chain";

/// Consulted when neither a flag nor the config file names an output directory.
pub const OUTPUT_DIR_VAR: &str = "PBS_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "pbs-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Builtin environment name or path to an MDP document.
    pub env: String,
    pub risky_chain: RiskyChainSpec,
    /// Behavior episodes written by `gen-data`.
    pub episodes: usize,
    pub seed: u64,
    pub bins: BinCounts,
    pub model: ModelSection,
    pub decoder: DecoderSection,
    pub eval: EvalSection,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: BUILTIN_RISKY_CHAIN.to_string(),
            risky_chain: RiskyChainSpec::default(),
            episodes: 200,
            seed: 7,
            bins: BinCounts {
                state: 8,
                action: 2,
                reward: 16,
                rtg: 16,
            },
            model: ModelSection::default(),
            decoder: DecoderSection::default(),
            eval: EvalSection::default(),
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Context tokens; one whole transition when unset.
    pub window: Option<usize>,
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            window: None,
            lambda: 1.0,
            temperature: 1.0,
        }
    }
}

/// Unset fields fall back on the named preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub preset: String,
    pub beam_width: Option<usize>,
    pub horizon: Option<usize>,
    pub expansion_factor: Option<usize>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub reg_sign: Option<RegularizationMode>,
    pub strategy: Option<Strategy>,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            preset: "paper-default".to_string(),
            beam_width: None,
            horizon: None,
            expansion_factor: None,
            gamma: None,
            delta: None,
            alpha: None,
            reg_sign: None,
            strategy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub strategies: Vec<Strategy>,
    /// Number of evaluation episodes per strategy.
    pub seeds: usize,
    pub seed_start: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::RewardGreedy, Strategy::Pbs],
            seeds: 30,
            seed_start: 0,
        }
    }
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Builtin environment name or MDP document path.
    #[arg(long, global = true)]
    pub env: Option<String>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub state_bins: Option<u32>,
    #[arg(long, global = true)]
    pub action_bins: Option<u32>,
    #[arg(long, global = true)]
    pub reward_bins: Option<u32>,
    #[arg(long, global = true)]
    pub rtg_bins: Option<u32>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// `paper-default` or `risk-tolerant`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Comma-separated strategies for `eval`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub expansion_factor: Option<usize>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// `spread` or `concentrate`.
    #[arg(long, global = true)]
    pub reg_sign: Option<RegularizationMode>,
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    #[arg(long, global = true)]
    pub seed_start: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        set(&mut self.env, &o.env);
        set(&mut self.episodes, &o.episodes);
        set(&mut self.seed, &o.seed);
        set(&mut self.bins.state, &o.state_bins);
        set(&mut self.bins.action, &o.action_bins);
        set(&mut self.bins.reward, &o.reward_bins);
        set(&mut self.bins.rtg, &o.rtg_bins);
        set_opt(&mut self.model.window, &o.window);
        set(&mut self.model.lambda, &o.lambda);
        set(&mut self.model.temperature, &o.temperature);
        set(&mut self.decoder.preset, &o.preset);
        set_opt(&mut self.decoder.strategy, &o.strategy);
        set_opt(&mut self.decoder.beam_width, &o.beam_width);
        set_opt(&mut self.decoder.horizon, &o.horizon);
        set_opt(&mut self.decoder.expansion_factor, &o.expansion_factor);
        set_opt(&mut self.decoder.gamma, &o.gamma);
        set_opt(&mut self.decoder.delta, &o.delta);
        set_opt(&mut self.decoder.alpha, &o.alpha);
        set_opt(&mut self.decoder.reg_sign, &o.reg_sign);
        set(&mut self.eval.strategies, &o.strategies);
        set(&mut self.eval.seeds, &o.seeds);
        set(&mut self.eval.seed_start, &o.seed_start);
    }

    /// Defaults, then the config file if given, then flags.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, ValidationError> {
        let mut config = match file {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.episodes == 0 {
            return Err(ValidationError("episodes must be at least 1".into()));
        }
        if self.eval.seeds == 0 {
            return Err(ValidationError("eval.seeds must be at least 1".into()));
        }
        if self.eval.strategies.is_empty() {
            return Err(ValidationError("eval.strategies must not be empty".into()));
        }
        if self.model.window == Some(0) {
            return Err(ValidationError("model.window must be at least 1".into()));
        }
        if !(self.model.lambda > 0.0 && self.model.lambda.is_finite()) {
            return Err(ValidationError("model.lambda must be positive".into()));
        }
        self.risky_chain.validate().map_err(|e| ValidationError(e.to_string()))?;
        if self.env != BUILTIN_RISKY_CHAIN && !Path::new(&self.env).exists() {
            return Err(ValidationError(format!("env spec {} does not exist", self.env)));
        }
        self.decoder_config()?;
        Ok(())
    }

    /// Decoder settings for the configured (or given) strategy.
    pub fn decoder_config(&self) -> Result<DecoderConfig, ValidationError> {
        self.decoder_for(self.decoder.strategy.unwrap_or(Strategy::Pbs))
    }

    pub fn decoder_for(&self, strategy: Strategy) -> Result<DecoderConfig, ValidationError> {
        let d = &self.decoder;
        let base = DecoderConfig::preset(&d.preset).map_err(|e| ValidationError(e.to_string()))?;
        let config = DecoderConfig {
            beam_width: d.beam_width.unwrap_or(base.beam_width),
            horizon: d.horizon.unwrap_or(base.horizon),
            expansion_factor: d.expansion_factor.unwrap_or(base.expansion_factor),
            gamma: d.gamma.unwrap_or(base.gamma),
            delta: d.delta.unwrap_or(base.delta),
            alpha: d.alpha.unwrap_or(base.alpha),
            reg_sign: d.reg_sign.unwrap_or(base.reg_sign),
            temperature: self.model.temperature,
            strategy,
            seed: self.seed,
            ..base
        };
        config.validate().map_err(|e| ValidationError(e.to_string()))?;
        Ok(config)
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.seeds as u64).map(|i| self.eval.seed_start + i).collect()
    }
}

/// Flag, then config file, then `PBS_OUTPUT_DIR`, then `pbs-out`.
pub fn output_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}
