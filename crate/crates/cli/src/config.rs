use std::fs;
use std::path::Path;

use metreg::kernels::MultiGaussianSpec;
use metreg::optimizer::OptimizerConfig;
use metreg::regressor::RegressorConfig;
use metreg::synth::SynthParams;
use metreg::vsvf::EnergyParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Computation grid size relative to the image grid.
    pub comp_factor: f64,
    /// Side length of generated images.
    pub size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            comp_factor: 0.5,
            size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorSection {
    pub hidden: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn2_init_scale: f64,
    /// Feed the momentum to the regressor next to the image.
    pub momentum_input: bool,
}

impl Default for RegressorSection {
    fn default() -> Self {
        let c = RegressorConfig::new(2);
        RegressorSection {
            hidden: c.hidden,
            kernel: c.kernel,
            leaky_slope: c.leaky_slope,
            bn_eps: c.bn_eps,
            bn2_init_scale: c.bn2_init_scale,
            momentum_input: false,
        }
    }
}

impl RegressorSection {
    pub fn build(&self, outputs: usize) -> RegressorConfig {
        let mut c = RegressorConfig::new(outputs);
        c.hidden = self.hidden;
        c.kernel = self.kernel;
        c.leaky_slope = self.leaky_slope;
        c.bn_eps = self.bn_eps;
        c.bn2_init_scale = self.bn2_init_scale;
        if self.momentum_input {
            c = c.with_momentum();
        }
        c
    }
}

/// Every knob of a run, one TOML section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub kernels: MultiGaussianSpec,
    pub energy: EnergyParams,
    pub regressor: RegressorSection,
    pub optimizer: OptimizerConfig,
    pub synth: SynthParams,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`) and applies `MREG_SEED`.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(one_line(&e.to_string())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var("MREG_SEED") {
            cfg.optimizer.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("MREG_SEED is not an unsigned integer: {s:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.run.comp_factor > 0.0 && self.run.comp_factor <= 1.0) {
            return Err(CliError::Config("run.comp_factor must lie in (0, 1]".into()));
        }
        self.kernels.validate()?;
        self.energy.validate()?;
        self.optimizer.validate()?;
        self.synth.validate(&self.kernels)?;
        self.regressor.build(self.kernels.n()).validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the resolved configuration as `config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), format!("# config_hash={}\n{}", self.hash(), self.to_text()))?;
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[optimizer]\nlr_indvidual = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[optimiser]\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = toml::from_str("[energy]\nlambda_tv = 0.5\n").unwrap();
        assert_eq!(c.energy.lambda_tv, 0.5);
        assert_eq!(c.optimizer, OptimizerConfig::default());
    }
}
