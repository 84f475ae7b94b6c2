//! On-disk run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchmarkGrid;
use crate::data::DataSource;
use crate::features::ActivationKind;
use crate::kernels::KernelFamily;
use crate::training::{FitSchedule, ModelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_data")]
    pub data: DataSource,
    /// Required by `fit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub schedule: FitSchedule,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    /// Required by `benchmark`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkGrid>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_data() -> DataSource {
    DataSource::named("snelson")
}

/// Kernel/activation pairs for the coefficient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub kernels: Vec<KernelFamily>,
    pub activations: Vec<ActivationKind>,
    pub max_level: usize,
    /// Input dimension `d`; the sphere is `S^d` after bias augmentation.
    pub input_dim: usize,
    pub lengthscale: Option<f64>,
    /// Overrides the surface-area constant in front of the Funk–Hecke
    /// integral, for sensitivity checks.
    pub funk_hecke_constant: Option<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            kernels: vec![KernelFamily::Arccos1, KernelFamily::Matern52, KernelFamily::SquaredExp],
            activations: vec![ActivationKind::Relu, ActivationKind::Softplus],
            max_level: 35,
            input_dim: 2,
            lengthscale: None,
            funk_hecke_constant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// For one-dimensional data, predict on this many evenly spaced inputs
    /// spanning the data; zero predicts at the data inputs.
    pub grid: usize,
    /// Fraction of the input range added on each side of the grid.
    pub padding: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            grid: 200,
            padding: 0.1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.predict.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: default_out(),
            data: default_data(),
            model: None,
            schedule: FitSchedule::default(),
            spectrum: SpectrumConfig::default(),
            predict: PredictConfig::default(),
            benchmark: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{FeatureLabel, GridConfig};
    use crate::models::Mode;
    use crate::training::{FeatureFamily, OptimizerKind};
    use proptest::prelude::*;

    const EXAMPLE: &str = r#"
seed = 3
out = "runs/snelson"

[data]
name = "snelson"

[model]
kernel = "matern52"
max_level = 8
base = "activations"
num_base = 8
orthogonal = "points"
num_orthogonal = 8
activation = "relu"
mode = "solve"

[schedule]
optimizer = "lbfgs"
max_iters = 500

[benchmark]
datasets = ["energy"]
kernels = ["arccos"]
features = ["softplus"]
configs = [{ M = 128, K = 0, L = 6 }, { M = 128, K = 128, L = 6 }]
seeds = [0, 1, 2, 3, 4]
"#;

    #[test]
    fn example_parses_with_aliases_and_defaults() {
        let c = RunConfig::from_toml(EXAMPLE).unwrap();
        let m = c.model.as_ref().unwrap();
        assert_eq!(m.kernel, KernelFamily::Matern52);
        assert_eq!(c.schedule.optimizer, OptimizerKind::QuasiNewtonFullBatch);
        assert_eq!(c.schedule.phase1_iters, FitSchedule::default().phase1_iters);
        let b = c.benchmark.as_ref().unwrap();
        assert_eq!(b.configs[1], GridConfig { m: 128, k: 128, l: 6 });
        assert_eq!(b.features, vec![FeatureLabel::Softplus]);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[model]\nkernel = \"rbf\"").is_err());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            // TOML integers are signed 64-bit.
            0u64..=i64::MAX as u64,
            0usize..40,
            1usize..300,
            0usize..50,
            prop::sample::select(vec![Mode::Svgp, Mode::Odvgp, Mode::Solve]),
            prop::option::of(1e-3f64..1e3),
            1e-6f64..1.0,
            any::<bool>(),
        )
            .prop_map(|(seed, l, m, k, mode, ls, lr, adam)| RunConfig {
                seed,
                model: Some(ModelSpec {
                    kernel: KernelFamily::SquaredExp,
                    bias: 1.0,
                    max_level: l,
                    base: FeatureFamily::Harmonics,
                    num_base: m,
                    orthogonal: FeatureFamily::Points,
                    num_orthogonal: k,
                    activation: ActivationKind::Softplus,
                    mode,
                }),
                schedule: FitSchedule {
                    learning_rate: lr,
                    optimizer: if adam {
                        OptimizerKind::StochasticMinibatch
                    } else {
                        OptimizerKind::QuasiNewtonFullBatch
                    },
                    seed,
                    ..Default::default()
                },
                spectrum: SpectrumConfig {
                    lengthscale: ls,
                    max_level: l,
                    ..Default::default()
                },
                ..Default::default()
            })
    }

    proptest! {
        #[test]
        fn config_round_trips(c in arb_config()) {
            let text = c.to_toml().unwrap();
            prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        }
    }
}
