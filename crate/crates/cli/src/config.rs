use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use semnav::gridworld::GridParams;
use semnav::learner::TrainConfig;
use semnav::sensor::SensorConfig;
use serde::{Deserialize, Serialize};

/// Resolved settings of one invocation: the config file with flag overrides
/// applied. A copy is written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Where datasets are read from; defaults to `out`.
    pub data_dir: Option<PathBuf>,
    /// Model file for eval/bench/inspect, training state file for train.
    pub checkpoint: Option<PathBuf>,
    pub grid: GridParams,
    pub sensor: SensorConfig,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub inspect: InspectConfig,
    pub policy_lab: PolicyLabConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_dir: None,
            checkpoint: None,
            grid: GridParams::desk(16),
            sensor: SensorConfig::default(),
            train_episodes: 500,
            val_episodes: 100,
            test_episodes: 100,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            inspect: InspectConfig::default(),
            policy_lab: PolicyLabConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<String>,
    /// Use the true expert costs instead of a learned model.
    pub oracle: bool,
    /// Rollouts stop after this many times the expert's step count.
    pub step_cap_factor: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { splits: vec!["val".into(), "test".into()], oracle: false, step_cap_factor: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub min_steps: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { sizes: vec![16, 64], min_steps: 100, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectConfig {
    pub split: String,
    pub episode: usize,
    /// Pixels per cell in written images.
    pub scale: usize,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self { split: "test".into(), episode: 0, scale: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyLabConfig {
    pub size: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub scale: usize,
}

impl Default for PolicyLabConfig {
    fn default() -> Self {
        Self { size: 16, gamma: 0.95, alpha: 1.0, tol: 1e-8, max_iters: 100_000, scale: 16 }
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub grid_size: Option<usize>,
    pub episodes: Option<usize>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(config: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut c = match config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Some(p) = &o.out {
            c.out = p.clone();
        }
        if let Some(n) = o.grid_size {
            c.grid.width = n;
            c.grid.height = n;
        }
        // validation and test sets are a fifth of the training set
        if let Some(n) = o.episodes {
            c.train_episodes = n;
            c.val_episodes = n / 5;
            c.test_episodes = n / 5;
        }
        if let Some(e) = o.epochs {
            c.train.epochs = e;
        }
        if let Some(a) = o.alpha {
            c.train.alpha = a;
            c.policy_lab.alpha = a;
        }
        if let Some(lr) = o.lr {
            c.train.lr = lr;
        }
        if let Some(p) = &o.checkpoint {
            c.checkpoint = Some(p.clone());
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.width < 4 || self.grid.height < 4 {
            bail!("grid must be at least 4x4");
        }
        if self.sensor.classes < 2 {
            bail!("sensor needs at least two classes");
        }
        self.train.validate()?;
        if self.eval.step_cap_factor == 0 {
            bail!("eval.step_cap_factor must be positive");
        }
        if self.bench.repeats == 0 {
            bail!("bench.repeats must be positive");
        }
        if self.inspect.scale == 0 || self.policy_lab.scale == 0 {
            bail!("image scale must be positive");
        }
        let pl = &self.policy_lab;
        if !(0.0..1.0).contains(&pl.gamma) || !(pl.alpha > 0.0) || !(pl.tol > 0.0) {
            bail!("policy_lab needs 0 <= gamma < 1, alpha > 0 and tol > 0");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir.as_deref().unwrap_or(&self.out)
    }

    /// Write the resolved config as `<command>_config.json` in `out`.
    pub fn echo(&self, command: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        semnav::export::write_text(&self.out.join(format!("{command}_config.json")), &text)?;
        Ok(())
    }
}
