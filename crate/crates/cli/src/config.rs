//! Run configuration: defaults, the flat `key = value` config file with
//! section headers, flag overrides, and the canonical resolved form that
//! every command echoes into its output directory.

use std::path::Path;

use gle_core::data::pipeline::default_sigma;
use gle_core::eval::Metric;
use gle_core::network::{BackboneKind, NetworkConfig};
use gle_core::train::{OptimizerConfig, OptimizerKind};
use gle_core::{Error, Result};

/// Everything a run needs, fully resolved before a subcommand executes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub opt: OptimizerConfig,
    /// Heatmap Gaussian width; defaults to input_size / 32 when unset.
    pub sigma: Option<f64>,
    /// Optimizer steps to run this invocation; 0 means "train to
    /// `optimizer.epochs` epochs".
    pub steps: u64,
    /// Save an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    pub metric: Metric,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkConfig::default(),
            opt: OptimizerConfig::default(),
            sigma: None,
            steps: 0,
            checkpoint_every: 0,
            metric: Metric::NormalizedError,
        }
    }
}

impl RunConfig {
    /// The effective Gaussian width.
    pub fn resolved_sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.net.input_size))
    }

    /// Validate every section and fill derived defaults.
    pub fn resolve(mut self) -> Result<RunConfig> {
        self.sigma = Some(self.resolved_sigma());
        let sigma = self.sigma.unwrap();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "data.sigma must be positive and finite, got {sigma}"
            )));
        }
        self.net.validate()?;
        self.opt.validate()?;
        Ok(self)
    }

    /// Canonical serialized form: fixed section and key order, shortest
    /// round-trip float printing, so identical configs serialize to
    /// identical bytes.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        s.push_str("[network]\n");
        s.push_str(&format!("input_size = {}\n", self.net.input_size));
        s.push_str(&format!("backbone = {}\n", self.net.backbone.as_str()));
        s.push_str(&format!("width_multiplier = {}\n", self.net.width_multiplier));
        s.push_str(&format!("k = {}\n", self.net.k));
        s.push_str(&format!("num_landmarks = {}\n", self.net.num_landmarks));
        s.push_str(&format!("decoder_stages = {}\n", self.net.decoder_stages));
        s.push_str("\n[optimizer]\n");
        s.push_str(&format!("kind = {}\n", self.opt.kind.as_str()));
        s.push_str(&format!("learning_rate = {}\n", self.opt.learning_rate));
        s.push_str(&format!("momentum = {}\n", self.opt.momentum));
        s.push_str(&format!("beta1 = {}\n", self.opt.betas.0));
        s.push_str(&format!("beta2 = {}\n", self.opt.betas.1));
        s.push_str(&format!("weight_decay = {}\n", self.opt.weight_decay));
        s.push_str(&format!("target_scale = {}\n", self.opt.target_scale));
        s.push_str(&format!("epochs = {}\n", self.opt.epochs));
        s.push_str(&format!("batch_size = {}\n", self.opt.batch_size));
        s.push_str(&format!("seed = {}\n", self.opt.seed));
        s.push_str("\n[data]\n");
        s.push_str(&format!("sigma = {}\n", self.resolved_sigma()));
        s.push_str("\n[train]\n");
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s.push_str("\n[eval]\n");
        s.push_str(&format!("metric = {}\n", self.metric.as_str()));
        s
    }

    /// Parse a config file's text on top of the defaults.
    pub fn parse_file_text(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::InvalidConfig(format!("config line {line_no}: unterminated section header {line:?}"))
                })?;
                match name {
                    "network" | "optimizer" | "data" | "train" | "eval" => {
                        section = name.to_string();
                    }
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "config line {line_no}: unknown section [{other}]"
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "config line {line_no}: expected `key = value`, got {line:?}"
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            apply_kv(&mut config, &section, key, value).map_err(|e| {
                Error::InvalidConfig(format!("config line {line_no}: {e}"))
            })?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse_file_text(&text)
    }
}

fn apply_kv(
    config: &mut RunConfig,
    section: &str,
    key: &str,
    value: &str,
) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
        value
            .parse::<T>()
            .map_err(|_| format!("invalid value {value:?} for {key}"))
    }
    match (section, key) {
        ("network", "input_size") => config.net.input_size = num(key, value)?,
        ("network", "backbone") => {
            config.net.backbone = BackboneKind::parse(value).map_err(|e| e.to_string())?
        }
        ("network", "width_multiplier") => config.net.width_multiplier = num(key, value)?,
        ("network", "k") => config.net.k = num(key, value)?,
        ("network", "num_landmarks") => config.net.num_landmarks = num(key, value)?,
        ("network", "decoder_stages") => config.net.decoder_stages = num(key, value)?,
        ("optimizer", "kind") => {
            config.opt.kind = OptimizerKind::parse(value).map_err(|e| e.to_string())?
        }
        ("optimizer", "learning_rate") => config.opt.learning_rate = num(key, value)?,
        ("optimizer", "momentum") => config.opt.momentum = num(key, value)?,
        ("optimizer", "beta1") => config.opt.betas.0 = num(key, value)?,
        ("optimizer", "beta2") => config.opt.betas.1 = num(key, value)?,
        ("optimizer", "weight_decay") => config.opt.weight_decay = num(key, value)?,
        ("optimizer", "target_scale") => config.opt.target_scale = num(key, value)?,
        ("optimizer", "epochs") => config.opt.epochs = num(key, value)?,
        ("optimizer", "batch_size") => config.opt.batch_size = num(key, value)?,
        ("optimizer", "seed") => config.opt.seed = num(key, value)?,
        ("data", "sigma") => config.sigma = Some(num(key, value)?),
        ("train", "steps") => config.steps = num(key, value)?,
        ("train", "checkpoint_every") => config.checkpoint_every = num(key, value)?,
        ("eval", "metric") => config.metric = Metric::parse(value).map_err(|e| e.to_string())?,
        ("", _) => return Err(format!("key {key:?} appears before any [section] header")),
        (section, key) => return Err(format!("unknown key {key:?} in section [{section}]")),
    }
    Ok(())
}

/// Flag-level overrides shared by train/eval/predict; every field is applied
/// on top of whatever the config file set.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Network input resolution (square, multiple of 8)
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Backbone: vgg16 | toy
    #[arg(long)]
    pub backbone: Option<String>,
    /// Channel width multiplier
    #[arg(long)]
    pub width_multiplier: Option<f64>,
    /// Number of stacked GLE modules
    #[arg(long)]
    pub k: Option<usize>,
    /// Optimizer kind: adam | sgd_momentum
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum coefficient
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Target-heatmap multiplier inside the training loss
    #[arg(long)]
    pub target_scale: Option<f64>,
    /// Training epochs (used when --steps is 0)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for parameters, shuffling, and data order
    #[arg(long)]
    pub seed: Option<u64>,
    /// Heatmap Gaussian width in pixels
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Optimizer steps to run this invocation (0 = train by epochs)
    #[arg(long)]
    pub steps: Option<u64>,
    /// Checkpoint every N steps (0 = final checkpoint only)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Score with the literal distance-over-area variant of the metric
    #[arg(long)]
    pub literal_eq5: bool,
}

impl Overrides {
    pub fn apply(&self, mut config: RunConfig) -> Result<RunConfig> {
        if let Some(v) = self.input_size {
            config.net.input_size = v;
        }
        if let Some(v) = &self.backbone {
            config.net.backbone = BackboneKind::parse(v)?;
        }
        if let Some(v) = self.width_multiplier {
            config.net.width_multiplier = v;
        }
        if let Some(v) = self.k {
            config.net.k = v;
        }
        if let Some(v) = &self.optimizer {
            config.opt.kind = OptimizerKind::parse(v)?;
        }
        if let Some(v) = self.lr {
            config.opt.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            config.opt.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            config.opt.weight_decay = v;
        }
        if let Some(v) = self.target_scale {
            config.opt.target_scale = v;
        }
        if let Some(v) = self.epochs {
            config.opt.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.opt.batch_size = v;
        }
        if let Some(v) = self.seed {
            config.opt.seed = v;
        }
        if let Some(v) = self.sigma {
            config.sigma = Some(v);
        }
        if let Some(v) = self.steps {
            config.steps = v;
        }
        if let Some(v) = self.checkpoint_every {
            config.checkpoint_every = v;
        }
        if self.literal_eq5 {
            config.metric = Metric::LiteralEq5;
        }
        Ok(config)
    }
}

/// Merge config file (if given) and flag overrides into a resolved config.
pub fn resolve_run_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let base = match file {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overrides.apply(base)?.resolve()
}

/// Write the resolved config into the output directory for provenance.
pub fn echo_resolved(out_dir: &Path, config: &RunConfig) -> Result<()> {
    let path = out_dir.join("resolved.cfg");
    std::fs::write(&path, config.to_file_string())
        .map_err(|e| Error::io(path.display().to_string(), e))
}
