//! Command-line front end: configuration resolution and subcommands.
//!
//! Settings resolve in order: built-in defaults, the `--config` JSON file, the `STAGIN_SEED`
//! environment variable (seed only), then explicit flags.

mod commands;
mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fcgraph::WindowConfig;
use crate::stagin::{ModelConfig, Readout};
use crate::synthdata::{Schedule, SynthConfig};
use crate::train::TrainConfig;

pub use commands::run;
pub use selftest::{selftest, CheckOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub const SEED_ENV: &str = "STAGIN_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Model hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub readout: Readout,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub lambda_ortho: f64,
    pub dropout_rep: f64,
    pub dropout_attn: f64,
    pub timestamp_encoding: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let m = ModelConfig::new(2, 2);
        Self {
            readout: m.readout,
            n_layers: m.n_layers,
            hidden_dim: m.hidden_dim,
            lambda_ortho: m.lambda_ortho,
            dropout_rep: m.dropout_rep,
            dropout_attn: m.dropout_attn,
            timestamp_encoding: m.timestamp_encoding,
        }
    }
}

impl ModelOptions {
    pub fn to_config(&self, n_nodes: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            n_nodes,
            n_classes,
            readout: self.readout,
            lambda_ortho: self.lambda_ortho,
            dropout_rep: self.dropout_rep,
            dropout_attn: self.dropout_attn,
            timestamp_encoding: self.timestamp_encoding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    /// Cutoff coefficient for attended timepoints.
    pub alpha: f64,
    /// Threshold at `mean + alpha * sd` instead of `alpha * sd`.
    pub centered: bool,
    pub clusters: Vec<usize>,
    /// Cluster continuous correlations instead of binary adjacency.
    pub continuous: bool,
    pub contrast: [f64; 2],
    pub fwe_level: f64,
    pub percentile: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            centered: false,
            clusters: vec![7, 5, 3],
            continuous: false,
            contrast: [1.0, -1.0],
            fwe_level: 0.05,
            percentile: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub window: WindowConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub analysis: AnalysisOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window: WindowConfig::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            analysis: AnalysisOptions::default(),
        }
    }
}

impl RunConfig {
    /// Every violation across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.window.violations();
        v.extend(self.model.to_config(2, 2).violations());
        v.extend(self.train.violations());
        v.extend(self.synth.violations());
        let a = &self.analysis;
        if !(a.alpha >= 0.0) {
            v.push(format!("alpha must be nonnegative, got {}", a.alpha));
        }
        if a.clusters.is_empty() || a.clusters.contains(&0) {
            v.push("clusters must be a nonempty list of positive counts".to_string());
        }
        if !(a.fwe_level > 0.0 && a.fwe_level < 1.0) {
            v.push(format!("fwe-level must lie in (0, 1), got {}", a.fwe_level));
        }
        if !(a.percentile > 0.0 && a.percentile <= 100.0) {
            v.push(format!("percentile must lie in (0, 100], got {}", a.percentile));
        }
        v
    }

    /// Canonical JSON form written next to every result.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(CliError::runtime)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_json()).map_err(CliError::runtime)
    }
}

#[derive(Parser, Debug)]
#[command(name = "stagin", version, about = "Spatio-temporal attention graph networks for dynamic functional connectivity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Build thresholded window graphs (DFCG files) from ROI timeseries.
    Graphs {
        #[command(flatten)]
        common: CommonArgs,
        /// A timeseries CSV or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Cross-validated training.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (manifest.json or labels.csv).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Also write out-of-fold attention of every subject to attention.attn.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Predict with a checkpoint and dump attention.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Temporal attention analysis: attended timepoints, connectivity states, group ratios.
    AnalyzeTime {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Spatial attention analysis: task GLM, contrast test, network proportions.
    AnalyzeSpace {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Design CSV with one row per window and two 0/1 columns (task, rest).
        #[arg(long)]
        design: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Render attention heatmaps, attention curves and network proportions as SVG.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        attention: PathBuf,
        /// Subject to plot; defaults to the first in the dump.
        #[arg(long)]
        subject: Option<String>,
        /// Network proportion CSV written by analyze-space.
        #[arg(long)]
        icn: Option<PathBuf>,
    },
    /// Run the built-in invariant checks and print a summary table.
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Self::Synth { common, .. }
            | Self::Graphs { common, .. }
            | Self::Train { common, .. }
            | Self::Eval { common, .. }
            | Self::AnalyzeTime { common, .. }
            | Self::AnalyzeSpace { common, .. }
            | Self::Plot { common, .. }
            | Self::Selftest { common } => common,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct WindowArgs {
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub edge_percentile: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub readout: Option<Readout>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dropout_rep: Option<f64>,
    #[arg(long)]
    pub dropout_attn: Option<f64>,
    /// Disable the timestamp encoder.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub slice_len: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub n_nodes: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_states: Option<usize>,
    #[arg(long)]
    pub rho_in: Option<f64>,
    #[arg(long)]
    pub rho_out: Option<f64>,
    #[arg(long)]
    pub group_effect: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub mean_dwell: Option<f64>,
    #[arg(long)]
    pub occupancy_bias: Option<f64>,
    /// Switch to a task schedule with this many tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Length of alternating rest and task blocks in a task schedule.
    #[arg(long, default_value_t = 30)]
    pub block_len: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub centered: bool,
    /// Comma-separated cluster counts.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Option<Vec<usize>>,
    #[arg(long)]
    pub continuous: bool,
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub fwe_level: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl WindowArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.window.gamma, self.gamma);
        set(&mut c.window.stride, self.stride);
        set(&mut c.window.edge_percentile, self.edge_percentile);
    }
}

impl ModelArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        let m = &mut c.model;
        set(&mut m.readout, self.readout);
        set(&mut m.n_layers, self.layers);
        set(&mut m.hidden_dim, self.hidden_dim);
        set(&mut m.lambda_ortho, self.lambda);
        set(&mut m.dropout_rep, self.dropout_rep);
        set(&mut m.dropout_attn, self.dropout_attn);
        if self.no_timestamp {
            m.timestamp_encoding = false;
        }
    }
}

impl TrainArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.minibatch_size, self.batch);
        set(&mut t.lr_base, self.lr_base);
        set(&mut t.lr_peak, self.lr_peak);
        set(&mut t.lr_final, self.lr_final);
        set(&mut t.warmup_frac, self.warmup_frac);
        set(&mut t.slice_len, self.slice_len);
        set(&mut t.folds, self.folds);
    }
}

impl SynthArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.synth;
        set(&mut s.n_subjects, self.n_subjects);
        set(&mut s.n_nodes, self.n_nodes);
        set(&mut s.t_max, self.t_max);
        set(&mut s.tr_s, self.tr);
        set(&mut s.n_blocks, self.n_blocks);
        set(&mut s.n_states, self.n_states);
        set(&mut s.rho_in, self.rho_in);
        set(&mut s.rho_out, self.rho_out);
        set(&mut s.group_effect, self.group_effect);
        set(&mut s.noise_std, self.noise_std);
        if let Some(n_tasks) = self.tasks {
            s.schedule = Schedule::alternating(n_tasks, s.t_max, self.block_len);
        }
        if let Schedule::Rest {
            mean_dwell,
            occupancy_bias,
        } = &mut s.schedule
        {
            set(mean_dwell, self.mean_dwell);
            set(occupancy_bias, self.occupancy_bias);
        }
    }
}

impl AnalysisArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        let a = &mut c.analysis;
        set(&mut a.alpha, self.alpha);
        set(&mut a.clusters, self.clusters.clone());
        set(&mut a.percentile, self.percentile);
        set(&mut a.fwe_level, self.fwe_level);
        a.centered |= self.centered;
        a.continuous |= self.continuous;
    }
}

/// Resolves the run configuration for a command. `env_seed` is the raw `STAGIN_SEED` value.
pub fn resolve(command: &Command, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let common = command.common();
    let mut c = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Invalid(vec![format!("cannot read config {}: {e}", path.display())]))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Invalid(vec![format!("malformed config {}: {e}", path.display())]))?
        }
        None => RunConfig::default(),
    };
    if let Some(raw) = env_seed {
        c.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(vec![format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")]))?;
    }
    set(&mut c.seed, common.seed);
    match command {
        Command::Synth { synth, .. } => synth.apply(&mut c),
        Command::Graphs { window, .. } | Command::Eval { window, .. } => window.apply(&mut c),
        Command::Train {
            window, model, train, ..
        } => {
            window.apply(&mut c);
            model.apply(&mut c);
            train.apply(&mut c);
        }
        Command::AnalyzeTime { window, analysis, .. } | Command::AnalyzeSpace { window, analysis, .. } => {
            window.apply(&mut c);
            analysis.apply(&mut c);
        }
        Command::Plot { .. } | Command::Selftest { .. } => {}
    }
    c.train.seed = c.seed;
    c.synth.seed = c.seed;
    let v = c.violations();
    if v.is_empty() {
        Ok(c)
    } else {
        Err(CliError::Invalid(v))
    }
}
