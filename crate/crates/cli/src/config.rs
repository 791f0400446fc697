//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use photon_da_core::io::CountDtype;
use photon_da_core::metrics::DEFAULT_DELTAS;
use photon_da_core::simulator::{Sbr, SceneKind};
use photon_da_core::stin::{disc_hidden_for, StinConfig};
use photon_da_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every dataset item and training run derives its seed from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub stin: StinSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub bins: usize,
    pub delta_ps: f64,
    pub fwhm_ps: f64,
    /// Optional waveform file (one sample per line); replaces the Gaussian pulse.
    pub pulse_file: Option<PathBuf>,
    /// Optional per-bin background profile with `bins` entries.
    pub noise_profile: Option<PathBuf>,
    pub n_illum: u32,
    pub eta: f64,
    pub depth_range: [f64; 2],
    pub scene_size: [usize; 2],
    pub scene_kinds: Vec<SceneKind>,
    pub count_dtype: CountDtype,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            bins: 128,
            delta_ps: 80.0,
            fwhm_ps: 400.0,
            pulse_file: None,
            noise_profile: None,
            n_illum: 1,
            eta: 1.0,
            depth_range: [0.15, 1.35],
            scene_size: [16, 16],
            scene_kinds: SceneKind::ALL.to_vec(),
            count_dtype: CountDtype::U16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source_count: usize,
    pub target_count: usize,
    pub test_count: usize,
    /// `"signal:noise"` photons per pixel, cycled over source samples.
    pub source_sbr: Vec<String>,
    pub target_sbr: Vec<String>,
    pub test_sbr: Vec<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source_count: 64,
            target_count: 50,
            test_count: 16,
            source_sbr: vec!["2:2".into()],
            target_sbr: vec!["2:50".into()],
            test_sbr: vec!["2:50".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StinSection {
    pub patch: [usize; 2],
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub trunk_channels: Vec<usize>,
    /// Defaults to pooling the whole patch.
    pub disc_pool: Option<[usize; 3]>,
    /// Defaults to the flatten-width rule.
    pub disc_hidden: Option<[usize; 2]>,
}

impl Default for StinSection {
    fn default() -> Self {
        let p = StinConfig::toy();
        Self {
            patch: [p.patch.0, p.patch.1],
            temporal_kernel: p.temporal_kernel,
            spatial_kernel: p.spatial_kernel,
            trunk_channels: p.trunk_channels,
            disc_pool: None,
            disc_hidden: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_tv: f64,
    pub lambda_a: f64,
    pub checkpoint_every: usize,
    pub max_adapt_iters: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lambda_tv: t.lambda_tv,
            lambda_a: t.lambda_a,
            checkpoint_every: t.checkpoint_every,
            max_adapt_iters: t.max_adapt_iters,
            shuffle: t.shuffle,
        }
    }
}

/// Inputs for the commands that consume data. Relative paths resolve against the
/// working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of labeled cubes (`*.cube` with matching `*.depth`).
    pub source: Option<PathBuf>,
    /// Directory of unlabeled cubes.
    pub target: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Cube file or directory of cubes to predict.
    pub input: Option<PathBuf>,
    /// Depth file or directory of predicted depth maps.
    pub prediction: Option<PathBuf>,
    /// Depth file or directory of ground-truth maps with matching names.
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub deltas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { deltas: DEFAULT_DELTAS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub instances: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { instances: photon_da_core::gradcheck::DEFAULT_INSTANCES }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn parse_sbrs(list: &[String], key: &str) -> Result<Vec<Sbr>, CliError> {
    if list.is_empty() {
        return Err(invalid(format!("{key} must list at least one ratio")));
    }
    list.iter().map(|s| s.parse::<Sbr>().map_err(|e| invalid(format!("{key}: {e}")))).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.sim;
        if s.bins == 0 || !(s.delta_ps > 0.0) || !(s.fwhm_ps > 0.0) {
            return Err(invalid("sim.bins, sim.delta_ps and sim.fwhm_ps must be positive"));
        }
        if !(s.eta > 0.0 && s.eta <= 1.0) || s.n_illum == 0 {
            return Err(invalid("sim.eta must lie in (0, 1] and sim.n_illum must be positive"));
        }
        if s.scene_size.contains(&0) || s.scene_kinds.is_empty() {
            return Err(invalid("sim.scene_size must be positive and sim.scene_kinds non-empty"));
        }
        parse_sbrs(&self.dataset.source_sbr, "dataset.source_sbr")?;
        parse_sbrs(&self.dataset.target_sbr, "dataset.target_sbr")?;
        parse_sbrs(&self.dataset.test_sbr, "dataset.test_sbr")?;
        self.stin_config()?;
        self.train_config().validate().map_err(|e| invalid(e.to_string()))?;
        if self.eval.deltas.iter().any(|d| !(*d > 1.0)) {
            return Err(invalid("eval.deltas must all exceed 1"));
        }
        Ok(())
    }

    pub fn stin_config(&self) -> Result<StinConfig, CliError> {
        let st = &self.stin;
        let patch = (st.patch[0], st.patch[1]);
        let mut cfg = StinConfig {
            bins: self.sim.bins,
            temporal_kernel: st.temporal_kernel,
            spatial_kernel: st.spatial_kernel,
            trunk_channels: st.trunk_channels.clone(),
            pools: st.trunk_channels.len().saturating_sub(1),
            patch,
            disc_pool: st.disc_pool.unwrap_or([1, patch.0, patch.1]),
            disc_hidden: [1, 1],
        };
        cfg.disc_hidden = st.disc_hidden.unwrap_or_else(|| disc_hidden_for(cfg.flatten_len()));
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lambda_tv: t.lambda_tv,
            lambda_a: t.lambda_a,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            max_adapt_iters: t.max_adapt_iters,
            shuffle: t.shuffle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_toy_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.stin_config().unwrap(), StinConfig::toy());
        assert_eq!(cfg.train.lambda_tv, 0.001);
        assert_eq!(cfg.train.lambda_a, 0.1);
        assert_eq!(cfg.train.lr, 0.001);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3").is_err());
        assert!(RunConfig::parse("[sim]\nbinz = 3").is_err());
    }

    #[test]
    fn paper_sizes_resolve() {
        let text = "[sim]\nbins = 1024\n[stin]\npatch = [32, 32]\ndisc_pool = [1, 8, 8]\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.stin_config().unwrap(), StinConfig::paper());
    }

    #[test]
    fn paper_sbr_lists_accepted() {
        let text = "[dataset]\nsource_sbr = [\"2:2\", \"5:2\", \"10:2\"]\ntarget_sbr = [\"2:50\", \"2:100\"]\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(parse_sbrs(&cfg.dataset.source_sbr, "s").unwrap().len(), 3);
        assert!(RunConfig::parse("[dataset]\nsource_sbr = [\"2-2\"]").is_err());
    }

    #[test]
    fn resolved_copy_round_trips() {
        let cfg = RunConfig::parse("seed = 11\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
