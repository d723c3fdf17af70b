use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparse_ct_core::nn::{TrainConfig, UNetConfig};
use sparse_ct_core::phantom::{CohortSpec, NoduleCenter, PhantomSpec, Split, SplitCounts};
use sparse_ct_core::tomo::{RampFilter, FULL_VIEW_COUNT};
use sparse_ct_service::ServiceConfig;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "SPARSE_CT_LAB_";
/// Config file used when `--config` is absent.
pub const ENV_CONFIG: &str = "SPARSE_CT_LAB_CONFIG";

const SECTIONS: [&str; 7] = [
    "phantom", "simulate", "model", "train", "evaluate", "study", "service",
];

const TOP_LEVEL: [&str; 2] = ["work_dir", "model_levels"];

/// Malformed config, unknown key or bad override.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every generated file. Relative paths elsewhere in the config
    /// resolve against it.
    pub work_dir: PathBuf,
    /// View levels that get their own trained network.
    pub model_levels: Vec<usize>,
    pub phantom: PhantomSection,
    pub simulate: SimulateSection,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
    pub study: StudySection,
    pub service: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            work_dir: PathBuf::from("run"),
            model_levels: vec![16, 32, 64, 128, 256, 512],
            phantom: PhantomSection::default(),
            simulate: SimulateSection::default(),
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateSection::default(),
            study: StudySection::default(),
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub size: usize,
    pub pixel_size: f64,
    pub n_vessels: usize,
    /// Nodule diameter range in mm.
    pub nodule_diameter_min: f64,
    pub nodule_diameter_max: f64,
    /// Diseased subjects per split.
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Healthy subjects, all in the test split.
    pub healthy: usize,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            size: 128,
            pixel_size: 2.0,
            n_vessels: 12,
            nodule_diameter_min: 10.0,
            nodule_diameter_max: 20.0,
            train: 8,
            validation: 2,
            test: 12,
            healthy: 7,
            seed: 0,
        }
    }
}

impl PhantomSection {
    pub fn cohort(&self) -> CohortSpec {
        CohortSpec {
            base: PhantomSpec {
                size: self.size,
                pixel_size: self.pixel_size,
                nodule_diameter: self.nodule_diameter_min,
                nodule_center: NoduleCenter::Random,
                n_vessels: self.n_vessels,
                seed: self.seed,
            },
            diseased: SplitCounts {
                train: self.train,
                validation: self.validation,
                test: self.test,
            },
            healthy: self.healthy,
            nodule_diameter_range: (self.nodule_diameter_min, self.nodule_diameter_max),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub full_views: usize,
    /// Sparse view levels. A level equal to `full_views` names the reference
    /// image, which is always written.
    pub levels: Vec<usize>,
    pub filter: RampFilter,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            full_views: FULL_VIEW_COUNT,
            levels: vec![16, 32, 64, 128, 256, 512],
            filter: RampFilter::RamLak,
        }
    }
}

impl SimulateSection {
    /// Levels below the full view count, ascending and deduplicated.
    pub fn sparse_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .levels
            .iter()
            .copied()
            .filter(|&l| l != self.full_views)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Splits that `infer` and `evaluate` process.
    pub splits: Vec<Split>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            splits: vec![Split::Test],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub readers: usize,
    /// Analyse an incomplete annotation log.
    pub partial: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            readers: 3,
            partial: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        let sim = &self.simulate;
        if sim.full_views == 0 {
            return bad("simulate.full_views must be positive".into());
        }
        for &l in &sim.levels {
            if l == 0 || l > sim.full_views || !sim.full_views.is_multiple_of(l) {
                return bad(format!(
                    "view level {l} does not divide the full view count {}",
                    sim.full_views
                ));
            }
        }
        let sparse = sim.sparse_levels();
        for l in &self.model_levels {
            if !sparse.contains(l) {
                return bad(format!("model level {l} is not a simulated sparse level"));
            }
        }
        if self.model.input_size != self.phantom.size {
            return bad(format!(
                "model.input_size {} differs from phantom.size {}",
                self.model.input_size, self.phantom.size
            ));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.phantom
            .cohort()
            .base
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.study.readers == 0 {
            return bad("study.readers must be positive".into());
        }
        Ok(())
    }

    /// `path` resolved against the work directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.work_dir.join(path)
        }
    }

    /// Service settings with store, token and UI paths resolved.
    pub fn service_resolved(&self) -> ServiceConfig {
        let s = &self.service;
        ServiceConfig {
            store: self.resolve(&s.store),
            tokens: self.resolve(&s.tokens),
            ui_dir: s.ui_dir.as_deref().map(|p| self.resolve(p)),
            ..s.clone()
        }
    }
}

/// Defaults, then the config file, then `SPARSE_CT_LAB_*` variables, then
/// `--set key=value` pairs.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
) -> Result<PipelineConfig, ConfigError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            text.parse::<Table>()
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != ENV_CONFIG)
        .collect();
    env.sort();
    for (key, value) in env {
        set_key(&mut table, &env_key(&key[ENV_PREFIX.len()..]), &value)?;
    }
    for pair in sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got {pair:?}")))?;
        set_key(&mut table, key.trim(), value.trim())?;
    }
    let cfg: PipelineConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `SERVICE_PRESENTATION_SEED` -> `service.presentation_seed`.
fn env_key(rest: &str) -> String {
    let lower = rest.to_ascii_lowercase();
    if TOP_LEVEL.contains(&lower.as_str()) {
        return lower;
    }
    for s in SECTIONS {
        if let Some(key) = lower.strip_prefix(s).and_then(|r| r.strip_prefix('_')) {
            return format!("{s}.{key}");
        }
    }
    lower
}

/// A TOML literal when `raw` parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, dotted: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("bad config key {dotted:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("{p} in {dotted:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}
