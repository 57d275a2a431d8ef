use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{FileFormat, FrequencySweep};
use crate::geometry::{port_count, GeometryParams, GridShape};
use crate::response::ObjectiveSpec;
use crate::trust_region::{Bounds, TrustRegionConfig};

use super::PipelineError;

fn default_z0() -> f64 {
    50.0
}

fn default_weight() -> f64 {
    2.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 3, cols: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub x0: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            x0: GeometryParams::INITIAL.to_array().to_vec(),
            lower: GeometryParams::LOWER.to_array().to_vec(),
            upper: GeometryParams::UPPER.to_array().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub f_start_ghz: f64,
    pub f_stop_ghz: f64,
    pub n_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            f_start_ghz: FrequencySweep::DEFAULT_START_GHZ,
            f_stop_ghz: FrequencySweep::DEFAULT_STOP_GHZ,
            n_points: FrequencySweep::DEFAULT_POINTS,
        }
    }
}

/// Substrate description. Only the thickness reaches the synthetic
/// circuit; permittivity and loss tangent are carried for the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubstrateConfig {
    pub h_mm: f64,
    pub er: f64,
    pub tand: f64,
}

impl Default for SubstrateConfig {
    fn default() -> Self {
        Self {
            h_mm: 1.6,
            er: 4.3,
            tand: 0.025,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormatConfig {
    Touchstone,
    Json,
}

impl From<FileFormatConfig> for FileFormat {
    fn from(f: FileFormatConfig) -> Self {
        match f {
            FileFormatConfig::Touchstone => FileFormat::Touchstone,
            FileFormatConfig::Json => FileFormat::Json,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Multiport file for the file backend, relative to the config file.
    pub path: Option<PathBuf>,
    /// Inferred from the extension when absent.
    pub format: Option<FileFormatConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub objective: ObjectiveSpec,
    /// Topologies whose predicted response has fewer resonances than this
    /// are treated as infeasible. Feature-mode tuning needs as many
    /// resonances as it has targets at the starting design.
    #[serde(default)]
    pub min_resonances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default)]
    pub feature_mode: bool,
    pub objective: ObjectiveSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_z0")]
    pub z0: f64,
    /// Cost of one multiport extraction in single-response evaluations.
    #[serde(default = "default_weight")]
    pub extraction_cost_weight: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub substrate: SubstrateConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    #[serde(default)]
    pub trust_region: TrustRegionConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

impl PipelineConfig {
    /// Parses and validates TOML text. Relative file paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().replace('\n', " ")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn shape(&self) -> Result<GridShape, PipelineError> {
        GridShape::new(self.grid.rows, self.grid.cols).map_err(|e| config_err(format!("grid: {e}")))
    }

    pub fn port_count(&self) -> Result<usize, PipelineError> {
        Ok(port_count(self.shape()?))
    }

    pub fn sweep(&self) -> Result<FrequencySweep, PipelineError> {
        let s = &self.sweep;
        FrequencySweep::uniform(s.f_start_ghz, s.f_stop_ghz, s.n_points).map_err(|e| config_err(format!("sweep: {e}")))
    }

    pub fn bounds(&self) -> Result<Bounds, PipelineError> {
        Bounds::new(self.design.lower.clone(), self.design.upper.clone())
            .map_err(|e| config_err(format!("design: {e}")))
    }

    pub fn x0(&self) -> GeometryParams {
        GeometryParams::from_slice(&self.design.x0)
    }

    /// Resolved path of the multiport file, for the file backend.
    pub fn backend_file(&self) -> Result<(PathBuf, FileFormat), PipelineError> {
        let path = self
            .backend
            .path
            .as_ref()
            .ok_or_else(|| config_err("backend.path is required for the file backend"))?;
        let path = self.base_dir.join(path);
        let format = match self.backend.format {
            Some(f) => f.into(),
            None => FileFormat::from_path(&path)
                .ok_or_else(|| config_err(format!("cannot infer the format of '{}'", path.display())))?,
        };
        Ok((path, format))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.shape()?;
        self.sweep()?;
        if !(self.z0 > 0.0) {
            return Err(config_err("z0 must be positive"));
        }
        if !(self.extraction_cost_weight >= 0.0) {
            return Err(config_err("extraction_cost_weight must be non-negative"));
        }
        if !(self.substrate.h_mm > 0.0) {
            return Err(config_err("substrate.h_mm must be positive"));
        }
        for (name, v) in [
            ("design.x0", &self.design.x0),
            ("design.lower", &self.design.lower),
            ("design.upper", &self.design.upper),
        ] {
            if v.len() != GeometryParams::DIM {
                return Err(config_err(format!(
                    "{name} needs {} values [l, d, alpha, gamma], got {}",
                    GeometryParams::DIM,
                    v.len()
                )));
            }
        }
        let bounds = self.bounds()?;
        for (k, &v) in self.design.x0.iter().enumerate() {
            let (lo, hi) = (bounds.lower()[k], bounds.upper()[k]);
            if !(lo..=hi).contains(&v) {
                return Err(config_err(format!(
                    "design.x0[{k}] ({}) = {v} lies outside [{lo}, {hi}]",
                    GeometryParams::NAMES[k]
                )));
            }
        }
        self.stage1
            .objective
            .validate()
            .map_err(|e| config_err(format!("stage1.objective: {e}")))?;
        self.stage2
            .objective
            .validate()
            .map_err(|e| config_err(format!("stage2.objective: {e}")))?;
        if self.stage2.feature_mode && self.stage2.objective.feature_count().is_none() {
            return Err(config_err("stage2.feature_mode requires a feature objective"));
        }
        self.trust_region
            .validate()
            .map_err(|e| config_err(format!("trust_region: {e}")))?;
        if self.backend.kind == BackendKind::File {
            self.backend_file()?;
        }
        Ok(())
    }
}
