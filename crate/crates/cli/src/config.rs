use std::path::{Path, PathBuf};

use graphscan::backbone::BackboneConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable consulted for the output directory when `--out-dir`
/// is not given.
pub const OUT_DIR_ENV: &str = "GRAPHSCAN_OUT_DIR";

/// Resolved settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub radius: usize,
    pub heads: usize,
    /// SSM state size used by `verify`.
    pub state_dim: usize,
    pub variant: String,
    pub radii: [usize; 4],
    pub relative_bias: bool,
    /// When set, replaces the tolerance of every verification check.
    pub tolerance: Option<f64>,
    pub out_dir: PathBuf,
    /// Custom backbone table from the config file; takes precedence over
    /// `variant` in the `backbone` subcommand.
    pub backbone: Option<BackboneConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 8,
            width: 8,
            channels: 4,
            radius: 1,
            heads: 1,
            state_dim: 4,
            variant: "tiny".into(),
            radii: [1, 1, 2, 3],
            relative_bias: true,
            tolerance: None,
            out_dir: PathBuf::from("graphscan-out"),
            backbone: None,
        }
    }
}

/// Config file contents; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub radius: Option<usize>,
    pub heads: Option<usize>,
    pub state_dim: Option<usize>,
    pub variant: Option<String>,
    pub radii: Option<[usize; 4]>,
    pub relative_bias: Option<bool>,
    pub tolerance: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub backbone: Option<BackboneConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub radius: Option<usize>,
    pub heads: Option<usize>,
    pub state_dim: Option<usize>,
    pub variant: Option<String>,
    pub tolerance: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then the file, then the environment (output directory
    /// only), then flags.
    pub fn resolve(
        file: Option<FileConfig>,
        env_out_dir: Option<PathBuf>,
        flags: Overrides,
    ) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            macro_rules! take {
                ($($field:ident),*) => { $(if let Some(v) = f.$field { cfg.$field = v; })* };
            }
            take!(
                seed,
                height,
                width,
                channels,
                radius,
                heads,
                state_dim,
                variant,
                radii,
                relative_bias,
                out_dir
            );
            cfg.tolerance = f.tolerance.or(cfg.tolerance);
            cfg.backbone = f.backbone;
        }
        if let Some(dir) = env_out_dir {
            cfg.out_dir = dir;
        }
        macro_rules! flag {
            ($($field:ident),*) => { $(if let Some(v) = flags.$field { cfg.$field = v; })* };
        }
        flag!(seed, height, width, channels, radius, heads, state_dim, variant, out_dir);
        cfg.tolerance = flags.tolerance.or(cfg.tolerance);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad =
            |field: &str, why: &str| Err(CliError::Usage(format!("invalid `{field}`: {why}")));
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("heads", self.heads),
            ("state_dim", self.state_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return bad("heads", "must divide `channels`");
        }
        if let Some(t) = self.tolerance {
            if !(t.is_finite() && t >= 0.0) {
                return bad("tolerance", "must be a finite non-negative number");
            }
        }
        if self.backbone.is_none() && BackboneConfig::by_name(&self.variant).is_none() {
            return bad(
                "variant",
                &format!(
                    "unknown variant {:?}; expected one of {}",
                    self.variant,
                    BackboneConfig::VARIANTS.join(", ")
                ),
            );
        }
        Ok(())
    }

    /// The backbone table selected by the file or the variant name, with the
    /// run-level radii and bias switch applied.
    pub fn backbone_config(&self) -> CliResult<BackboneConfig> {
        let mut cfg = match &self.backbone {
            Some(custom) => return Ok(custom.clone()),
            None => BackboneConfig::by_name(&self.variant).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown variant {:?}; expected one of {}",
                    self.variant,
                    BackboneConfig::VARIANTS.join(", ")
                ))
            })?,
        };
        cfg.radii = self.radii;
        cfg.relative_bias = self.relative_bias;
        Ok(cfg)
    }

    pub fn tolerance_or(&self, default: f64) -> f64 {
        self.tolerance.unwrap_or(default)
    }
}
