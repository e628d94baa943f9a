//! TOML configuration plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use calibcusum::{ChartLabel, ChartSpec, LloParams, RecordFormat, TraceFormat};
use serde::Deserialize;

pub const DEFAULT_ALPHA: f64 = 0.005;
pub const DEFAULT_REPLICATES: usize = 2000;
pub const DEFAULT_MAGNITUDE: f64 = 2.0;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub halt_on_signal: Option<bool>,
    pub input: Option<PathBuf>,
    pub format: Option<RecordFormat>,
    pub trace: Option<PathBuf>,
    pub trace_format: Option<TraceFormat>,
    pub snapshot_in: Option<PathBuf>,
    pub snapshot_out: Option<PathBuf>,
    /// Magnitudes for the default four charts.
    pub delta_magnitude: Option<f64>,
    pub gamma_magnitude: Option<f64>,
    #[serde(default)]
    pub charts: Vec<ChartEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartEntry {
    pub label: ChartLabel,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.input,
            &mut config.trace,
            &mut config.snapshot_in,
            &mut config.snapshot_out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// Resolved chart settings.
pub struct ChartSettings {
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

/// Chart `i` is seeded with `seed + i`.
pub fn build_charts(file: &FileConfig, s: &ChartSettings) -> Result<Vec<ChartSpec<f64>>> {
    if file.charts.is_empty() {
        let d = file.delta_magnitude.unwrap_or(DEFAULT_MAGNITUDE);
        let g = file.gamma_magnitude.unwrap_or(DEFAULT_MAGNITUDE);
        return Ok(ChartSpec::standard_four(d, g, s.alpha, s.replicates, s.seed)?);
    }
    if file.delta_magnitude.is_some() || file.gamma_magnitude.is_some() {
        bail!("delta_magnitude/gamma_magnitude apply only when no [[charts]] are listed");
    }
    file.charts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let alt = LloParams::new(c.delta, c.gamma)?;
            Ok(ChartSpec::new(c.label, alt, s.alpha, s.replicates, s.seed.wrapping_add(i as u64))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chart_list() {
        let f: FileConfig = toml::from_str(
            "alpha = 0.01\nseed = 4\n[[charts]]\nlabel = \"scale-down\"\ngamma = 0.5\n[[charts]]\nlabel = \"shift-up\"\ndelta = 3.0\n",
        )
        .unwrap();
        let charts = build_charts(
            &f,
            &ChartSettings {
                alpha: 0.01,
                replicates: 50,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(charts.len(), 2);
        assert_eq!(charts[0].label(), ChartLabel::ScaleDown);
        assert_eq!(charts[0].alternative().gamma(), 0.5);
        assert_eq!(charts[1].seed(), 5);
    }

    #[test]
    fn default_is_four_charts() {
        let charts = build_charts(
            &FileConfig::default(),
            &ChartSettings {
                alpha: 0.01,
                replicates: 50,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(charts.len(), 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_labels() {
        assert!(toml::from_str::<FileConfig>("alpah = 0.1").is_err());
        assert!(toml::from_str::<FileConfig>("[[charts]]\nlabel = \"sideways\"").is_err());
        let f: FileConfig = toml::from_str("[[charts]]\nlabel = \"shift-up\"\ndelta = 0.5").unwrap();
        let s = ChartSettings {
            alpha: 0.01,
            replicates: 50,
            seed: 0,
        };
        assert!(build_charts(&f, &s).is_err());
    }
}
