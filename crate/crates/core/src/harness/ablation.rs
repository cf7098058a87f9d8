use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::train_run;
use crate::aslmask::MaskKind;
use crate::error::{Error, Result};
use crate::synthdata::DatasetBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    MaskType,
    Contrastive,
    Tau,
    FramesPerMap,
    /// Supervised-only, tube mixup, guided mixup, guided mixup plus
    /// contrastive alignment.
    Method,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::MaskType, Axis::Contrastive, Axis::Tau, Axis::FramesPerMap, Axis::Method];

    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskType => "mask-type",
            Axis::Contrastive => "contrastive",
            Axis::Tau => "tau",
            Axis::FramesPerMap => "frames-per-map",
            Axis::Method => "method",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::MaskType => &["asl", "tube", "random"],
            Axis::Contrastive => &["on", "off"],
            Axis::Tau => &["0.1", "0.3", "0.5", "0.7", "0.9"],
            Axis::FramesPerMap => &["1", "2", "4", "8"],
            Axis::Method => &["asl+contrastive", "asl", "tube", "supervised"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        let bad = || Error::Config(format!("`{value}` is not a valid {} value", self.name()));
        match self {
            Axis::MaskType => {
                c.mask.kind = MaskKind::ALL.into_iter().find(|k| k.name() == value).ok_or_else(bad)?;
            }
            Axis::Contrastive => match value {
                "on" => c.loss.gamma3 = contrastive_weight(base),
                "off" => c.loss.gamma3 = 0.0,
                _ => return Err(bad()),
            },
            Axis::Tau => {
                c.ssl.tau = value.parse().map_err(|_| bad())?;
            }
            Axis::FramesPerMap => {
                c.mask.frames_per_map = value.parse().map_err(|_| bad())?;
            }
            Axis::Method => match value {
                "supervised" => {
                    c.loss.gamma1 = 0.0;
                    c.loss.gamma2 = 0.0;
                    c.loss.gamma3 = 0.0;
                }
                "tube" => {
                    c.mask.kind = MaskKind::Tube;
                    c.loss.gamma3 = 0.0;
                }
                "asl" => {
                    c.mask.kind = MaskKind::Asl;
                    c.loss.gamma3 = 0.0;
                }
                "asl+contrastive" => {
                    c.mask.kind = MaskKind::Asl;
                    c.loss.gamma3 = contrastive_weight(base);
                }
                _ => return Err(bad()),
            },
        }
        c.validate()?;
        Ok(c)
    }
}

fn contrastive_weight(base: &RunConfig) -> f64 {
    if base.loss.gamma3 > 0.0 {
        base.loss.gamma3
    } else {
        0.2
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| {} | runs | accuracy (mean ± std) |", self.axis.name())?;
        writeln!(f, "|---|---|---|")?;
        for r in &self.rows {
            writeln!(
                f,
                "| {} | {} | {:.2} ± {:.2} |",
                r.value,
                r.accuracies.len(),
                100.0 * r.mean,
                100.0 * r.std
            )?;
        }
        Ok(())
    }
}

/// Trains one run per `(value, seed)` on `bundle`. With `out`, each run
/// writes to `out/<value>/seed-<seed>/` and the table goes to
/// `out/ablation.json`.
pub fn run_ablation(
    axis: Axis,
    values: &[String],
    base: &RunConfig,
    seeds: &[u64],
    bundle: &DatasetBundle,
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = axis.apply(base, value)?;
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            let dir = out.map(|d| d.join(value.replace(['/', '+'], "_")).join(format!("seed-{seed}")));
            let outcome = train_run(&run, bundle, dir.as_deref())?;
            accuracies.push(outcome.summary.eval.accuracy);
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(AblationRow {
            value: value.clone(),
            seeds: seeds.to_vec(),
            accuracies,
            mean,
            std,
        });
    }
    let table = AblationTable { axis, rows };
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("ablation.json");
        fs::write(&p, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}
