//! Ablation grids: each cell is one config variant trained over several
//! seeds, reported as mean ± std of the test metrics.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::TrainConfig;
use super::metrics::{MetricsReport, MetricsSummary};
use super::train::{evaluate, prepare_cohort, train};
use crate::error::{Error, Result};
use crate::losses::LossMode;

pub const BETA_GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.65, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    Beta(Vec<f64>),
    Module,
    LossMode,
    K(Vec<usize>),
}

impl AblationAxis {
    pub fn beta_sweep() -> Self {
        AblationAxis::Beta(BETA_GRID.to_vec())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Beta(_) => "beta",
            AblationAxis::Module => "module",
            AblationAxis::LossMode => "loss_mode",
            AblationAxis::K(_) => "k",
        }
    }

    /// Labelled config variants along this axis.
    pub fn variants(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Beta(values) => values
                .iter()
                .map(|&b| (format!("beta={b}"), with(&|c| c.beta = b)))
                .collect(),
            AblationAxis::Module => vec![
                ("full".into(), base.clone()),
                ("no_concat".into(), with(&|c| c.no_concat = true)),
                ("no_imfes".into(), with(&|c| c.no_imfes = true)),
            ],
            AblationAxis::LossMode => [LossMode::CeOnly, LossMode::CePlusContrastive, LossMode::Full]
                .into_iter()
                .map(|m| (m.name().to_string(), with(&|c| c.loss_mode = m)))
                .collect(),
            AblationAxis::K(values) => values
                .iter()
                .map(|&k| {
                    (
                        format!("k={k}"),
                        with(&|c| {
                            c.k_image = Some(k);
                            c.k_clinical = Some(k);
                        }),
                    )
                })
                .collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `beta`, `module`, `loss_mode`, `k` or `k=4,8,16`.
impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_k = |list: &str| -> Result<Vec<usize>> {
            list.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad k value `{v}`")))
                })
                .collect()
        };
        match s {
            "beta" => Ok(Self::beta_sweep()),
            "module" => Ok(Self::Module),
            "loss_mode" => Ok(Self::LossMode),
            "k" => Ok(Self::K(vec![5, 10, 15, 20])),
            other => match other.strip_prefix("k=") {
                Some(list) => Ok(Self::K(parse_k(list)?)),
                None => Err(Error::Config(format!(
                    "unknown ablation axis `{other}`; expected beta, module, loss_mode or k[=list]"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub label: String,
    pub config: TrainConfig,
    pub runs: Vec<MetricsReport>,
    pub summary: MetricsSummary,
}

#[derive(Clone, Debug, Serialize)]
struct CellRow<'a> {
    axis: &'a str,
    cell: &'a str,
    runs: usize,
    metric: &'a str,
    mean: f64,
    std: f64,
}

/// Trains and evaluates one seed: the seed drives both the split and the
/// parameter initialisation.
pub fn run_seed(config: &TrainConfig, seed: u64) -> Result<MetricsReport> {
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let cohort = prepare_cohort(&config, seed)?;
    let outcome = train(&cohort, &config)?;
    Ok(evaluate(&outcome.trained, &cohort)?.fused)
}

/// Seeds used for a config with `repeats` runs.
pub fn seeds(config: &TrainConfig) -> Vec<u64> {
    (0..config.repeats as u64).map(|r| config.seed + r).collect()
}

/// Runs every cell of `axis` over `base.repeats` seeds. Runs are
/// independent and executed in parallel; results are reported in a fixed
/// order regardless of scheduling.
pub fn run_ablation(base: &TrainConfig, axis: &AblationAxis) -> Result<Vec<AblationCell>> {
    base.validate()?;
    let variants = axis.variants(base);
    for (_, c) in &variants {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, (_, c))| seeds(c).into_iter().map(move |s| (i, s)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(i, seed)| run_seed(&variants[i].1, seed))
        .collect();

    let mut per_cell: Vec<Vec<MetricsReport>> = vec![Vec::new(); variants.len()];
    for ((cell, _), result) in jobs.iter().zip(results) {
        per_cell[*cell].push(result?);
    }
    Ok(variants
        .into_iter()
        .zip(per_cell)
        .map(|((label, config), runs)| AblationCell {
            summary: MetricsSummary::of(&runs),
            label,
            config,
            runs,
        })
        .collect())
}

/// Long-format CSV: one row per (cell, metric).
pub fn write_ablation_csv<W: std::io::Write>(axis: &AblationAxis, cells: &[AblationCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for cell in cells {
        for (metric, ms) in &cell.summary.metrics {
            w.serialize(CellRow {
                axis: axis.name(),
                cell: &cell.label,
                runs: cell.summary.runs,
                metric,
                mean: ms.mean,
                std: ms.std,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("ablation output", e))?;
    Ok(())
}
