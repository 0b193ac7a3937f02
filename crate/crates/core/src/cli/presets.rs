use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::taskgen::WorldConfig;

pub const PRESETS: [&str; 5] = ["fig5a", "table2", "fig4b", "table4", "fig6"];

/// Post-processing attached to a sweep on top of the per-cell summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Independent cells.
    Grid,
    /// Cells differ only in training pool size; the scaling law is fitted
    /// over the per-cell mean zero-shot losses.
    Scaling,
    /// Reports the rank at which each layer's error ratio first falls
    /// below `SPECTRUM_CUTOFF`.
    Spectrum,
    /// Reports total cost relative to the first cell.
    Cost,
}

pub const SPECTRUM_CUTOFF: f64 = 0.16;

#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub name: String,
    pub kind: SweepKind,
    pub base: RunConfig,
    pub cells: Vec<Cell>,
}

impl SweepPlan {
    pub fn cell_config(&self, i: usize) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.apply_overrides(&self.cells[i].overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pool sizes of a scaling sweep, in cell order.
    pub fn pool_sizes(&self) -> Result<Vec<usize>> {
        (0..self.cells.len())
            .map(|i| {
                self.cell_config(i)?
                    .fed
                    .train_pool
                    .ok_or_else(|| Error::InvalidConfig("scaling cell without train_pool".into()))
            })
            .collect()
    }
}

fn recipe() -> FedConfig {
    FedConfig {
        early_stop_patience: 0,
        ..FedConfig::default()
    }
}

/// Base world, federation settings and seeds of a preset.
pub fn base(name: &str) -> Result<(WorldConfig, FedConfig, Vec<u64>)> {
    let world = WorldConfig::default();
    let fed = recipe();
    Ok(match name {
        "fig5a" => (world, fed, vec![0, 1, 2]),
        "table2" => (world, fed, (0..5).collect()),
        "fig4b" => (world, fed, vec![0]),
        "table4" => (world, fed, (0..5).collect()),
        "fig6" => (
            WorldConfig {
                num_archetypes: 30,
                samples_min: 10,
                samples_max: 20,
                ..world
            },
            FedConfig {
                participants_per_round: Some(10),
                ..fed
            },
            vec![0, 1, 2],
        ),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

fn cell(label: &str, overrides: &[&str]) -> Cell {
    Cell {
        label: label.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

fn strategy_cell(strategy: &str, distribution: &str) -> Cell {
    cell(
        &format!("{strategy}_{distribution}"),
        &[
            &format!("fed.strategy={strategy}"),
            &format!("fed.distribution={distribution}"),
        ],
    )
}

/// Sweep plan for `name`, with `overrides` applied to the base before the
/// cell-specific settings.
pub fn plan<S: AsRef<str>>(name: &str, overrides: &[S]) -> Result<SweepPlan> {
    let mut base = RunConfig::from_preset(name)?;
    base.apply_overrides(overrides)?;
    let (kind, cells) = match name {
        "fig5a" => (
            SweepKind::Grid,
            vec![
                strategy_cell("flexlora", "point_type1"),
                strategy_cell("naive", "point_type1"),
                strategy_cell("flexlora", "point_type4"),
                strategy_cell("naive", "point_type4"),
            ],
        ),
        "table2" => {
            let dists = ["uniform", "heavy_tail_light", "normal", "heavy_tail_strong"];
            let mut cells = vec![strategy_cell("naive", "point_type1")];
            for s in ["hetlora", "flexlora"] {
                cells.extend(dists.iter().map(|d| strategy_cell(s, d)));
            }
            (SweepKind::Grid, cells)
        }
        "fig4b" => (SweepKind::Spectrum, vec![strategy_cell("flexlora", "uniform")]),
        "table4" => (
            SweepKind::Cost,
            vec![
                strategy_cell("flexlora", "point_type1"),
                strategy_cell("flexlora", "heavy_tail_light"),
                strategy_cell("flexlora", "uniform"),
            ],
        ),
        "fig6" => (
            SweepKind::Scaling,
            [10, 50, 100]
                .iter()
                .map(|p| {
                    cell(
                        &format!("pool{p}"),
                        &["fed.strategy=flexlora", "fed.distribution=uniform", &format!("fed.train_pool={p}")],
                    )
                })
                .collect(),
        ),
        _ => unreachable!("base() rejected unknown presets"),
    };
    let plan = SweepPlan {
        name: name.to_string(),
        kind,
        base,
        cells,
    };
    for i in 0..plan.cells.len() {
        plan.cell_config(i)?;
    }
    Ok(plan)
}
