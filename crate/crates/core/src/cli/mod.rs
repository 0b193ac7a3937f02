//! Command front end: configuration files, experiment presets, artifact
//! writers and the invariant-suite runner behind the `flexlora` binary.

pub mod config;
pub mod presets;
pub mod report;
pub mod verify;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use presets::{SweepKind, SweepPlan, PRESETS};
pub use report::{CellSummary, SeedSummary};
pub use verify::{run_verify, Faults, SuiteResult};

use crate::error::{Error, Result};
use crate::federation::{run_experiment_with, ExperimentResult, ScalingResult};
use crate::taskgen::{gen_world, ClientDataset, World};
use report::{header_comment, json_bytes, write_file, RunRecord};

/// Per-seed results of one configuration.
pub type Replicates = Vec<(u64, ExperimentResult)>;

/// Runs every seed of `cfg`.
pub fn execute(cfg: &RunConfig) -> Result<Replicates> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&s| {
            let world = gen_world(&cfg.world_for(s))?;
            let datasets = world.all_datasets()?;
            Ok((s, run_experiment_with(&world, &cfg.fed_for(s), datasets)?))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub preset: Option<String>,
    pub config: BTreeMap<String, String>,
    pub summary: CellSummary,
}

fn cell_summary(label: &str, cfg: &RunConfig, results: &Replicates) -> CellSummary {
    let runs = results.iter().map(|(s, r)| SeedSummary::new(*s, r)).collect();
    CellSummary::new(
        label,
        cfg.fed.strategy.as_str(),
        &cfg.fed.distribution.to_spec(),
        &cfg.hash(),
        runs,
    )
}

/// Writes `rounds.csv`, `spectra.csv`, `phi.csv` and `summary.json` into
/// `dir` and returns the summary.
pub fn write_run_artifacts(label: &str, cfg: &RunConfig, results: &Replicates, dir: &Path) -> Result<RunSummary> {
    let comment = header_comment(&cfg.hash(), &cfg.seeds_spec());
    let strategy = cfg.fed.strategy.as_str();
    let distribution = cfg.fed.distribution.to_spec();
    let records: Vec<RunRecord<'_>> = results
        .iter()
        .map(|(s, r)| RunRecord {
            strategy,
            distribution: &distribution,
            seed: *s,
            result: r,
        })
        .collect();
    write_file(&dir.join("rounds.csv"), &report::rounds_csv(&comment, &records)?)?;
    write_file(&dir.join("spectra.csv"), &report::spectra_csv(&comment, &records)?)?;
    write_file(&dir.join("phi.csv"), &report::phi_csv(&comment, &records)?)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        preset: cfg.preset.clone(),
        config: cfg.entries().into_iter().collect(),
        summary: cell_summary(label, cfg, results),
    };
    write_file(&dir.join("summary.json"), &json_bytes(&summary)?)?;
    Ok(summary)
}

/// Rank at which a layer's error ratio first drops below the cutoff in the
/// final round of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCut {
    pub cell: String,
    pub seed: u64,
    pub layer: usize,
    pub cutoff: f64,
    pub rank: Option<usize>,
    pub max_rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub preset: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub scaling: Option<ScalingResult>,
    pub spectrum: Vec<SpectrumCut>,
}

pub struct SweepOutcome {
    pub summary: SweepSummary,
    /// Per-cell replicates, in plan order.
    pub results: Vec<Replicates>,
}

/// Runs every cell of `plan` for every seed, writing per-cell artifacts to
/// `out/<cell>/` and `summary.csv` / `summary.json` to `out`. Cells that
/// share a world configuration reuse its generated datasets.
pub fn run_sweep(plan: &SweepPlan, out: &Path) -> Result<SweepOutcome> {
    let configs: Vec<RunConfig> = (0..plan.cells.len())
        .map(|i| plan.cell_config(i))
        .collect::<Result<_>>()?;
    let seeds = plan.base.seeds.clone();
    let mut results: Vec<Replicates> = vec![Vec::new(); configs.len()];
    for &s in &seeds {
        let mut cache: HashMap<String, (World, Vec<ClientDataset>)> = HashMap::new();
        for (i, cfg) in configs.iter().enumerate() {
            let wc = cfg.world_for(s);
            let key = wc.hash();
            if !cache.contains_key(&key) {
                let world = gen_world(&wc)?;
                let datasets = world.all_datasets()?;
                cache.insert(key.clone(), (world, datasets));
            }
            let (world, datasets) = &cache[&key];
            let r = run_experiment_with(world, &cfg.fed_for(s), datasets.clone())?;
            results[i].push((s, r));
        }
    }

    let mut cells = Vec::with_capacity(configs.len());
    for ((cell, cfg), res) in plan.cells.iter().zip(&configs).zip(&results) {
        let run = write_run_artifacts(&cell.label, cfg, res, &out.join(&cell.label))?;
        cells.push(run.summary);
    }
    if plan.kind == SweepKind::Cost {
        let baseline = cells[0].cost_all;
        for c in &mut cells {
            c.cost_all_pct = match (c.cost_all, baseline) {
                (Some(x), Some(b)) => Some(100.0 * x / b),
                _ => None,
            };
        }
    }
    let scaling = if plan.kind == SweepKind::Scaling {
        let losses = results
            .iter()
            .map(|res| res.iter().map(|(_, r)| r.final_zeroshot_loss).collect())
            .collect();
        Some(ScalingResult::from_losses(&plan.pool_sizes()?, &seeds, losses))
    } else {
        None
    };
    let spectrum = if plan.kind == SweepKind::Spectrum {
        spectrum_cuts(plan, &configs, &results)
    } else {
        Vec::new()
    };

    let config_hash = sweep_hash(&configs);
    let comment = header_comment(&config_hash, &plan.base.seeds_spec());
    write_file(&out.join("summary.csv"), &report::summary_csv(&comment, &cells)?)?;
    let summary = SweepSummary {
        preset: plan.name.clone(),
        config_hash,
        seeds,
        cells,
        scaling,
        spectrum,
    };
    write_file(&out.join("summary.json"), &json_bytes(&summary)?)?;
    Ok(SweepOutcome { summary, results })
}

fn sweep_hash(configs: &[RunConfig]) -> String {
    let joined: String = configs.iter().map(|c| c.hash()).collect::<Vec<_>>().join(",");
    crate::taskgen::short_hash(&joined)
}

fn spectrum_cuts(plan: &SweepPlan, configs: &[RunConfig], results: &[Replicates]) -> Vec<SpectrumCut> {
    let mut out = Vec::new();
    for ((cell, cfg), res) in plan.cells.iter().zip(configs).zip(results) {
        let max_ranks = cfg.fed.palette.max_ranks();
        for (seed, r) in res {
            let Some(last) = r.reports.last() else { continue };
            for (layer, ratios) in last.error_ratios.iter().enumerate() {
                out.push(SpectrumCut {
                    cell: cell.label.clone(),
                    seed: *seed,
                    layer,
                    cutoff: presets::SPECTRUM_CUTOFF,
                    rank: ratios
                        .iter()
                        .position(|&e| e < presets::SPECTRUM_CUTOFF)
                        .map(|i| i + 1),
                    max_rank: max_ranks[layer],
                });
            }
        }
    }
    out
}

/// Exit status: 0 success, 1 runtime failure, 2 configuration error.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

fn load_run_config(path: &Path, overrides: &[String], out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_run(path: &Path, overrides: &[String], out: Option<&Path>) -> i32 {
    let cfg = match load_run_config(path, overrides, out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let result = execute(&cfg).and_then(|res| write_run_artifacts("run", &cfg, &res, &cfg.out));
    match result {
        Ok(summary) => {
            let s = &summary.summary;
            println!(
                "wrote {} (config {}): zero-shot {:.4} ± {:.4} over {} seed(s)",
                cfg.out.display(),
                summary.config_hash,
                s.final_zeroshot_mean,
                s.final_zeroshot_std,
                s.runs.len()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn cmd_sweep(name: &str, overrides: &[String], out: Option<&Path>) -> i32 {
    let plan = match presets::plan(name, overrides) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let dir = out.map_or_else(|| PathBuf::from("sweeps").join(name), Path::to_path_buf);
    match run_sweep(&plan, &dir) {
        Ok(outcome) => {
            for c in &outcome.summary.cells {
                println!(
                    "{:<28} zero-shot {:.4} ± {:.4}  R {}  Cost_R {:.3}x  Cost_all {}",
                    c.cell,
                    c.final_zeroshot_mean,
                    c.final_zeroshot_std,
                    c.rounds_to_threshold.map_or("-".into(), |r| format!("{r:.1}")),
                    c.cost_multiplier,
                    c.cost_all_pct
                        .map_or_else(|| c.cost_all.map_or("-".into(), |x| format!("{x:.2}")), |p| format!("{p:.1}%")),
                );
            }
            if let Some(sc) = &outcome.summary.scaling {
                println!("pool sizes {:?} mean zero-shot {:?}", sc.pool_sizes, sc.mean_losses);
                if let Some(f) = &sc.fit {
                    println!("fit A1={:.4} A2={:.4} A3={:.4} rmse={:.4}", f.a1, f.a2, f.a3, f.rmse);
                }
            }
            for cut in &outcome.summary.spectrum {
                println!(
                    "seed {} layer {}: error ratio < {} at rank {} (max {})",
                    cut.seed,
                    cut.layer,
                    cut.cutoff,
                    cut.rank.map_or("-".into(), |r| r.to_string()),
                    cut.max_rank
                );
            }
            println!("wrote {}", dir.display());
            EXIT_OK
        }
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn cmd_verify(faults: Faults) -> i32 {
    let suites = run_verify(faults);
    let mut ok = true;
    for suite in &suites {
        for c in &suite.checks {
            println!(
                "[{}] {}::{} {}",
                if c.passed { "pass" } else { "FAIL" },
                suite.name,
                c.name,
                c.detail
            );
        }
        ok &= suite.passed();
        println!("suite {}: {}", suite.name, if suite.passed() { "pass" } else { "FAIL" });
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}
