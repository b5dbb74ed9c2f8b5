//! Hyperparameter grids and the sweep runner.
//!
//! A grid file has an optional `[common]` section and one section per
//! technique; each key lists the values to try. Keys are config paths as in
//! `--set`; bare keys are read under `merge.`.
//!
//! ```toml
//! [common]
//! "pipeline.init" = ["FT", "EMA"]
//!
//! [ties]
//! lambda_scale = [0.5, 1.0]
//! prune_fraction = [0.2, 0.5]
//! ```

use std::cmp::Ordering;
use std::path::Path;

use chronomerge::metrics::MetricsRow;
use chronomerge::{MetricsTrajectory, Technique};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::experiment::{mean_trajectory, run_seed, write_json, write_text, Aggregate, PrepCache};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl Axis {
    pub fn new(key: &str, values: impl IntoIterator<Item = toml::Value>) -> Self {
        Self {
            key: qualify(key),
            values: values.into_iter().collect(),
        }
    }

    pub fn floats(key: &str, values: &[f64]) -> Self {
        Self::new(key, values.iter().map(|&v| toml::Value::Float(v)))
    }
}

fn qualify(key: &str) -> String {
    if key.contains('.') {
        key.to_string()
    } else {
        format!("merge.{key}")
    }
}

/// Per-technique hyperparameter lists plus axes shared by every technique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub common: Vec<Axis>,
    /// Empty means "the config's own technique, no extra axes".
    pub techniques: Vec<(Technique, Vec<Axis>)>,
}

/// `{0.1, 0.2, ..., 1.0}`.
fn tenths() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl SweepGrid {
    /// The default per-technique grids. Breadcrumbs' prune fraction `f` is
    /// split evenly into both tails and DARE's is its drop rate; cells whose
    /// value is out of range (a fraction of 1.0) are reported as failed rows.
    pub fn default_grid() -> Self {
        use Technique::*;
        let lam = Axis::floats("lambda_scale", &tenths());
        let techniques = vec![
            (Wa, vec![Axis::floats("ema_weight", &tenths())]),
            (
                Slerp,
                vec![Axis::floats("slerp_weight", &[0.1, 0.3, 0.5, 0.7, 0.9])],
            ),
            (Ta, vec![lam.clone()]),
            (
                Ties,
                vec![lam.clone(), Axis::floats("prune_fraction", &tenths())],
            ),
            (
                DareTies,
                vec![lam.clone(), Axis::floats("dare_p", &tenths())],
            ),
            (
                BreadcrumbsTies,
                vec![lam.clone(), Axis::floats("bread_fraction", &tenths())],
            ),
            (ModelStock, vec![]),
            (
                Magmax,
                vec![Axis::floats("lambda_scale", &[0.2, 0.4, 0.8, 1.0])],
            ),
            (
                LinesTies,
                vec![
                    Axis::floats("lines_alpha", &[0.5]),
                    Axis::floats("lines_beta", &[0.2, 0.5, 0.8]),
                    Axis::floats("prune_fraction", &[0.2, 0.5, 0.8]),
                ],
            ),
        ];
        Self {
            common: Vec::new(),
            techniques,
        }
    }

    /// Restricts the grid to `keep`, preserving order.
    pub fn only(mut self, keep: &[Technique]) -> Self {
        self.techniques.retain(|(t, _)| keep.contains(t));
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("grid: {}", e.message())))?;
        let mut grid = SweepGrid::default();
        for (section, body) in table {
            let body = body
                .as_table()
                .ok_or_else(|| CliError::config(format!("grid: `{section}` must be a section")))?;
            let mut axes = Vec::new();
            for (key, values) in body {
                let values = values.as_array().filter(|a| !a.is_empty()).ok_or_else(|| {
                    CliError::config(format!("grid: `{section}.{key}` must be a non-empty list"))
                })?;
                axes.push(Axis::new(key, values.iter().cloned()));
            }
            if section == "common" {
                grid.common = axes;
            } else {
                let t: Technique = section
                    .parse()
                    .map_err(|e| CliError::config(format!("grid: {e}")))?;
                grid.techniques.push((t, axes));
            }
        }
        grid.techniques.sort_by_key(|(t, _)| *t);
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Cartesian product in emission order: technique, then common axes,
    /// then technique axes, the last axis varying fastest.
    pub fn cells(&self, default_technique: Technique) -> Vec<Cell> {
        let sections: Vec<(Technique, &[Axis])> = if self.techniques.is_empty() {
            vec![(default_technique, &[][..])]
        } else {
            self.techniques
                .iter()
                .map(|(t, a)| (*t, a.as_slice()))
                .collect()
        };
        let mut cells = Vec::new();
        for (technique, own) in sections {
            let axes: Vec<&Axis> = self.common.iter().chain(own).collect();
            let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
            for axis in &axes {
                combos = combos
                    .into_iter()
                    .flat_map(|prefix| {
                        axis.values.iter().map(move |v| {
                            let mut c = prefix.clone();
                            c.push((axis.key.clone(), v.clone()));
                            c
                        })
                    })
                    .collect();
            }
            for params in combos {
                cells.push(Cell {
                    index: cells.len(),
                    technique,
                    params,
                });
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub technique: Technique,
    pub params: Vec<(String, toml::Value)>,
}

impl Cell {
    pub fn config(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.with_override(
            "merge.technique",
            toml::Value::String(self.technique.name().into()),
        )?;
        for (k, v) in &self.params {
            cfg = cfg.with_override(k, v.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct CellMetrics {
    pub aggregate: Aggregate,
    pub per_seed: Vec<MetricsRow>,
    pub trajectory: MetricsTrajectory,
}

pub fn run_cell(cell: &Cell, base: &ExperimentConfig, cache: &PrepCache) -> Result<CellMetrics> {
    let cfg = cell.config(base)?;
    let mut trajs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let prep = cache.get(&cfg, seed)?;
        trajs.push(run_seed(&cfg, seed, &prep, None)?.trajectory);
    }
    let per_seed: Vec<MetricsRow> = trajs
        .iter()
        .map(|t| *t.last().expect("non-empty stream"))
        .collect();
    let refs: Vec<&MetricsTrajectory> = trajs.iter().collect();
    Ok(CellMetrics {
        aggregate: Aggregate::of(&per_seed),
        per_seed,
        trajectory: mean_trajectory(&refs),
    })
}

/// Runs every cell on up to `jobs` workers. Results come back in cell order;
/// a failing cell carries its error instead of aborting the sweep.
pub fn run_grid(base: &ExperimentConfig, cells: &[Cell], jobs: usize) -> Result<Vec<CellResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Output(e.to_string()))?;
    let cache = PrepCache::default();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|cell| CellResult {
                cell: cell.clone(),
                outcome: run_cell(cell, base, &cache).map_err(|e| e.to_string()),
            })
            .collect()
    }))
}

/// Orders values numerically when both are numbers, otherwise by their text.
fn cmp_value(a: &toml::Value, b: &toml::Value) -> Ordering {
    let num = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
    match (num(a), num(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => render(a).cmp(&render(b)),
    }
}

fn cmp_params(a: &Cell, b: &Cell) -> Ordering {
    a.technique.name().cmp(b.technique.name()).then_with(|| {
        for ((ka, va), (kb, vb)) in a.params.iter().zip(&b.params) {
            let o = ka.cmp(kb).then_with(|| cmp_value(va, vb));
            if o != Ordering::Equal {
                return o;
            }
        }
        a.params.len().cmp(&b.params.len())
    })
}

/// The successful cell with the highest mean final geo_mean; ties go to the
/// lexicographically smallest hyperparameters.
pub fn best(results: &[CellResult]) -> Option<&CellResult> {
    results.iter().filter(|r| r.outcome.is_ok()).min_by(|a, b| {
        let (ga, gb) = (metric(a).geo_mean, metric(b).geo_mean);
        gb.total_cmp(&ga).then_with(|| cmp_params(&a.cell, &b.cell))
    })
}

fn metric(r: &CellResult) -> &Aggregate {
    &r.outcome.as_ref().expect("filtered to successes").aggregate
}

pub fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Union of parameter keys in first-appearance order.
fn param_columns(results: &[CellResult]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in results {
        for (k, _) in &r.cell.params {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    cols
}

pub fn sweep_csv(results: &[CellResult]) -> Result<String> {
    let cols = param_columns(results);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "technique".to_string()];
    header.extend(cols.iter().cloned());
    header.extend(
        [
            "seeds",
            "A_KA",
            "A_ZS",
            "geo_mean",
            "A_KA_std",
            "A_ZS_std",
            "geo_mean_std",
            "error",
        ]
        .map(String::from),
    );
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        let mut row = vec![
            r.cell.index.to_string(),
            r.cell.technique.name().to_string(),
        ];
        for c in &cols {
            row.push(
                r.cell
                    .params
                    .iter()
                    .find(|(k, _)| k == c)
                    .map(|(_, v)| render(v))
                    .unwrap_or_default(),
            );
        }
        match &r.outcome {
            Ok(m) => {
                let a = &m.aggregate;
                row.push(m.per_seed.len().to_string());
                for v in [
                    a.a_ka,
                    a.a_zs,
                    a.geo_mean,
                    a.a_ka_std,
                    a.a_zs_std,
                    a.geo_mean_std,
                ] {
                    row.push(format!("{v:.6}"));
                }
                row.push(String::new());
            }
            Err(e) => {
                row.push("0".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.clone());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Output(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

#[derive(Debug, Serialize)]
struct Best<'a> {
    cell: usize,
    technique: &'a str,
    params: toml::Table,
    #[serde(flatten)]
    metrics: &'a Aggregate,
    config: ExperimentConfig,
}

/// Runs the grid and writes `sweep.csv`, `best.json` and
/// `cells/<index>/trajectory.csv` under `out`.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out: &Path,
    jobs: usize,
) -> Result<Vec<CellResult>> {
    let cells = grid.cells(base.merge.technique);
    let results = run_grid(base, &cells, jobs)?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&results)?)?;
    for r in &results {
        if let Ok(m) = &r.outcome {
            let path = out
                .join("cells")
                .join(format!("{:04}", r.cell.index))
                .join("trajectory.csv");
            write_text(&path, &m.trajectory.to_csv(base.output.wall_time))?;
        }
    }
    if let Some(b) = best(&results) {
        let params = b
            .cell
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        write_json(
            &out.join("best.json"),
            &Best {
                cell: b.cell.index,
                technique: b.cell.technique.name(),
                params,
                metrics: metric(b),
                config: b.cell.config(base)?,
            },
        )?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        let g = SweepGrid::default_grid();
        let cells = g.cells(Technique::Wa);
        let count = |t: Technique| cells.iter().filter(|c| c.technique == t).count();
        assert_eq!(count(Technique::Wa), 10);
        assert_eq!(count(Technique::Slerp), 5);
        assert_eq!(count(Technique::Ties), 100);
        assert_eq!(count(Technique::ModelStock), 1);
        assert_eq!(count(Technique::Magmax), 4);
        assert_eq!(count(Technique::LinesTies), 9);
        assert_eq!(cells.len(), 339);
        assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
    }

    #[test]
    fn parses_grid_files() {
        let g = SweepGrid::parse(
            r#"
            [ties]
            lambda_scale = [0.5, 1.0]
            "merge.prune_fraction" = [0.2]
            [common]
            "pipeline.init" = ["FT", "EMA"]
            [ta]
            lambda_scale = [1.0]
            "#,
        )
        .unwrap();
        let cells = g.cells(Technique::Wa);
        assert_eq!(cells.len(), 2 + 4);
        assert_eq!(cells[0].technique, Technique::Ta);
        assert_eq!(cells[0].params[0].0, "pipeline.init");
        assert_eq!(cells[2].params.len(), 3);
        assert!(SweepGrid::parse("[bogus]\nx = [1]").is_err());
        assert!(SweepGrid::parse("[ta]\nlambda_scale = []").is_err());
    }

    #[test]
    fn empty_grid_is_one_cell() {
        let cells = SweepGrid::default().cells(Technique::Ties);
        assert_eq!(cells.len(), 1);
        assert!(cells[0].params.is_empty());
    }

    #[test]
    fn invalid_cells_become_errors() {
        let cell = Cell {
            index: 0,
            technique: Technique::Ties,
            params: vec![("merge.prune_fraction".into(), toml::Value::Float(1.0))],
        };
        assert!(cell.config(&ExperimentConfig::default()).is_err());
    }

    fn fake(index: usize, lam: f64, geo: f64) -> CellResult {
        CellResult {
            cell: Cell {
                index,
                technique: Technique::Ta,
                params: vec![("merge.lambda_scale".into(), toml::Value::Float(lam))],
            },
            outcome: Ok(CellMetrics {
                aggregate: Aggregate::of(&[MetricsRow::new(1, geo, geo, 0.0)]),
                per_seed: vec![MetricsRow::new(1, geo, geo, 0.0)],
                trajectory: MetricsTrajectory::default(),
            }),
        }
    }

    #[test]
    fn best_breaks_ties_by_smallest_params() {
        let rs = vec![fake(0, 0.9, 0.5), fake(1, 0.3, 0.5), fake(2, 0.5, 0.4)];
        assert_eq!(best(&rs).unwrap().cell.index, 1);
        let rs = vec![fake(0, 0.9, 0.6), fake(1, 0.3, 0.5)];
        assert_eq!(best(&rs).unwrap().cell.index, 0);
    }

    #[test]
    fn csv_records_failures() {
        let mut rs = vec![fake(0, 0.1, 0.5)];
        rs.push(CellResult {
            cell: Cell {
                index: 1,
                technique: Technique::Ta,
                params: vec![],
            },
            outcome: Err("boom, twice".into()),
        });
        let text = sweep_csv(&rs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "cell,technique,merge.lambda_scale,seeds,A_KA,A_ZS,geo_mean,A_KA_std,A_ZS_std,geo_mean_std,error"
        );
        assert_eq!(
            lines[1],
            "0,ta,0.1,1,0.500000,0.500000,0.500000,0.000000,0.000000,0.000000,"
        );
        assert_eq!(lines[2], "1,ta,,0,,,,,,,\"boom, twice\"");
    }
}
