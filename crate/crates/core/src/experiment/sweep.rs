use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{joint_train, pretrain, write_json, Pretrained, RunConfig, RunManifest};
use crate::error::{CoreError, Result};
use crate::estimators::EstimatorKind;
use crate::metrics::{recall_at_cider, write_curve, CurvePoint};
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepGrid {
    pub methods: Vec<EstimatorKind>,
    pub lambdas: Vec<f64>,
    /// Applied to PSST methods only.
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: EstimatorKind,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub seed: u64,
}

impl SweepCell {
    pub fn label(&self) -> String {
        match self.rho {
            Some(r) => format!("{}_l{}_r{}_s{}", self.method, self.lambda, r, self.seed),
            None => format!("{}_l{}_s{}", self.method, self.lambda, self.seed),
        }
    }

    pub fn config(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            method: self.method,
            lambda: self.lambda,
            rho: self.rho,
            seed: self.seed,
            ..base.clone()
        }
    }
}

impl SweepGrid {
    /// Cells in grid order: method, then lambda, then rho, then seed.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        if self.methods.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(CoreError::Config(
                "sweep grid needs methods, lambdas and seeds".into(),
            ));
        }
        let mut cells = Vec::new();
        for &method in &self.methods {
            let rhos: Vec<Option<f64>> = if method.is_psst() {
                if self.rhos.is_empty() {
                    return Err(CoreError::Config(format!(
                        "{method} in a sweep needs rho values"
                    )));
                }
                self.rhos.iter().map(|&r| Some(r)).collect()
            } else {
                vec![None]
            };
            for &lambda in &self.lambdas {
                for &rho in &rhos {
                    for &seed in &self.seeds {
                        cells.push(SweepCell {
                            method,
                            lambda,
                            rho,
                            seed,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
    /// The failure was a NaN/Inf abort.
    pub numerical: bool,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    #[serde(skip)]
    pub points: Vec<CurvePoint>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Run every cell as an independent joint-training run. Agents are
/// pretrained once per seed and shared by that seed's cells. Failed cells are
/// recorded and the sweep carries on.
pub fn sweep(world: &World, base: &RunConfig, grid: &SweepGrid) -> Result<SweepOutcome> {
    let cells = grid.cells()?;
    for c in &cells {
        c.config(base).validate()?;
    }
    let root = base.resolved_output_dir();
    let sub = |parts: &[String]| -> Option<PathBuf> {
        root.as_ref()
            .map(|r| parts.iter().fold(r.clone(), |p, s| p.join(s)))
    };

    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let pretrained: BTreeMap<u64, std::result::Result<Pretrained, (bool, String)>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig {
                seed,
                output_dir: sub(&["pretrain".into(), format!("seed{seed}")]),
                ..base.clone()
            };
            (
                seed,
                pretrain(world, &cfg).map_err(|e| (e.is_numerical(), e.to_string())),
            )
        })
        .collect();

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|cell| {
            let cfg = RunConfig {
                output_dir: sub(&["cells".into(), cell.label()]),
                ..cell.config(base)
            };
            let run = match &pretrained[&cell.seed] {
                Ok(p) => joint_train(world, &cfg, &p.speaker, &p.listener)
                    .map_err(|e| (e.is_numerical(), e.to_string())),
                Err((numerical, e)) => Err((*numerical, format!("pretraining failed: {e}"))),
            };
            match run {
                Ok(o) => CellOutcome {
                    cell: *cell,
                    manifest: Some(o.manifest),
                    error: None,
                    numerical: false,
                    curve: o.curve,
                },
                Err((numerical, e)) => CellOutcome {
                    cell: *cell,
                    manifest: None,
                    error: Some(e),
                    numerical,
                    curve: Vec::new(),
                },
            }
        })
        .collect();

    let points: Vec<CurvePoint> = outcomes
        .iter()
        .flat_map(|o| o.curve.iter().cloned())
        .collect();
    let outcome = SweepOutcome {
        cells: outcomes,
        points,
    };
    if let Some(dir) = root {
        write_curve(&dir.join("curves.csv"), &outcome.points)?;
        write_json(&dir.join("sweep_manifest.json"), &outcome)?;
    }
    Ok(outcome)
}

/// Recall@1 at a fixed CIDEr level for each run (method, lambda, rho, seed)
/// in a set of curve points, by linear interpolation along the run's curve.
pub fn group_recall_at_cider(points: &[CurvePoint], level: f64) -> Vec<(String, Option<f64>)> {
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in points {
        let key = format!(
            "{},{},{},{}",
            p.method,
            p.lambda,
            p.rho.map_or(String::new(), |r| r.to_string()),
            p.seed
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((p.cider, p.recall1)),
            None => groups.push((key, vec![(p.cider, p.recall1)])),
        }
    }
    groups
        .into_iter()
        .map(|(k, pts)| (k, recall_at_cider(&pts, level)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_skip_rho_for_non_psst() {
        let grid = SweepGrid {
            methods: vec![EstimatorKind::StMultinomial, EstimatorKind::PsstMultinomial],
            lambdas: vec![0.1, 0.5],
            rhos: vec![0.0, 0.5],
            seeds: vec![1, 2, 3],
        };
        let cells = grid.cells().unwrap();
        assert_eq!(cells.len(), 2 * 3 + 2 * 2 * 3);
        assert!(cells[..6].iter().all(|c| c.rho.is_none()));
        assert!(cells[6..].iter().all(|c| c.rho.is_some()));
    }

    #[test]
    fn rho_grid_counts() {
        let grid = SweepGrid {
            methods: vec![EstimatorKind::PsstMultinomial],
            lambdas: vec![0.5],
            rhos: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
        };
        assert_eq!(grid.cells().unwrap().len(), 25);
        let empty = SweepGrid {
            seeds: vec![],
            ..grid
        };
        assert!(empty.cells().is_err());
    }
}
