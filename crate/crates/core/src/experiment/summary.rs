use rayon::prelude::*;
use serde::Serialize;

use super::{joint_train, pretrain, RunConfig, SweepOutcome};
use crate::error::{CoreError, Result};
use crate::metrics::{median, recall_at_cider, spearman, CurvePoint};
use crate::world::World;

fn final_point(curve: &[CurvePoint]) -> Option<&CurvePoint> {
    curve.last()
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Final-epoch medians over seeds for each lambda of a sweep, with the rank
/// correlation of lambda against each median.
#[derive(Debug, Clone, Serialize)]
pub struct TradeoffSummary {
    pub lambdas: Vec<f64>,
    pub median_recall1: Vec<f64>,
    pub median_cider: Vec<f64>,
    pub spearman_recall1: f64,
    pub spearman_cider: f64,
}

pub fn tradeoff_summary(outcome: &SweepOutcome) -> Result<TradeoffSummary> {
    let lambdas = distinct(outcome.cells.iter().map(|c| c.cell.lambda));
    let mut median_recall1 = Vec::new();
    let mut median_cider = Vec::new();
    for &lambda in &lambdas {
        let finals: Vec<&CurvePoint> = outcome
            .cells
            .iter()
            .filter(|c| c.cell.lambda == lambda)
            .filter_map(|c| final_point(&c.curve))
            .collect();
        let r: Vec<f64> = finals.iter().map(|p| p.recall1).collect();
        let c: Vec<f64> = finals.iter().map(|p| p.cider).collect();
        match (median(&r), median(&c)) {
            (Some(r), Some(c)) => {
                median_recall1.push(r);
                median_cider.push(c);
            }
            _ => {
                return Err(CoreError::Contract(format!(
                    "no finished run at lambda {lambda}"
                )))
            }
        }
    }
    let corr = |y: &[f64]| {
        spearman(&lambdas, y)
            .ok_or_else(|| CoreError::Contract("trade-off needs at least two lambdas".into()))
    };
    Ok(TradeoffSummary {
        spearman_recall1: corr(&median_recall1)?,
        spearman_cider: corr(&median_cider)?,
        lambdas,
        median_recall1,
        median_cider,
    })
}

/// The CIDEr level covered by the most run curves. Each curve spans the
/// interval between its lowest and highest CIDEr; among the elementary
/// intervals with maximal coverage the widest one is chosen and its midpoint
/// returned.
pub fn matched_cider_level(curves: &[&[CurvePoint]]) -> Option<f64> {
    let ranges: Vec<(f64, f64)> = curves
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let lo = c.iter().map(|p| p.cider).fold(f64::INFINITY, f64::min);
            let hi = c.iter().map(|p| p.cider).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .filter(|(lo, hi)| lo.is_finite() && hi.is_finite())
        .collect();
    let ends = distinct(ranges.iter().flat_map(|&(lo, hi)| [lo, hi]));
    let covering = |x: f64| {
        ranges
            .iter()
            .filter(|&&(lo, hi)| lo <= x && x <= hi)
            .count()
    };
    let spans = ends.windows(2).map(|w| (w[1] - w[0], 0.5 * (w[0] + w[1])));
    let points = ends.iter().map(|&e| (0.0, e));
    let mut best: Option<(usize, f64, f64)> = None;
    for (width, x) in spans.chain(points) {
        let cand = (covering(x), width, x);
        if best.map_or(true, |b| (cand.0, cand.1) > (b.0, b.1)) {
            best = Some(cand);
        }
    }
    best.map(|(_, _, x)| x)
}

/// How run results are joined into recall-versus-CIDEr curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveAxis {
    /// One curve per run, one point per evaluated epoch.
    Epochs,
    /// One curve per (rho, seed), one final point per lambda.
    Lambda,
}

/// Per-rho median recall@1 at one CIDEr level, interpolated along each
/// curve. Curves that never reach the level are left out and counted in
/// `curves`.
#[derive(Debug, Clone, Serialize)]
pub struct MatchedRecall {
    pub axis: CurveAxis,
    pub level: f64,
    pub rhos: Vec<f64>,
    pub median_recall1: Vec<Option<f64>>,
    /// Curves contributing to each median.
    pub curves: Vec<usize>,
    pub total_curves: Vec<usize>,
}

fn rho_curves(outcome: &SweepOutcome, axis: CurveAxis) -> Vec<(f64, Vec<CurvePoint>)> {
    let cells = outcome.cells.iter().filter(|c| c.cell.rho.is_some());
    match axis {
        CurveAxis::Epochs => cells
            .map(|c| (c.cell.rho.unwrap_or(0.0), c.curve.clone()))
            .collect(),
        CurveAxis::Lambda => {
            let mut groups: Vec<((String, u64, u64), f64, Vec<CurvePoint>)> = Vec::new();
            for c in cells {
                let rho = c.cell.rho.unwrap_or(0.0);
                let key = (c.cell.method.to_string(), rho.to_bits(), c.cell.seed);
                let Some(last) = c.curve.last() else { continue };
                match groups.iter_mut().find(|g| g.0 == key) {
                    Some(g) => g.2.push(last.clone()),
                    None => groups.push((key, rho, vec![last.clone()])),
                }
            }
            groups.into_iter().map(|(_, rho, pts)| (rho, pts)).collect()
        }
    }
}

pub fn matched_recall_by_rho(
    outcome: &SweepOutcome,
    axis: CurveAxis,
    level: Option<f64>,
) -> Result<MatchedRecall> {
    let curves = rho_curves(outcome, axis);
    if curves.is_empty() {
        return Err(CoreError::Contract("matched recall needs PSST runs".into()));
    }
    let level = match level {
        Some(l) => l,
        None => {
            let refs: Vec<&[CurvePoint]> = curves.iter().map(|(_, c)| c.as_slice()).collect();
            matched_cider_level(&refs)
                .ok_or_else(|| CoreError::Contract("no finished runs".into()))?
        }
    };
    let rhos = distinct(curves.iter().map(|(r, _)| *r));
    let mut median_recall1 = Vec::new();
    let mut hits_per_rho = Vec::new();
    let mut total_curves = Vec::new();
    for &rho in &rhos {
        let group: Vec<&Vec<CurvePoint>> = curves
            .iter()
            .filter(|(r, _)| *r == rho)
            .map(|(_, c)| c)
            .collect();
        let hits: Vec<f64> = group
            .iter()
            .filter_map(|c| {
                let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.cider, p.recall1)).collect();
                recall_at_cider(&pts, level)
            })
            .collect();
        median_recall1.push(median(&hits));
        hits_per_rho.push(hits.len());
        total_curves.push(group.len());
    }
    Ok(MatchedRecall {
        axis,
        level,
        rhos,
        median_recall1,
        curves: hits_per_rho,
        total_curves,
    })
}

/// Final recall@1 of joint training and of the frozen-speaker ablation from
/// the same pretrained agents, one pair per seed.
#[derive(Debug, Clone, Serialize)]
pub struct FrozenComparison {
    pub seeds: Vec<u64>,
    pub joint_recall1: Vec<f64>,
    pub frozen_recall1: Vec<f64>,
    pub joint_cider: Vec<f64>,
    pub frozen_cider: Vec<f64>,
}

impl FrozenComparison {
    pub fn median_gap(&self) -> f64 {
        median(&self.joint_recall1).unwrap_or(f64::NAN)
            - median(&self.frozen_recall1).unwrap_or(f64::NAN)
    }

    /// The larger of the two arms' seed-level standard deviations.
    pub fn seed_std(&self) -> f64 {
        std_dev(&self.joint_recall1).max(std_dev(&self.frozen_recall1))
    }
}

pub fn frozen_comparison(
    world: &World,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<FrozenComparison> {
    let base = RunConfig {
        output_dir: None,
        ..base.clone()
    };
    base.validate()?;
    let pairs: Vec<Result<(f64, f64, f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig {
                seed,
                ..base.clone()
            };
            let p = pretrain(world, &cfg)?;
            let frozen_cfg = RunConfig {
                freeze_speaker: true,
                ..cfg.clone()
            };
            let (joint, frozen) = rayon::join(
                || joint_train(world, &cfg, &p.speaker, &p.listener),
                || joint_train(world, &frozen_cfg, &p.speaker, &p.listener),
            );
            let (joint, frozen) = (joint?, frozen?);
            Ok((
                joint.manifest.last.recall1,
                frozen.manifest.last.recall1,
                joint.manifest.last.cider,
                frozen.manifest.last.cider,
            ))
        })
        .collect();
    let mut out = FrozenComparison {
        seeds: seeds.to_vec(),
        joint_recall1: Vec::new(),
        frozen_recall1: Vec::new(),
        joint_cider: Vec::new(),
        frozen_cider: Vec::new(),
    };
    for p in pairs {
        let (jr, fr, jc, fc) = p?;
        out.joint_recall1.push(jr);
        out.frozen_recall1.push(fr);
        out.joint_cider.push(jc);
        out.frozen_cider.push(fc);
    }
    Ok(out)
}
