//! Gradient estimators for the discrete token layer.
//!
//! Every estimator turns a per-step categorical distribution into the vector
//! that is fed downstream. What differs is the forward value (one-hot sample
//! or the dense distribution) and where the backward pass is routed.

use std::fmt;
use std::str::FromStr;

use psst_autodiff::{Tape, Tensor, Var};
use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Floor applied to probabilities before taking logs for Gumbel-max.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "reinforce")]
    Reinforce,
    #[serde(rename = "st-mn")]
    StMultinomial,
    #[serde(rename = "st-gs")]
    StGumbel,
    #[serde(rename = "psst-mn")]
    PsstMultinomial,
    #[serde(rename = "psst-gs")]
    PsstGumbel,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Reinforce,
        EstimatorKind::StMultinomial,
        EstimatorKind::StGumbel,
        EstimatorKind::PsstMultinomial,
        EstimatorKind::PsstGumbel,
    ];

    pub fn is_psst(self) -> bool {
        matches!(
            self,
            EstimatorKind::PsstMultinomial | EstimatorKind::PsstGumbel
        )
    }

    pub fn is_gumbel(self) -> bool {
        matches!(self, EstimatorKind::StGumbel | EstimatorKind::PsstGumbel)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::StMultinomial => "st-mn",
            EstimatorKind::StGumbel => "st-gs",
            EstimatorKind::PsstMultinomial => "psst-mn",
            EstimatorKind::PsstGumbel => "psst-gs",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown method {s:?}; expected one of reinforce, st-mn, st-gs, psst-mn, psst-gs"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    None,
    Greedy,
    #[default]
    GroundTruth,
}

impl FromStr for BaselineKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineKind::None),
            "greedy" => Ok(BaselineKind::Greedy),
            "ground-truth" => Ok(BaselineKind::GroundTruth),
            other => Err(CoreError::Config(format!(
                "unknown baseline {other:?}; expected none, greedy or ground-truth"
            ))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::None => "none",
            BaselineKind::Greedy => "greedy",
            BaselineKind::GroundTruth => "ground-truth",
        })
    }
}

/// Unit at which the PSST gate is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Gating {
    /// One draw per caption per optimization step.
    #[default]
    PerExample,
    /// One draw per emitted token (experimental).
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default)]
    pub baseline: BaselineKind,
    #[serde(default)]
    pub gating: Gating,
}

pub const DEFAULT_TAU: f64 = 1.0;

impl EstimatorConfig {
    /// Strict constructor: `rho` must be given exactly for PSST kinds and
    /// `tau` exactly for Gumbel kinds.
    pub fn new(
        kind: EstimatorKind,
        rho: Option<f64>,
        tau: Option<f64>,
        baseline: BaselineKind,
    ) -> Result<Self> {
        let cfg = EstimatorConfig {
            kind,
            rho,
            tau,
            baseline,
            gating: Gating::PerExample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lenient constructor for flag/config input: drops knobs the kind does
    /// not use and fills `tau` with its default. PSST kinds still need `rho`.
    pub fn resolve(
        kind: EstimatorKind,
        rho: Option<f64>,
        tau: Option<f64>,
        baseline: BaselineKind,
    ) -> Result<Self> {
        let rho = if kind.is_psst() {
            Some(rho.ok_or_else(|| CoreError::Config(format!("{kind} requires rho")))?)
        } else {
            None
        };
        let tau = kind.is_gumbel().then(|| tau.unwrap_or(DEFAULT_TAU));
        Self::new(kind, rho, tau, baseline)
    }

    pub fn reinforce(baseline: BaselineKind) -> Self {
        Self::new(EstimatorKind::Reinforce, None, None, baseline).expect("valid")
    }

    pub fn st_multinomial() -> Self {
        Self::new(
            EstimatorKind::StMultinomial,
            None,
            None,
            BaselineKind::default(),
        )
        .expect("valid")
    }

    pub fn st_gumbel(tau: f64) -> Result<Self> {
        Self::new(
            EstimatorKind::StGumbel,
            None,
            Some(tau),
            BaselineKind::default(),
        )
    }

    pub fn psst_multinomial(rho: f64) -> Result<Self> {
        Self::new(
            EstimatorKind::PsstMultinomial,
            Some(rho),
            None,
            BaselineKind::default(),
        )
    }

    pub fn psst_gumbel(rho: f64, tau: f64) -> Result<Self> {
        Self::new(
            EstimatorKind::PsstGumbel,
            Some(rho),
            Some(tau),
            BaselineKind::default(),
        )
    }

    pub fn with_baseline(mut self, baseline: BaselineKind) -> Self {
        self.baseline = baseline;
        self
    }

    pub fn with_gating(mut self, gating: Gating) -> Self {
        self.gating = gating;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_psst(), self.rho) {
            (true, None) => return Err(CoreError::Config(format!("{} requires rho", self.kind))),
            (false, Some(_)) => {
                return Err(CoreError::Config(format!(
                    "rho is meaningless for {}",
                    self.kind
                )))
            }
            (true, Some(r)) if !(0.0..=1.0).contains(&r) => {
                return Err(CoreError::Domain(format!(
                    "rho must lie in [0, 1], got {r}"
                )))
            }
            _ => {}
        }
        match (self.kind.is_gumbel(), self.tau) {
            (true, None) => Err(CoreError::Config(format!("{} requires tau", self.kind))),
            (false, Some(_)) => Err(CoreError::Config(format!(
                "tau is meaningless for {}",
                self.kind
            ))),
            (true, Some(t)) if !(t > 0.0 && t.is_finite()) => {
                Err(CoreError::Domain(format!("tau must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }

    /// `rho` for PSST kinds, 0 for everything else (always sample).
    pub fn relaxed_fraction(&self) -> f64 {
        self.rho.unwrap_or(0.0)
    }
}

/// Per-step categorical over the vocabulary, one row per example.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalDist {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

impl CategoricalDist {
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self> {
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(CategoricalDist {
            logits,
            probs,
            log_probs,
        })
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.probs).rows()
    }

    pub fn vocab(&self, tape: &Tape) -> usize {
        tape.value(self.probs).cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathDecision {
    pub relaxed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionMode {
    OneHot,
    Dense,
}

/// A batch of emissions for one time step.
#[derive(Debug, Clone)]
pub struct TokenEmission {
    /// `B × V`: one-hot rows for sampled examples, the emitted distribution
    /// for relaxed ones.
    pub vector: Var,
    pub modes: Vec<EmissionMode>,
    /// Present exactly for one-hot rows.
    pub tokens: Vec<Option<usize>>,
}

pub fn gumbel_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(CoreError::Domain(format!(
            "gumbel_noise needs u in (0, 1), got {u}"
        )));
    }
    Ok(-(-u.ln()).ln())
}

pub fn draw_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    gumbel_noise(u).expect("Open01 never yields the endpoints")
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `argmax_i (log p_i + g_i)` with fresh standard Gumbel noise.
pub fn gumbel_max_sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let scores: Vec<f64> = probs
        .iter()
        .map(|&p| p.max(PROB_FLOOR).ln() + draw_gumbel(rng))
        .collect();
    argmax(&scores)
}

/// `softmax((log p + g) / tau)` row-wise, differentiable through the logits.
pub fn gumbel_softmax_relax(
    tape: &mut Tape,
    dist: &CategoricalDist,
    noise: &Tensor,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(CoreError::Domain(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let g = tape.constant(noise.clone())?;
    let perturbed = tape.add(dist.log_probs, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    Ok(tape.softmax(scaled)?)
}

/// `relaxed` with probability `rho`. The extremes are decided without
/// touching the RNG, so `rho = 0` consumes exactly the stream a plain
/// straight-through run would.
pub fn psst_gate<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> Result<PathDecision> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::Domain(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let relaxed = if rho == 0.0 {
        false
    } else if rho == 1.0 {
        true
    } else {
        rng.gen::<f64>() < rho
    };
    Ok(PathDecision { relaxed })
}

/// Emit one token per row of `dist` under `config`.
///
/// `decisions` is consulted only by PSST kinds and must then have one entry
/// per row.
pub fn emit_tokens<R: Rng + ?Sized>(
    tape: &mut Tape,
    dist: &CategoricalDist,
    config: &EstimatorConfig,
    decisions: &[PathDecision],
    rng: &mut R,
) -> Result<TokenEmission> {
    let rows = dist.rows(tape);
    let vocab = dist.vocab(tape);
    if config.kind.is_psst() && decisions.len() != rows {
        return Err(CoreError::Contract(format!(
            "{} rows but {} path decisions",
            rows,
            decisions.len()
        )));
    }
    let relaxed = |r: usize| config.kind.is_psst() && decisions[r].relaxed;

    match config.kind {
        EstimatorKind::Reinforce => {
            let probs = tape.value(dist.probs).clone();
            let tokens: Vec<usize> = (0..rows)
                .map(|r| gumbel_max_sample(probs.row(r), rng))
                .collect();
            let vector = tape.constant(Tensor::one_hot(&tokens, vocab))?;
            Ok(TokenEmission {
                vector,
                modes: vec![EmissionMode::OneHot; rows],
                tokens: tokens.into_iter().map(Some).collect(),
            })
        }
        EstimatorKind::StMultinomial | EstimatorKind::PsstMultinomial => {
            let probs = tape.value(dist.probs).clone();
            let mut hard = probs.clone();
            let mut modes = Vec::with_capacity(rows);
            let mut tokens = Vec::with_capacity(rows);
            for r in 0..rows {
                if relaxed(r) {
                    modes.push(EmissionMode::Dense);
                    tokens.push(None);
                } else {
                    let k = gumbel_max_sample(probs.row(r), rng);
                    let row = &mut hard.data_mut()[r * vocab..(r + 1) * vocab];
                    row.fill(0.0);
                    row[k] = 1.0;
                    modes.push(EmissionMode::OneHot);
                    tokens.push(Some(k));
                }
            }
            let vector = tape.straight_through(hard, dist.probs)?;
            Ok(TokenEmission {
                vector,
                modes,
                tokens,
            })
        }
        EstimatorKind::StGumbel | EstimatorKind::PsstGumbel => {
            let tau = config.tau.unwrap_or(DEFAULT_TAU);
            let noise: Vec<f64> = (0..rows * vocab).map(|_| draw_gumbel(rng)).collect();
            let noise = Tensor::new(vec![rows, vocab], noise)?;
            let soft = gumbel_softmax_relax(tape, dist, &noise, tau)?;
            let mut hard = tape.value(soft).clone();
            let mut modes = Vec::with_capacity(rows);
            let mut tokens = Vec::with_capacity(rows);
            for r in 0..rows {
                if relaxed(r) {
                    modes.push(EmissionMode::Dense);
                    tokens.push(None);
                } else {
                    let k = argmax(hard.row(r));
                    let row = &mut hard.data_mut()[r * vocab..(r + 1) * vocab];
                    row.fill(0.0);
                    row[k] = 1.0;
                    modes.push(EmissionMode::OneHot);
                    tokens.push(Some(k));
                }
            }
            let vector = tape.straight_through(hard, soft)?;
            Ok(TokenEmission {
                vector,
                modes,
                tokens,
            })
        }
    }
}

/// Score-function surrogate, one row per example:
/// `-(reward - baseline) * log p(sampled)`.
///
/// The advantage is a constant, so the backward pass yields the REINFORCE
/// estimate and descending the surrogate ascends the reward.
pub fn reinforce_surrogate(
    tape: &mut Tape,
    log_prob: Var,
    reward: &[f64],
    baseline: &[f64],
) -> Result<Var> {
    let rows = tape.value(log_prob).rows();
    if reward.len() != rows || baseline.len() != rows {
        return Err(CoreError::Contract(format!(
            "surrogate over {rows} rows got {} rewards and {} baselines",
            reward.len(),
            baseline.len()
        )));
    }
    let neg_adv: Vec<f64> = reward.iter().zip(baseline).map(|(r, b)| b - r).collect();
    let adv = tape.constant(Tensor::new(vec![rows, 1], neg_adv)?)?;
    Ok(tape.mul(log_prob, adv)?)
}

/// Inputs a baseline may need; which ones are required depends on the kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineContext {
    /// Reward of the greedy-decoded caption.
    pub greedy_reward: Option<f64>,
    /// Reward of a ground-truth caption.
    pub reference_reward: Option<f64>,
}

pub fn baseline_value(kind: BaselineKind, context: &BaselineContext) -> Result<f64> {
    match kind {
        BaselineKind::None => Ok(0.0),
        BaselineKind::Greedy => context
            .greedy_reward
            .ok_or_else(|| CoreError::Contract("greedy baseline needs a greedy rollout".into())),
        BaselineKind::GroundTruth => context.reference_reward.ok_or_else(|| {
            CoreError::Contract("ground-truth baseline needs a reference caption".into())
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist_from_probs(tape: &mut Tape, rows: &[Vec<f64>]) -> CategoricalDist {
        let logits: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|p| p.max(1e-300).ln()).collect())
            .collect();
        let z = tape.param(Tensor::from_rows(&logits).unwrap()).unwrap();
        CategoricalDist::from_logits(tape, z).unwrap()
    }

    #[test]
    fn gumbel_noise_fixed_points() {
        let e = std::f64::consts::E;
        assert!(gumbel_noise(1.0 / e).unwrap().abs() < 1e-15);
        assert!((gumbel_noise((-e).exp()).unwrap() + 1.0).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(gumbel_noise(bad), Err(CoreError::Domain(_))));
        }
    }

    #[test]
    fn gumbel_noise_mean_is_euler_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let mean = (0..n).map(|_| draw_gumbel(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gumbel_max_degenerate_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = [1.0, 0.0, 0.0];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| gumbel_max_sample(&p, &mut rng) == 0)
            .count();
        assert!(hits as f64 / n as f64 > 0.9999);
    }

    #[test]
    fn gumbel_max_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = [0.2, 0.3, 0.5];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[gumbel_max_sample(&p, &mut rng)] += 1;
        }
        for (c, q) in counts.iter().zip(p) {
            assert!((*c as f64 / n as f64 - q).abs() < 0.01);
        }
    }

    #[test]
    fn relax_equal_noise_reproduces_probs() {
        let mut tape = Tape::new();
        let d = dist_from_probs(&mut tape, &[vec![0.1, 0.6, 0.3]]);
        let y = gumbel_softmax_relax(&mut tape, &d, &Tensor::full(&[1, 3], 0.42), 1.0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(d.probs).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relax_zero_temperature_is_one_hot() {
        let mut tape = Tape::new();
        let d = dist_from_probs(&mut tape, &[vec![0.1, 0.6, 0.3]]);
        let g = Tensor::from_rows(&[vec![0.9, -0.2, 0.1]]).unwrap();
        let y = gumbel_softmax_relax(&mut tape, &d, &g, 1e-4).unwrap();
        // argmax of log p + g: [ln .1+.9, ln .6-.2, ln .3+.1] = [-1.40, -0.71, -1.10]
        let v = tape.value(y).data();
        assert!(v[1] >= 1.0 - 1e-6 && v[0] < 1e-6 && v[2] < 1e-6);
    }

    #[test]
    fn relax_hand_evaluated() {
        let mut tape = Tape::new();
        let d = dist_from_probs(&mut tape, &[vec![0.5, 0.5]]);
        let g = Tensor::from_rows(&[vec![0.3, -0.1]]).unwrap();
        let y = gumbel_softmax_relax(&mut tape, &d, &g, 1.0).unwrap();
        let e0 = 0.3f64.exp();
        let e1 = (-0.1f64).exp();
        let expect = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let v = tape.value(y).data();
        assert!((v[0] - expect[0]).abs() < 1e-12 && (v[1] - expect[1]).abs() < 1e-12);
        assert!((v[0] - 0.5987).abs() < 1e-4);
        assert!(matches!(
            gumbel_softmax_relax(&mut tape, &d, &g, 0.0),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn gate_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..1000).all(|_| psst_gate(1.0, &mut rng).unwrap().relaxed));
        assert!((0..1000).all(|_| !psst_gate(0.0, &mut rng).unwrap().relaxed));
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| psst_gate(0.25, &mut rng).unwrap().relaxed)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((0.24..=0.26).contains(&frac), "{frac}");
        assert!(psst_gate(1.5, &mut rng).is_err());
        assert!(psst_gate(-0.1, &mut rng).is_err());
    }

    #[test]
    fn gate_extremes_do_not_consume_randomness() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = a.clone();
        psst_gate(0.0, &mut a).unwrap();
        psst_gate(1.0, &mut a).unwrap();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn psst_rho_one_emits_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EstimatorConfig::psst_multinomial(1.0).unwrap();
        for _ in 0..10 {
            let mut tape = Tape::new();
            let d = dist_from_probs(&mut tape, &[vec![0.2, 0.3, 0.5], vec![0.7, 0.2, 0.1]]);
            let dec = [
                psst_gate(1.0, &mut rng).unwrap(),
                psst_gate(1.0, &mut rng).unwrap(),
            ];
            let e = emit_tokens(&mut tape, &d, &cfg, &dec, &mut rng).unwrap();
            assert!(e.modes.iter().all(|m| *m == EmissionMode::Dense));
            assert!(e.tokens.iter().all(Option::is_none));
            assert_eq!(tape.value(e.vector), tape.value(d.probs));
        }
    }

    #[test]
    fn psst_rho_zero_matches_straight_through() {
        for (st, psst) in [
            (
                EstimatorConfig::st_multinomial(),
                EstimatorConfig::psst_multinomial(0.0).unwrap(),
            ),
            (
                EstimatorConfig::st_gumbel(1.0).unwrap(),
                EstimatorConfig::psst_gumbel(0.0, 1.0).unwrap(),
            ),
        ] {
            let mut r1 = ChaCha8Rng::seed_from_u64(12);
            let mut r2 = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..200 {
                let mut t1 = Tape::new();
                let mut t2 = Tape::new();
                let d1 = dist_from_probs(&mut t1, &[vec![0.2, 0.3, 0.5]]);
                let d2 = dist_from_probs(&mut t2, &[vec![0.2, 0.3, 0.5]]);
                let dec = [psst_gate(0.0, &mut r2).unwrap()];
                let e1 = emit_tokens(&mut t1, &d1, &st, &[], &mut r1).unwrap();
                let e2 = emit_tokens(&mut t2, &d2, &psst, &dec, &mut r2).unwrap();
                assert_eq!(e1.tokens, e2.tokens);
                assert_eq!(t1.value(e1.vector), t2.value(e2.vector));
            }
        }
    }

    #[test]
    fn one_hot_rows_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [
            EstimatorConfig::reinforce(BaselineKind::None),
            EstimatorConfig::st_multinomial(),
            EstimatorConfig::st_gumbel(0.5).unwrap(),
        ] {
            let mut tape = Tape::new();
            let d = dist_from_probs(&mut tape, &[vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]]);
            let e = emit_tokens(&mut tape, &d, &cfg, &[], &mut rng).unwrap();
            let v = tape.value(e.vector);
            for r in 0..2 {
                let k = e.tokens[r].unwrap();
                for (j, &x) in v.row(r).iter().enumerate() {
                    assert_eq!(x, if j == k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    /// Two classes, p = [0.5, 0.5], downstream loss l(y) = y·c with c = [1, 0].
    /// Straight-through routes dl/dy = c into the softmax Jacobian regardless
    /// of the sample, so every emission gives dL/dz0 = p0 p1 (c0 - c1) = 0.25.
    #[test]
    fn straight_through_two_class_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = EstimatorConfig::st_multinomial();
        let n = 100_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let d = dist_from_probs(&mut tape, &[vec![0.5, 0.5]]);
            let e = emit_tokens(&mut tape, &d, &cfg, &[], &mut rng).unwrap();
            let c = tape
                .constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap())
                .unwrap();
            let l = tape.mul(e.vector, c).unwrap();
            let s = tape.sum(l).unwrap();
            tape.backward(s).unwrap();
            mean += tape.grad(d.logits).unwrap().data()[0];
        }
        mean /= n as f64;
        assert!((mean - 0.25).abs() < 1e-12, "{mean}");
    }

    #[test]
    fn surrogate_zero_advantage_has_zero_gradient() {
        let mut tape = Tape::new();
        let d = dist_from_probs(&mut tape, &[vec![0.3, 0.7]]);
        let lp = tape.gather_rows(d.log_probs, &[1]).unwrap();
        let s = reinforce_surrogate(&mut tape, lp, &[0.8], &[0.8]).unwrap();
        let root = tape.sum(s).unwrap();
        tape.backward(root).unwrap();
        assert!(tape
            .grad(d.logits)
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    fn surrogate_mean_grad(baseline: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EstimatorConfig::reinforce(BaselineKind::None);
        let rewards = [1.0, 0.0];
        let n = 200_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let d = dist_from_probs(&mut tape, &[vec![0.5, 0.5]]);
            let e = emit_tokens(&mut tape, &d, &cfg, &[], &mut rng).unwrap();
            let k = e.tokens[0].unwrap();
            let lp = tape.gather_rows(d.log_probs, &[k]).unwrap();
            let s = reinforce_surrogate(&mut tape, lp, &[rewards[k]], &[baseline]).unwrap();
            let root = tape.sum(s).unwrap();
            tape.backward(root).unwrap();
            mean += tape.grad(d.logits).unwrap().data()[0];
        }
        mean / n as f64
    }

    #[test]
    fn surrogate_two_class_enumeration() {
        assert!((surrogate_mean_grad(0.0, 31) + 0.25).abs() < 0.01);
        assert!((surrogate_mean_grad(0.7, 32) + 0.25).abs() < 0.01);
        assert!((surrogate_mean_grad(-3.0, 33) + 0.25).abs() < 0.01);
    }

    #[test]
    fn baseline_contexts() {
        let empty = BaselineContext::default();
        assert_eq!(baseline_value(BaselineKind::None, &empty).unwrap(), 0.0);
        assert!(baseline_value(BaselineKind::Greedy, &empty).is_err());
        assert!(baseline_value(BaselineKind::GroundTruth, &empty).is_err());
        let ctx = BaselineContext {
            greedy_reward: Some(0.4),
            reference_reward: Some(0.9),
        };
        assert_eq!(baseline_value(BaselineKind::Greedy, &ctx).unwrap(), 0.4);
        assert_eq!(
            baseline_value(BaselineKind::GroundTruth, &ctx).unwrap(),
            0.9
        );
    }

    #[test]
    fn config_invariants() {
        assert!(EstimatorConfig::new(
            EstimatorKind::PsstMultinomial,
            None,
            None,
            BaselineKind::None
        )
        .is_err());
        assert!(EstimatorConfig::new(
            EstimatorKind::StMultinomial,
            Some(0.5),
            None,
            BaselineKind::None
        )
        .is_err());
        assert!(
            EstimatorConfig::new(EstimatorKind::StGumbel, None, None, BaselineKind::None).is_err()
        );
        assert!(EstimatorConfig::st_gumbel(-1.0).is_err());
        assert!(EstimatorConfig::psst_multinomial(1.2).is_err());
        let r =
            EstimatorConfig::resolve(EstimatorKind::StGumbel, Some(0.5), None, BaselineKind::None)
                .unwrap();
        assert_eq!((r.rho, r.tau), (None, Some(1.0)));
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
    }
}
