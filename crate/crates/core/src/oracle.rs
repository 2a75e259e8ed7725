//! Exact expectations and gradients on instances small enough to enumerate,
//! and Monte-Carlo reports of each estimator against them.
//!
//! The toy speaker emits `T` tokens from a vocabulary of `V` with no EOS:
//! `logits_t = bias_t + y_{t-1} W`, where `y_{t-1}` is the previous emission
//! (zero at `t = 0`). Losses are either a table over all `V^T` sequences or
//! one minus a frozen listener's score against a fixed scene.

use psst_autodiff::{ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::agents::{listener_score, token_steps, Listener, ListenerStep};
use crate::error::{CoreError, Result};
use crate::estimators::{
    emit_tokens, gumbel_max_sample, psst_gate, reinforce_surrogate, BaselineKind, CategoricalDist,
    EstimatorConfig, EstimatorKind, Gating, PathDecision,
};

pub const MAX_SEQUENCES: usize = 64;
pub const MIN_REPORT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub vocab: usize,
    pub len: usize,
    pub params: ParamSet,
}

impl ToySpeaker {
    /// Parameters `toy.bias` (`T × V`) and `toy.trans` (`V × V`), drawn
    /// uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(
        vocab: usize,
        len: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        let bias = Tensor::new(vec![len, vocab], draw(len * vocab))?;
        let trans = Tensor::new(vec![vocab, vocab], draw(vocab * vocab))?;
        Self::from_tensors(bias, trans)
    }

    pub fn from_tensors(bias: Tensor, trans: Tensor) -> Result<Self> {
        let (len, vocab) = (bias.rows(), bias.cols());
        if bias.shape().len() != 2 || trans.shape() != [vocab, vocab] || vocab < 2 || len < 1 {
            return Err(CoreError::Contract(format!(
                "toy speaker shapes bias {:?} trans {:?}",
                bias.shape(),
                trans.shape()
            )));
        }
        let mut params = ParamSet::new();
        params.push("toy.bias", bias)?;
        params.push("toy.trans", trans)?;
        Ok(ToySpeaker { vocab, len, params })
    }

    pub fn num_sequences(&self) -> Result<usize> {
        let n = self
            .vocab
            .checked_pow(self.len as u32)
            .filter(|&n| n <= MAX_SEQUENCES)
            .ok_or_else(|| {
                CoreError::Size(format!(
                    "V={} T={} exceeds {MAX_SEQUENCES} sequences",
                    self.vocab, self.len
                ))
            })?;
        Ok(n)
    }

    /// Sequence for a mixed-radix index, first token most significant.
    pub fn sequence(&self, index: usize) -> Vec<usize> {
        let mut seq = vec![0; self.len];
        let mut rem = index;
        for slot in seq.iter_mut().rev() {
            *slot = rem % self.vocab;
            rem /= self.vocab;
        }
        seq
    }

    pub fn index_of(&self, seq: &[usize]) -> usize {
        seq.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }

    /// Next-token probabilities after `prev` (None at the first step).
    pub fn step_probs(&self, t: usize, prev: Option<usize>) -> Vec<f64> {
        let bias = self.params.tensor(0).row(t);
        let trans = self.params.tensor(1);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|v| bias[v] + prev.map_or(0.0, |p| trans.at(p, v)))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    pub fn sequence_prob(&self, seq: &[usize]) -> f64 {
        let mut p = 1.0;
        let mut prev = None;
        for (t, &w) in seq.iter().enumerate() {
            p *= self.step_probs(t, prev)[w];
            prev = Some(w);
        }
        p
    }

    /// Ancestral sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.len);
        let mut prev = None;
        for t in 0..self.len {
            let w = gumbel_max_sample(&self.step_probs(t, prev), rng);
            seq.push(w);
            prev = Some(w);
        }
        seq
    }

    /// Argmax at every step.
    pub fn greedy(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.len);
        let mut prev = None;
        for t in 0..self.len {
            let p = self.step_probs(t, prev);
            let w = (0..self.vocab).fold(0, |b, v| if p[v] > p[b] { v } else { b });
            seq.push(w);
            prev = Some(w);
        }
        seq
    }
}

#[derive(Debug, Clone)]
pub enum LossFn {
    /// One loss per sequence, indexed as [`ToySpeaker::sequence`].
    Table(Vec<f64>),
    /// `1 - cosine(listener(caption), listener(scene))` for a fixed scene.
    Listener {
        listener: Box<Listener>,
        scene: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct EnumInstance {
    pub speaker: ToySpeaker,
    pub loss: LossFn,
    table: Vec<f64>,
}

impl EnumInstance {
    pub fn new(speaker: ToySpeaker, loss: LossFn) -> Result<Self> {
        let n = speaker.num_sequences()?;
        let table = match &loss {
            LossFn::Table(t) => {
                if t.len() != n {
                    return Err(CoreError::Contract(format!(
                        "loss table has {} entries, need {n}",
                        t.len()
                    )));
                }
                if t.iter().any(|x| !x.is_finite()) {
                    return Err(CoreError::Domain(
                        "loss table has non-finite entries".into(),
                    ));
                }
                t.clone()
            }
            LossFn::Listener { listener, scene } => {
                if listener.shape.vocab != speaker.vocab
                    || scene.shape() != [1, listener.shape.scene_dim]
                {
                    return Err(CoreError::Contract(
                        "listener does not match the toy instance".into(),
                    ));
                }
                let seqs: Vec<Vec<usize>> = (0..n).map(|i| speaker.sequence(i)).collect();
                let mut tape = Tape::new();
                let lv = listener.attach(&mut tape, false)?;
                let steps = token_steps(&mut tape, &seqs, speaker.vocab)?;
                let scenes = Tensor::new(vec![n, scene.cols()], scene.data().repeat(n))?;
                let s = tape.constant(scenes)?;
                let score = listener_score(&mut tape, &lv, &steps, s)?;
                tape.value(score).data().iter().map(|c| 1.0 - c).collect()
            }
        };
        Ok(EnumInstance {
            speaker,
            loss,
            table,
        })
    }

    /// Table instance with losses uniform in `[1, 2)`.
    pub fn random_table<R: Rng + ?Sized>(vocab: usize, len: usize, rng: &mut R) -> Result<Self> {
        let speaker = ToySpeaker::random(vocab, len, 1.0, rng)?;
        let n = speaker.num_sequences()?;
        let table = (0..n).map(|_| rng.gen_range(1.0..2.0)).collect();
        Self::new(speaker, LossFn::Table(table))
    }

    pub fn loss_of(&self, seq: &[usize]) -> f64 {
        self.table[self.speaker.index_of(seq)]
    }

    pub fn loss_table(&self) -> &[f64] {
        &self.table
    }

    /// The lowest-loss sequence, standing in for the ground-truth caption.
    pub fn best_sequence(&self) -> Vec<usize> {
        let best =
            (0..self.table.len()).fold(0, |b, i| if self.table[i] < self.table[b] { i } else { b });
        self.speaker.sequence(best)
    }

    /// Loss of soft or hard emissions (`1 × V` each), differentiable in
    /// them. Tables use their multilinear extension, which agrees with the
    /// table on one-hot inputs.
    fn emission_loss(&self, tape: &mut Tape, emissions: &[Var]) -> Result<Var> {
        match &self.loss {
            LossFn::Table(t) => {
                let v = self.speaker.vocab;
                let mut rest = t.len() / v;
                let mut acc = tape.constant(Tensor::new(vec![v, rest], t.clone())?)?;
                for (i, &y) in emissions.iter().enumerate() {
                    let contracted = tape.matmul(y, acc)?;
                    if i + 1 == emissions.len() {
                        acc = contracted;
                    } else {
                        rest /= v;
                        acc = tape.reshape(contracted, &[v, rest])?;
                    }
                }
                Ok(acc)
            }
            LossFn::Listener { listener, scene } => {
                let lv = listener.attach(tape, false)?;
                let steps: Vec<ListenerStep> = emissions
                    .iter()
                    .map(|&vector| ListenerStep {
                        vector,
                        mask: Tensor::full(&[1, 1], 1.0),
                    })
                    .collect();
                let s = tape.constant(scene.clone())?;
                let score = listener_score(tape, &lv, &steps, s)?;
                Ok(tape.one_minus(score)?)
            }
        }
    }
}

fn attach_toy(tape: &mut Tape, speaker: &ToySpeaker) -> Result<(Var, Var)> {
    let vars = speaker.params.attach(tape, true)?;
    Ok((vars[0], vars[1]))
}

/// `Σ_w p(w) l(w)` over every sequence, built on a tape so its gradient is
/// exact. Returns the tape, the scalar and the parameter vars.
fn enumerate_expectation(instance: &EnumInstance) -> Result<(Tape, Var, Vec<Var>)> {
    let sp = &instance.speaker;
    let n = sp.num_sequences()?;
    let (v, len) = (sp.vocab, sp.len);
    let seqs: Vec<Vec<usize>> = (0..n).map(|i| sp.sequence(i)).collect();
    let mut tape = Tape::new();
    let (bias, trans) = attach_toy(&mut tape, sp)?;
    let mut log_p: Option<Var> = None;
    for t in 0..len {
        let sel = tape.constant(Tensor::one_hot(&vec![t; n], len))?;
        let mut logits = tape.matmul(sel, bias)?;
        if t > 0 {
            let prev: Vec<usize> = seqs.iter().map(|s| s[t - 1]).collect();
            let prev = tape.constant(Tensor::one_hot(&prev, v))?;
            let carried = tape.matmul(prev, trans)?;
            logits = tape.add(logits, carried)?;
        }
        let lp = tape.log_softmax(logits)?;
        let cur: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
        let picked = tape.gather_rows(lp, &cur)?;
        log_p = Some(match log_p {
            Some(acc) => tape.add(acc, picked)?,
            None => picked,
        });
    }
    let p = tape.exp(log_p.expect("len >= 1"))?;
    let losses = tape.constant(Tensor::new(vec![n, 1], instance.table.clone())?)?;
    let weighted = tape.mul(p, losses)?;
    let total = tape.sum(weighted)?;
    Ok((tape, total, vec![bias, trans]))
}

pub fn exact_expected_loss(instance: &EnumInstance) -> Result<f64> {
    let (tape, total, _) = enumerate_expectation(instance)?;
    Ok(tape.value(total).item())
}

/// Gradient of the exact expected loss, flattened in parameter order.
pub fn exact_gradient(instance: &EnumInstance) -> Result<Vec<f64>> {
    let (mut tape, total, vars) = enumerate_expectation(instance)?;
    tape.backward(total)?;
    Ok(vars
        .iter()
        .flat_map(|&v| tape.grad_or_zeros(v).into_data())
        .collect())
}

/// One draw of the configured estimator's gradient, flattened.
pub fn estimator_sample<R: Rng + ?Sized>(
    instance: &EnumInstance,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sp = &instance.speaker;
    let mut tape = Tape::new();
    let (bias, trans) = attach_toy(&mut tape, sp)?;
    let example_gate = if config.kind.is_psst() && config.gating == Gating::PerExample {
        vec![psst_gate(config.relaxed_fraction(), rng)?]
    } else {
        Vec::new()
    };
    let mut emissions: Vec<Var> = Vec::with_capacity(sp.len);
    let mut log_p: Option<Var> = None;
    let mut tokens = Vec::with_capacity(sp.len);
    for t in 0..sp.len {
        let sel = tape.constant(Tensor::one_hot(&[t], sp.len))?;
        let mut logits = tape.matmul(sel, bias)?;
        if let Some(&prev) = emissions.last() {
            let carried = tape.matmul(prev, trans)?;
            logits = tape.add(logits, carried)?;
        }
        let dist = CategoricalDist::from_logits(&mut tape, logits)?;
        let decisions: Vec<PathDecision> = match (config.kind.is_psst(), config.gating) {
            (false, _) => Vec::new(),
            (true, Gating::PerExample) => example_gate.clone(),
            (true, Gating::PerToken) => vec![psst_gate(config.relaxed_fraction(), rng)?],
        };
        let e = emit_tokens(&mut tape, &dist, config, &decisions, rng)?;
        if let Some(tok) = e.tokens[0] {
            tokens.push(tok);
            let lp = tape.gather_rows(dist.log_probs, &[tok])?;
            log_p = Some(match log_p {
                Some(acc) => tape.add(acc, lp)?,
                None => lp,
            });
        }
        emissions.push(e.vector);
    }

    let root = if config.kind == EstimatorKind::Reinforce {
        let loss = instance.loss_of(&tokens);
        let baseline = match config.baseline {
            BaselineKind::None => 0.0,
            BaselineKind::Greedy => instance.loss_of(&sp.greedy()),
            BaselineKind::GroundTruth => instance.loss_of(&instance.best_sequence()),
        };
        // reward is the negative loss
        reinforce_surrogate(
            &mut tape,
            log_p.expect("reinforce samples every step"),
            &[-loss],
            &[-baseline],
        )?
    } else {
        instance.emission_loss(&mut tape, &emissions)?
    };
    tape.backward(root)?;
    Ok([bias, trans]
        .iter()
        .flat_map(|&v| tape.grad_or_zeros(v).into_data())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub kind: EstimatorKind,
    pub rho: Option<f64>,
    pub names: Vec<String>,
    pub exact: Vec<f64>,
    pub estimator_mean: Vec<f64>,
    /// Per-coordinate sample variance (n - 1 denominator).
    pub variance: Vec<f64>,
    pub estimator_std_err: Vec<f64>,
    pub n_samples: usize,
    pub bias: Vec<f64>,
}

impl GradientReport {
    pub fn mean_variance(&self) -> f64 {
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }

    /// Every coordinate within `k` standard errors of the exact gradient.
    /// A tiny absolute slack covers coordinates whose variance is zero.
    pub fn within_std_errs(&self, k: f64) -> bool {
        self.bias
            .iter()
            .zip(&self.estimator_std_err)
            .all(|(b, se)| b.abs() <= k * se + 1e-12)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# method={} rho={} n_samples={}\ncoordinate,exact,mean,std_err,bias\n",
            self.kind,
            self.rho.map_or("-".to_string(), |r| r.to_string()),
            self.n_samples
        );
        for i in 0..self.exact.len() {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                self.names[i],
                self.exact[i],
                self.estimator_mean[i],
                self.estimator_std_err[i],
                self.bias[i]
            ));
        }
        out
    }
}

fn coordinate_names(params: &ParamSet) -> Vec<String> {
    let mut names = Vec::new();
    for (name, t) in params.iter() {
        let cols = t.cols();
        for i in 0..t.len() {
            names.push(format!("{name}[{},{}]", i / cols, i % cols));
        }
    }
    names
}

/// Run the estimator `n_samples` times from fixed parameters and compare its
/// mean against the exact gradient.
pub fn estimator_report<R: Rng + ?Sized>(
    instance: &EnumInstance,
    config: &EstimatorConfig,
    n_samples: usize,
    rng: &mut R,
) -> Result<GradientReport> {
    if n_samples < MIN_REPORT_SAMPLES {
        return Err(CoreError::Contract(format!(
            "estimator report needs at least {MIN_REPORT_SAMPLES} samples, got {n_samples}"
        )));
    }
    config.validate()?;
    let exact = exact_gradient(instance)?;
    let dim = exact.len();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for i in 0..n_samples {
        let g = estimator_sample(instance, config, rng)?;
        let k = (i + 1) as f64;
        for c in 0..dim {
            let d = g[c] - mean[c];
            mean[c] += d / k;
            m2[c] += d * (g[c] - mean[c]);
        }
    }
    let n = n_samples as f64;
    let variance: Vec<f64> = m2.iter().map(|m| m / (n - 1.0)).collect();
    let std_err = variance.iter().map(|v| (v / n).sqrt()).collect();
    let bias = mean.iter().zip(&exact).map(|(m, e)| m - e).collect();
    Ok(GradientReport {
        kind: config.kind,
        rho: config.rho,
        names: coordinate_names(&instance.speaker.params),
        exact,
        estimator_mean: mean,
        variance,
        estimator_std_err: std_err,
        n_samples,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_class() -> EnumInstance {
        let sp = ToySpeaker::from_tensors(Tensor::zeros(&[1, 2]), Tensor::zeros(&[2, 2])).unwrap();
        EnumInstance::new(sp, LossFn::Table(vec![1.0, 0.0])).unwrap()
    }

    #[test]
    fn two_class_exact_values() {
        let inst = two_class();
        assert!((exact_expected_loss(&inst).unwrap() - 0.5).abs() < 1e-15);
        let g = exact_gradient(&inst).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-15);
        assert!((g[1] + 0.25).abs() < 1e-15);
        // transition unused at T = 1
        assert!(g[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_losses_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sp = ToySpeaker::random(3, 2, 1.0, &mut rng).unwrap();
        let inst = EnumInstance::new(sp, LossFn::Table(vec![0.7; 9])).unwrap();
        assert!((exact_expected_loss(&inst).unwrap() - 0.7).abs() < 1e-14);
        assert!(exact_gradient(&inst)
            .unwrap()
            .iter()
            .all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn oversized_instance_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sp = ToySpeaker::random(5, 3, 1.0, &mut rng).unwrap();
        assert!(matches!(
            EnumInstance::new(sp, LossFn::Table(vec![0.0; 125])),
            Err(CoreError::Size(_))
        ));
    }

    #[test]
    fn sequence_indexing_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sp = ToySpeaker::random(4, 3, 1.0, &mut rng).unwrap();
        for i in 0..64 {
            assert_eq!(sp.index_of(&sp.sequence(i)), i);
        }
        let total: f64 = (0..64).map(|i| sp.sequence_prob(&sp.sequence(i))).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multilinear_loss_matches_table_on_one_hots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = EnumInstance::random_table(3, 2, &mut rng).unwrap();
        for i in 0..9 {
            let seq = inst.speaker.sequence(i);
            let mut tape = Tape::new();
            let ys: Vec<Var> = seq
                .iter()
                .map(|&w| tape.constant(Tensor::one_hot(&[w], 3)).unwrap())
                .collect();
            let l = inst.emission_loss(&mut tape, &ys).unwrap();
            assert!((tape.value(l).item() - inst.loss_table()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rho_one_report_has_zero_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = EnumInstance::random_table(3, 2, &mut rng).unwrap();
        let cfg = EstimatorConfig::psst_multinomial(1.0).unwrap();
        let r = estimator_report(&inst, &cfg, MIN_REPORT_SAMPLES, &mut rng).unwrap();
        assert!(r.estimator_std_err.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn report_needs_enough_samples() {
        let inst = two_class();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EstimatorConfig::reinforce(BaselineKind::None);
        assert!(estimator_report(&inst, &cfg, 100, &mut rng).is_err());
    }
}
