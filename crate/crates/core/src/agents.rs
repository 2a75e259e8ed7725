//! Speaker and listener networks.
//!
//! Both agents use a single gated recurrent unit. The speaker's hidden state
//! is initialised from the scene encoding and it feeds back the embedding of
//! whatever it emitted (the expected embedding when the emission is dense).
//! The listener encodes a caption with its own GRU and a scene with a linear
//! map into the same space; compatibility is their cosine.

use std::path::Path;

use psst_autodiff::{checkpoint, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::estimators::{
    emit_tokens, psst_gate, CategoricalDist, EmissionMode, EstimatorConfig, Gating, PathDecision,
    TokenEmission,
};
use crate::world::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerShape {
    pub vocab: usize,
    pub scene_dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerShape {
    pub vocab: usize,
    pub scene_dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Canonical `(name, shape, fan_in)` for a GRU block under `prefix`.
fn gru_layout(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for gate in ["z", "r", "h"] {
        out.push((format!("{prefix}.gru.w{gate}"), vec![input, hidden], input));
        out.push((
            format!("{prefix}.gru.u{gate}"),
            vec![hidden, hidden],
            hidden,
        ));
        out.push((format!("{prefix}.gru.b{gate}"), vec![1, hidden], hidden));
    }
    out
}

impl SpeakerShape {
    /// Parameter names, shapes and fan-ins, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut l = vec![
            (
                "speaker.scene_enc.w".into(),
                vec![self.scene_dim, self.hidden],
                self.scene_dim,
            ),
            (
                "speaker.scene_enc.b".into(),
                vec![1, self.hidden],
                self.scene_dim,
            ),
            ("speaker.embed".into(), vec![self.vocab, self.embed], 1),
        ];
        l.extend(gru_layout("speaker", self.embed, self.hidden));
        l.push((
            "speaker.out.w".into(),
            vec![self.hidden, self.vocab],
            self.hidden,
        ));
        l.push(("speaker.out.b".into(), vec![1, self.vocab], self.hidden));
        l
    }
}

fn dims(params: &ParamSet, name: &str) -> Result<(usize, usize)> {
    let t = params
        .get(name)
        .ok_or_else(|| CoreError::Load(format!("checkpoint has no {name}")))?;
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(CoreError::Load(format!("{name} has shape {other:?}"))),
    }
}

impl SpeakerShape {
    /// Read the shape off a checkpoint's tensors.
    pub fn infer(params: &ParamSet) -> Result<Self> {
        let (scene_dim, hidden) = dims(params, "speaker.scene_enc.w")?;
        let (vocab, embed) = dims(params, "speaker.embed")?;
        Ok(SpeakerShape {
            vocab,
            scene_dim,
            hidden,
            embed,
        })
    }
}

impl ListenerShape {
    pub fn infer(params: &ParamSet) -> Result<Self> {
        let (scene_dim, hidden) = dims(params, "listener.scene_enc.w")?;
        let (vocab, embed) = dims(params, "listener.embed")?;
        Ok(ListenerShape {
            vocab,
            scene_dim,
            hidden,
            embed,
        })
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut l = vec![("listener.embed".into(), vec![self.vocab, self.embed], 1)];
        l.extend(gru_layout("listener", self.embed, self.hidden));
        l.push((
            "listener.scene_enc.w".into(),
            vec![self.scene_dim, self.hidden],
            self.scene_dim,
        ));
        l.push((
            "listener.scene_enc.b".into(),
            vec![1, self.hidden],
            self.scene_dim,
        ));
        l
    }
}

fn init_params<R: Rng + ?Sized>(layout: &[(String, Vec<usize>, usize)], rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape, fan_in) in layout {
        p.push(name.clone(), uniform_init(rng, shape, *fan_in))
            .expect("unique names");
    }
    p
}

fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    checkpoint::load(path).map_err(|e| CoreError::Load(format!("{}: {e}", path.display())))
}

fn check_layout(layout: &[(String, Vec<usize>, usize)], params: &ParamSet) -> Result<()> {
    if params.len() != layout.len() {
        return Err(CoreError::Load(format!(
            "expected {} parameters, found {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape, _), (got_name, t)) in layout.iter().zip(params.iter()) {
        if name != got_name || shape.as_slice() != t.shape() {
            return Err(CoreError::Load(format!(
                "expected {name} {shape:?}, found {got_name} {:?}",
                t.shape()
            )));
        }
    }
    if !params.is_finite() {
        return Err(CoreError::Load("non-finite parameter values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    wz: Var,
    uz: Var,
    bz: Var,
    wr: Var,
    ur: Var,
    br: Var,
    wh: Var,
    uh: Var,
    bh: Var,
}

impl GruVars {
    fn from_slice(v: &[Var]) -> Self {
        GruVars {
            wz: v[0],
            uz: v[1],
            bz: v[2],
            wr: v[3],
            ur: v[4],
            br: v[5],
            wh: v[6],
            uh: v[7],
            bh: v[8],
        }
    }

    fn gate(&self, tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        Ok(tape.add(s, b)?)
    }

    /// `h' = n + z ⊙ (h - n)` with the usual update/reset gates.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let z_pre = self.gate(tape, x, h, self.wz, self.uz, self.bz)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = self.gate(tape, x, h, self.wr, self.ur, self.br)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let n_pre = self.gate(tape, x, rh, self.wh, self.uh, self.bh)?;
        let n = tape.tanh(n_pre)?;
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub shape: SpeakerShape,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct SpeakerVars {
    pub all: Vec<Var>,
    scene_w: Var,
    scene_b: Var,
    embed: Var,
    gru: GruVars,
    out_w: Var,
    out_b: Var,
}

impl Speaker {
    pub fn init<R: Rng + ?Sized>(shape: SpeakerShape, rng: &mut R) -> Self {
        Speaker {
            shape,
            params: init_params(&shape.layout(), rng),
        }
    }

    pub fn from_params(shape: SpeakerShape, params: ParamSet) -> Result<Self> {
        check_layout(&shape.layout(), &params)?;
        Ok(Speaker { shape, params })
    }

    /// Load a checkpoint, taking the shape from its tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let params = read_checkpoint(path)?;
        Self::from_params(SpeakerShape::infer(&params)?, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &checkpoint::encode(&self.params))
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Result<SpeakerVars> {
        let all = self.params.attach(tape, trainable)?;
        Ok(SpeakerVars {
            scene_w: all[0],
            scene_b: all[1],
            embed: all[2],
            gru: GruVars::from_slice(&all[3..12]),
            out_w: all[12],
            out_b: all[13],
            all,
        })
    }
}

impl SpeakerVars {
    pub fn initial_state(&self, tape: &mut Tape, scene_input: Var) -> Result<Var> {
        let xw = tape.matmul(scene_input, self.scene_w)?;
        let pre = tape.add(xw, self.scene_b)?;
        Ok(tape.tanh(pre)?)
    }

    /// One recurrent step from the previous emission vector (`B × V`).
    /// Returns `(logits, new_hidden)`.
    pub fn step(&self, tape: &mut Tape, prev_emission: Var, h: Var) -> Result<(Var, Var)> {
        let x = tape.matmul(prev_emission, self.embed)?;
        let h = self.gru.step(tape, x, h)?;
        let hw = tape.matmul(h, self.out_w)?;
        let logits = tape.add(hw, self.out_b)?;
        Ok((logits, h))
    }
}

#[derive(Debug, Clone)]
pub struct Listener {
    pub shape: ListenerShape,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct ListenerVars {
    pub all: Vec<Var>,
    embed: Var,
    gru: GruVars,
    scene_w: Var,
    scene_b: Var,
}

impl Listener {
    pub fn init<R: Rng + ?Sized>(shape: ListenerShape, rng: &mut R) -> Self {
        Listener {
            shape,
            params: init_params(&shape.layout(), rng),
        }
    }

    pub fn from_params(shape: ListenerShape, params: ParamSet) -> Result<Self> {
        check_layout(&shape.layout(), &params)?;
        Ok(Listener { shape, params })
    }

    /// Load a checkpoint, taking the shape from its tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let params = read_checkpoint(path)?;
        Self::from_params(ListenerShape::infer(&params)?, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &checkpoint::encode(&self.params))
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Result<ListenerVars> {
        let all = self.params.attach(tape, trainable)?;
        Ok(ListenerVars {
            embed: all[0],
            gru: GruVars::from_slice(&all[1..10]),
            scene_w: all[10],
            scene_b: all[11],
            all,
        })
    }
}

/// One caption step as the listener sees it: the emission vector and a
/// `B × 1` mask of rows still active at that step.
#[derive(Debug, Clone)]
pub struct ListenerStep {
    pub vector: Var,
    pub mask: Tensor,
}

impl ListenerVars {
    /// Final masked GRU state, `B × d`.
    pub fn encode_caption(&self, tape: &mut Tape, steps: &[ListenerStep]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| CoreError::Contract("listener needs a nonempty caption".into()))?;
        let rows = tape.value(first.vector).rows();
        let hidden = tape.value(self.gru.uz).cols();
        let mut h = tape.constant(Tensor::zeros(&[rows, hidden]))?;
        for step in steps {
            let x = tape.matmul(step.vector, self.embed)?;
            let h_new = self.gru.step(tape, x, h)?;
            if step.mask.data().iter().all(|&m| m == 1.0) {
                h = h_new;
            } else {
                let m = tape.constant(step.mask.clone())?;
                let delta = tape.sub(h_new, h)?;
                let kept = tape.mul(delta, m)?;
                h = tape.add(h, kept)?;
            }
        }
        Ok(h)
    }

    pub fn encode_scenes(&self, tape: &mut Tape, scene_input: Var) -> Result<Var> {
        let xw = tape.matmul(scene_input, self.scene_w)?;
        Ok(tape.add(xw, self.scene_b)?)
    }
}

/// `Φ(caption_i, scene_j)` for every pair: `B_c × B_s` cosine matrix.
pub fn score_matrix(tape: &mut Tape, caption_emb: Var, scene_emb: Var) -> Result<Var> {
    let c = tape.normalize_rows(caption_emb)?;
    let s = tape.normalize_rows(scene_emb)?;
    let st = tape.transpose(s)?;
    Ok(tape.matmul(c, st)?)
}

/// Cosine between each caption and the scene in the same row, `B × 1`.
pub fn listener_score(
    tape: &mut Tape,
    listener: &ListenerVars,
    caption: &[ListenerStep],
    scene_input: Var,
) -> Result<Var> {
    let c = listener.encode_caption(tape, caption)?;
    let s = listener.encode_scenes(tape, scene_input)?;
    Ok(tape.cosine(c, s)?)
}

/// Listener input for token sequences: one-hot constants, masked past each
/// caption's end. Sequences are used as given (EOS included when present).
pub fn token_steps(
    tape: &mut Tape,
    captions: &[Vec<usize>],
    vocab: usize,
) -> Result<Vec<ListenerStep>> {
    let longest = captions.iter().map(Vec::len).max().unwrap_or(0);
    let rows = captions.len();
    let mut steps = Vec::with_capacity(longest);
    for t in 0..longest {
        let mut onehot = Tensor::zeros(&[rows, vocab]);
        let mut mask = Tensor::zeros(&[rows, 1]);
        for (r, cap) in captions.iter().enumerate() {
            if let Some(&tok) = cap.get(t) {
                onehot.data_mut()[r * vocab + tok] = 1.0;
                mask.data_mut()[r] = 1.0;
            }
        }
        steps.push(ListenerStep {
            vector: tape.constant(onehot)?,
            mask,
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy)]
pub enum RolloutPolicy<'a> {
    Estimator(&'a EstimatorConfig),
    /// Argmax at every step, no gradient through the emission.
    Greedy,
}

#[derive(Debug, Clone)]
pub struct CaptionStep {
    pub emission: TokenEmission,
    /// `B × 1`, 1 where the row had not finished before this step.
    pub mask: Tensor,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Caption {
    pub steps: Vec<CaptionStep>,
    /// `B × 1` sum of log p over one-hot emissions of active steps.
    pub log_prob: Var,
    /// Sampled tokens per row, EOS included when emitted. Dense steps leave
    /// no token.
    pub tokens: Vec<Vec<usize>>,
    /// Rows with at least one dense emission.
    pub relaxed: Vec<bool>,
}

impl Caption {
    pub fn listener_steps(&self) -> Vec<ListenerStep> {
        self.steps
            .iter()
            .map(|s| ListenerStep {
                vector: s.emission.vector,
                mask: s.mask.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Unroll the speaker for every row of `scene_input` (`B × scene_dim`).
///
/// A row stops after a one-hot EOS; rows emitting dense vectors keep going
/// to `max_len`. PSST gates are drawn here, once per row for per-example
/// gating or once per row and step for per-token gating.
pub fn speaker_rollout<R: Rng + ?Sized>(
    tape: &mut Tape,
    speaker: &SpeakerVars,
    scene_input: Var,
    policy: RolloutPolicy<'_>,
    max_len: usize,
    rng: &mut R,
) -> Result<Caption> {
    let rows = tape.value(scene_input).rows();
    let vocab = tape.value(speaker.out_b).cols();
    let log_prob_zero = tape.constant(Tensor::zeros(&[rows, 1]))?;
    let mut caption = Caption {
        steps: Vec::new(),
        log_prob: log_prob_zero,
        tokens: vec![Vec::new(); rows],
        relaxed: vec![false; rows],
    };
    if max_len == 0 {
        return Ok(caption);
    }

    let example_gates: Vec<PathDecision> = match policy {
        RolloutPolicy::Estimator(cfg) if cfg.kind.is_psst() && cfg.gating == Gating::PerExample => {
            let rho = cfg.relaxed_fraction();
            (0..rows)
                .map(|_| psst_gate(rho, rng))
                .collect::<Result<_>>()?
        }
        _ => Vec::new(),
    };

    let mut h = speaker.initial_state(tape, scene_input)?;
    let mut prev = tape.constant(Tensor::one_hot(&vec![BOS; rows], vocab))?;
    let mut finished = vec![false; rows];

    for _ in 0..max_len {
        if finished.iter().all(|&f| f) {
            break;
        }
        let (logits, h_next) = speaker.step(tape, prev, h)?;
        h = h_next;
        let dist = CategoricalDist::from_logits(tape, logits)?;
        let emission = match policy {
            RolloutPolicy::Greedy => {
                let probs = tape.value(dist.probs);
                let tokens: Vec<usize> = (0..rows).map(|r| argmax_row(probs.row(r))).collect();
                TokenEmission {
                    vector: tape.constant(Tensor::one_hot(&tokens, vocab))?,
                    modes: vec![EmissionMode::OneHot; rows],
                    tokens: tokens.into_iter().map(Some).collect(),
                }
            }
            RolloutPolicy::Estimator(cfg) => {
                let decisions: Vec<PathDecision> = if !cfg.kind.is_psst() {
                    Vec::new()
                } else if cfg.gating == Gating::PerToken {
                    let rho = cfg.relaxed_fraction();
                    (0..rows)
                        .map(|_| psst_gate(rho, rng))
                        .collect::<Result<_>>()?
                } else {
                    example_gates.clone()
                };
                emit_tokens(tape, &dist, cfg, &decisions, rng)?
            }
        };

        let mask_vals: Vec<f64> = finished
            .iter()
            .map(|&f| if f { 0.0 } else { 1.0 })
            .collect();
        let mask = Tensor::new(vec![rows, 1], mask_vals)?;

        // log p of sampled tokens on active rows
        let mut picks = Vec::with_capacity(rows);
        let mut keep = Vec::with_capacity(rows);
        for r in 0..rows {
            match emission.tokens[r] {
                Some(tok) if !finished[r] => {
                    picks.push(tok);
                    keep.push(1.0);
                }
                _ => {
                    picks.push(0);
                    keep.push(0.0);
                }
            }
        }
        if keep.iter().any(|&k| k == 1.0) {
            let lp = tape.gather_rows(dist.log_probs, &picks)?;
            let keep = tape.constant(Tensor::new(vec![rows, 1], keep)?)?;
            let lp = tape.mul(lp, keep)?;
            caption.log_prob = tape.add(caption.log_prob, lp)?;
        }

        for r in 0..rows {
            if finished[r] {
                continue;
            }
            match emission.tokens[r] {
                Some(tok) => {
                    caption.tokens[r].push(tok);
                    if tok == EOS {
                        finished[r] = true;
                    }
                }
                None => caption.relaxed[r] = true,
            }
        }

        prev = emission.vector;
        caption.steps.push(CaptionStep {
            emission,
            mask,
            probs: dist.probs,
        });
    }
    Ok(caption)
}

/// Teacher-forced negative log-likelihood, averaged over every target token
/// in the batch. `references` must be nonempty sequences.
pub fn speaker_mle_loss(
    tape: &mut Tape,
    speaker: &SpeakerVars,
    scene_input: Var,
    references: &[&[usize]],
) -> Result<Var> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(CoreError::Contract(
            "MLE loss needs nonempty references".into(),
        ));
    }
    let rows = references.len();
    let vocab = tape.value(speaker.out_b).cols();
    let longest = references.iter().map(|r| r.len()).max().unwrap_or(0);
    let count: usize = references.iter().map(|r| r.len()).sum();

    let mut h = speaker.initial_state(tape, scene_input)?;
    let mut prev = tape.constant(Tensor::one_hot(&vec![BOS; rows], vocab))?;
    let mut total: Option<Var> = None;
    for t in 0..longest {
        let (logits, h_next) = speaker.step(tape, prev, h)?;
        h = h_next;
        let log_probs = tape.log_softmax(logits)?;
        let targets: Vec<usize> = references
            .iter()
            .map(|r| r.get(t).copied().unwrap_or(0))
            .collect();
        let mask: Vec<f64> = references
            .iter()
            .map(|r| if t < r.len() { 1.0 } else { 0.0 })
            .collect();
        let picked = tape.gather_rows(log_probs, &targets)?;
        let m = tape.constant(Tensor::new(vec![rows, 1], mask)?)?;
        let masked = tape.mul(picked, m)?;
        let s = tape.sum(masked)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        prev = tape.constant(Tensor::one_hot(&targets, vocab))?;
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, -1.0 / count as f64)?)
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
    hidden: Tensor,
}

/// Beam search over summed log-probabilities for a single scene
/// (`scene_input` is `1 × scene_dim`). Returns the best finished sequence,
/// counting sequences cut at `max_len` as finished.
pub fn beam_decode(
    speaker: &Speaker,
    scene_input: &Tensor,
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(CoreError::Contract("beam width must be at least 1".into()));
    }
    if scene_input.rows() != 1 {
        return Err(CoreError::Contract(
            "beam_decode works on one scene at a time".into(),
        ));
    }
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let vocab = speaker.shape.vocab;
    let mut tape = Tape::new();
    let sv = speaker.attach(&mut tape, false)?;
    let x = tape.constant(scene_input.clone())?;
    let h0 = sv.initial_state(&mut tape, x)?;
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        hidden: tape.value(h0).clone(),
    }];
    let mut done: Vec<Beam> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut next_hidden = Vec::with_capacity(alive.len());
        for (b, beam) in alive.iter().enumerate() {
            let last = *beam.tokens.last().unwrap_or(&BOS);
            let prev = tape.constant(Tensor::one_hot(&[last], vocab))?;
            let h = tape.constant(beam.hidden.clone())?;
            let (logits, h_next) = sv.step(&mut tape, prev, h)?;
            let lp = tape.log_softmax(logits)?;
            for (tok, &l) in tape.value(lp).data().iter().enumerate() {
                candidates.push((beam.score + l, b, tok));
            }
            next_hidden.push(tape.value(h_next).clone());
        }
        // Highest score first; ties resolved by beam then token for determinism.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(score, b, tok) in candidates.iter().take(width) {
            let mut tokens = alive[b].tokens.clone();
            tokens.push(tok);
            let beam = Beam {
                tokens,
                score,
                hidden: next_hidden[b].clone(),
            };
            if tok == EOS {
                done.push(beam);
            } else {
                next.push(beam);
            }
        }
        alive = next;
        if alive.is_empty() || done.len() >= width {
            break;
        }
    }
    done.extend(alive);
    let best = done
        .into_iter()
        .reduce(|best, b| if b.score > best.score { b } else { best })
        .expect("at least one hypothesis");
    Ok(best.tokens)
}
