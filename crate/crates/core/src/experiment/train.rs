use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use psst_autodiff::{global_norm, ParamSet, Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, listener_scores, reference_nll, reference_recall_vs_distractors, stream_rng,
    write_json, CheckpointPaths, EvalMetrics, RunConfig, RunManifest, Stream, VERSION,
};
use crate::agents::{
    score_matrix, speaker_mle_loss, speaker_rollout, token_steps, Listener, RolloutPolicy, Speaker,
};
use crate::error::{CoreError, Result};
use crate::estimators::{
    baseline_value, reinforce_surrogate, BaselineContext, BaselineKind, EstimatorConfig,
    EstimatorKind,
};
use crate::metrics::{
    cider, composite_loss, disc_hinge_per_example, hinge_values, CurvePoint, LossWeights,
    NGramStats,
};
use crate::world::{Example, Split, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Teacher-forced NLL per token on validation references.
    pub speaker_val_nll: Option<f64>,
    /// Recall@1 of validation references against 31 random distractors.
    pub listener_val_recall1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub speaker: Speaker,
    pub listener: Listener,
    pub log: Vec<PretrainEpoch>,
}

fn numerical(what: &str, epoch: usize, step: usize) -> CoreError {
    CoreError::NumericalAbort(format!(
        "{what} became non-finite at epoch {epoch}, step {step}"
    ))
}

fn guard<T>(r: Result<T>, what: &str, epoch: usize, step: usize) -> Result<T> {
    r.map_err(|e| {
        if e.is_numerical() {
            numerical(what, epoch, step)
        } else {
            e
        }
    })
}

/// Scale gradients of every set together so their joint norm is at most
/// `clip` (no-op when `clip` is 0).
fn clip_together(sets: &mut [&mut Vec<Tensor>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let all: Vec<Tensor> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    let norm = global_norm(&all);
    if norm > clip {
        let f = clip / norm;
        for s in sets.iter_mut() {
            for g in s.iter_mut() {
                *g = g.map(|x| x * f);
            }
        }
    }
}

fn sgd(
    params: &mut ParamSet,
    grads: &[Tensor],
    lr: f64,
    what: &str,
    epoch: usize,
    step: usize,
) -> Result<()> {
    params.sgd_step(grads, lr);
    if params.is_finite() {
        Ok(())
    } else {
        Err(numerical(what, epoch, step))
    }
}

const PRETRAIN_DISTRACTORS: usize = 31;

fn save_ckpt(params: &ParamSet, dir: Option<&Path>, name: &str) -> Result<()> {
    if let Some(dir) = dir {
        crate::write_atomic(&dir.join(name), &psst_autodiff::checkpoint::encode(params))?;
    }
    Ok(())
}

/// MLE pretraining of the speaker and hinge pretraining of the listener on
/// reference captions.
pub fn pretrain(world: &World, cfg: &RunConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    let out = out.as_deref();
    let mut speaker = Speaker::init(
        cfg.speaker_shape(world),
        &mut stream_rng(cfg.seed, Stream::SpeakerInit),
    );
    let mut listener = Listener::init(
        cfg.listener_shape(world),
        &mut stream_rng(cfg.seed, Stream::ListenerInit),
    );
    let mut val_rng = stream_rng(cfg.seed, Stream::Validation);
    let batch = cfg.batch_size.min(world.split_ids(Split::Train).len());

    let val_distractors =
        PRETRAIN_DISTRACTORS.min(world.split_ids(Split::Val).len().saturating_sub(1));
    let listener_recall = |l: &Listener, rng: &mut ChaCha8Rng| -> Result<Option<f64>> {
        if val_distractors == 0 {
            return Ok(None);
        }
        reference_recall_vs_distractors(world, l, Split::Val, val_distractors, rng).map(Some)
    };

    let mut log = vec![PretrainEpoch {
        epoch: 0,
        speaker_val_nll: Some(reference_nll(world, &speaker, Split::Val)?),
        listener_val_recall1: listener_recall(&listener, &mut val_rng)?,
    }];
    save_ckpt(&speaker.params, out, "speaker.epoch0.ckpt")?;
    save_ckpt(&listener.params, out, "listener.epoch0.ckpt")?;

    let mut rng = stream_rng(cfg.seed, Stream::SpeakerPretrain);
    for epoch in 1..=cfg.speaker_pretrain_epochs {
        for (step, examples) in world
            .epoch_batches(Split::Train, batch, &mut rng)?
            .iter()
            .enumerate()
        {
            let scenes: Vec<_> = examples
                .iter()
                .map(|e| world.scene(e.scene_id).expect("train scene"))
                .collect();
            let refs: Vec<&[usize]> = examples
                .iter()
                .map(|e| world.references(e.scene_id)[e.reference].tokens.as_slice())
                .collect();
            let mut tape = Tape::new();
            let sv = speaker.attach(&mut tape, true)?;
            let x = tape.constant(world.encode_scenes(&scenes))?;
            let loss = guard(
                speaker_mle_loss(&mut tape, &sv, x, &refs),
                "speaker MLE loss",
                epoch,
                step,
            )?;
            tape.backward(loss)?;
            let mut grads = speaker.params.gradients(&tape, &sv.all);
            clip_together(&mut [&mut grads], cfg.clip_norm);
            sgd(
                &mut speaker.params,
                &grads,
                cfg.speaker_pretrain_lr,
                "speaker parameters",
                epoch,
                step,
            )?;
        }
        log_epoch(&mut log, epoch).speaker_val_nll =
            Some(reference_nll(world, &speaker, Split::Val)?);
        save_ckpt(&speaker.params, out, &format!("speaker.epoch{epoch}.ckpt"))?;
    }

    let mut rng = stream_rng(cfg.seed, Stream::ListenerPretrain);
    for epoch in 1..=cfg.listener_pretrain_epochs {
        for (step, examples) in world
            .epoch_batches(Split::Train, batch, &mut rng)?
            .iter()
            .enumerate()
        {
            let scenes: Vec<_> = examples
                .iter()
                .map(|e| world.scene(e.scene_id).expect("train scene"))
                .collect();
            let refs: Vec<Vec<usize>> = examples
                .iter()
                .map(|e| world.references(e.scene_id)[e.reference].tokens.clone())
                .collect();
            let mut tape = Tape::new();
            let lv = listener.attach(&mut tape, true)?;
            let steps = token_steps(&mut tape, &refs, world.vocab_size())?;
            let c = lv.encode_caption(&mut tape, &steps)?;
            let x = tape.constant(world.encode_scenes(&scenes))?;
            let s = lv.encode_scenes(&mut tape, x)?;
            let m = guard(
                score_matrix(&mut tape, c, s),
                "listener scores",
                epoch,
                step,
            )?;
            let per = disc_hinge_per_example(&mut tape, m)?;
            let loss = tape.mean(per)?;
            tape.backward(loss)?;
            let mut grads = listener.params.gradients(&tape, &lv.all);
            clip_together(&mut [&mut grads], cfg.clip_norm);
            sgd(
                &mut listener.params,
                &grads,
                cfg.listener_pretrain_lr,
                "listener parameters",
                epoch,
                step,
            )?;
        }
        log_epoch(&mut log, epoch).listener_val_recall1 = listener_recall(&listener, &mut val_rng)?;
        save_ckpt(
            &listener.params,
            out,
            &format!("listener.epoch{epoch}.ckpt"),
        )?;
    }

    if let Some(dir) = out {
        speaker.save(&dir.join("speaker.ckpt"))?;
        listener.save(&dir.join("listener.ckpt"))?;
        write_json(&dir.join("pretrain_log.json"), &log)?;
    }
    Ok(Pretrained {
        speaker,
        listener,
        log,
    })
}

fn log_epoch(log: &mut Vec<PretrainEpoch>, epoch: usize) -> &mut PretrainEpoch {
    if let Some(i) = log.iter().position(|e| e.epoch == epoch) {
        return &mut log[i];
    }
    log.push(PretrainEpoch {
        epoch,
        speaker_val_nll: None,
        listener_val_recall1: None,
    });
    log.last_mut().expect("just pushed")
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub manifest: RunManifest,
    pub curve: Vec<CurvePoint>,
    pub speaker: Speaker,
    pub listener: Listener,
    pub best_speaker: Speaker,
    pub best_listener: Listener,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Both,
    SpeakerOnly,
    ListenerOnly,
}

/// Per-run state the step function needs besides the parameters.
struct StepContext<'a> {
    world: &'a World,
    stats: &'a NGramStats,
    cfg: &'a RunConfig,
    est: EstimatorConfig,
    weights: LossWeights,
    /// CIDEr of each reference against the scene's other references.
    reference_cider: HashMap<(u32, usize), f64>,
}

impl StepContext<'_> {
    fn reference_cider(&mut self, example: Example) -> Result<f64> {
        if let Some(&v) = self
            .reference_cider
            .get(&(example.scene_id, example.reference))
        {
            return Ok(v);
        }
        let refs = self.world.references(example.scene_id);
        let others: Vec<&[usize]> = refs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != example.reference)
            .map(|(_, r)| r.tokens.as_slice())
            .collect();
        let v = cider(&refs[example.reference].tokens, &others, self.stats)?;
        self.reference_cider
            .insert((example.scene_id, example.reference), v);
        Ok(v)
    }

    fn caption_cider(&self, scene_id: u32, tokens: &[usize]) -> Result<f64> {
        let refs: Vec<&[usize]> = self
            .world
            .references(scene_id)
            .iter()
            .map(|r| r.tokens.as_slice())
            .collect();
        cider(tokens, &refs, self.stats)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    listener_grad_norm: f64,
}

fn joint_step(
    ctx: &mut StepContext<'_>,
    speaker: &mut Speaker,
    listener: &mut Listener,
    examples: &[Example],
    lr: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<StepStats> {
    let world = ctx.world;
    let rows = examples.len();
    let train_speaker = !ctx.cfg.freeze_speaker && phase != Phase::ListenerOnly;
    let train_listener = phase != Phase::SpeakerOnly;
    let lam = ctx.weights;
    let ids: Vec<u32> = examples.iter().map(|e| e.scene_id).collect();
    let scenes: Vec<_> = ids
        .iter()
        .map(|&id| world.scene(id).expect("train scene"))
        .collect();
    let scene_tensor = world.encode_scenes(&scenes);

    let needs_greedy = train_speaker && ctx.est.baseline == BaselineKind::Greedy;
    let greedy_tokens = if needs_greedy {
        let mut tape = Tape::new();
        let sv = speaker.attach(&mut tape, false)?;
        let x = tape.constant(scene_tensor.clone())?;
        speaker_rollout(
            &mut tape,
            &sv,
            x,
            RolloutPolicy::Greedy,
            world.max_len(),
            rng,
        )?
        .tokens
    } else {
        Vec::new()
    };

    let mut tape = Tape::new();
    let sv = speaker.attach(&mut tape, train_speaker)?;
    let lv = listener.attach(&mut tape, train_listener)?;
    let x = tape.constant(scene_tensor)?;
    let caption = guard(
        speaker_rollout(
            &mut tape,
            &sv,
            x,
            RolloutPolicy::Estimator(&ctx.est),
            world.max_len(),
            rng,
        ),
        "speaker rollout",
        epoch,
        step,
    )?;

    let disc = if lam.disc() > 0.0 {
        let c = lv.encode_caption(&mut tape, &caption.listener_steps())?;
        let s = lv.encode_scenes(&mut tape, x)?;
        let m = guard(
            score_matrix(&mut tape, c, s),
            "listener scores",
            epoch,
            step,
        )?;
        let hinge = disc_hinge_per_example(&mut tape, m)?;
        let mut disc = tape.mean(hinge)?;
        if ctx.est.kind == EstimatorKind::Reinforce && train_speaker {
            let reward: Vec<f64> = tape.value(hinge).data().iter().map(|h| -h).collect();
            let baseline: Vec<f64> = match ctx.est.baseline {
                BaselineKind::None => vec![0.0; rows],
                BaselineKind::GroundTruth => {
                    let refs: Vec<Vec<usize>> = examples
                        .iter()
                        .map(|e| world.references(e.scene_id)[e.reference].tokens.clone())
                        .collect();
                    hinge_values(&listener_scores(world, listener, &ids, &refs)?)?
                        .into_iter()
                        .map(|h| -h)
                        .collect()
                }
                BaselineKind::Greedy => {
                    hinge_values(&listener_scores(world, listener, &ids, &greedy_tokens)?)?
                        .into_iter()
                        .map(|h| -h)
                        .collect()
                }
            };
            let sur = reinforce_surrogate(&mut tape, caption.log_prob, &reward, &baseline)?;
            let sur = tape.mean(sur)?;
            disc = tape.add(disc, sur)?;
        }
        Some(disc)
    } else {
        None
    };

    let nat = if lam.nat() > 0.0 && train_speaker {
        // Relaxed rows carry no tokens, so an auxiliary sampled rollout
        // supplies their reward.
        let (log_prob, tokens) = if caption.relaxed.iter().any(|&r| r) {
            let sampler = EstimatorConfig::reinforce(ctx.est.baseline);
            let aux = speaker_rollout(
                &mut tape,
                &sv,
                x,
                RolloutPolicy::Estimator(&sampler),
                world.max_len(),
                rng,
            )?;
            let keep: Vec<f64> = caption
                .relaxed
                .iter()
                .map(|&r| if r { 0.0 } else { 1.0 })
                .collect();
            let keep_t = Tensor::new(vec![rows, 1], keep)?;
            let swap = keep_t.map(|k| 1.0 - k);
            let keep_v = tape.constant(keep_t)?;
            let swap_v = tape.constant(swap)?;
            let a = tape.mul(caption.log_prob, keep_v)?;
            let b = tape.mul(aux.log_prob, swap_v)?;
            let lp = tape.add(a, b)?;
            let toks = (0..rows)
                .map(|r| {
                    if caption.relaxed[r] {
                        aux.tokens[r].clone()
                    } else {
                        caption.tokens[r].clone()
                    }
                })
                .collect();
            (lp, toks)
        } else {
            (caption.log_prob, caption.tokens.clone())
        };
        let mut reward = Vec::with_capacity(rows);
        let mut baseline = Vec::with_capacity(rows);
        for (r, e) in examples.iter().enumerate() {
            reward.push(ctx.caption_cider(e.scene_id, &tokens[r])?);
            let context = BaselineContext {
                greedy_reward: if needs_greedy {
                    Some(ctx.caption_cider(e.scene_id, &greedy_tokens[r])?)
                } else {
                    None
                },
                reference_reward: if ctx.est.baseline == BaselineKind::GroundTruth {
                    Some(ctx.reference_cider(*e)?)
                } else {
                    None
                },
            };
            baseline.push(baseline_value(ctx.est.baseline, &context)?);
        }
        let sur = reinforce_surrogate(&mut tape, log_prob, &reward, &baseline)?;
        Some(tape.mean(sur)?)
    } else {
        None
    };

    // A term can be absent because nothing it touches is trainable; the
    // other keeps its raw weight.
    let loss = match (disc, nat) {
        (None, None) => return Ok(StepStats::default()),
        (Some(d), Some(n)) => composite_loss(&mut tape, Some(d), Some(n), lam)?,
        (Some(d), None) => tape.scale(d, lam.disc())?,
        (None, Some(n)) => tape.scale(n, lam.nat())?,
    };
    if !tape.value(loss).is_finite() {
        return Err(numerical("joint loss", epoch, step));
    }
    tape.backward(loss)?;

    let mut sg = if train_speaker {
        speaker.params.gradients(&tape, &sv.all)
    } else {
        Vec::new()
    };
    let mut lg = if train_listener {
        listener.params.gradients(&tape, &lv.all)
    } else {
        Vec::new()
    };
    clip_together(&mut [&mut sg, &mut lg], ctx.cfg.clip_norm);
    if train_speaker {
        sgd(
            &mut speaker.params,
            &sg,
            lr,
            "speaker parameters",
            epoch,
            step,
        )?;
    }
    if train_listener {
        sgd(
            &mut listener.params,
            &lg,
            lr,
            "listener parameters",
            epoch,
            step,
        )?;
    }
    Ok(StepStats {
        listener_grad_norm: global_norm(&lg),
    })
}

fn curve_point(
    cfg: &RunConfig,
    est: &EstimatorConfig,
    epoch: usize,
    m: &EvalMetrics,
) -> CurvePoint {
    CurvePoint {
        method: est.kind.name().to_string(),
        lambda: cfg.lambda,
        rho: est.rho,
        tau: est.tau,
        seed: cfg.seed,
        epoch,
        cider: m.cider,
        recall1: m.recall1,
        recall5: m.recall5,
        recall10: m.recall10,
    }
}

/// Joint training from pretrained agents. Evaluates on validation before
/// the first epoch (epoch 0) and after every epoch, and keeps the agents
/// from the epoch with the best recall@10 (earliest on ties).
pub fn joint_train(
    world: &World,
    cfg: &RunConfig,
    speaker: &Speaker,
    listener: &Listener,
) -> Result<JointOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let est = cfg.estimator()?;
    if speaker.shape != cfg.speaker_shape(world) || listener.shape != cfg.listener_shape(world) {
        return Err(CoreError::Load(
            "checkpoint shapes do not match the world and config".into(),
        ));
    }
    let stats = NGramStats::from_world(world)?;
    let mut ctx = StepContext {
        world,
        stats: &stats,
        cfg,
        est,
        weights: LossWeights::new(cfg.lambda)?,
        reference_cider: HashMap::new(),
    };
    let mut speaker = speaker.clone();
    let mut listener = listener.clone();
    let batch = cfg.batch_size.min(world.split_ids(Split::Train).len());

    let eval =
        |s: &Speaker, l: &Listener| evaluate(world, &stats, s, l, Split::Val, cfg.beam_width);
    let first = eval(&speaker, &listener)?;
    let mut curve = vec![curve_point(cfg, &est, 0, &first)];
    let mut best = (0, first, speaker.clone(), listener.clone());
    let mut last = first;

    let mut batch_rng = stream_rng(cfg.seed, Stream::JointBatches);
    let mut est_rng = stream_rng(cfg.seed, Stream::Estimator);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.joint_epochs {
        let lr = cfg.lr_at(epoch - 1);
        for (step, examples) in world
            .epoch_batches(Split::Train, batch, &mut batch_rng)?
            .iter()
            .enumerate()
        {
            let phase = match (cfg.alternate, global_step % 2) {
                (false, _) => Phase::Both,
                (true, 0) => Phase::SpeakerOnly,
                (true, _) => Phase::ListenerOnly,
            };
            joint_step(
                &mut ctx,
                &mut speaker,
                &mut listener,
                examples,
                lr,
                phase,
                &mut est_rng,
                epoch,
                step,
            )?;
            global_step += 1;
        }
        last = eval(&speaker, &listener)?;
        curve.push(curve_point(cfg, &est, epoch, &last));
        if last.recall10 > best.1.recall10 {
            best = (epoch, last, speaker.clone(), listener.clone());
        }
    }

    let out = cfg.resolved_output_dir();
    let checkpoints = match out.as_deref() {
        Some(dir) => {
            let paths = CheckpointPaths {
                best_speaker: dir.join("speaker.best.ckpt"),
                best_listener: dir.join("listener.best.ckpt"),
                final_speaker: dir.join("speaker.final.ckpt"),
                final_listener: dir.join("listener.final.ckpt"),
            };
            best.2.save(&paths.best_speaker)?;
            best.3.save(&paths.best_listener)?;
            speaker.save(&paths.final_speaker)?;
            listener.save(&paths.final_listener)?;
            crate::metrics::write_curve(&dir.join("curve.csv"), &curve)?;
            Some(paths)
        }
        None => None,
    };
    let manifest = RunManifest {
        config: cfg.clone(),
        estimator: est,
        version: VERSION.to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
        best_epoch: best.0,
        best: best.1,
        last,
        epochs_run: cfg.joint_epochs,
        checkpoints,
    };
    if let Some(dir) = out.as_deref() {
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(JointOutcome {
        manifest,
        curve,
        speaker,
        listener,
        best_speaker: best.2,
        best_listener: best.3,
    })
}

/// Norm of the listener gradient over the first joint step. Only the
/// discriminative term touches the listener, so this audits its weight.
pub fn listener_gradient_audit(
    world: &World,
    cfg: &RunConfig,
    speaker: &Speaker,
    listener: &Listener,
) -> Result<f64> {
    let est = cfg.estimator()?;
    let stats = NGramStats::from_world(world)?;
    let mut ctx = StepContext {
        world,
        stats: &stats,
        cfg,
        est,
        weights: LossWeights::new(cfg.lambda)?,
        reference_cider: HashMap::new(),
    };
    let mut s = speaker.clone();
    let mut l = listener.clone();
    let mut rng = stream_rng(cfg.seed, Stream::JointBatches);
    let batch = cfg.batch_size.min(world.split_ids(Split::Train).len());
    let examples = world
        .epoch_batches(Split::Train, batch, &mut rng)?
        .swap_remove(0);
    let mut est_rng = stream_rng(cfg.seed, Stream::Estimator);
    let stats = joint_step(
        &mut ctx,
        &mut s,
        &mut l,
        &examples,
        cfg.lr,
        Phase::Both,
        &mut est_rng,
        1,
        0,
    )?;
    Ok(stats.listener_grad_norm)
}
