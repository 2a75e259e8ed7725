//! Run orchestration: configuration, evaluation, pretraining, joint training
//! and sweeps.

mod summary;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use psst_autodiff::Tape;

use crate::agents::{
    beam_decode, score_matrix, token_steps, Listener, ListenerShape, Speaker, SpeakerShape,
};
use crate::error::{CoreError, Result};
use crate::estimators::{BaselineKind, EstimatorConfig, EstimatorKind, Gating};
use crate::metrics::{cider, rank_of, recall_at_k, NGramStats};
use crate::world::{Split, World};

pub use summary::{
    frozen_comparison, matched_cider_level, matched_recall_by_rho, std_dev, tradeoff_summary,
    CurveAxis, FrozenComparison, MatchedRecall, TradeoffSummary,
};
pub use sweep::{group_recall_at_cider, sweep, CellOutcome, SweepCell, SweepGrid, SweepOutcome};
pub use train::{
    joint_train, listener_gradient_audit, pretrain, JointOutcome, PretrainEpoch, Pretrained,
};

/// Environment variable naming the root under which relative output
/// directories are placed.
pub const OUTPUT_ROOT_ENV: &str = "PSST_OUTPUT_ROOT";

/// Everything that determines a run, given the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub world: Option<PathBuf>,
    pub method: EstimatorKind,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub baseline: BaselineKind,
    pub gating: Gating,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub speaker_pretrain_lr: f64,
    pub listener_pretrain_lr: f64,
    pub speaker_pretrain_epochs: usize,
    pub listener_pretrain_epochs: usize,
    pub joint_epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beam_width: usize,
    pub hidden: usize,
    pub embed: usize,
    pub listener_hidden: usize,
    pub alternate: bool,
    pub freeze_speaker: bool,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: None,
            method: EstimatorKind::PsstMultinomial,
            rho: Some(0.5),
            tau: None,
            baseline: BaselineKind::GroundTruth,
            gating: Gating::PerExample,
            lambda: 0.5,
            batch_size: 32,
            lr: 0.5,
            lr_decay: 0.8,
            lr_decay_every: 15,
            speaker_pretrain_lr: 0.5,
            listener_pretrain_lr: 10.0,
            speaker_pretrain_epochs: 40,
            listener_pretrain_epochs: 100,
            joint_epochs: 50,
            clip_norm: 5.0,
            beam_width: 2,
            hidden: 32,
            embed: 16,
            listener_hidden: 32,
            alternate: false,
            freeze_speaker: false,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn estimator(&self) -> Result<EstimatorConfig> {
        Ok(
            EstimatorConfig::resolve(self.method, self.rho, self.tau, self.baseline)?
                .with_gating(self.gating),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch-size must be at least 2");
        }
        if !(self.lr > 0.0 && self.speaker_pretrain_lr > 0.0 && self.listener_pretrain_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr-decay must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return bad("lr-decay-every must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip-norm must be non-negative");
        }
        if self.beam_width == 0 {
            return bad("beam-width must be positive");
        }
        if self.hidden == 0 || self.embed == 0 || self.listener_hidden == 0 {
            return bad("network sizes must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn speaker_shape(&self, world: &World) -> SpeakerShape {
        SpeakerShape {
            vocab: world.vocab_size(),
            scene_dim: world.scene_dim(),
            hidden: self.hidden,
            embed: self.embed,
        }
    }

    pub fn listener_shape(&self, world: &World) -> ListenerShape {
        ListenerShape {
            vocab: world.vocab_size(),
            scene_dim: world.scene_dim(),
            hidden: self.listener_hidden,
            embed: self.embed,
        }
    }

    /// Learning rate for a zero-based joint epoch under step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Output directory with relative paths placed under the output root
    /// environment variable, when set.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|d| resolve_output(d))
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Independent RNG streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    SpeakerInit = 1,
    ListenerInit = 2,
    SpeakerPretrain = 3,
    ListenerPretrain = 4,
    JointBatches = 5,
    Estimator = 6,
    Validation = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub recall1: f64,
    pub recall5: f64,
    pub recall10: f64,
    pub cider: f64,
    /// Number of candidate scenes each caption is ranked against.
    pub pool: usize,
}

/// Rank every caption against every scene of the pool. `captions[i]`
/// describes `scene_ids[i]`; recall@k is reported with `k` capped at the
/// pool size.
pub fn retrieval_metrics(
    world: &World,
    listener: &Listener,
    scene_ids: &[u32],
    captions: &[Vec<usize>],
) -> Result<(f64, f64, f64)> {
    if scene_ids.is_empty() || captions.len() != scene_ids.len() {
        return Err(CoreError::Contract(
            "retrieval needs one caption per scene".into(),
        ));
    }
    let scores = listener_scores(world, listener, scene_ids, captions)?;
    let targets: Vec<usize> = (0..scene_ids.len()).collect();
    let pool = scene_ids.len();
    let r = |k: usize| recall_at_k(&scores, &targets, scene_ids, k.min(pool));
    Ok((r(1)?, r(5)?, r(10)?))
}

/// Plain-value score matrix: captions by rows, scenes by columns.
pub fn listener_scores(
    world: &World,
    listener: &Listener,
    scene_ids: &[u32],
    captions: &[Vec<usize>],
) -> Result<psst_autodiff::Tensor> {
    let scenes: Vec<_> = scene_ids
        .iter()
        .map(|&id| {
            world
                .scene(id)
                .ok_or_else(|| CoreError::Contract(format!("no scene {id}")))
        })
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let lv = listener.attach(&mut tape, false)?;
    let steps = token_steps(&mut tape, captions, world.vocab_size())?;
    let c = lv.encode_caption(&mut tape, &steps)?;
    let x = tape.constant(world.encode_scenes(&scenes))?;
    let s = lv.encode_scenes(&mut tape, x)?;
    let m = score_matrix(&mut tape, c, s)?;
    Ok(tape.value(m).clone())
}

/// Beam-decoded caption for each scene.
pub fn decode_captions(
    world: &World,
    speaker: &Speaker,
    scene_ids: &[u32],
    width: usize,
) -> Result<Vec<Vec<usize>>> {
    scene_ids
        .iter()
        .map(|&id| {
            let scene = world
                .scene(id)
                .ok_or_else(|| CoreError::Contract(format!("no scene {id}")))?;
            beam_decode(
                speaker,
                &world.encode_scenes(&[scene]),
                width,
                world.max_len(),
            )
        })
        .collect()
}

/// Mean CIDEr of each caption against its scene's references.
pub fn mean_cider(
    world: &World,
    stats: &NGramStats,
    scene_ids: &[u32],
    captions: &[Vec<usize>],
) -> Result<f64> {
    let mut total = 0.0;
    for (&id, cap) in scene_ids.iter().zip(captions) {
        let refs: Vec<&[usize]> = world
            .references(id)
            .iter()
            .map(|r| r.tokens.as_slice())
            .collect();
        total += cider(cap, &refs, stats)?;
    }
    Ok(total / scene_ids.len().max(1) as f64)
}

/// Decode every scene of `split` with beam search, rank each caption against
/// the whole split and score naturalness against the references.
pub fn evaluate(
    world: &World,
    stats: &NGramStats,
    speaker: &Speaker,
    listener: &Listener,
    split: Split,
    beam_width: usize,
) -> Result<EvalMetrics> {
    let ids = world.split_ids(split).to_vec();
    if ids.is_empty() {
        return Err(CoreError::Contract(format!("split {split} is empty")));
    }
    let captions = decode_captions(world, speaker, &ids, beam_width)?;
    evaluate_captions(world, stats, listener, &ids, &captions)
}

pub fn evaluate_captions(
    world: &World,
    stats: &NGramStats,
    listener: &Listener,
    scene_ids: &[u32],
    captions: &[Vec<usize>],
) -> Result<EvalMetrics> {
    let (recall1, recall5, recall10) = retrieval_metrics(world, listener, scene_ids, captions)?;
    Ok(EvalMetrics {
        recall1,
        recall5,
        recall10,
        cider: mean_cider(world, stats, scene_ids, captions)?,
        pool: scene_ids.len(),
    })
}

/// The same ranking with each scene's first reference standing in for the
/// generated caption: the ceiling a speaker can reach with this listener.
pub fn evaluate_references(
    world: &World,
    stats: &NGramStats,
    listener: &Listener,
    split: Split,
) -> Result<EvalMetrics> {
    let ids = world.split_ids(split).to_vec();
    let captions: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| {
            world
                .references(id)
                .first()
                .map(|r| r.tokens.clone())
                .unwrap_or_default()
        })
        .collect();
    evaluate_captions(world, stats, listener, &ids, &captions)
}

/// Recall@1 of reference captions against `distractors` uniformly drawn
/// scenes of the same split, one query per scene.
pub fn reference_recall_vs_distractors(
    world: &World,
    listener: &Listener,
    split: Split,
    distractors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let ids = world.split_ids(split);
    if distractors + 1 > ids.len() {
        return Err(CoreError::Contract(format!(
            "{distractors} distractors do not fit split {split} of {}",
            ids.len()
        )));
    }
    let captions: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| world.references(id)[0].tokens.clone())
        .collect();
    let scores = listener_scores(world, listener, ids, &captions)?;
    let mut hits = 0;
    for (q, &target) in ids.iter().enumerate() {
        let others: Vec<usize> = (0..ids.len()).filter(|&j| j != q).collect();
        let mut pool: Vec<usize> = others.choose_multiple(rng, distractors).copied().collect();
        pool.push(q);
        let row: Vec<f64> = pool.iter().map(|&j| scores.at(q, j)).collect();
        let pool_ids: Vec<u32> = pool.iter().map(|&j| ids[j]).collect();
        let t = pool_ids
            .iter()
            .position(|&id| id == target)
            .expect("target in pool");
        if rank_of(&row, &pool_ids, t) == 0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / ids.len() as f64)
}

/// Mean teacher-forced NLL per token over every reference of `split`.
pub fn reference_nll(world: &World, speaker: &Speaker, split: Split) -> Result<f64> {
    let ids = world.split_ids(split);
    let mut scenes = Vec::new();
    let mut refs: Vec<&[usize]> = Vec::new();
    for &id in ids {
        let scene = world.scene(id).expect("split ids are scenes");
        for r in world.references(id) {
            scenes.push(scene);
            refs.push(&r.tokens);
        }
    }
    let mut tape = Tape::new();
    let sv = speaker.attach(&mut tape, false)?;
    let x = tape.constant(world.encode_scenes(&scenes))?;
    let loss = crate::agents::speaker_mle_loss(&mut tape, &sv, x, &refs)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPaths {
    pub best_speaker: PathBuf,
    pub best_listener: PathBuf,
    pub final_speaker: PathBuf,
    pub final_listener: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub estimator: EstimatorConfig,
    pub version: String,
    pub wall_seconds: f64,
    pub best_epoch: usize,
    pub best: EvalMetrics,
    #[serde(rename = "final")]
    pub last: EvalMetrics,
    pub epochs_run: usize,
    pub checkpoints: Option<CheckpointPaths>,
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CoreError::Parse(e.to_string()))?;
    crate::write_atomic(path, text.as_bytes())
}
