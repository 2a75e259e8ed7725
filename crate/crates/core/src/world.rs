//! Synthetic referential world: scenes are attribute vectors, captions come
//! from a small template grammar with synonyms and optional modifiers.
//!
//! Caption grammar, for `A` attributes:
//!
//! ```text
//! caption := DET MOD* NOUN <eos>
//! DET     := "a" | "the"
//! MOD     := a surface word for attribute i (0 <= i < A-1), in attribute order
//! NOUN    := a surface word for attribute A-1
//! ```
//!
//! Every surface word names exactly one (attribute, value), so parsing is a
//! table lookup. References mention the noun always and each modifier with
//! probability `mention_prob`, which leaves natural captions short of fully
//! identifying their scene.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const DETERMINERS: [&str; 2] = ["a", "the"];

/// Built-in surface words: `[attribute][value][synonym]`.
const LEXICON: [[[&str; 2]; 4]; 4] = [
    [
        ["small", "little"],
        ["big", "large"],
        ["tiny", "wee"],
        ["huge", "giant"],
    ],
    [
        ["red", "crimson"],
        ["blue", "azure"],
        ["green", "emerald"],
        ["yellow", "golden"],
    ],
    [
        ["wooden", "timber"],
        ["metal", "steel"],
        ["glass", "crystal"],
        ["stone", "rocky"],
    ],
    [
        ["cube", "box"],
        ["ball", "sphere"],
        ["cone", "funnel"],
        ["cylinder", "tube"],
    ],
];

fn surface_word(attribute: usize, value: usize, synonym: usize, num_attributes: usize) -> String {
    // The last attribute always draws from the noun table.
    let table_attr = if attribute + 1 == num_attributes {
        3
    } else {
        attribute
    };
    if num_attributes <= 4 && value < 4 && synonym < 2 {
        LEXICON[table_attr][value][synonym].to_string()
    } else {
        format!("a{attribute}v{value}s{synonym}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub synonyms_per_value: usize,
    pub refs_per_scene: usize,
    pub max_len: usize,
    /// Probability that a reference mentions a given modifier attribute.
    pub mention_prob: f64,
    pub split_sizes: SplitSizes,
    pub seed: u64,
    /// Upper bound on the vocabulary; generation fails if the grammar needs more.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_vocab: Option<usize>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_attributes: 4,
            values_per_attribute: 4,
            synonyms_per_value: 2,
            refs_per_scene: 5,
            max_len: 8,
            mention_prob: 0.25,
            split_sizes: SplitSizes {
                train: 160,
                val: 48,
                test: 48,
            },
            seed: 0,
            max_vocab: None,
        }
    }
}

impl WorldConfig {
    pub fn num_possible_scenes(&self) -> Option<usize> {
        self.values_per_attribute
            .checked_pow(self.num_attributes as u32)
    }

    /// Length of the longest grammatical caption, EOS included.
    pub fn longest_caption(&self) -> usize {
        self.num_attributes + 2
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED.len()
            + DETERMINERS.len()
            + self.num_attributes * self.values_per_attribute * self.synonyms_per_value
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.num_attributes == 0 {
            return bad("num_attributes must be at least 1".into());
        }
        if self.values_per_attribute < 2 {
            return bad("values_per_attribute must be at least 2".into());
        }
        if self.synonyms_per_value == 0 {
            return bad("synonyms_per_value must be at least 1".into());
        }
        if self.refs_per_scene < 2 {
            return bad("refs_per_scene must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.mention_prob) {
            return bad(format!("mention_prob {} outside [0, 1]", self.mention_prob));
        }
        if self.max_len < self.longest_caption() {
            return bad(format!(
                "max_len {} cannot hold the longest caption ({} tokens)",
                self.max_len,
                self.longest_caption()
            ));
        }
        if let Some(limit) = self.max_vocab {
            if self.vocab_size() > limit {
                return bad(format!(
                    "vocabulary of {} tokens cannot express the grammar (needs {})",
                    limit,
                    self.vocab_size()
                ));
            }
        }
        let total = self.split_sizes.train + self.split_sizes.val + self.split_sizes.test;
        match self.num_possible_scenes() {
            Some(n) if total <= n => {}
            _ => {
                return bad(format!(
                    "split sizes total {total} exceed the {:?} distinct scenes",
                    self.num_possible_scenes()
                ))
            }
        }
        if self.split_sizes.train == 0 || self.split_sizes.val == 0 || self.split_sizes.test == 0 {
            return bad("every split needs at least one scene".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub id: u32,
    pub attributes: Vec<usize>,
}

impl Scene {
    /// Number of attributes on which two scenes differ.
    pub fn distance(&self, other: &Scene) -> usize {
        self.attributes
            .iter()
            .zip(&other.attributes)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(CoreError::Config(format!("token {i} must be {r}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// Space-joined words, stopping at EOS.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Strip reserved tokens and cut at the first EOS.
pub fn content_tokens(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != PAD && t != BOS)
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReferenceCaption {
    pub scene_id: u32,
    /// EOS-terminated.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Attribute values recovered from a caption; `None` where not mentioned.
pub type ParsedScene = Vec<Option<usize>>;

/// Word tables for rendering and parsing captions.
#[derive(Debug, Clone)]
pub struct Grammar {
    num_attributes: usize,
    /// `words[attr][value]` lists token ids of the synonyms.
    words: Vec<Vec<Vec<usize>>>,
    determiners: Vec<usize>,
    /// token id -> (attribute, value)
    meaning: HashMap<usize, (usize, usize)>,
}

impl Grammar {
    fn build(config: &WorldConfig) -> (Vocabulary, Grammar) {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let determiners: Vec<usize> = DETERMINERS
            .iter()
            .map(|d| {
                tokens.push(d.to_string());
                tokens.len() - 1
            })
            .collect();
        let mut words = Vec::new();
        let mut meaning = HashMap::new();
        for a in 0..config.num_attributes {
            let mut per_value = Vec::new();
            for v in 0..config.values_per_attribute {
                let mut syn = Vec::new();
                for s in 0..config.synonyms_per_value {
                    tokens.push(surface_word(a, v, s, config.num_attributes));
                    let id = tokens.len() - 1;
                    meaning.insert(id, (a, v));
                    syn.push(id);
                }
                per_value.push(syn);
            }
            words.push(per_value);
        }
        let vocab = Vocabulary::new(tokens).expect("generated tokens are unique");
        (
            vocab,
            Grammar {
                num_attributes: config.num_attributes,
                words,
                determiners,
                meaning,
            },
        )
    }

    /// Render a caption. `mention[i]` says whether attribute `i` appears (the
    /// noun is always rendered); `synonym[i]` picks the surface word.
    pub fn render(
        &self,
        scene: &Scene,
        determiner: usize,
        mention: &[bool],
        synonym: &[usize],
    ) -> Vec<usize> {
        let mut out = vec![self.determiners[determiner % self.determiners.len()]];
        for a in 0..self.num_attributes {
            let is_noun = a + 1 == self.num_attributes;
            if is_noun || mention[a] {
                let syns = &self.words[a][scene.attributes[a]];
                out.push(syns[synonym[a] % syns.len()]);
            }
        }
        out.push(EOS);
        out
    }

    /// Caption naming every attribute with the first synonym.
    pub fn render_full(&self, scene: &Scene) -> Vec<usize> {
        let all = vec![true; self.num_attributes];
        let first = vec![0; self.num_attributes];
        self.render(scene, 0, &all, &first)
    }

    pub fn parse(&self, tokens: &[usize]) -> Result<ParsedScene> {
        let body = tokens.strip_suffix(&[EOS]).unwrap_or(tokens);
        let (det, rest) = body
            .split_first()
            .ok_or_else(|| CoreError::Parse("empty caption".into()))?;
        if !self.determiners.contains(det) {
            return Err(CoreError::Parse(format!(
                "caption must open with a determiner, got token {det}"
            )));
        }
        let mut parsed = vec![None; self.num_attributes];
        let mut last_attr: Option<usize> = None;
        for &t in rest {
            let &(a, v) = self
                .meaning
                .get(&t)
                .ok_or_else(|| CoreError::Parse(format!("token {t} is not an attribute word")))?;
            if last_attr.is_some_and(|l| a <= l) {
                return Err(CoreError::Parse("attribute words out of order".into()));
            }
            parsed[a] = Some(v);
            last_attr = Some(a);
        }
        if last_attr != Some(self.num_attributes - 1) {
            return Err(CoreError::Parse("caption must end with a noun".into()));
        }
        Ok(parsed)
    }
}

/// A target scene plus distractors from the same split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: Scene,
    pub distractor_scenes: Vec<Scene>,
    pub references: Vec<ReferenceCaption>,
}

/// One training example: a scene and the index of one of its references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub scene_id: u32,
    pub reference: usize,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    pub grammar: Grammar,
    scenes: BTreeMap<u32, Scene>,
    splits: [Vec<u32>; 3],
    references: BTreeMap<u32, Vec<ReferenceCaption>>,
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn attributes_of(id: usize, config: &WorldConfig) -> Vec<usize> {
    let mut rem = id;
    let mut attrs = vec![0; config.num_attributes];
    for slot in attrs.iter_mut().rev() {
        *slot = rem % config.values_per_attribute;
        rem /= config.values_per_attribute;
    }
    attrs
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let (vocab, grammar) = Grammar::build(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let total = config.num_possible_scenes().expect("validated");
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut rng);
    let s = config.split_sizes;
    let mut cursor = ids.into_iter();
    let mut take = |n: usize| -> Vec<u32> {
        let mut v: Vec<u32> = cursor.by_ref().take(n).map(|i| i as u32).collect();
        v.sort_unstable();
        v
    };
    let splits = [take(s.train), take(s.val), take(s.test)];

    let mut scenes = BTreeMap::new();
    let mut references = BTreeMap::new();
    for &id in splits.iter().flatten() {
        let scene = Scene {
            id,
            attributes: attributes_of(id as usize, config),
        };
        let refs = sample_references(&grammar, &scene, config, &mut rng);
        references.insert(id, refs);
        scenes.insert(id, scene);
    }
    Ok(World {
        config: config.clone(),
        vocab,
        grammar,
        scenes,
        splits,
        references,
    })
}

fn sample_references(
    grammar: &Grammar,
    scene: &Scene,
    config: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<ReferenceCaption> {
    let n_attr = config.num_attributes;
    let mut refs: Vec<ReferenceCaption> = Vec::with_capacity(config.refs_per_scene);
    while refs.len() < config.refs_per_scene {
        let det = rng.gen_range(0..DETERMINERS.len());
        let mention: Vec<bool> = (0..n_attr)
            .map(|_| rng.gen::<f64>() < config.mention_prob)
            .collect();
        let synonym: Vec<usize> = (0..n_attr)
            .map(|_| rng.gen_range(0..config.synonyms_per_value))
            .collect();
        let tokens = grammar.render(scene, det, &mention, &synonym);
        // The last slot redraws until the set holds two distinct captions.
        if refs.len() + 1 == config.refs_per_scene && refs.iter().all(|r| r.tokens == tokens) {
            continue;
        }
        refs.push(ReferenceCaption {
            scene_id: scene.id,
            tokens,
        });
    }
    refs
}

impl World {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Width of the one-hot scene encoding.
    pub fn scene_dim(&self) -> usize {
        self.config.num_attributes * self.config.values_per_attribute
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn scene(&self, id: u32) -> Option<&Scene> {
        self.scenes.get(&id)
    }

    pub fn split_ids(&self, split: Split) -> &[u32] {
        &self.splits[split_slot(split)]
    }

    pub fn split_scenes(&self, split: Split) -> Vec<&Scene> {
        self.split_ids(split)
            .iter()
            .map(|id| &self.scenes[id])
            .collect()
    }

    pub fn references(&self, scene_id: u32) -> &[ReferenceCaption] {
        self.references.get(&scene_id).map_or(&[], Vec::as_slice)
    }

    pub fn all_references(&self) -> impl Iterator<Item = &ReferenceCaption> {
        self.references.values().flatten()
    }

    /// One-hot-per-attribute encoding, `rows × scene_dim`.
    pub fn encode_scenes(&self, scenes: &[&Scene]) -> psst_autodiff::Tensor {
        let k = self.config.values_per_attribute;
        let dim = self.scene_dim();
        let mut t = psst_autodiff::Tensor::zeros(&[scenes.len(), dim]);
        for (r, s) in scenes.iter().enumerate() {
            for (a, &v) in s.attributes.iter().enumerate() {
                t.data_mut()[r * dim + a * k + v] = 1.0;
            }
        }
        t
    }

    /// Scenes in `split` that differ from `target` in exactly one attribute.
    pub fn neighbors(&self, split: Split, target: &Scene) -> Vec<&Scene> {
        self.split_scenes(split)
            .into_iter()
            .filter(|s| s.distance(target) == 1)
            .collect()
    }

    /// Target drawn uniformly from the split; `round(hard_fraction * (B-1))`
    /// distractors come from one-attribute neighbours when available, the rest
    /// uniformly without replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        split: Split,
        batch_size: usize,
        hard_fraction: f64,
        rng: &mut R,
    ) -> Result<Batch> {
        let ids = self.split_ids(split);
        if ids.is_empty() {
            return Err(CoreError::Contract(format!("split {split} is empty")));
        }
        if batch_size == 0 || batch_size > ids.len() {
            return Err(CoreError::Contract(format!(
                "batch size {batch_size} does not fit split {split} of {} scenes",
                ids.len()
            )));
        }
        if !(0.0..=1.0).contains(&hard_fraction) {
            return Err(CoreError::Domain(format!(
                "hard_fraction {hard_fraction} outside [0, 1]"
            )));
        }
        let target = &self.scenes[&ids[rng.gen_range(0..ids.len())]];
        let wanted = batch_size - 1;
        let n_hard = (hard_fraction * wanted as f64).round() as usize;

        let mut chosen: Vec<u32> = Vec::with_capacity(wanted);
        if n_hard > 0 {
            let pool: Vec<u32> = self.neighbors(split, target).iter().map(|s| s.id).collect();
            chosen.extend(pool.choose_multiple(rng, n_hard.min(pool.len())).copied());
        }
        let rest: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&id| id != target.id && !chosen.contains(&id))
            .collect();
        chosen.extend(rest.choose_multiple(rng, wanted - chosen.len()).copied());

        Ok(Batch {
            target: target.clone(),
            distractor_scenes: chosen.iter().map(|id| self.scenes[id].clone()).collect(),
            references: self.references(target.id).to_vec(),
        })
    }

    /// Examples for one epoch: `refs_per_scene` rounds, each a shuffled pass
    /// over the split in which every scene pairs with a different reference.
    /// Batches hold distinct scenes; the incomplete tail of a round is dropped
    /// so batch size stays constant.
    pub fn epoch_batches<R: Rng + ?Sized>(
        &self,
        split: Split,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Example>>> {
        let ids = self.split_ids(split);
        if batch_size < 2 || batch_size > ids.len() {
            return Err(CoreError::Contract(format!(
                "batch size {batch_size} does not fit split {split} of {} scenes",
                ids.len()
            )));
        }
        let rounds = self.config.refs_per_scene;
        let mut order: HashMap<u32, Vec<usize>> = HashMap::new();
        for &id in ids {
            let mut perm: Vec<usize> = (0..self.references(id).len()).collect();
            perm.shuffle(rng);
            order.insert(id, perm);
        }
        let mut batches = Vec::new();
        for round in 0..rounds {
            let mut scenes = ids.to_vec();
            scenes.shuffle(rng);
            for chunk in scenes.chunks_exact(batch_size) {
                batches.push(
                    chunk
                        .iter()
                        .map(|&id| {
                            let perm = &order[&id];
                            Example {
                                scene_id: id,
                                reference: perm[round % perm.len()],
                            }
                        })
                        .collect(),
                );
            }
        }
        Ok(batches)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_toml()?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        World::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        let file = WorldFile {
            config: self.config.clone(),
            vocabulary: VocabularyBlock {
                tokens: self.vocab.tokens.clone(),
            },
            scene: [Split::Train, Split::Val, Split::Test]
                .into_iter()
                .flat_map(|split| {
                    self.split_ids(split).iter().map(move |id| SceneRow {
                        id: *id,
                        split,
                        attributes: self.scenes[id].attributes.clone(),
                    })
                })
                .collect(),
            reference: self
                .references
                .values()
                .flatten()
                .map(|r| ReferenceRow {
                    scene: r.scene_id,
                    text: self.vocab.render(&r.tokens),
                })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| CoreError::Parse(format!("world serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<World> {
        let file: WorldFile =
            toml::from_str(text).map_err(|e| CoreError::Parse(format!("world file: {e}")))?;
        file.config.validate()?;
        let (vocab, grammar) = Grammar::build(&file.config);
        if vocab.tokens != file.vocabulary.tokens {
            return Err(CoreError::Parse(
                "vocabulary block does not match the grammar implied by the config".into(),
            ));
        }
        let mut scenes = BTreeMap::new();
        let mut splits: [Vec<u32>; 3] = Default::default();
        for row in file.scene {
            if row.attributes.len() != file.config.num_attributes
                || row
                    .attributes
                    .iter()
                    .any(|&v| v >= file.config.values_per_attribute)
            {
                return Err(CoreError::Parse(format!(
                    "scene {} has invalid attributes",
                    row.id
                )));
            }
            if scenes
                .insert(
                    row.id,
                    Scene {
                        id: row.id,
                        attributes: row.attributes,
                    },
                )
                .is_some()
            {
                return Err(CoreError::Parse(format!("scene {} listed twice", row.id)));
            }
            splits[split_slot(row.split)].push(row.id);
        }
        let mut references: BTreeMap<u32, Vec<ReferenceCaption>> = BTreeMap::new();
        for row in file.reference {
            if !scenes.contains_key(&row.scene) {
                return Err(CoreError::Parse(format!(
                    "reference for unknown scene {}",
                    row.scene
                )));
            }
            let mut tokens = row
                .text
                .split_whitespace()
                .map(|w| {
                    vocab
                        .id(w)
                        .ok_or_else(|| CoreError::Parse(format!("unknown word {w:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            tokens.push(EOS);
            references
                .entry(row.scene)
                .or_default()
                .push(ReferenceCaption {
                    scene_id: row.scene,
                    tokens,
                });
        }
        Ok(World {
            config: file.config,
            vocab,
            grammar,
            scenes,
            splits,
            references,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyBlock {
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SceneRow {
    id: u32,
    split: Split,
    attributes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRow {
    scene: u32,
    text: String,
}

/// On-disk layout: a config block, the vocabulary, then scene and reference
/// tables.
#[derive(Serialize, Deserialize)]
struct WorldFile {
    config: WorldConfig,
    vocabulary: VocabularyBlock,
    scene: Vec<SceneRow>,
    reference: Vec<ReferenceRow>,
}
