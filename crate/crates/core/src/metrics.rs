//! Losses and evaluation metrics: the two-hinge discriminative loss, the
//! composite objective, CIDEr, recall@k and curve utilities.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use psst_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::world::{content_tokens, Split, World};

/// Weight on the discriminative term; `1 - lambda` goes to naturalness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CoreError::Domain(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(LossWeights { lambda })
    }

    pub fn disc(&self) -> f64 {
        self.lambda
    }

    pub fn nat(&self) -> f64 {
        1.0 - self.lambda
    }
}

/// For each row `i` of a square score matrix, the hardest negative caption
/// (largest `S[k, i]`, `k != i`) and hardest negative scene (largest
/// `S[i, j]`, `j != i`). Ties go to the lower index.
pub fn hardest_negatives(scores: &Tensor) -> Result<Vec<(usize, usize)>> {
    let b = scores.rows();
    if scores.shape().len() != 2 || scores.cols() != b {
        return Err(CoreError::Contract(format!(
            "score matrix must be square, got {:?}",
            scores.shape()
        )));
    }
    if b < 2 {
        return Err(CoreError::Contract(
            "hinge loss needs at least two examples".into(),
        ));
    }
    let pick = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in vals {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.expect("b >= 2").0
    };
    Ok((0..b)
        .map(|i| {
            let cap = pick(&mut (0..b).filter(|&k| k != i).map(|k| (k, scores.at(k, i))));
            let scene = pick(&mut (0..b).filter(|&j| j != i).map(|j| (j, scores.at(i, j))));
            (cap, scene)
        })
        .collect())
}

/// Per-example hinge sum, `B × 1`:
/// `relu(1 - S_ii + S_{k*,i}) + relu(1 - S_ii + S_{i,j*})`.
///
/// Negative selection is fixed from the forward values; gradients flow
/// through the selected entries only.
pub fn disc_hinge_per_example(tape: &mut Tape, scores: Var) -> Result<Var> {
    let negs = hardest_negatives(tape.value(scores))?;
    let b = negs.len();
    let pos_idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let cap_idx: Vec<(usize, usize)> = negs.iter().enumerate().map(|(i, &(k, _))| (k, i)).collect();
    let scene_idx: Vec<(usize, usize)> =
        negs.iter().enumerate().map(|(i, &(_, j))| (i, j)).collect();
    let pos = tape.gather(scores, &pos_idx)?;
    let neg_cap = tape.gather(scores, &cap_idx)?;
    let neg_scene = tape.gather(scores, &scene_idx)?;
    let margin = tape.one_minus(pos)?;
    let a = tape.add(margin, neg_cap)?;
    let a = tape.relu(a)?;
    let c = tape.add(margin, neg_scene)?;
    let c = tape.relu(c)?;
    Ok(tape.add(a, c)?)
}

/// Mean over targets of the two-hinge loss.
pub fn disc_hinge_loss(tape: &mut Tape, scores: Var) -> Result<Var> {
    let per = disc_hinge_per_example(tape, scores)?;
    Ok(tape.mean(per)?)
}

/// Plain-value version of [`disc_hinge_per_example`].
pub fn hinge_values(scores: &Tensor) -> Result<Vec<f64>> {
    let negs = hardest_negatives(scores)?;
    Ok(negs
        .iter()
        .enumerate()
        .map(|(i, &(k, j))| {
            let pos = scores.at(i, i);
            (1.0 - pos + scores.at(k, i)).max(0.0) + (1.0 - pos + scores.at(i, j)).max(0.0)
        })
        .collect())
}

/// `lambda * disc + (1 - lambda) * nat`. A term whose weight is exactly zero
/// is left out of the graph, so it contributes no gradient at all.
pub fn composite_loss(
    tape: &mut Tape,
    disc: Option<Var>,
    nat: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, w, name) in [(disc, weights.disc(), "disc"), (nat, weights.nat(), "nat")] {
        if w == 0.0 {
            continue;
        }
        let term = term
            .ok_or_else(|| CoreError::Contract(format!("{name} term missing with weight {w}")))?;
        if tape.value(term).len() != 1 {
            return Err(CoreError::Contract(format!("{name} term is not scalar")));
        }
        let scaled = tape.scale(term, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| CoreError::Contract("composite loss with no weighted term".into()))
}

pub const CIDER_MAX_N: usize = 4;

type NGram = Vec<usize>;

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<NGram, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Document frequencies per n-gram order. A document is the reference set
/// of one scene.
#[derive(Debug, Clone)]
pub struct NGramStats {
    doc_freq: Vec<HashMap<NGram, usize>>,
    num_docs: usize,
}

impl NGramStats {
    /// `documents` holds one list of token sequences per scene. Reserved
    /// tokens are stripped before counting.
    pub fn from_documents<D, C>(documents: D) -> Result<Self>
    where
        D: IntoIterator<Item = C>,
        C: IntoIterator,
        C::Item: AsRef<[usize]>,
    {
        let mut doc_freq = vec![HashMap::new(); CIDER_MAX_N];
        let mut num_docs = 0;
        for doc in documents {
            num_docs += 1;
            let caps: Vec<Vec<usize>> = doc
                .into_iter()
                .map(|c| content_tokens(c.as_ref()))
                .collect();
            for (n, table) in doc_freq.iter_mut().enumerate() {
                let mut seen = BTreeSet::new();
                for c in &caps {
                    for g in ngram_counts(c, n + 1).into_keys() {
                        seen.insert(g);
                    }
                }
                for g in seen {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        if num_docs == 0 {
            return Err(CoreError::Contract("CIDEr corpus is empty".into()));
        }
        Ok(NGramStats { doc_freq, num_docs })
    }

    /// Corpus of the world's training references.
    pub fn from_world(world: &World) -> Result<Self> {
        let docs = world.split_ids(Split::Train).iter().map(|&id| {
            world
                .references(id)
                .iter()
                .map(|r| r.tokens.clone())
                .collect::<Vec<_>>()
        });
        Self::from_documents(docs)
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_freq(&self, gram: &[usize]) -> usize {
        match gram.len() {
            n @ 1..=CIDER_MAX_N => self.doc_freq[n - 1].get(gram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `ln(N / df)`, or `ln N` for n-grams the corpus never saw.
    pub fn idf(&self, gram: &[usize]) -> f64 {
        let n = self.num_docs as f64;
        match self.doc_freq(gram) {
            0 => n.ln(),
            df => (n / df as f64).ln(),
        }
    }

    fn tfidf(&self, tokens: &[usize], n: usize) -> BTreeMap<NGram, f64> {
        let mut v = ngram_counts(tokens, n);
        for (g, w) in v.iter_mut() {
            *w *= self.idf(g);
        }
        v
    }
}

fn cosine_sparse(a: &BTreeMap<NGram, f64>, b: &BTreeMap<NGram, f64>) -> f64 {
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// Unscaled CIDEr: mean over n = 1..4 of the average TF-IDF cosine between
/// the candidate and each reference. Reserved tokens are ignored; an empty
/// candidate scores 0.
pub fn cider<R: AsRef<[usize]>>(
    candidate: &[usize],
    references: &[R],
    stats: &NGramStats,
) -> Result<f64> {
    if references.is_empty() {
        return Err(CoreError::Contract(
            "CIDEr needs at least one reference".into(),
        ));
    }
    let cand = content_tokens(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<usize>> = references
        .iter()
        .map(|r| content_tokens(r.as_ref()))
        .collect();
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let cv = stats.tfidf(&cand, n);
        let sum: f64 = refs
            .iter()
            .map(|r| cosine_sparse(&cv, &stats.tfidf(r, n)))
            .sum();
        total += sum / refs.len() as f64;
    }
    Ok(total / CIDER_MAX_N as f64)
}

/// Zero-based rank of `target` in `scores`, counting strictly better entries
/// plus ties held by a lower id.
pub fn rank_of(scores: &[f64], ids: &[u32], target: usize) -> usize {
    let st = scores[target];
    let it = ids[target];
    scores
        .iter()
        .zip(ids)
        .enumerate()
        .filter(|&(j, (&s, &id))| j != target && (s > st || (s == st && id < it)))
        .count()
}

/// Fraction of queries (rows of `scores`, `Q × P`) whose target column ranks
/// within the top `k`.
pub fn recall_at_k(scores: &Tensor, targets: &[usize], ids: &[u32], k: usize) -> Result<f64> {
    let pool = scores.cols();
    if ids.len() != pool || targets.len() != scores.rows() {
        return Err(CoreError::Contract(
            "recall inputs disagree on sizes".into(),
        ));
    }
    if k == 0 || k > pool {
        return Err(CoreError::Contract(format!("k = {k} outside 1..={pool}")));
    }
    if targets.is_empty() {
        return Err(CoreError::Contract("recall over zero queries".into()));
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(q, &t)| rank_of(scores.row(q), ids, t) < k)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// One evaluation of one run: a point on a discriminability/naturalness
/// curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub seed: u64,
    pub epoch: usize,
    pub cider: f64,
    pub recall1: f64,
    pub recall5: f64,
    pub recall10: f64,
}

pub const CURVE_HEADER: &str = "method,lambda,rho,tau,seed,epoch,cider,recall1,recall5,recall10";

pub fn curve_to_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_writer(Vec::new());
    if points.is_empty() {
        w.write_record(CURVE_HEADER.split(','))
            .map_err(|e| CoreError::Parse(e.to_string()))?;
    }
    for p in points {
        w.serialize(p)
            .map_err(|e| CoreError::Parse(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CoreError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CoreError::Parse(e.to_string()))
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| CoreError::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CURVE_HEADER {
        return Err(CoreError::Parse(format!(
            "unexpected curve header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| CoreError::Parse(e.to_string())))
        .collect()
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let text = curve_to_csv(points)?;
    crate::write_atomic(path, text.as_bytes())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    curve_from_csv(&text)
}

/// Recall at a fixed CIDEr level, linearly interpolated along a curve of
/// `(cider, recall)` points. Points are sorted by CIDEr; where several
/// segments cross the level the largest interpolated recall wins. `None`
/// when the level lies outside the curve's CIDEr range.
pub fn recall_at_cider(points: &[(f64, f64)], level: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(c, r)| c.is_finite() && r.is_finite())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best: Option<f64> = None;
    let mut offer = |v: f64| best = Some(best.map_or(v, |b: f64| b.max(v)));
    for &(c, r) in &pts {
        if c == level {
            offer(r);
        }
    }
    for w in pts.windows(2) {
        let ((c0, r0), (c1, r1)) = (w[0], w[1]);
        if c0 < level && level < c1 {
            offer(r0 + (r1 - r0) * (level - c0) / (c1 - c0));
        }
    }
    best
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}
