//! Evaluation measures and embedding-space analyses.
//!
//! `meteor_lite` is an exact-unigram variant of METEOR (no stemming or
//! synonym stages). Scores are comparable with each other, not with
//! published METEOR numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLEU_SMOOTHING: &str = "add-1 on zero n-gram precisions for n > 1";
pub const METEOR_VARIANT: &str = "meteor_lite: exact unigram match, greedy left-to-right alignment";

/// Gold × predicted counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<Self> {
        check_pairs(gold, pred, labels.len())?;
        let c = labels.len();
        let mut counts = vec![vec![0; c]; c];
        for (&g, &p) in gold.iter().zip(pred) {
            counts[g][p] += 1;
        }
        Ok(Self { labels: labels.to_vec(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

fn check_pairs(gold: &[usize], pred: &[usize], c: usize) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    if let Some(bad) = gold.iter().chain(pred).find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f_measure(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// Unweighted means of per-class precision, recall and F1. Undefined
/// ratios count as 0.
pub fn macro_prf(gold: &[usize], pred: &[usize], c: usize) -> Result<Prf> {
    check_pairs(gold, pred, c)?;
    if c == 0 {
        return Err(Error::invalid("macro averages need at least one class"));
    }
    let (mut tp, mut gold_n, mut pred_n) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for (&g, &p) in gold.iter().zip(pred) {
        gold_n[g] += 1.0;
        pred_n[p] += 1.0;
        if g == p {
            tp[g] += 1.0;
        }
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let p = ratio(tp[k], pred_n[k]);
        let r = ratio(tp[k], gold_n[k]);
        ps += p;
        rs += r;
        fs += f_measure(p, r);
    }
    let n = c as f64;
    Ok(Prf { precision: ps / n, recall: rs / n, f1: fs / n })
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    ratio(hits as f64, gold.len() as f64)
}

fn ngram_counts<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU on a 0–100 scale with clipped counts over all references,
/// the closest reference length for the brevity penalty, and add-1
/// smoothing of zero precisions above unigrams.
pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("max_n must be positive"));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::invalid("every candidate needs a reference"));
        }
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let cc = ngram_counts(cand, n);
            let mut best: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[n - 1] += (*k).min(best.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matched[n] == 0 {
            1.0 / (total[n] as f64 + 1.0)
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    f_measure(l / candidate.len() as f64, l / reference.len() as f64)
}

/// Exact-unigram METEOR: `F_mean = 10PR/(R + 9P)`, penalty
/// `0.5·(chunks/matches)³`, score `F_mean·(1 − penalty)`.
///
/// Each candidate token, left to right, aligns to the leftmost unused
/// equal reference token.
pub fn meteor_lite<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut align: Vec<Option<usize>> = Vec::with_capacity(candidate.len());
    for c in candidate {
        let hit = (0..reference.len()).find(|&j| !used[j] && reference[j] == *c);
        if let Some(j) = hit {
            used[j] = true;
        }
        align.push(hit);
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Mean of a per-pair score over a corpus (0 for an empty corpus).
pub fn corpus_mean<T>(cands: &[Vec<T>], refs: &[Vec<T>], f: impl Fn(&[T], &[T]) -> f64) -> f64 {
    if cands.is_empty() {
        return 0.0;
    }
    cands.iter().zip(refs).map(|(c, r)| f(c, r)).sum::<f64>() / cands.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size ≥ 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson is undefined for a zero-variance sample"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points must share one dimension"));
    }
    Ok(d)
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or `iters` rounds have run. Empty clusters keep their
/// previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    check_points(points)?;
    let distinct: BTreeSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    if k == 0 || k > distinct.len() {
        return Err(Error::invalid(format!("k = {k} but there are {} distinct points", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut t = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&v| v > 0.0).expect("a point away from every centroid");
        for (i, &v) in d2.iter().enumerate() {
            if v > 0.0 && t < v {
                pick = i;
                break;
            }
            t -= v;
        }
        centroids.push(points[pick].clone());
    }
    let assign = |cs: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let (best, d) = cs
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, sq_dist(p, c)))
                    .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                inertia += d;
                best
            })
            .collect();
        (a, inertia)
    };
    let (mut assignments, first) = assign(&centroids);
    let mut inertia = vec![first];
    for _ in 0..iters {
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (x, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[x]).sum::<f64>() / members.len() as f64;
            }
        }
        let (next, w) = assign(&centroids);
        inertia.push(w);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans { assignments, centroids, inertia })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub silhouette: f64,
    pub davies_bouldin: f64,
}

/// Mean silhouette (singletons contribute 0) and Davies–Bouldin index
/// (infinite when two centroids coincide), both with Euclidean distance.
pub fn cluster_quality(points: &[Vec<f64>], assignments: &[usize]) -> Result<ClusterQuality> {
    check_points(points)?;
    if points.len() != assignments.len() {
        return Err(Error::invalid("one assignment per point is required"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        members.entry(a).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::invalid("cluster quality needs at least two clusters"));
    }
    let clusters: Vec<&Vec<usize>> = members.values().collect();
    let mean_dist = |i: usize, ms: &[usize]| {
        let others: Vec<usize> = ms.iter().copied().filter(|&j| j != i).collect();
        others.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / others.len() as f64
    };
    let mut sil = 0.0;
    for (ci, ms) in clusters.iter().enumerate() {
        if ms.len() == 1 {
            continue;
        }
        for &i in ms.iter() {
            let a = mean_dist(i, ms);
            let b = clusters
                .iter()
                .enumerate()
                .filter(|(cj, _)| *cj != ci)
                .map(|(_, o)| o.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / o.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            sil += if m == 0.0 { 0.0 } else { (b - a) / m };
        }
    }
    let d = points[0].len();
    let centroids: Vec<Vec<f64>> = clusters
        .iter()
        .map(|ms| (0..d).map(|x| ms.iter().map(|&i| points[i][x]).sum::<f64>() / ms.len() as f64).collect())
        .collect();
    let scatter: Vec<f64> = clusters
        .iter()
        .zip(&centroids)
        .map(|(ms, c)| ms.iter().map(|&i| dist(&points[i], c)).sum::<f64>() / ms.len() as f64)
        .collect();
    let k = clusters.len();
    let mut db = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let sep = dist(&centroids[i], &centroids[j]);
            let r = if sep == 0.0 { f64::INFINITY } else { (scatter[i] + scatter[j]) / sep };
            worst = worst.max(r);
        }
        db += worst;
    }
    Ok(ClusterQuality { silhouette: sil / points.len() as f64, davies_bouldin: db / k as f64 })
}

/// Hex SHA-256 of a configuration's canonical text.
pub fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// The `metrics.json` document. `timestamp_unix` is the only
/// run-dependent field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    pub metadata: BTreeMap<String, String>,
    pub config_fingerprint: String,
    pub timestamp_unix: u64,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>, config_text: &str) -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            task: task.into(),
            metrics: BTreeMap::new(),
            confusion: None,
            metadata: BTreeMap::new(),
            config_fingerprint: fingerprint(config_text),
            timestamp_unix,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
