//! Functional clustering of grid cells by the shape of their typical week.
//!
//! Feature vectors concatenate L1-normalized 672-bin profiles, one block per
//! selected activity type in ordinal order. Clustering is k-means with
//! k-means++ seeding driven by ChaCha8 (`rand_chacha`) seeded from a `u64`,
//! followed by Lloyd iterations. All reductions run sequentially in input
//! order, so a given input and seed produce a bit-identical model regardless
//! of thread count.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activity::ActivityType;
use crate::error::{Error, Result};
use crate::metrics::{euclidean, mean_silhouette, squared_euclidean};
use crate::profiles::WeeklyProfile;
use crate::time::{BINS_PER_WEEK, SLOTS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub region_id: String,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// Activity types of the blocks, in ordinal order.
    pub types: Vec<ActivityType>,
    pub vectors: Vec<FeatureVector>,
    /// Regions left out because a requested profile was missing or empty.
    pub skipped: Vec<String>,
}

/// Builds one vector per region that has every requested type non-empty.
pub fn build_features(
    profiles: &BTreeMap<(String, ActivityType), WeeklyProfile>,
    types: &[ActivityType],
) -> Result<FeatureSet> {
    if types.is_empty() {
        return Err(Error::InvalidParameter("feature type list is empty".into()));
    }
    let mut types = types.to_vec();
    types.sort();
    types.dedup();

    let mut regions: Vec<&String> = profiles.keys().map(|(r, _)| r).collect();
    regions.dedup();

    let mut vectors = Vec::new();
    let mut skipped = Vec::new();
    'region: for region in regions {
        let mut x = Vec::with_capacity(BINS_PER_WEEK * types.len());
        for t in &types {
            match profiles.get(&(region.clone(), *t)) {
                Some(p) if !p.normalized => {
                    return Err(Error::InvalidParameter(format!(
                        "profile ({region}, {t}) is not normalized"
                    )))
                }
                Some(p) if !p.is_empty() => x.extend_from_slice(&p.values),
                _ => {
                    skipped.push(region.clone());
                    continue 'region;
                }
            }
        }
        vectors.push(FeatureVector {
            region_id: region.clone(),
            x,
        });
    }
    Ok(FeatureSet {
        types,
        vectors,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative SSE change below which iteration stops.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterLabel {
    Business,
    Residential,
    Leisure,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub types: Vec<ActivityType>,
    pub sse: f64,
    pub iterations: usize,
    pub labels: Vec<ClusterLabel>,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    /// SSE after each assignment step.
    #[serde(skip)]
    pub sse_history: Vec<f64>,
    /// True when iteration stopped because assignments stopped changing.
    #[serde(skip)]
    pub converged: bool,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, c)| **c == cluster)
            .map(|(r, _)| r.as_str())
    }
}

fn validate_input(set: &FeatureSet, k: usize) -> Result<usize> {
    let n = set.vectors.len();
    if k == 0 {
        return Err(Error::Clustering("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Clustering(format!("k = {k} exceeds number of vectors {n}")));
    }
    let dim = set.vectors[0].x.len();
    if set.vectors.iter().any(|v| v.x.len() != dim) {
        return Err(Error::Clustering("feature vectors differ in length".into()));
    }
    let mut ids = HashSet::new();
    for v in &set.vectors {
        if !ids.insert(v.region_id.as_str()) {
            return Err(Error::Clustering(format!("duplicate region id {}", v.region_id)));
        }
    }
    Ok(dim)
}

/// k-means++ seeding: first centroid uniform, then D²-weighted draws.
fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_euclidean(p, points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > u {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_euclidean(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Nearest centroid with ties going to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_euclidean(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn means(points: &[&[f64]], labels: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Runs k-means with k-means++ initialization.
pub fn kmeans(set: &FeatureSet, params: &KMeansParams) -> Result<ClusterModel> {
    validate_input(set, params.k)?;
    let points: Vec<&[f64]> = set.vectors.iter().map(|v| v.x.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = kmeans_pp(&points, params.k, &mut rng);
    lloyd(set, init, params)
}

/// Runs Lloyd iterations from the given centroids.
pub fn kmeans_with_init(
    set: &FeatureSet,
    init: Vec<Vec<f64>>,
    params: &KMeansParams,
) -> Result<ClusterModel> {
    let dim = validate_input(set, init.len())?;
    if init.len() != params.k || init.iter().any(|c| c.len() != dim) {
        return Err(Error::Clustering("initial centroids do not match k or feature length".into()));
    }
    lloyd(set, init, params)
}

fn lloyd(set: &FeatureSet, mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> Result<ClusterModel> {
    let points: Vec<&[f64]> = set.vectors.iter().map(|v| v.x.as_slice()).collect();
    let (k, dim) = (params.k, points[0].len());
    let mut labels: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter.max(1) {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let sse: f64 = assigned.iter().map(|a| a.1).sum();
        if let Some(&prev) = history.last() {
            debug_assert!(sse <= prev * (1.0 + 1e-12) + 1e-300, "SSE rose from {prev} to {sse}");
        }
        history.push(sse);
        if new_labels == labels {
            converged = true;
            break;
        }
        labels = new_labels;

        let (mut next, mut counts) = means(&points, &labels, k, dim);
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .map(|i| (i, squared_euclidean(points[i], &next[labels[i]])))
                .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((p, _)) = far else { break };
            let donor = labels[p];
            labels[p] = empty;
            counts[donor] -= 1;
            counts[empty] = 1;
            let (m, _) = means(&points, &labels, k, dim);
            next[donor] = m[donor].clone();
            next[empty] = points[p].to_vec();
        }
        centroids = next;

        let rel = history
            .iter()
            .rev()
            .nth(1)
            .map(|&prev| if prev > 0.0 { (prev - sse) / prev } else { 0.0 });
        if rel.is_some_and(|r| r.abs() <= params.tol) {
            break;
        }
    }

    let sse = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| squared_euclidean(p, &centroids[l]))
        .sum();
    let labels_out = centroids
        .iter()
        .map(|c| label_cluster(c, &set.types).unwrap_or(ClusterLabel::Other))
        .collect();
    Ok(ClusterModel {
        k,
        seed: params.seed,
        types: set.types.clone(),
        sse,
        iterations,
        labels: labels_out,
        centroids,
        assignment: set
            .vectors
            .iter()
            .zip(&labels)
            .map(|(v, &l)| (v.region_id.clone(), l))
            .collect(),
        sse_history: history,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub sse: f64,
    pub mean_silhouette: f64,
}

/// Runs k-means for each k and scores it; rows sorted by k.
pub fn select_k(set: &FeatureSet, ks: &[usize], seed: u64) -> Result<Vec<KSelection>> {
    let n = set.vectors.len();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(bad) = ks.iter().find(|&&k| k < 2 || k + 1 > n) {
        return Err(Error::Clustering(format!(
            "k = {bad} outside [2, n - 1] for n = {n}"
        )));
    }
    let points: Vec<Vec<f64>> = set.vectors.iter().map(|v| v.x.clone()).collect();
    ks.into_iter()
        .map(|k| {
            let model = kmeans(set, &KMeansParams::new(k, seed))?;
            let labels: Vec<usize> = set.vectors.iter().map(|v| model.assignment[&v.region_id]).collect();
            Ok(KSelection {
                k,
                sse: model.sse,
                mean_silhouette: mean_silhouette(&points, &labels),
            })
        })
        .collect()
}

pub const LABEL_MIN_RATIO: f64 = 1.15;

/// Mass of a normalized week block in three spans, each divided by the mass
/// a uniform week would put there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelRatios {
    /// Monday-Friday 09:00-18:00.
    pub workday: f64,
    /// Monday-Friday 18:00-24:00.
    pub evening: f64,
    /// Saturday-Sunday 09:00-20:00.
    pub weekend_day: f64,
}

fn span_ratio(block: &[f64], days: std::ops::Range<usize>, slots: std::ops::Range<usize>) -> f64 {
    let bins = days.len() * slots.len();
    let mass: f64 = days
        .flat_map(|d| slots.clone().map(move |s| d * SLOTS_PER_DAY + s))
        .map(|b| block[b])
        .sum();
    mass / (bins as f64 / BINS_PER_WEEK as f64)
}

pub fn label_ratios(block: &[f64]) -> LabelRatios {
    LabelRatios {
        workday: span_ratio(block, 0..5, 36..72),
        evening: span_ratio(block, 0..5, 72..96),
        weekend_day: span_ratio(block, 5..7, 36..80),
    }
}

/// Heuristic land-use label from the first type's block of a centroid.
pub fn label_cluster(centroid: &[f64], types: &[ActivityType]) -> Result<ClusterLabel> {
    if types.is_empty() || centroid.len() != BINS_PER_WEEK * types.len() {
        return Err(Error::Clustering("centroid length does not match the type list".into()));
    }
    for block in centroid.chunks(BINS_PER_WEEK) {
        let s: f64 = block.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Clustering(format!("centroid block sums to {s}, not 1")));
        }
    }
    let r = label_ratios(&centroid[..BINS_PER_WEEK]);
    let candidates = [
        (r.workday, ClusterLabel::Business),
        (r.evening, ClusterLabel::Residential),
        (r.weekend_day, ClusterLabel::Leisure),
    ];
    let (best, label) = candidates
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .unwrap();
    Ok(if best >= LABEL_MIN_RATIO { label } else { ClusterLabel::Other })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    /// `k_a x k_b` Euclidean distances between centroids.
    pub distances: Vec<Vec<f64>>,
    /// Greedy minimum-distance matching, in the order pairs were taken.
    pub matches: Vec<MatchedPair>,
}

pub fn compare_models(a: &ClusterModel, b: &ClusterModel) -> Result<ModelComparison> {
    let len = |m: &ClusterModel| m.centroids.first().map_or(0, Vec::len);
    if a.types != b.types || len(a) != len(b) {
        return Err(Error::Clustering("models use different feature layouts".into()));
    }
    let distances: Vec<Vec<f64>> = a
        .centroids
        .iter()
        .map(|ca| b.centroids.iter().map(|cb| euclidean(ca, cb)).collect())
        .collect();
    let mut used_a = vec![false; a.k];
    let mut used_b = vec![false; b.k];
    let mut matches = Vec::new();
    for _ in 0..a.k.min(b.k) {
        let mut best: Option<MatchedPair> = None;
        for (i, row) in distances.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                if used_a[i] || used_b[j] {
                    continue;
                }
                if best.is_none_or(|m| d < m.distance) {
                    best = Some(MatchedPair { a: i, b: j, distance: d });
                }
            }
        }
        let m = best.unwrap();
        used_a[m.a] = true;
        used_b[m.b] = true;
        matches.push(m);
    }
    Ok(ModelComparison { distances, matches })
}
