//! Embedding evaluation: k-means clustering scored by normalized mutual
//! information, and nearest-neighbour precision@1, both against
//! user-supplied `code<TAB>label` ground-truth files.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::EmbeddingSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth file, line {line}: {reason}")]
    InvalidTruthFile { line: usize, reason: String },
    #[error("k must be >= 1")]
    ZeroClusters,
    #[error("k ({k}) exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("no labeled codes eligible for evaluation")]
    NoEligibleItems,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labels restricted to the embedding vocabulary, keyed by item index.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    /// item index → category id, for clustering NMI.
    pub cluster_labels: BTreeMap<usize, u32>,
    /// item index → subcategory id, for nearest-neighbour P@1.
    pub neighbor_labels: BTreeMap<usize, u32>,
    /// Labeled codes that were absent from the vocabulary (warned, not
    /// fatal).
    pub dropped: usize,
}

/// Evaluation results, serialized as the metrics JSON.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Metrics {
    pub nmi: f64,
    pub p_at_1: f64,
    pub n_clustered: usize,
    pub n_nns_eligible: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Number of clusters; defaults to the number of distinct category
    /// labels.
    pub k: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: None,
            restarts: 10,
            max_iters: 100,
            seed: 1,
        }
    }
}

fn parse_label_file<R: BufRead>(
    reader: R,
    lookup: &HashMap<&str, usize>,
) -> Result<(BTreeMap<usize, u32>, usize), EvalError> {
    let mut labels: BTreeMap<usize, u32> = BTreeMap::new();
    let mut label_ids: HashMap<String, u32> = HashMap::new();
    let mut dropped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (code, label) = line
            .split_once('\t')
            .ok_or_else(|| EvalError::InvalidTruthFile {
                line: lineno,
                reason: "expected `code<TAB>label`".into(),
            })?;
        if label.is_empty() {
            return Err(EvalError::InvalidTruthFile {
                line: lineno,
                reason: "empty label".into(),
            });
        }
        let next_id = label_ids.len() as u32;
        let id = *label_ids.entry(label.to_string()).or_insert(next_id);
        match lookup.get(code) {
            None => dropped += 1,
            Some(&item) => {
                if let Some(&existing) = labels.get(&item) {
                    if existing != id {
                        return Err(EvalError::InvalidTruthFile {
                            line: lineno,
                            reason: format!("conflicting label for code `{code}`"),
                        });
                    }
                } else {
                    labels.insert(item, id);
                }
            }
        }
    }
    Ok((labels, dropped))
}

/// Load cluster and neighbour label files, keeping only codes present in
/// `codes`. Codes missing from the vocabulary are counted in `dropped`;
/// a code listed twice with different labels is an error.
pub fn load_ground_truth<R1: BufRead, R2: BufRead>(
    cluster_reader: R1,
    neighbor_reader: R2,
    codes: &[String],
) -> Result<GroundTruth, EvalError> {
    let lookup: HashMap<&str, usize> = codes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let (cluster_labels, dropped_c) = parse_label_file(cluster_reader, &lookup)?;
    let (neighbor_labels, dropped_n) = parse_label_file(neighbor_reader, &lookup)?;
    Ok(GroundTruth {
        cluster_labels,
        neighbor_labels,
        dropped: dropped_c + dropped_n,
    })
}

fn l2_normalize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                p.iter().map(|x| x / norm).collect()
            } else {
                p.clone()
            }
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ initialization.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let mut ticket = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                ticket -= d;
                if ticket <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with existing centroids.
            rng.random_range(0..points.len())
        };
        centroids.push(points[chosen].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment[i] = best;
        inertia += best_d;
    }
    inertia
}

/// Lloyd iterations from given centroids to convergence (max centroid
/// shift < 1e-6) or `max_iters`. Returns the assignment, its inertia and
/// the per-iteration inertia trace (non-increasing between reseeds).
fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
) -> (Vec<usize>, f64, Vec<f64>) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignment = vec![0usize; points.len()];
    let mut inertia = assign(points, &centroids, &mut assignment);
    let mut trace = vec![inertia];

    for _ in 0..max_iters {
        // Update step.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignment.iter()) {
            sizes[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut reseeded = false;
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if sizes[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its
                // currently assigned centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignment[a]]);
                        let db = sq_dist(&points[b], &centroids[assignment[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                reseeded = true;
                continue;
            }
            let mut moved = 0.0;
            for (d, s) in sums[c].iter().enumerate() {
                let new = s / sizes[c] as f64;
                moved += (new - centroids[c][d]) * (new - centroids[c][d]);
                centroids[c][d] = new;
            }
            shift = shift.max(moved.sqrt());
        }

        let new_inertia = assign(points, &centroids, &mut assignment);
        debug_assert!(
            reseeded || new_inertia <= inertia + 1e-9,
            "inertia increased without a reseed: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;
        trace.push(inertia);
        if !reseeded && shift < 1e-6 {
            break;
        }
    }
    (assignment, inertia, trace)
}

/// K-means over L2-normalized copies of the points (Euclidean distance on
/// unit vectors is monotone in cosine): best-inertia assignment across
/// `restarts` k-means++ initializations.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroClusters);
    }
    if k > points.len() {
        return Err(EvalError::TooManyClusters { k, n: points.len() });
    }
    let points = l2_normalize(points);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let centroids = seed_centroids(&points, k, &mut rng);
        let (assignment, inertia, _) = lloyd(&points, centroids, max_iters);
        if best.as_ref().is_none_or(|(bi, _)| inertia < *bi) {
            best = Some((inertia, assignment));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Normalized mutual information between two assignments over the same
/// items: `I(a;b) / sqrt(H(a)·H(b))`, with `0·log 0 = 0`. Returns 1 when
/// both partitions are trivial (and hence identical), 0 when exactly one
/// entropy is zero.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(
        pred.len(),
        truth.len(),
        "assignments must cover the same items"
    );
    let n = pred.len();
    if n == 0 {
        return 1.0;
    }
    // BTreeMaps keep the float accumulation order deterministic.
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut count_a: BTreeMap<usize, u64> = BTreeMap::new();
    let mut count_b: BTreeMap<usize, u64> = BTreeMap::new();
    for (&a, &b) in pred.iter().zip(truth) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *count_a.entry(a).or_insert(0) += 1;
        *count_b.entry(b).or_insert(0) += 1;
    }
    let n = n as f64;
    let entropy = |counts: &BTreeMap<usize, u64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&count_a);
    let h_b = entropy(&count_b);
    if h_a <= 0.0 || h_b <= 0.0 {
        return if h_a <= 0.0 && h_b <= 0.0 { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let p_ab = c as f64 / n;
        let p_a = count_a[&a] as f64 / n;
        let p_b = count_b[&b] as f64 / n;
        mi += p_ab * (p_ab / (p_a * p_b)).ln();
    }
    (mi / (h_a * h_b).sqrt()).clamp(0.0, 1.0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        -1.0
    } else {
        dot / (na * nb)
    }
}

/// Nearest-neighbour precision@1 by cosine similarity.
///
/// Queries are the items whose label occurs at least twice (so a correct
/// answer exists); candidates are all other labeled items; similarity ties
/// break toward the lower index. Returns the precision and the number of
/// eligible queries.
pub fn nns_p_at_1(vectors: &[Vec<f64>], labels: &[u32]) -> Result<(f64, usize), EvalError> {
    assert_eq!(vectors.len(), labels.len());
    let mut label_counts: HashMap<u32, usize> = HashMap::new();
    for &l in labels {
        *label_counts.entry(l).or_insert(0) += 1;
    }
    let mut eligible = 0usize;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label_counts[&label] < 2 {
            continue;
        }
        eligible += 1;
        let mut best: Option<(f64, usize)> = None;
        for (j, other) in vectors.iter().enumerate() {
            if j == i {
                continue;
            }
            let sim = cosine(&vectors[i], other);
            let better = match best {
                None => true,
                Some((bs, bj)) => sim > bs || (sim == bs && j < bj),
            };
            if better {
                best = Some((sim, j));
            }
        }
        if let Some((_, j)) = best {
            if labels[j] == label {
                correct += 1;
            }
        }
    }
    if eligible == 0 {
        return Err(EvalError::NoEligibleItems);
    }
    Ok((correct as f64 / eligible as f64, eligible))
}

/// Run the full evaluation: k-means + NMI over cluster-labeled codes and
/// P@1 over neighbour-labeled codes.
pub fn evaluate(
    embeddings: &EmbeddingSet,
    truth: &GroundTruth,
    opts: &EvalOptions,
) -> Result<Metrics, EvalError> {
    if truth.cluster_labels.is_empty() || truth.neighbor_labels.is_empty() {
        return Err(EvalError::NoEligibleItems);
    }

    let cluster_items: Vec<usize> = truth.cluster_labels.keys().copied().collect();
    let points: Vec<Vec<f64>> = cluster_items
        .iter()
        .map(|&i| embeddings.vector(i).iter().map(|&x| x as f64).collect())
        .collect();
    let labels: Vec<usize> = cluster_items
        .iter()
        .map(|&i| truth.cluster_labels[&i] as usize)
        .collect();
    let distinct = {
        let mut ls: Vec<usize> = labels.clone();
        ls.sort_unstable();
        ls.dedup();
        ls.len()
    };
    let k = opts.k.unwrap_or(distinct);
    let assignment = kmeans(&points, k, opts.restarts, opts.max_iters, opts.seed)?;
    let nmi_value = nmi(&assignment, &labels);

    let nns_items: Vec<usize> = truth.neighbor_labels.keys().copied().collect();
    let nns_vectors: Vec<Vec<f64>> = nns_items
        .iter()
        .map(|&i| embeddings.vector(i).iter().map(|&x| x as f64).collect())
        .collect();
    let nns_labels: Vec<u32> = nns_items
        .iter()
        .map(|&i| truth.neighbor_labels[&i])
        .collect();
    let (p_at_1, eligible) = nns_p_at_1(&nns_vectors, &nns_labels)?;

    Ok(Metrics {
        nmi: nmi_value,
        p_at_1,
        n_clustered: cluster_items.len(),
        n_nns_eligible: eligible,
        dropped: truth.dropped,
    })
}
