//! Linguistic units: K-Means over frame features, token assignment,
//! run-length deduplication and center-embedding substitution.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featio;
use crate::Matrix;

/// Frame-level features taken before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub data: Matrix,
    pub frame_hop_ms: f64,
}

impl FrameFeatures {
    pub fn new(data: Matrix, frame_hop_ms: f64) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::invalid("frame features need at least one frame"));
        }
        if !(frame_hop_ms > 0.0) {
            return Err(Error::invalid("frame hop must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame features contain non-finite values"));
        }
        Ok(Self { data, frame_hop_ms })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = featio::read_matrix(path)?;
        Self::new(raw.data, raw.frame_hop_ms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        featio::write_matrix(path, &self.data, self.frame_hop_ms)
    }
}

/// K-Means cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Matrix,
}

impl Codebook {
    pub fn new(centers: Matrix) -> Result<Self> {
        if centers.nrows() < 2 {
            return Err(Error::invalid("a codebook needs at least two centers"));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook contains non-finite values"));
        }
        let mut seen = HashSet::new();
        for row in centers.rows() {
            if !seen.insert(row_key(row)) {
                return Err(Error::invalid("codebook centers must be distinct"));
            }
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // The hop is meaningless for centers; 1 keeps the sidecar valid.
        featio::write_matrix(path, &self.centers, 1.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(featio::read_matrix(path)?.data)
    }
}

/// Per-frame cluster indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

/// Deduplicated tokens with run lengths and their center embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub unit_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub embeddings: Matrix,
}

impl UnitSequence {
    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Lloyd's algorithm settings.
#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Independent seedings; the lowest final inertia wins.
    pub restarts: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            restarts: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn row_key(row: ArrayView1<f64>) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and its squared distance; ties go to the lowest index.
fn nearest(x: ArrayView1<f64>, centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn stack_corpus(corpus: &[FrameFeatures]) -> Result<Matrix> {
    let dim = corpus
        .first()
        .ok_or_else(|| Error::invalid("empty corpus"))?
        .feature_dim();
    if corpus.iter().any(|f| f.feature_dim() != dim) {
        return Err(Error::shape("corpus utterances differ in feature dimension"));
    }
    let views: Vec<_> = corpus.iter().map(|f| f.data.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("dims checked"))
}

/// Fit a codebook with default options.
pub fn fit_kmeans(corpus: &[FrameFeatures], k: usize, seed: u64) -> Result<Codebook> {
    Ok(fit_kmeans_with(corpus, &KMeansOptions::new(k, seed))?.codebook)
}

pub fn fit_kmeans_with(corpus: &[FrameFeatures], opts: &KMeansOptions) -> Result<KMeansFit> {
    let k = opts.k;
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let points = stack_corpus(corpus)?;
    let n = points.nrows();
    if n < k {
        return Err(Error::invalid(format!("{n} frames cannot seed {k} clusters")));
    }
    let mut distinct = HashSet::new();
    for row in points.rows() {
        distinct.insert(row_key(row));
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::DegenerateCorpus {
            distinct: distinct.len(),
            k,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Matrix, Vec<f64>, bool)> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd(&points, k, opts.max_iters, &mut rng);
        let better = match &best {
            None => true,
            Some((_, inertia, _)) => run.1.last() < inertia.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (centers, inertia, converged) = best.expect("at least one restart");
    Ok(KMeansFit {
        codebook: Codebook::new(centers)?,
        inertia,
        converged,
    })
}

/// One seeded Lloyd run: centers, inertia per assignment step, convergence.
fn lloyd(points: &Matrix, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<f64>, bool) {
    let n = points.nrows();
    let mut centers = init_plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let mut changed = false;
        let mut total = 0.0;
        let mut dists = vec![0.0; n];
        for (i, x) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(x, &centers);
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
            dists[i] = d;
            total += d;
        }
        inertia.push(total);
        if !changed {
            converged = true;
            break;
        }
        update_centers(points, &labels, &dists, &mut centers);
    }
    if transfer_refine(points, &mut labels, &mut centers, max_iters) {
        let total = points.rows().into_iter().map(|x| nearest(x, &centers).1).sum();
        inertia.push(total);
    }
    (centers, inertia, converged)
}

/// Single-point transfers: move a point to another cluster whenever that
/// lowers the total SSE once both means shift. Lloyd fixed points can still
/// be improved this way; the result is again a Lloyd fixed point. Returns
/// whether anything moved.
fn transfer_refine(points: &Matrix, labels: &mut [usize], centers: &mut Matrix, max_passes: usize) -> bool {
    let k = centers.nrows();
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros(centers.dim());
    for (i, &j) in labels.iter().enumerate() {
        sums.row_mut(j).scaled_add(1.0, &points.row(i));
        counts[j] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            centers.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
        }
    }
    let mut any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, x) in points.rows().into_iter().enumerate() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let leave = counts[a] as f64 / (counts[a] - 1) as f64 * sq_dist(x, centers.row(a));
            let mut best = (a, -1e-12 * leave.max(f64::MIN_POSITIVE));
            for b in (0..k).filter(|&b| b != a) {
                let gain = counts[b] as f64 / (counts[b] + 1) as f64 * sq_dist(x, centers.row(b)) - leave;
                if gain < best.1 {
                    best = (b, gain);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let (na, nb) = (counts[a] as f64, counts[b] as f64);
            let ca = (&centers.row(a) * na - x) / (na - 1.0);
            let cb = (&centers.row(b) * nb + x) / (nb + 1.0);
            centers.row_mut(a).assign(&ca);
            centers.row_mut(b).assign(&cb);
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        any = true;
    }
    any
}

/// Greedy k-means++ seeding: each new center is the best of a few
/// D²-weighted candidates.
fn init_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.nrows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut closest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, points.row(first)))
        .collect();

    for c in 1..k {
        let potential: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let idx = if potential > 0.0 {
                let mut r = rng.random::<f64>() * potential;
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    if r < d {
                        pick = i;
                        break;
                    }
                    r -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let cand = points.row(idx);
            let updated: Vec<f64> = points
                .rows()
                .into_iter()
                .zip(&closest)
                .map(|(x, &d)| d.min(sq_dist(x, cand)))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, idx, updated));
            }
        }
        let (_, idx, updated) = best.expect("at least one trial");
        centers.row_mut(c).assign(&points.row(idx));
        closest = updated;
    }
    centers
}

fn update_centers(points: &Matrix, labels: &[usize], dists: &[f64], centers: &mut Matrix) {
    let k = centers.nrows();
    let mut sums = Array2::<f64>::zeros(centers.dim());
    let mut counts = vec![0usize; k];
    for (i, &j) in labels.iter().enumerate() {
        let mut row = sums.row_mut(j);
        row += &points.row(i);
        counts[j] += 1;
    }
    let mut taken = HashSet::new();
    for j in 0..k {
        if counts[j] > 0 {
            let mean = &sums.row(j) / counts[j] as f64;
            centers.row_mut(j).assign(&mean);
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // Re-seed from the farthest member of the largest cluster.
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let far = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| l == largest && !taken.contains(&i))
            .max_by(|a, b| dists[a.0].total_cmp(&dists[b.0]).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        if let Some(i) = far {
            taken.insert(i);
            centers.row_mut(j).assign(&points.row(i));
            counts[largest] -= 1;
            counts[j] = 1;
        }
    }
}

pub fn assign(features: &FrameFeatures, codebook: &Codebook) -> Result<TokenSequence> {
    if features.feature_dim() != codebook.feature_dim() {
        return Err(Error::shape(format!(
            "features have dim {}, codebook has {}",
            features.feature_dim(),
            codebook.feature_dim()
        )));
    }
    let tokens = features
        .data
        .rows()
        .into_iter()
        .map(|x| nearest(x, codebook.centers()).0)
        .collect();
    Ok(TokenSequence { tokens })
}

/// Run-length encode a token list into `(ids, lengths)`.
pub fn run_lengths(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = Vec::new();
    let mut lens: Vec<usize> = Vec::new();
    for &t in tokens {
        match ids.last() {
            Some(&last) if last == t => *lens.last_mut().unwrap() += 1,
            _ => {
                ids.push(t);
                lens.push(1);
            }
        }
    }
    (ids, lens)
}

pub fn deduplicate(tokens: &TokenSequence, codebook: &Codebook) -> Result<UnitSequence> {
    if tokens.tokens.is_empty() {
        return Err(Error::invalid("cannot deduplicate an empty token sequence"));
    }
    if let Some(&bad) = tokens.tokens.iter().find(|&&t| t >= codebook.k()) {
        return Err(Error::invalid(format!(
            "token {bad} outside codebook of size {}",
            codebook.k()
        )));
    }
    let (unit_ids, durations) = run_lengths(&tokens.tokens);
    let mut embeddings = Array2::zeros((unit_ids.len(), codebook.feature_dim()));
    for (r, &id) in unit_ids.iter().enumerate() {
        embeddings.row_mut(r).assign(&codebook.centers().row(id));
    }
    Ok(UnitSequence {
        unit_ids,
        durations,
        embeddings,
    })
}

pub fn expand(units: &UnitSequence) -> TokenSequence {
    let tokens = units
        .unit_ids
        .iter()
        .zip(&units.durations)
        .flat_map(|(&id, &d)| std::iter::repeat_n(id, d))
        .collect();
    TokenSequence { tokens }
}

/// Convenience: features straight to units.
pub fn extract_units(features: &FrameFeatures, codebook: &Codebook) -> Result<UnitSequence> {
    deduplicate(&assign(features, codebook)?, codebook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn col(values: &[f64]) -> FrameFeatures {
        FrameFeatures::new(
            Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap(),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn two_cluster_line() {
        let cb = fit_kmeans(&[col(&[0.0, 0.1, 10.0, 10.1])], 2, 3).unwrap();
        let mut c: Vec<f64> = cb.centers().column(0).to_vec();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12);
        assert!((c[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn repeated_vector_is_degenerate() {
        let err = fit_kmeans(&[col(&[1.0; 6])], 2, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateCorpus { distinct: 1, k: 2 }));
    }

    #[test]
    fn k_below_two_is_rejected() {
        assert!(matches!(
            fit_kmeans(&[col(&[0.0, 1.0])], 1, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn centers_map_to_themselves() {
        let cb = Codebook::new(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let feats = FrameFeatures::new(cb.centers().clone(), 10.0).unwrap();
        assert_eq!(assign(&feats, &cb).unwrap().tokens, vec![0, 1, 2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::new(array![[-9.0], [-8.0], [-1.0], [7.0], [8.0], [1.0]]).unwrap();
        // 0.0 is equidistant from centers 2 and 5
        assert_eq!(assign(&col(&[0.0]), &cb).unwrap().tokens, vec![2]);
    }

    #[test]
    fn assign_near_centers() {
        let cb = Codebook::new(array![[0.05], [10.05]]).unwrap();
        assert_eq!(assign(&col(&[0.0, 9.9]), &cb).unwrap().tokens, vec![0, 1]);
    }

    #[test]
    fn assign_rejects_dim_mismatch() {
        let cb = Codebook::new(array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(assign(&col(&[0.0]), &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(
            run_lengths(&[3, 3, 3, 7, 7, 3]),
            (vec![3, 7, 3], vec![3, 2, 1])
        );
        assert_eq!(run_lengths(&[5]), (vec![5], vec![1]));
        assert_eq!(
            run_lengths(&[1, 2, 1, 2]),
            (vec![1, 2, 1, 2], vec![1, 1, 1, 1])
        );
    }

    #[test]
    fn dedup_substitutes_centers() {
        let cb = Codebook::new(array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0]])
            .unwrap();
        let units = deduplicate(
            &TokenSequence {
                tokens: vec![3, 3, 3, 7, 7, 3],
            },
            &cb,
        )
        .unwrap();
        assert_eq!(units.embeddings, array![[3.0], [7.0], [3.0]]);
        assert_eq!(units.num_frames(), 6);
    }

    #[test]
    fn dedup_rejects_empty() {
        let cb = Codebook::new(array![[0.0], [1.0]]).unwrap();
        assert!(deduplicate(&TokenSequence { tokens: vec![] }, &cb).is_err());
    }

    #[test]
    fn expand_examples() {
        let units = UnitSequence {
            unit_ids: vec![3, 7, 3],
            durations: vec![3, 2, 1],
            embeddings: Array2::zeros((3, 1)),
        };
        assert_eq!(expand(&units).tokens, vec![3, 3, 3, 7, 7, 3]);
        let single = UnitSequence {
            unit_ids: vec![2],
            durations: vec![4],
            embeddings: Array2::zeros((1, 1)),
        };
        assert_eq!(expand(&single).tokens, vec![2; 4]);
    }

    #[test]
    fn codebook_rejects_duplicate_centers() {
        assert!(Codebook::new(array![[1.0], [1.0]]).is_err());
    }
}
