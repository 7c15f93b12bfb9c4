//! Hierarchical residual quantization: each level runs Lloyd's k-means
//! (k-means++ seeding) on the residuals left by the previous level's
//! nearest-centroid subtraction. Items encode to one code index per level.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::io;

/// Fixed chunk length for parallel assignment; reductions walk chunks in
/// index order so results do not depend on the worker count.
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub levels: usize,
    pub codes_per_level: Vec<usize>,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// L2-normalize embeddings before quantization.
    pub normalize: bool,
    /// Optional PCA projection to this many dimensions before quantization.
    pub pca_dim: Option<usize>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codes_per_level: vec![256, 256, 256],
            max_iters: 100,
            rel_tol: 1e-6,
            seed: 0,
            normalize: false,
            pca_dim: None,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.levels > 26 {
            return Err(Error::Config("levels must be <= 26".into()));
        }
        if self.codes_per_level.len() != self.levels {
            return Err(Error::Config(format!(
                "codes_per_level has {} entries for {} levels",
                self.codes_per_level.len(),
                self.levels
            )));
        }
        if self.codes_per_level.iter().any(|&k| k < 1) {
            return Err(Error::Config("every K_l must be >= 1".into()));
        }
        if self.rel_tol < 0.0 {
            return Err(Error::Config("rel_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Centroids for one quantization level, row-major `k x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub k: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl CentroidSet {
    pub fn new(k: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), k * dim);
        Self { k, dim, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub seed: u64,
    pub levels: Vec<CentroidSet>,
}

impl Codebook {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codes_per_level(&self) -> Vec<usize> {
        self.levels.iter().map(|c| c.k).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodeResult {
    /// One code per level per item, aligned to the input row order.
    pub codes: Vec<Vec<usize>>,
    /// Residual left after the last level, row-major `n x dim`.
    pub final_residuals: Vec<f32>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub centroids: CentroidSet,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares at convergence.
    pub wcss: f64,
    /// WCSS recorded after each assignment pass.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        s += d * d;
    }
    s
}

/// Index of the nearest centroid by Euclidean distance, ties broken by
/// lowest index.
pub fn assign_nearest(point: &[f32], centroids: &CentroidSet) -> Result<usize> {
    if centroids.k == 0 {
        return Err(Error::Contract("empty centroid set".into()));
    }
    if point.len() != centroids.dim {
        return Err(Error::DimMismatch {
            expected: centroids.dim,
            got: point.len(),
        });
    }
    let mut best = 0usize;
    let mut best_d = sq_dist(point, centroids.row(0));
    for k in 1..centroids.k {
        let d = sq_dist(point, centroids.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}

fn count_distinct_rows(points: &[f32], dim: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for row in points.chunks_exact(dim) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

fn kmeans_plus_plus_init(
    points: &[f32],
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = points.len() / dim;
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * dim..(i + 1) * dim], &centroids[0..dim]))
        .collect();

    while centroids.len() / dim < k {
        let total: f64 = dists.iter().sum();
        let chosen = if total > 0.0 {
            let mut dart = rng.gen_range(0.0..1.0) * total;
            let mut pick = n - 1;
            for (i, &d) in dists.iter().enumerate() {
                dart -= d;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all mass at existing centroids; take any point that is not one
            (0..n).find(|&i| dists[i] > 0.0).unwrap_or(0)
        };
        let row = &points[chosen * dim..(chosen + 1) * dim];
        centroids.extend_from_slice(row);
        for i in 0..n {
            let d = sq_dist(&points[i * dim..(i + 1) * dim], row);
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }
    centroids
}

/// Assign every point to its nearest centroid. Returns per-point indices
/// and the total WCSS (f64, accumulated per fixed-size chunk).
fn assign_all(points: &[f32], dim: usize, centroids: &CentroidSet) -> (Vec<usize>, f64) {
    let n = points.len() / dim;
    let chunk_results: Vec<(Vec<usize>, f64)> = (0..n.div_ceil(ASSIGN_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * ASSIGN_CHUNK;
            let hi = ((c + 1) * ASSIGN_CHUNK).min(n);
            let mut idx = Vec::with_capacity(hi - lo);
            let mut wcss = 0.0f64;
            for i in lo..hi {
                let p = &points[i * dim..(i + 1) * dim];
                let mut best = 0usize;
                let mut best_d = sq_dist(p, centroids.row(0));
                for k in 1..centroids.k {
                    let d = sq_dist(p, centroids.row(k));
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                idx.push(best);
                wcss += best_d;
            }
            (idx, wcss)
        })
        .collect();

    let mut assignments = Vec::with_capacity(n);
    let mut wcss = 0.0f64;
    for (idx, w) in chunk_results {
        assignments.extend(idx);
        wcss += w;
    }
    (assignments, wcss)
}

/// Lloyd's algorithm with k-means++ seeding. Stops when the relative WCSS
/// improvement drops below `cfg.rel_tol` or after `cfg.max_iters` passes.
/// Empty clusters are refilled with the point currently farthest from its
/// centroid.
pub fn kmeans_fit(points: &[f32], dim: usize, k: usize, cfg: &QuantizerConfig) -> Result<KmeansFit> {
    if points.is_empty() || dim == 0 {
        return Err(Error::DegenerateInput("no points to cluster".into()));
    }
    if points.len() % dim != 0 {
        return Err(Error::DimMismatch {
            expected: dim,
            got: points.len() % dim,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite point".into()));
    }
    if k < 1 {
        return Err(Error::DegenerateInput("k must be >= 1".into()));
    }
    let n = points.len() / dim;
    if k > n || k > count_distinct_rows(points, dim) {
        return Err(Error::DegenerateInput(format!(
            "k = {k} exceeds the number of distinct points"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = CentroidSet::new(k, dim, kmeans_plus_plus_init(points, dim, k, &mut rng));

    let mut history = Vec::new();
    let mut assignments;
    let mut prev_wcss = f64::INFINITY;
    let mut passes = 0usize;

    // Each pass assigns, records WCSS, and (unless stopping) updates the
    // centroids; stopping after assignment keeps the returned assignments
    // consistent with the returned centroids.
    loop {
        let (assign, wcss) = assign_all(points, dim, &centroids);
        assignments = assign;
        debug_assert!(
            wcss <= prev_wcss * (1.0 + 1e-9) || prev_wcss.is_infinite(),
            "WCSS increased: {prev_wcss} -> {wcss}"
        );
        history.push(wcss);

        let improved = prev_wcss.is_infinite()
            || (prev_wcss > 0.0 && (prev_wcss - wcss) / prev_wcss >= cfg.rel_tol);
        prev_wcss = wcss;
        passes += 1;
        if !improved || passes >= cfg.max_iters.max(2) {
            break;
        }

        // Means in f64 for stable, order-independent-enough accumulation.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let row = &points[i * dim..(i + 1) * dim];
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
                *s += *v as f64;
            }
        }

        let mut data = vec![0.0f32; k * dim];
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    data[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                }
            } else {
                data[c * dim..(c + 1) * dim].copy_from_slice(centroids.row(c));
            }
        }
        let mut next = CentroidSet::new(k, dim, data);

        // Refill empty clusters with the globally farthest point.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut taken: HashSet<usize> = HashSet::new();
            for empty in empties {
                let mut far_i = usize::MAX;
                let mut far_d = -1.0f64;
                for i in 0..n {
                    if taken.contains(&i) {
                        continue;
                    }
                    let d = sq_dist(&points[i * dim..(i + 1) * dim], next.row(assignments[i]));
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                if far_i != usize::MAX {
                    taken.insert(far_i);
                    next.data[empty * dim..(empty + 1) * dim]
                        .copy_from_slice(&points[far_i * dim..(far_i + 1) * dim]);
                }
            }
        }

        centroids = next;
    }

    let wcss = *history.last().expect("at least one pass");
    Ok(KmeansFit {
        centroids,
        assignments,
        wcss,
        history,
    })
}

/// Optional preprocessing ahead of quantization: L2 normalization, then
/// PCA to `pca_dim`. Fit and encode must both consume the preprocessed
/// matrix, so this runs once upstream of `rq_fit`.
pub fn preprocess(embeddings: &EmbeddingMatrix, cfg: &QuantizerConfig) -> Result<EmbeddingMatrix> {
    let mut matrix = embeddings.clone();
    if cfg.normalize {
        let dim = matrix.dim;
        let mut data = matrix.data().to_vec();
        for row in data.chunks_exact_mut(dim) {
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        matrix = EmbeddingMatrix::new(dim, matrix.item_order.clone(), data)?;
    }
    if let Some(target) = cfg.pca_dim {
        matrix = pca_project(&matrix, target)?;
    }
    Ok(matrix)
}

/// Fit the full residual codebook: level 1 clusters the input matrix as
/// given, each subsequent level clusters the residuals left by the
/// previous one.
pub fn rq_fit(embeddings: &EmbeddingMatrix, cfg: &QuantizerConfig) -> Result<Codebook> {
    cfg.validate()?;
    let dim = embeddings.dim;
    let max_k = *cfg.codes_per_level.iter().max().unwrap();
    if embeddings.n_items() < max_k {
        return Err(Error::DegenerateInput(format!(
            "{} items cannot support {} codes per level",
            embeddings.n_items(),
            max_k
        )));
    }

    let mut residuals = embeddings.data().to_vec();
    let mut levels = Vec::with_capacity(cfg.levels);
    for (level, &k) in cfg.codes_per_level.iter().enumerate() {
        let level_cfg = QuantizerConfig {
            seed: io::splitmix64(cfg.seed.wrapping_add(level as u64)),
            ..cfg.clone()
        };
        let fit = kmeans_fit(&residuals, dim, k, &level_cfg).map_err(|e| {
            Error::DegenerateInput(format!("level {} fit failed: {e}", level + 1))
        })?;
        for (i, &a) in fit.assignments.iter().enumerate() {
            let c = fit.centroids.row(a);
            for (r, cv) in residuals[i * dim..(i + 1) * dim].iter_mut().zip(c) {
                *r -= *cv;
            }
        }
        levels.push(fit.centroids);
    }
    Ok(Codebook {
        dim,
        seed: cfg.seed,
        levels,
    })
}

/// Greedy nearest-centroid encoding with residual update; deterministic.
pub fn rq_encode(embeddings: &EmbeddingMatrix, codebook: &Codebook) -> Result<EncodeResult> {
    rq_encode_raw(embeddings.data(), embeddings.dim, codebook)
}

pub fn rq_encode_raw(data: &[f32], dim: usize, codebook: &Codebook) -> Result<EncodeResult> {
    if dim != codebook.dim {
        return Err(Error::DimMismatch {
            expected: codebook.dim,
            got: dim,
        });
    }
    let n = data.len() / dim;
    let results: Vec<(Vec<usize>, Vec<f32>)> = (0..n.div_ceil(ASSIGN_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * ASSIGN_CHUNK;
            let hi = ((c + 1) * ASSIGN_CHUNK).min(n);
            let mut codes = Vec::with_capacity((hi - lo) * codebook.n_levels());
            let mut residuals = Vec::with_capacity((hi - lo) * dim);
            let mut r = vec![0.0f32; dim];
            for i in lo..hi {
                r.copy_from_slice(&data[i * dim..(i + 1) * dim]);
                for level in &codebook.levels {
                    let a = assign_nearest(&r, level).expect("dims checked");
                    codes.push(a);
                    for (rv, cv) in r.iter_mut().zip(level.row(a)) {
                        *rv -= *cv;
                    }
                }
                residuals.extend_from_slice(&r);
            }
            (codes, residuals)
        })
        .collect();

    let num_levels = codebook.n_levels();
    let mut codes = Vec::with_capacity(n);
    let mut final_residuals = Vec::with_capacity(n * dim);
    for (chunk_codes, chunk_res) in results {
        for item in chunk_codes.chunks_exact(num_levels) {
            codes.push(item.to_vec());
        }
        final_residuals.extend(chunk_res);
    }
    Ok(EncodeResult {
        codes,
        final_residuals,
        dim,
    })
}

/// Sum of squared norms of a row-major matrix; the per-level residual
/// energy used by the monotonicity property.
pub fn energy(data: &[f32]) -> f64 {
    data.iter().map(|v| (*v as f64).powi(2)).sum()
}

/// Codebook file: header `L d K_1 ... K_L seed`, then centroids
/// level-major, row-major, 32-bit little-endian floats.
pub fn write_codebook(path: &Path, codebook: &Codebook) -> Result<()> {
    let ks: Vec<String> = codebook.levels.iter().map(|c| c.k.to_string()).collect();
    let header = format!(
        "{} {} {} {}",
        codebook.n_levels(),
        codebook.dim,
        ks.join(" "),
        codebook.seed
    );
    let mut data = Vec::new();
    for level in &codebook.levels {
        data.extend_from_slice(level.data());
    }
    io::write_matrix_payload(path, &header, &data)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let (header, data) = io::read_matrix_payload(path)?;
    let display = path.display().to_string();
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 3 {
        return Err(Error::parse(&display, 1, "short codebook header"));
    }
    let parse = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::parse(&display, 1, format!("bad header field {s}")))
    };
    let levels = parse(fields[0])? as usize;
    let dim = parse(fields[1])? as usize;
    if fields.len() != 3 + levels {
        return Err(Error::parse(
            &display,
            1,
            format!("expected {} header fields, got {}", 3 + levels, fields.len()),
        ));
    }
    let ks: Vec<usize> = fields[2..2 + levels]
        .iter()
        .map(|s| parse(s).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let seed = parse(fields[2 + levels])?;
    let expected: usize = ks.iter().map(|k| k * dim).sum();
    if data.len() != expected {
        return Err(Error::parse(
            &display,
            1,
            format!("expected {expected} floats, got {}", data.len()),
        ));
    }
    let mut offset = 0;
    let mut sets = Vec::with_capacity(levels);
    for k in ks {
        sets.push(CentroidSet::new(k, dim, data[offset..offset + k * dim].to_vec()));
        offset += k * dim;
    }
    Ok(Codebook {
        dim,
        seed,
        levels: sets,
    })
}

/// PCA projection to `target_dim` (mean-centered, top eigenvectors of the
/// covariance). Eigenvector signs are fixed so the component with the
/// largest magnitude is positive.
pub fn pca_project(embeddings: &EmbeddingMatrix, target_dim: usize) -> Result<EmbeddingMatrix> {
    let n = embeddings.n_items();
    let d = embeddings.dim;
    if target_dim == 0 || target_dim > d {
        return Err(Error::Config(format!(
            "pca target dim {target_dim} out of range 1..={d}"
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateInput("pca needs at least 2 rows".into()));
    }

    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = embeddings.row(i);
        for a in 0..d {
            let xa = row[a] as f64 - mean[a];
            for b in a..d {
                let xb = row[b] as f64 - mean[b];
                cov[(a, b)] += xa * xb;
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut basis = vec![0.0f64; target_dim * d];
    for (out_idx, &col) in order.iter().take(target_dim).enumerate() {
        let v = eig.eigenvectors.column(col);
        let mut lead = 0usize;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            basis[out_idx * d + j] = v[j] * sign;
        }
    }

    let mut data = Vec::with_capacity(n * target_dim);
    for i in 0..n {
        let row = embeddings.row(i);
        for c in 0..target_dim {
            let mut s = 0.0f64;
            for j in 0..d {
                s += (row[j] as f64 - mean[j]) * basis[c * d + j];
            }
            data.push(s as f32);
        }
    }
    EmbeddingMatrix::new(target_dim, embeddings.item_order.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn cfg(seed: u64) -> QuantizerConfig {
        QuantizerConfig {
            seed,
            ..QuantizerConfig::default()
        }
    }

    fn matrix(dim: usize, rows: &[f32]) -> EmbeddingMatrix {
        let n = rows.len() / dim;
        let ids = (0..n).map(|i| format!("i{i}")).collect();
        EmbeddingMatrix::new(dim, ids, rows.to_vec()).unwrap()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim)
            .map(|_| (rng.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32)
            .collect()
    }

    #[test]
    fn two_symmetric_clusters() {
        let points = [0.0f32, 0.0, 10.0, 10.0];
        let fit = kmeans_fit(&points, 1, 2, &cfg(3)).unwrap();
        let mut c: Vec<f32> = fit.centroids.data().to_vec();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(fit.wcss, 0.0);
    }

    #[test]
    fn k1_gives_coordinate_mean() {
        let points = random_points(17, 3, 9);
        let fit = kmeans_fit(&points, 3, 1, &cfg(0)).unwrap();
        for d in 0..3 {
            let mean: f64 = (0..17).map(|i| points[i * 3 + d] as f64).sum::<f64>() / 17.0;
            assert!((fit.centroids.row(0)[d] as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn beats_worst_of_naive_restarts() {
        // Independent oracle: plain Lloyd with random-point init, no careful
        // seeding, run 50 times; our seeded fit must do at least as well as
        // the worst restart.
        let points = random_points(20, 2, 42);
        let fit = kmeans_fit(&points, 2, 3, &cfg(7)).unwrap();

        let mut worst = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..50 {
            let mut centers: Vec<f32> = Vec::new();
            let mut chosen = HashSet::new();
            while chosen.len() < 3 {
                let i = rng.gen_range(0..20usize);
                if chosen.insert(i) {
                    centers.extend_from_slice(&points[i * 2..i * 2 + 2]);
                }
            }
            let mut wcss = f64::INFINITY;
            for _ in 0..100 {
                let mut sums = vec![0.0f64; 6];
                let mut counts = vec![0usize; 3];
                let mut cur = 0.0f64;
                for p in points.chunks_exact(2) {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for c in 0..3 {
                        let d = sq_dist(p, &centers[c * 2..c * 2 + 2]);
                        if d < best_d {
                            best_d = d;
                            best = c;
                        }
                    }
                    cur += best_d;
                    counts[best] += 1;
                    sums[best * 2] += p[0] as f64;
                    sums[best * 2 + 1] += p[1] as f64;
                }
                if (wcss - cur).abs() < 1e-12 {
                    break;
                }
                wcss = cur;
                for c in 0..3 {
                    if counts[c] > 0 {
                        centers[c * 2] = (sums[c * 2] / counts[c] as f64) as f32;
                        centers[c * 2 + 1] = (sums[c * 2 + 1] / counts[c] as f64) as f32;
                    }
                }
            }
            worst = worst.max(wcss);
        }
        assert!(
            fit.wcss <= worst + 1e-9,
            "seeded fit {} worse than worst restart {}",
            fit.wcss,
            worst
        );
    }

    #[test]
    fn wcss_history_non_increasing() {
        let points = random_points(300, 8, 5);
        let fit = kmeans_fit(&points, 8, 12, &cfg(5)).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn degenerate_k_rejected() {
        let points = [1.0f32, 1.0, 1.0, 1.0]; // two identical 2-d points
        assert!(matches!(
            kmeans_fit(&points, 2, 2, &cfg(0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn nearest_strict_and_tie() {
        let centroids = CentroidSet::new(2, 1, vec![0.0, 10.0]);
        assert_eq!(assign_nearest(&[4.9], &centroids).unwrap(), 0);
        assert_eq!(assign_nearest(&[5.0], &centroids).unwrap(), 0);
        assert_eq!(assign_nearest(&[5.1], &centroids).unwrap(), 1);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_points(8, 5, 21);
        let centroids = CentroidSet::new(8, 5, data.clone());
        for _ in 0..50 {
            let p: Vec<f32> = (0..5)
                .map(|_| (rng.next_u32() as f64 / u32::MAX as f64) as f32)
                .collect();
            let got = assign_nearest(&p, &centroids).unwrap();
            let want = (0..8)
                .map(|k| (k, sq_dist(&p, &data[k * 5..(k + 1) * 5])))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap()
                .0;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn single_level_reduces_to_kmeans() {
        let points = random_points(40, 4, 3);
        let m = matrix(4, &points);
        let cb = rq_fit(
            &m,
            &QuantizerConfig {
                levels: 1,
                codes_per_level: vec![5],
                seed: 9,
                ..QuantizerConfig::default()
            },
        )
        .unwrap();
        let level_cfg = QuantizerConfig {
            seed: io::splitmix64(9),
            ..QuantizerConfig::default()
        };
        let direct = kmeans_fit(&points, 4, 5, &level_cfg).unwrap();
        assert_eq!(cb.levels[0], direct.centroids);
    }

    #[test]
    fn two_level_hand_example() {
        let codebook = Codebook {
            dim: 1,
            seed: 0,
            levels: vec![
                CentroidSet::new(2, 1, vec![0.0, 10.0]),
                CentroidSet::new(2, 1, vec![-3.0, 3.0]),
            ],
        };
        let m = matrix(1, &[7.3]);
        let enc = rq_encode(&m, &codebook).unwrap();
        assert_eq!(enc.codes[0], vec![1, 0]);
        assert!((enc.final_residuals[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn residual_energy_non_increasing() {
        let points = random_points(200, 6, 77);
        let m = matrix(6, &points);
        let cfg = QuantizerConfig {
            levels: 3,
            codes_per_level: vec![8, 8, 8],
            seed: 13,
            ..QuantizerConfig::default()
        };
        let cb = rq_fit(&m, &cfg).unwrap();
        // recompute residual energies level by level
        let mut residuals = points.clone();
        let mut prev = energy(&residuals);
        for level in &cb.levels {
            for r in residuals.chunks_exact_mut(6) {
                let a = assign_nearest(r, level).unwrap();
                for (rv, cv) in r.iter_mut().zip(level.row(a)) {
                    *rv -= *cv;
                }
            }
            let e = energy(&residuals);
            assert!(e <= prev * (1.0 + 1e-9), "{prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn encode_centroid_is_fixed_point() {
        let points = random_points(30, 4, 8);
        let m = matrix(4, &points);
        let cfg = QuantizerConfig {
            levels: 1,
            codes_per_level: vec![4],
            seed: 2,
            ..QuantizerConfig::default()
        };
        let cb = rq_fit(&m, &cfg).unwrap();
        let c0: Vec<f32> = cb.levels[0].row(2).to_vec();
        let enc = rq_encode_raw(&c0, 4, &cb).unwrap();
        assert_eq!(enc.codes[0], vec![2]);
        assert!(enc.final_residuals.iter().all(|r| r.abs() < 1e-7));
    }

    #[test]
    fn reencode_matches_fit_assignments() {
        let points = random_points(120, 4, 19);
        let m = matrix(4, &points);
        let cfg = QuantizerConfig {
            levels: 2,
            codes_per_level: vec![6, 6],
            seed: 4,
            ..QuantizerConfig::default()
        };
        let cb = rq_fit(&m, &cfg).unwrap();
        let e1 = rq_encode(&m, &cb).unwrap();
        let e2 = rq_encode(&m, &cb).unwrap();
        assert_eq!(e1.codes, e2.codes);
        assert_eq!(e1.final_residuals, e2.final_residuals);
    }

    #[test]
    fn encode_matches_per_level_scan() {
        let points = random_points(60, 3, 31);
        let m = matrix(3, &points);
        let cfg = QuantizerConfig {
            levels: 3,
            codes_per_level: vec![4, 4, 4],
            seed: 6,
            ..QuantizerConfig::default()
        };
        let cb = rq_fit(&m, &cfg).unwrap();
        let held_out = random_points(10, 3, 99);
        let enc = rq_encode_raw(&held_out, 3, &cb).unwrap();
        for (i, codes) in enc.codes.iter().enumerate() {
            let mut r: Vec<f32> = held_out[i * 3..(i + 1) * 3].to_vec();
            for (l, level) in cb.levels.iter().enumerate() {
                let want = (0..level.k)
                    .map(|k| (k, sq_dist(&r, level.row(k))))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                    .unwrap()
                    .0;
                assert_eq!(codes[l], want);
                for (rv, cv) in r.iter_mut().zip(level.row(want)) {
                    *rv -= *cv;
                }
            }
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let points = random_points(80, 5, 55);
        let m = matrix(5, &points);
        let cfg = QuantizerConfig {
            levels: 2,
            codes_per_level: vec![7, 7],
            seed: 123,
            ..QuantizerConfig::default()
        };
        let a = rq_fit(&m, &cfg).unwrap();
        let b = rq_fit(&m, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn codebook_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let points = random_points(50, 4, 66);
        let m = matrix(4, &points);
        let cfg = QuantizerConfig {
            levels: 2,
            codes_per_level: vec![3, 5],
            seed: 77,
            ..QuantizerConfig::default()
        };
        let cb = rq_fit(&m, &cfg).unwrap();
        let path = dir.path().join("cb.bin");
        write_codebook(&path, &cb).unwrap();
        let back = read_codebook(&path).unwrap();
        assert_eq!(cb, back);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        // points on a line y = 2x plus tiny noise: first component captures it
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = rng.gen_range(-1.0f32..1.0);
            rows.extend_from_slice(&[x, 2.0 * x + rng.gen_range(-1e-3f32..1e-3)]);
        }
        let m = matrix(2, &rows);
        let p = pca_project(&m, 1).unwrap();
        assert_eq!(p.dim, 1);
        // projected variance close to the original total variance
        let orig: f64 = {
            let e = energy(m.data());
            let mx: f64 = rows.iter().step_by(2).map(|v| *v as f64).sum::<f64>() / 50.0;
            let my: f64 = rows.iter().skip(1).step_by(2).map(|v| *v as f64).sum::<f64>() / 50.0;
            e - 50.0 * (mx * mx + my * my)
        };
        let proj = energy(p.data());
        assert!(proj > 0.99 * orig, "{proj} vs {orig}");
    }
}
