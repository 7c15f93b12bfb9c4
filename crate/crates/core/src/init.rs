//! Initial embeddings for SID tokens: keyword mean pooling over a
//! pretrained word-vector table, with a Gaussian baseline fitted to that
//! table, selectable per level for the init-depth ablation.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::TokenSemantics;
use crate::io;
use crate::sidspace::SidLayout;

/// Pretrained word-level embedding table, `word v1 ... v_dim` per line.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(words: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != words.len() * dim {
            return Err(Error::DimMismatch {
                expected: words.len() * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "embedding table".into(),
                row: 0,
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate table word {w}")));
            }
        }
        Ok(Self {
            dim,
            words,
            index,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Parse the common text format; a leading `count dim` header line (two
    /// integer fields) is skipped when present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let display = path.display().to_string();
        let mut lines = text.lines().enumerate().peekable();
        if let Some((_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                lines.next();
            }
        }
        let mut words = Vec::new();
        let mut data = Vec::new();
        let mut dim = 0usize;
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields
                .next()
                .ok_or_else(|| Error::parse(&display, idx + 1, "missing word"))?
                .to_string();
            let values: Vec<f32> = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|e| Error::parse(&display, idx + 1, e.to_string()))
                })
                .collect::<Result<_>>()?;
            if dim == 0 {
                dim = values.len();
                if dim == 0 {
                    return Err(Error::parse(&display, idx + 1, "row has no values"));
                }
            } else if values.len() != dim {
                return Err(Error::parse(
                    &display,
                    idx + 1,
                    format!("expected {dim} values, got {}", values.len()),
                ));
            }
            words.push(word);
            data.extend_from_slice(&values);
        }
        Self::new(words, dim, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, word) in self.words.iter().enumerate() {
            out.push_str(word);
            for v in self.row(i) {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        io::write_atomic(path, out.as_bytes())
    }
}

/// Concatenate keywords, lowercase, split on whitespace, and map each word
/// to a table row; unknown words are dropped.
pub fn tokenize_keywords(keywords: &[String], table: &EmbeddingTable) -> Vec<usize> {
    keywords
        .join(" ")
        .to_lowercase()
        .split_whitespace()
        .filter_map(|w| table.lookup(w))
        .collect()
}

/// Exact arithmetic mean of the sub-token rows, computed in f64. Indices
/// are summed in sorted order so any permutation of the input list yields
/// bitwise-identical output.
pub fn sa_init_embedding(subtokens: &[usize], table: &EmbeddingTable) -> Result<Vec<f64>> {
    if subtokens.is_empty() {
        return Err(Error::Contract(
            "sa_init_embedding needs at least one sub-token".into(),
        ));
    }
    let mut sorted = subtokens.to_vec();
    sorted.sort_unstable();
    let mut sum = vec![0.0f64; table.dim];
    for &idx in &sorted {
        for (s, v) in sum.iter_mut().zip(table.row(idx)) {
            *s += *v as f64;
        }
    }
    let n = sorted.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(sum)
}

/// Moments of the table rows: mean vector plus per-coordinate variances
/// (population), with the full covariance Cholesky factor behind a flag.
#[derive(Debug, Clone)]
pub struct GaussianInitParams {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    /// Lower-triangular Cholesky factor of the full covariance, row-major
    /// dim x dim; present only when fitted with `full_covariance`.
    pub cholesky: Option<Vec<f64>>,
}

pub fn fit_gaussian(table: &EmbeddingTable, full_covariance: bool) -> Result<GaussianInitParams> {
    let n = table.len();
    let d = table.dim;
    if n < 2 {
        return Err(Error::DegenerateInput(
            "gaussian fit needs at least 2 table rows".into(),
        ));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(table.row(i)) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut variances = vec![0.0f64; d];
    for i in 0..n {
        for (j, v) in table.row(i).iter().enumerate() {
            let c = *v as f64 - mean[j];
            variances[j] += c * c;
        }
    }
    for v in &mut variances {
        *v /= n as f64;
    }

    let cholesky = if full_covariance {
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = table.row(i);
            for a in 0..d {
                let xa = row[a] as f64 - mean[a];
                for b in a..d {
                    cov[(a, b)] += xa * (row[b] as f64 - mean[b]);
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
        // jitter keeps a merely positive-semidefinite fit factorizable
        let trace: f64 = (0..d).map(|i| cov[(i, i)]).sum();
        let jitter = (trace / d as f64).max(1e-300) * 1e-9;
        let factor = nalgebra::Cholesky::new(cov.clone()).or_else(|| {
            let mut jittered = cov;
            for i in 0..d {
                jittered[(i, i)] += jitter;
            }
            nalgebra::Cholesky::new(jittered)
        });
        match factor {
            Some(f) => {
                let l = f.l();
                let mut flat = vec![0.0f64; d * d];
                for r in 0..d {
                    for c in 0..=r {
                        flat[r * d + c] = l[(r, c)];
                    }
                }
                Some(flat)
            }
            None => {
                return Err(Error::DegenerateInput(
                    "covariance is not positive semidefinite".into(),
                ))
            }
        }
    } else {
        None
    };

    Ok(GaussianInitParams {
        mean,
        variances,
        cholesky,
    })
}

/// One seeded draw from the fitted Gaussian.
pub fn sample_gaussian(params: &GaussianInitParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = params.mean.len();
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    match &params.cholesky {
        Some(l) => {
            let z: Vec<f64> = (0..d).map(|_| unit.sample(rng)).collect();
            (0..d)
                .map(|r| {
                    let mut s = params.mean[r];
                    for c in 0..=r {
                        s += l[r * d + c] * z[c];
                    }
                    s
                })
                .collect()
        }
        None => params
            .mean
            .iter()
            .zip(&params.variances)
            .map(|(m, v)| m + v.sqrt() * unit.sample(rng))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelStrategy {
    Semantic,
    Gaussian,
}

/// Per-level init strategy. `semantic_depth(n)` builds the standard
/// ablation plans: semantic for the first `n` levels, Gaussian below.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitPlan {
    pub strategies: Vec<LevelStrategy>,
    pub seed: u64,
    pub full_covariance: bool,
}

impl InitPlan {
    pub fn semantic_depth(levels: usize, depth: usize, seed: u64) -> Self {
        let strategies = (0..levels)
            .map(|l| {
                if l < depth {
                    LevelStrategy::Semantic
                } else {
                    LevelStrategy::Gaussian
                }
            })
            .collect();
        Self {
            strategies,
            seed,
            full_covariance: false,
        }
    }

    pub fn label(&self) -> String {
        let depth = self
            .strategies
            .iter()
            .take_while(|s| **s == LevelStrategy::Semantic)
            .count();
        if depth == 0 {
            "random".to_string()
        } else {
            format!("sa{depth}")
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InitReport {
    pub semantic_count: usize,
    pub gaussian_count: usize,
    pub fallback_tokens: Vec<String>,
}

/// The `|V_SID| x dim` initial embedding matrix, minted-token order.
#[derive(Debug, Clone)]
pub struct InitMatrix {
    pub dim: usize,
    pub seed: u64,
    pub rows: Vec<f32>,
}

impl InitMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }
}

/// Build initial embeddings for every minted SID token: keyword mean where
/// the level's strategy is semantic and keywords resolve, otherwise a
/// seeded Gaussian draw (fallbacks recorded in the report).
pub fn build_init_matrix(
    semantics: &[TokenSemantics],
    layout: &SidLayout,
    table: &EmbeddingTable,
    plan: &InitPlan,
) -> Result<(InitMatrix, InitReport)> {
    if plan.strategies.len() != layout.levels() {
        return Err(Error::Config(format!(
            "plan has {} strategies for {} levels",
            plan.strategies.len(),
            layout.levels()
        )));
    }
    let semantics_by_token: HashMap<&str, &TokenSemantics> =
        semantics.iter().map(|s| (s.token.as_str(), s)).collect();
    let gaussian = fit_gaussian(table, plan.full_covariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(io::splitmix64(plan.seed ^ 0x1217_ab9d));

    let dim = table.dim;
    let mut rows = Vec::with_capacity(layout.total_tokens() * dim);
    let mut report = InitReport::default();
    let mut semantic_norms: Vec<f64> = Vec::new();

    for (level, &k) in layout.counts.iter().enumerate() {
        for code in 0..k {
            let token = layout.token_string(level, code);
            let semantic_row = match plan.strategies[level] {
                LevelStrategy::Gaussian => None,
                LevelStrategy::Semantic => semantics_by_token
                    .get(token.as_str())
                    .map(|s| tokenize_keywords(&s.keywords, table))
                    .filter(|ids| !ids.is_empty())
                    .map(|ids| sa_init_embedding(&ids, table).expect("non-empty ids")),
            };
            match semantic_row {
                Some(v) => {
                    report.semantic_count += 1;
                    semantic_norms.push(v.iter().map(|x| x * x).sum::<f64>().sqrt());
                    rows.extend(v.iter().map(|x| *x as f32));
                }
                None => {
                    if plan.strategies[level] == LevelStrategy::Semantic {
                        report.fallback_tokens.push(token.clone());
                    }
                    report.gaussian_count += 1;
                    let v = sample_gaussian(&gaussian, &mut rng);
                    rows.extend(v.iter().map(|x| *x as f32));
                }
            }
        }
    }

    if !semantic_norms.is_empty() {
        let min = semantic_norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = semantic_norms.iter().cloned().fold(0.0, f64::max);
        let mean = semantic_norms.iter().sum::<f64>() / semantic_norms.len() as f64;
        log::info!(
            "semantic init rows: {} (norms min {min:.4} mean {mean:.4} max {max:.4}), gaussian rows: {}",
            report.semantic_count,
            report.gaussian_count
        );
    }

    Ok((
        InitMatrix {
            dim,
            seed: plan.seed,
            rows,
        },
        report,
    ))
}

/// Init matrix file: header `rows dim seed`, f32 little-endian payload.
pub fn write_init_matrix(path: &Path, matrix: &InitMatrix) -> Result<()> {
    let header = format!("{} {} {}", matrix.n_rows(), matrix.dim, matrix.seed);
    io::write_matrix_payload(path, &header, &matrix.rows)
}

pub fn read_init_matrix(path: &Path) -> Result<InitMatrix> {
    let (header, rows) = io::read_matrix_payload(path)?;
    let display = path.display().to_string();
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::parse(&display, 1, "header must be 'rows dim seed'"));
    }
    let n: usize = fields[0]
        .parse()
        .map_err(|_| Error::parse(&display, 1, "bad row count"))?;
    let dim: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(&display, 1, "bad dim"))?;
    let seed: u64 = fields[2]
        .parse()
        .map_err(|_| Error::parse(&display, 1, "bad seed"))?;
    if rows.len() != n * dim {
        return Err(Error::parse(
            &display,
            1,
            format!("expected {} floats, got {}", n * dim, rows.len()),
        ));
    }
    Ok(InitMatrix { dim, seed, rows })
}

pub fn write_init_report(path: &Path, report: &InitReport) -> Result<()> {
    let body = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    io::write_atomic(path, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_of(rows: &[(&str, &[f32])]) -> EmbeddingTable {
        let dim = rows[0].1.len();
        let words = rows.iter().map(|(w, _)| w.to_string()).collect();
        let data = rows.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        EmbeddingTable::new(words, dim, data).unwrap()
    }

    #[test]
    fn keyword_lookup_drops_unknown() {
        let table = table_of(&[("red", &[1.0, 0.0]), ("blue", &[0.0, 1.0])]);
        let ids = tokenize_keywords(&["red".into(), "blue".into()], &table);
        assert_eq!(ids.len(), 2);
        let ids = tokenize_keywords(&["Red".into(), "zzzunknown".into()], &table);
        assert_eq!(ids, vec![0]);
        let ids = tokenize_keywords(&[], &table);
        assert!(ids.is_empty());
        // multi-word keywords split on whitespace
        let ids = tokenize_keywords(&["red blue".into()], &table);
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn mean_of_basis_vectors() {
        let table = table_of(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let v = sa_init_embedding(&[0, 1], &table).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);
        let single = sa_init_embedding(&[1], &table).unwrap();
        assert_eq!(single, vec![0.0, 1.0]);
        assert!(sa_init_embedding(&[], &table).is_err());
    }

    #[test]
    fn mean_matches_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(String, Vec<f32>)> = (0..5)
            .map(|i| {
                let v: Vec<f32> = (0..7)
                    .map(|_| {
                        use rand::Rng;
                        rng.gen_range(-2.0f32..2.0)
                    })
                    .collect();
                (format!("w{i}"), v)
            })
            .collect();
        let refs: Vec<(&str, &[f32])> = rows
            .iter()
            .map(|(w, v)| (w.as_str(), v.as_slice()))
            .collect();
        let table = table_of(&refs);
        let got = sa_init_embedding(&[0, 1, 2, 3, 4], &table).unwrap();
        // Kahan-compensated oracle
        for d in 0..7 {
            let mut sum = 0.0f64;
            let mut c = 0.0f64;
            for r in 0..5 {
                let y = table.row(r)[d] as f64 - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            assert!((got[d] - sum / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_is_permutation_invariant_bitwise() {
        let table = table_of(&[
            ("a", &[0.1, 0.7]),
            ("b", &[0.3, -0.2]),
            ("c", &[-0.9, 0.4]),
        ]);
        let fwd = sa_init_embedding(&[0, 1, 2], &table).unwrap();
        let rev = sa_init_embedding(&[2, 0, 1], &table).unwrap();
        assert_eq!(
            fwd.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            rev.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gaussian_two_point_moments() {
        let table = table_of(&[("a", &[0.0, 0.0]), ("b", &[2.0, 2.0])]);
        let params = fit_gaussian(&table, false).unwrap();
        assert_eq!(params.mean, vec![1.0, 1.0]);
        assert_eq!(params.variances, vec![1.0, 1.0]);
    }

    #[test]
    fn gaussian_zero_table_degenerates_to_zero_draws() {
        let table = table_of(&[("a", &[0.0, 0.0]), ("b", &[0.0, 0.0])]);
        let params = fit_gaussian(&table, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = sample_gaussian(&params, &mut rng);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_needs_two_rows() {
        let table = table_of(&[("a", &[1.0])]);
        assert!(fit_gaussian(&table, false).is_err());
    }

    #[test]
    fn gaussian_monte_carlo_moments() {
        let table = table_of(&[
            ("a", &[0.0, 4.0]),
            ("b", &[2.0, 0.0]),
            ("c", &[4.0, 2.0]),
            ("d", &[2.0, 2.0]),
        ]);
        let params = fit_gaussian(&table, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let mut sums = vec![0.0f64; 2];
        for _ in 0..n {
            let v = sample_gaussian(&params, &mut rng);
            sums[0] += v[0];
            sums[1] += v[1];
        }
        for d in 0..2 {
            let emp = sums[d] / n as f64;
            let tol = 5.0 * params.variances[d].sqrt() / (n as f64).sqrt();
            assert!(
                (emp - params.mean[d]).abs() < tol,
                "coord {d}: {emp} vs {} (tol {tol})",
                params.mean[d]
            );
        }
    }

    #[test]
    fn full_covariance_sampling_matches_structure() {
        // strongly correlated 2-d table
        let rows: Vec<(String, Vec<f32>)> = (0..40)
            .map(|i| {
                let x = (i as f32 - 20.0) / 10.0;
                (format!("w{i}"), vec![x, 2.0 * x])
            })
            .collect();
        let refs: Vec<(&str, &[f32])> = rows
            .iter()
            .map(|(w, v)| (w.as_str(), v.as_slice()))
            .collect();
        let table = table_of(&refs);
        let params = fit_gaussian(&table, true).unwrap();
        assert!(params.cholesky.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut corr_num = 0.0f64;
        let mut var_x = 0.0f64;
        let mut var_y = 0.0f64;
        for _ in 0..2000 {
            let v = sample_gaussian(&params, &mut rng);
            let (cx, cy) = (v[0] - params.mean[0], v[1] - params.mean[1]);
            corr_num += cx * cy;
            var_x += cx * cx;
            var_y += cy * cy;
        }
        let corr = corr_num / (var_x.sqrt() * var_y.sqrt());
        assert!(corr > 0.99, "correlation {corr}");
    }

    fn semantics_for(token: &str, keywords: &[&str]) -> TokenSemantics {
        TokenSemantics {
            token: token.into(),
            description: "d".into(),
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn all_gaussian_plan_is_random_baseline() {
        let layout = SidLayout::new(vec![2, 2]).unwrap();
        let table = table_of(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0])]);
        let plan = InitPlan {
            strategies: vec![LevelStrategy::Gaussian; 2],
            seed: 11,
            full_covariance: false,
        };
        // no semantics supplied at all: must still succeed with zero lookups
        let (matrix, report) = build_init_matrix(&[], &layout, &table, &plan).unwrap();
        assert_eq!(matrix.n_rows(), 4);
        assert_eq!(report.semantic_count, 0);
        assert_eq!(report.gaussian_count, 4);
        assert!(report.fallback_tokens.is_empty());
        assert_eq!(plan.label(), "random");
    }

    #[test]
    fn level_one_only_plan_pools_only_a_tokens() {
        let layout = SidLayout::new(vec![2, 2]).unwrap();
        let table = table_of(&[("red", &[1.0, 0.0]), ("blue", &[0.0, 1.0])]);
        let semantics = vec![
            semantics_for("<a_0>", &["red"]),
            semantics_for("<a_1>", &["red", "blue"]),
            semantics_for("<b_0>", &["blue"]),
            semantics_for("<b_1>", &["blue"]),
        ];
        let plan = InitPlan::semantic_depth(2, 1, 7);
        assert_eq!(plan.label(), "sa1");
        let (matrix, report) = build_init_matrix(&semantics, &layout, &table, &plan).unwrap();
        assert_eq!(report.semantic_count, 2);
        assert_eq!(report.gaussian_count, 2);
        assert_eq!(matrix.row(0), &[1.0, 0.0]);
        assert_eq!(matrix.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn empty_keywords_fall_back_and_report() {
        let layout = SidLayout::new(vec![1, 1]).unwrap();
        let table = table_of(&[("red", &[1.0]), ("blue", &[2.0])]);
        let semantics = vec![
            semantics_for("<a_0>", &["zzz"]),
            semantics_for("<b_0>", &["red"]),
        ];
        let plan = InitPlan::semantic_depth(2, 2, 3);
        let (matrix, report) = build_init_matrix(&semantics, &layout, &table, &plan).unwrap();
        assert_eq!(report.fallback_tokens, vec!["<a_0>"]);
        assert_eq!(report.semantic_count, 1);
        assert_eq!(report.gaussian_count, 1);
        assert_eq!(matrix.row(1), &[1.0]);
    }

    #[test]
    fn build_is_bitwise_reproducible() {
        let layout = SidLayout::new(vec![3, 3, 3]).unwrap();
        let table = table_of(&[("red", &[1.0, 0.5]), ("blue", &[0.0, 1.0])]);
        let semantics = vec![semantics_for("<a_0>", &["red", "blue"])];
        let plan = InitPlan::semantic_depth(3, 2, 99);
        let (a, _) = build_init_matrix(&semantics, &layout, &table, &plan).unwrap();
        let (b, _) = build_init_matrix(&semantics, &layout, &table, &plan).unwrap();
        assert_eq!(
            a.rows.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.rows.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn convex_combination_bound_holds() {
        let table = table_of(&[
            ("a", &[0.9, -0.3]),
            ("b", &[-0.5, 0.8]),
            ("c", &[0.2, 0.1]),
        ]);
        let v = sa_init_embedding(&[0, 1, 2], &table).unwrap();
        let bound = (0..3)
            .flat_map(|r| table.row(r).iter().map(|x| x.abs()))
            .fold(0.0f32, f32::max) as f64;
        assert!(v.iter().all(|x| x.abs() <= bound + 1e-12));
    }

    #[test]
    fn matrix_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = InitMatrix {
            dim: 2,
            seed: 5,
            rows: vec![1.0, 2.0, 3.0, 4.0],
        };
        let path = dir.path().join("init.bin");
        write_init_matrix(&path, &matrix).unwrap();
        let back = read_init_matrix(&path).unwrap();
        assert_eq!(back.rows, matrix.rows);
        assert_eq!(back.dim, 2);
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn table_load_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("v.txt");
        std::fs::write(&plain, "red 1 0\nblue 0 1\n").unwrap();
        let t = EmbeddingTable::load(&plain).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim, 2);
        let with_header = dir.path().join("w.txt");
        std::fs::write(&with_header, "2 2\nred 1 0\nblue 0 1\n").unwrap();
        let t2 = EmbeddingTable::load(&with_header).unwrap();
        assert_eq!(t2.len(), 2);
        assert_eq!(t2.row(0), t.row(0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn permutation_invariance(perm_seed in 0u64..100) {
                use rand::seq::SliceRandom;
                let table = table_of(&[
                    ("a", &[0.25, -1.5]),
                    ("b", &[3.125, 0.75]),
                    ("c", &[-0.5, 2.0]),
                    ("d", &[1.0, 1.0]),
                ]);
                let mut ids = vec![0usize, 1, 2, 3, 1];
                let base = sa_init_embedding(&ids, &table).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
                ids.shuffle(&mut rng);
                let shuffled = sa_init_embedding(&ids, &table).unwrap();
                prop_assert_eq!(
                    base.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    shuffled.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
