//! Per-token semantics: every SID token owns the cluster of items whose
//! tuple contains it; a pluggable extractor turns a sampled cluster into a
//! shared description plus keywords. Two backends: a remote LLM over HTTP
//! and a deterministic local TF-IDF summarizer. Results are cached on disk
//! keyed by (token, member set, backend).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::ItemCatalog;
use crate::error::{Error, Result};
use crate::io;
use crate::sidspace::{SidLayout, SidTuple};

pub const EXTRACTION_PROMPT_TEMPLATE: &str =
    include_str!("../fixtures/templates/extraction_prompt.txt");

/// How many TF-IDF terms the local backend keeps; sits inside the
/// template's 10-20 keyword band.
const LOCAL_KEYWORD_COUNT: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCluster {
    pub token: String,
    pub level: usize,
    /// Sorted member item ids.
    pub member_items: Vec<String>,
    /// Seeded sample actually shown to the extractor.
    pub sample: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSemantics {
    pub token: String,
    pub description: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorBackend {
    Remote,
    Local,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub backend: ExtractorBackend,
    pub endpoint: String,
    pub api_key_env: String,
    pub model: String,
    pub sample_cap: usize,
    pub seed: u64,
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    /// Domain slotted into the prompt; derived from item categories when
    /// absent.
    pub category: Option<String>,
    /// Fall back to the local backend when the remote one fails.
    pub fallback_to_local: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: ExtractorBackend::Local,
            endpoint: String::new(),
            api_key_env: "EXTRACTOR_API_KEY".into(),
            model: "deepseek-chat".into(),
            sample_cap: 32,
            seed: 0,
            max_retries: 2,
            retry_backoff_ms: 250,
            timeout_secs: 30,
            cache_dir: None,
            category: None,
            fallback_to_local: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_cap < 1 {
            return Err(Error::Config("sample_cap must be >= 1".into()));
        }
        if matches!(self.backend, ExtractorBackend::Remote) {
            if self.endpoint.is_empty() {
                return Err(Error::Config("remote backend needs an endpoint".into()));
            }
            if self.cache_dir.is_none() {
                return Err(Error::Config("remote backend requires a cache_dir".into()));
            }
        }
        Ok(())
    }
}

/// For every minted SID token, the set of items whose tuple contains it;
/// unused tokens keep an empty member set. Output order is minted order.
pub fn build_token_clusters(
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
) -> Vec<TokenCluster> {
    let mut members: Vec<Vec<String>> = vec![Vec::new(); layout.total_tokens()];
    for (item, tuple) in sids {
        for (level, &code) in tuple.codes.iter().enumerate() {
            members[layout.ordinal(level, code)].push(item.clone());
        }
    }
    let mut out = Vec::with_capacity(layout.total_tokens());
    for (level, &k) in layout.counts.iter().enumerate() {
        for code in 0..k {
            let member_items = std::mem::take(&mut members[layout.ordinal(level, code)]);
            out.push(TokenCluster {
                token: layout.token_string(level, code),
                level,
                member_items,
                sample: Vec::new(),
            });
        }
    }
    out
}

/// Seeded uniform sample without replacement of min(cap, |members|) items.
/// The stream is derived from (token, seed) so each token draws
/// independently and reproducibly.
pub fn sample_cluster(cluster: &TokenCluster, cap: usize, seed: u64) -> Vec<String> {
    if cap == 0 {
        return Vec::new();
    }
    let n = cluster.member_items.len();
    if n <= cap {
        return cluster.member_items.clone();
    }
    let stream = io::splitmix64(seed) ^ io::fnv1a(cluster.token.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut pool: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first `cap` slots end up a uniform sample
    for i in 0..cap {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked: Vec<usize> = pool[..cap].to_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| cluster.member_items[i].clone())
        .collect()
}

fn item_text(catalog: &ItemCatalog, id: &str) -> String {
    match catalog.items.get(id) {
        Some(item) => format!("{} {}", item.title, item.description),
        None => String::new(),
    }
}

fn terms_of(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Catalog-wide document frequencies for the local backend.
#[derive(Debug, Clone)]
pub struct TfidfStats {
    df: HashMap<String, usize>,
    n_docs: usize,
}

impl TfidfStats {
    pub fn from_catalog(catalog: &ItemCatalog) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for id in catalog.items.keys() {
            let unique: HashSet<String> = terms_of(&item_text(catalog, id)).into_iter().collect();
            for term in unique {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        Self {
            df,
            n_docs: catalog.n_items(),
        }
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0).max(1) as f64;
        (self.n_docs.max(1) as f64 / df).ln() + 1.0
    }
}

/// Local backend: cluster term counts weighted by catalog-wide IDF; top
/// terms become the keywords and a fixed template lists them as the
/// description.
fn extract_local(
    cluster: &TokenCluster,
    catalog: &ItemCatalog,
    stats: &TfidfStats,
) -> TokenSemantics {
    let mut tf: HashMap<String, usize> = HashMap::new();
    for id in &cluster.member_items {
        for term in terms_of(&item_text(catalog, id)) {
            *tf.entry(term).or_insert(0) += 1;
        }
    }
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(term, count)| {
            let score = count as f64 * stats.idf(&term);
            (term, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let keywords: Vec<String> = scored
        .into_iter()
        .take(LOCAL_KEYWORD_COUNT)
        .map(|(t, _)| t)
        .collect();
    let description = format!("Items in this group share: {}.", keywords.join(", "));
    TokenSemantics {
        token: cluster.token.clone(),
        description,
        keywords,
    }
}

fn normalize_keywords(keywords: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    keywords
        .into_iter()
        .map(|k| k.trim().to_lowercase())
        .filter(|k| !k.is_empty())
        .filter(|k| seen.insert(k.clone()))
        .collect()
}

/// Render the extraction prompt for a sampled cluster.
pub fn render_prompt(
    cluster: &TokenCluster,
    catalog: &ItemCatalog,
    cfg: &ExtractorConfig,
) -> String {
    let mut blocks = Vec::new();
    let mut category_votes: BTreeMap<&str, usize> = BTreeMap::new();
    for id in &cluster.sample {
        let Some(item) = catalog.items.get(id) else {
            continue;
        };
        let mut block = format!("Title: {}\nDescription: {}", item.title, item.description);
        if let Some(brand) = &item.brand {
            block.push_str(&format!("\nBrand: {brand}"));
        }
        if let Some(categories) = &item.categories {
            block.push_str(&format!("\nCategories: {categories}"));
            *category_votes.entry(categories.as_str()).or_insert(0) += 1;
        }
        blocks.push(block);
    }
    let category = cfg.category.clone().unwrap_or_else(|| {
        category_votes
            .iter()
            .max_by_key(|(name, votes)| (**votes, std::cmp::Reverse(**name)))
            .map(|(name, _)| name.to_string())
            .unwrap_or_else(|| "general".to_string())
    });
    EXTRACTION_PROMPT_TEMPLATE
        .replace("{category}", &category)
        .replace("{items}", &blocks.join("\n\n"))
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteDirect {
    description: String,
    keywords: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

/// Accept either the plain `{description, keywords}` shape or a
/// chat-completion envelope whose message content holds that JSON
/// (optionally fenced).
fn parse_remote_body(body: &str) -> std::result::Result<RemoteDirect, String> {
    if let Ok(direct) = serde_json::from_str::<RemoteDirect>(body) {
        return Ok(direct);
    }
    let chat: ChatCompletion =
        serde_json::from_str(body).map_err(|e| format!("unrecognized response shape: {e}"))?;
    let content = chat
        .choices
        .first()
        .map(|c| c.message.content.as_str())
        .ok_or("empty choices")?;
    let trimmed = content.trim();
    let inner = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str::<RemoteDirect>(inner.trim())
        .map_err(|e| format!("content is not {{description, keywords}}: {e}"))
}

fn extract_remote(
    cluster: &TokenCluster,
    catalog: &ItemCatalog,
    cfg: &ExtractorConfig,
) -> Result<TokenSemantics> {
    let prompt = render_prompt(cluster, catalog, cfg);
    let api_key = std::env::var(&cfg.api_key_env).unwrap_or_default();
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
        .build()
        .map_err(|e| Error::Extraction {
            token: cluster.token.clone(),
            message: format!("http client: {e}"),
        })?;

    let attempts = 1 + cfg.max_retries;
    let mut last_err = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let delay = cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
            std::thread::sleep(Duration::from_millis(delay));
        }
        let mut req = client.post(&cfg.endpoint).json(&RemoteRequest {
            model: &cfg.model,
            prompt: &prompt,
        });
        if !api_key.is_empty() {
            req = req.bearer_auth(&api_key);
        }
        let outcome = req
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.text());
        match outcome {
            Ok(body) => match parse_remote_body(&body) {
                Ok(direct) => {
                    return Ok(TokenSemantics {
                        token: cluster.token.clone(),
                        description: direct.description,
                        keywords: normalize_keywords(direct.keywords),
                    });
                }
                Err(e) => last_err = e,
            },
            Err(e) => last_err = e.to_string(),
        }
        log::warn!(
            "remote extraction attempt {}/{} for {} failed: {last_err}",
            attempt + 1,
            attempts,
            cluster.token
        );
    }
    Err(Error::Extraction {
        token: cluster.token.clone(),
        message: format!("{attempts} attempts failed, last error: {last_err}"),
    })
}

fn cache_key(cluster: &TokenCluster, backend: ExtractorBackend) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cluster.token.as_bytes());
    hasher.update([0u8]);
    for id in &cluster.member_items {
        hasher.update(id.as_bytes());
        hasher.update([0u8]);
    }
    hasher.update(match backend {
        ExtractorBackend::Remote => b"remote".as_slice(),
        ExtractorBackend::Local => b"local".as_slice(),
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

fn cache_read(dir: &Path, key: &str) -> Option<TokenSemantics> {
    let path = cache_path(dir, key);
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn cache_write(dir: &Path, key: &str, semantics: &TokenSemantics) -> Result<()> {
    let body = serde_json::to_vec_pretty(semantics)
        .map_err(|e| Error::Config(format!("cache serialization: {e}")))?;
    io::write_atomic(&cache_path(dir, key), &body)
}

/// Extract semantics for one non-empty cluster. The sample is drawn here
/// (seeded) if the caller has not populated it.
pub fn extract_semantics(
    cluster: &TokenCluster,
    catalog: &ItemCatalog,
    cfg: &ExtractorConfig,
) -> Result<TokenSemantics> {
    cfg.validate()?;
    if cluster.member_items.is_empty() {
        return Err(Error::Contract(format!(
            "cluster for {} is empty",
            cluster.token
        )));
    }
    let stats = TfidfStats::from_catalog(catalog);
    extract_with_stats(cluster, catalog, cfg, &stats)
}

fn extract_with_stats(
    cluster: &TokenCluster,
    catalog: &ItemCatalog,
    cfg: &ExtractorConfig,
    stats: &TfidfStats,
) -> Result<TokenSemantics> {
    let mut cluster = cluster.clone();
    if cluster.sample.is_empty() {
        cluster.sample = sample_cluster(&cluster, cfg.sample_cap, cfg.seed);
    }
    let key = cache_key(&cluster, cfg.backend);
    if let Some(dir) = &cfg.cache_dir {
        if let Some(hit) = cache_read(dir, &key) {
            return Ok(hit);
        }
    }
    let semantics = match cfg.backend {
        ExtractorBackend::Local => extract_local(&cluster, catalog, stats),
        ExtractorBackend::Remote => match extract_remote(&cluster, catalog, cfg) {
            Ok(s) => s,
            Err(e) if cfg.fallback_to_local => {
                log::warn!("{e}; falling back to the local backend");
                extract_local(&cluster, catalog, stats)
            }
            Err(e) => return Err(e),
        },
    };
    if let Some(dir) = &cfg.cache_dir {
        cache_write(dir, &key, &semantics)?;
    }
    Ok(semantics)
}

/// Run extraction over all clusters, skipping empty ones with a warning.
/// Output preserves cluster order.
pub fn extract_all(
    clusters: &[TokenCluster],
    catalog: &ItemCatalog,
    cfg: &ExtractorConfig,
) -> Result<Vec<TokenSemantics>> {
    cfg.validate()?;
    let stats = TfidfStats::from_catalog(catalog);
    let mut out = Vec::new();
    for cluster in clusters {
        if cluster.member_items.is_empty() {
            log::warn!("skipping {}: empty cluster", cluster.token);
            continue;
        }
        out.push(extract_with_stats(cluster, catalog, cfg, &stats)?);
    }
    Ok(out)
}

/// Semantics file: one JSON object per line {token, description, keywords}.
pub fn write_semantics(path: &Path, semantics: &[TokenSemantics]) -> Result<()> {
    io::write_jsonl(path, semantics)
}

pub fn read_semantics(path: &Path) -> Result<Vec<TokenSemantics>> {
    io::read_jsonl(path)
}
