//! Flat key-value pipeline configuration with section-prefixed keys,
//! command-line overrides, and a canonical hash embedded in artifacts.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sidrec_core::extractor::{ExtractorBackend, ExtractorConfig};
use sidrec_core::model::train::TrainConfig;
use sidrec_core::model::ModelConfig;
use sidrec_core::quantizer::QuantizerConfig;
use sidrec_core::synth::SynthConfig;

use crate::{CliError, Result};

#[derive(Debug, Clone)]
pub struct Paths {
    pub workdir: PathBuf,
    pub catalog: PathBuf,
    pub interactions: PathBuf,
    pub embeddings: PathBuf,
    pub embedding_table: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusSettings {
    pub max_hist: usize,
    pub sliding_windows: bool,
    pub tsalign: bool,
    pub weights: sidrec_core::corpus::CorpusWeights,
}

#[derive(Debug, Clone)]
pub struct InitSettings {
    /// Number of leading levels initialized semantically (0 = random).
    pub depth: usize,
    pub full_covariance: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub beam_width: usize,
    pub probe_width: usize,
    pub per_user_csv: bool,
    /// Validation users sampled for the in-training HR@5 metric.
    pub valid_hr_users: usize,
    pub max_title_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub min_count: usize,
    pub paths: Paths,
    pub quantizer: QuantizerConfig,
    pub extractor: ExtractorConfig,
    pub init: InitSettings,
    pub corpus: CorpusSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            min_count: 5,
            paths: Paths {
                workdir: PathBuf::from("work"),
                catalog: PathBuf::new(),
                interactions: PathBuf::new(),
                embeddings: PathBuf::new(),
                embedding_table: PathBuf::new(),
            },
            quantizer: QuantizerConfig {
                levels: 3,
                codes_per_level: vec![16, 16, 16],
                ..QuantizerConfig::default()
            },
            extractor: ExtractorConfig::default(),
            init: InitSettings {
                depth: 3,
                full_covariance: false,
            },
            corpus: CorpusSettings {
                max_hist: 20,
                sliding_windows: true,
                tsalign: true,
                weights: Default::default(),
            },
            model: ModelConfig {
                dim: 64,
                layers: 2,
                heads: 4,
                max_seq: 192,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 2,
                ..TrainConfig::default()
            },
            eval: EvalSettings {
                beam_width: 20,
                probe_width: 5,
                per_user_csv: false,
                valid_hr_users: 64,
                max_title_tokens: 16,
            },
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse `{key} = {value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(CliError::Config(format!("bad boolean `{key} = {other}`"))),
    }
}

impl PipelineConfig {
    /// Parse the flat `key = value` format; `#` starts a comment. Relative
    /// paths resolve against `base_dir`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = PipelineConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value", path.display(), idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        }
        cfg.resolve_paths(base);
        cfg.finish()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides (command line wins over the file).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                CliError::Config(format!("override `{entry}` must be key=value"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        self.finish()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.paths.workdir);
        resolve(&mut self.paths.catalog);
        resolve(&mut self.paths.interactions);
        resolve(&mut self.paths.embeddings);
        resolve(&mut self.paths.embedding_table);
        if let Some(dir) = &mut self.extractor.cache_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    /// Fill derived values and validate cross-field constraints.
    pub fn finish(&mut self) -> Result<()> {
        let wd = self.paths.workdir.clone();
        let default_path = |slot: &mut PathBuf, name: &str| {
            if slot.as_os_str().is_empty() {
                *slot = wd.join(name);
            }
        };
        default_path(&mut self.paths.catalog, sidrec_core::synth::CATALOG_FILE);
        default_path(
            &mut self.paths.interactions,
            sidrec_core::synth::INTERACTIONS_FILE,
        );
        default_path(
            &mut self.paths.embeddings,
            sidrec_core::synth::ITEM_EMBEDDINGS_FILE,
        );
        default_path(
            &mut self.paths.embedding_table,
            sidrec_core::synth::WORD_TABLE_FILE,
        );
        if self.extractor.cache_dir.is_none() {
            self.extractor.cache_dir = Some(wd.join("cache"));
        }

        // one global seed feeds every seeded component
        self.quantizer.seed = sub_seed(self.seed, "quantizer");
        self.extractor.seed = sub_seed(self.seed, "extractor");
        self.model.seed = sub_seed(self.seed, "model");
        self.train.seed = sub_seed(self.seed, "train");
        self.synth.seed = self.seed;
        // the word table must live in the model's embedding space
        self.synth.table_dim = self.model.dim;

        self.quantizer.validate().map_err(CliError::Core)?;
        if self.init.depth > self.quantizer.levels {
            return Err(CliError::Config(format!(
                "init.depth {} exceeds quantizer.levels {}",
                self.init.depth, self.quantizer.levels
            )));
        }
        self.corpus.weights.validate().map_err(CliError::Core)?;
        if self.min_count < 1 {
            return Err(CliError::Config("filter.min_count must be >= 1".into()));
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "filter.min_count" => self.min_count = parse(key, value)?,

            "paths.workdir" => self.paths.workdir = PathBuf::from(value),
            "paths.catalog" => self.paths.catalog = PathBuf::from(value),
            "paths.interactions" => self.paths.interactions = PathBuf::from(value),
            "paths.embeddings" => self.paths.embeddings = PathBuf::from(value),
            "paths.embedding_table" => self.paths.embedding_table = PathBuf::from(value),

            "quantizer.levels" => self.quantizer.levels = parse(key, value)?,
            "quantizer.codes_per_level" => {
                self.quantizer.codes_per_level = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v))
                    .collect::<Result<_>>()?;
            }
            "quantizer.max_iters" => self.quantizer.max_iters = parse(key, value)?,
            "quantizer.rel_tol" => self.quantizer.rel_tol = parse(key, value)?,
            "quantizer.normalize" => self.quantizer.normalize = parse_bool(key, value)?,
            "quantizer.pca_dim" => {
                self.quantizer.pca_dim = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                };
            }

            "extractor.backend" => {
                self.extractor.backend = match value {
                    "local" => ExtractorBackend::Local,
                    "remote" => ExtractorBackend::Remote,
                    other => {
                        return Err(CliError::Config(format!(
                            "extractor.backend must be local|remote, got {other}"
                        )))
                    }
                };
            }
            "extractor.endpoint" => self.extractor.endpoint = value.to_string(),
            "extractor.api_key_env" => self.extractor.api_key_env = value.to_string(),
            "extractor.model" => self.extractor.model = value.to_string(),
            "extractor.sample_cap" => self.extractor.sample_cap = parse(key, value)?,
            "extractor.max_retries" => self.extractor.max_retries = parse(key, value)?,
            "extractor.retry_backoff_ms" => self.extractor.retry_backoff_ms = parse(key, value)?,
            "extractor.timeout_secs" => self.extractor.timeout_secs = parse(key, value)?,
            "extractor.cache_dir" => self.extractor.cache_dir = Some(PathBuf::from(value)),
            "extractor.category" => {
                self.extractor.category = (!value.is_empty()).then(|| value.to_string());
            }
            "extractor.fallback_to_local" => {
                self.extractor.fallback_to_local = parse_bool(key, value)?;
            }

            "init.depth" => self.init.depth = parse(key, value)?,
            "init.full_covariance" => self.init.full_covariance = parse_bool(key, value)?,

            "corpus.max_hist" => self.corpus.max_hist = parse(key, value)?,
            "corpus.sliding_windows" => self.corpus.sliding_windows = parse_bool(key, value)?,
            "corpus.tsalign" => self.corpus.tsalign = parse_bool(key, value)?,
            "corpus.w_seq_rec" => self.corpus.weights.seq_rec = parse(key, value)?,
            "corpus.w_sid2title" => self.corpus.weights.sid2title = parse(key, value)?,
            "corpus.w_title2sid" => self.corpus.weights.title2sid = parse(key, value)?,
            "corpus.w_asym1" => self.corpus.weights.asym1 = parse(key, value)?,
            "corpus.w_asym2" => self.corpus.weights.asym2 = parse(key, value)?,
            "corpus.w_tsalign" => self.corpus.weights.tsalign = parse(key, value)?,

            "model.dim" => self.model.dim = parse(key, value)?,
            "model.layers" => self.model.layers = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(key, value)?,
            "model.max_seq" => self.model.max_seq = parse(key, value)?,
            "model.tie_embeddings" => self.model.tie_embeddings = parse_bool(key, value)?,
            "model.dropout" => self.model.dropout = parse(key, value)?,

            "train.lr" => self.train.lr = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.max_steps" => {
                self.train.max_steps = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                };
            }
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.patience" => self.train.patience = parse(key, value)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, value)?,
            "train.eval_max_examples" => self.train.eval_max_examples = parse(key, value)?,

            "eval.beam_width" => self.eval.beam_width = parse(key, value)?,
            "eval.probe_width" => self.eval.probe_width = parse(key, value)?,
            "eval.per_user_csv" => self.eval.per_user_csv = parse_bool(key, value)?,
            "eval.valid_hr_users" => self.eval.valid_hr_users = parse(key, value)?,
            "eval.max_title_tokens" => self.eval.max_title_tokens = parse(key, value)?,

            "synth.items" => self.synth.items = parse(key, value)?,
            "synth.users" => self.synth.users = parse(key, value)?,
            "synth.categories" => self.synth.categories = parse(key, value)?,
            "synth.subcats" => self.synth.subcats_per_category = parse(key, value)?,
            "synth.item_emb_dim" => self.synth.item_emb_dim = parse(key, value)?,
            "synth.seq_min" => self.synth.seq_min = parse(key, value)?,
            "synth.seq_max" => self.synth.seq_max = parse(key, value)?,
            "synth.prefer_prob" => self.synth.prefer_prob = parse(key, value)?,
            "synth.zipf_exponent" => self.synth.zipf_exponent = parse(key, value)?,
            "synth.empty_description_every" => {
                self.synth.empty_description_every = parse(key, value)?;
            }

            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical semantic entries (paths and cache locations excluded so
    /// relocating a workdir does not invalidate its artifacts).
    pub fn canonical_entries(&self) -> Vec<(String, String)> {
        let b = |v: bool| v.to_string();
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("filter.min_count".into(), self.min_count.to_string()),
            ("quantizer.levels".into(), self.quantizer.levels.to_string()),
            (
                "quantizer.codes_per_level".into(),
                self.quantizer
                    .codes_per_level
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("quantizer.max_iters".into(), self.quantizer.max_iters.to_string()),
            ("quantizer.rel_tol".into(), format!("{:e}", self.quantizer.rel_tol)),
            ("quantizer.normalize".into(), b(self.quantizer.normalize)),
            (
                "quantizer.pca_dim".into(),
                self.quantizer
                    .pca_dim
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            (
                "extractor.backend".into(),
                match self.extractor.backend {
                    ExtractorBackend::Local => "local".into(),
                    ExtractorBackend::Remote => "remote".into(),
                },
            ),
            ("extractor.endpoint".into(), self.extractor.endpoint.clone()),
            ("extractor.model".into(), self.extractor.model.clone()),
            ("extractor.sample_cap".into(), self.extractor.sample_cap.to_string()),
            ("extractor.max_retries".into(), self.extractor.max_retries.to_string()),
            (
                "extractor.category".into(),
                self.extractor.category.clone().unwrap_or_default(),
            ),
            (
                "extractor.fallback_to_local".into(),
                b(self.extractor.fallback_to_local),
            ),
            ("init.depth".into(), self.init.depth.to_string()),
            ("init.full_covariance".into(), b(self.init.full_covariance)),
            ("corpus.max_hist".into(), self.corpus.max_hist.to_string()),
            ("corpus.sliding_windows".into(), b(self.corpus.sliding_windows)),
            ("corpus.tsalign".into(), b(self.corpus.tsalign)),
            ("corpus.w_seq_rec".into(), format!("{:e}", self.corpus.weights.seq_rec)),
            (
                "corpus.w_sid2title".into(),
                format!("{:e}", self.corpus.weights.sid2title),
            ),
            (
                "corpus.w_title2sid".into(),
                format!("{:e}", self.corpus.weights.title2sid),
            ),
            ("corpus.w_asym1".into(), format!("{:e}", self.corpus.weights.asym1)),
            ("corpus.w_asym2".into(), format!("{:e}", self.corpus.weights.asym2)),
            ("corpus.w_tsalign".into(), format!("{:e}", self.corpus.weights.tsalign)),
            ("model.dim".into(), self.model.dim.to_string()),
            ("model.layers".into(), self.model.layers.to_string()),
            ("model.heads".into(), self.model.heads.to_string()),
            ("model.ffn_mult".into(), self.model.ffn_mult.to_string()),
            ("model.max_seq".into(), self.model.max_seq.to_string()),
            ("model.tie_embeddings".into(), b(self.model.tie_embeddings)),
            ("model.dropout".into(), format!("{:e}", self.model.dropout)),
            ("train.lr".into(), format!("{:e}", self.train.lr)),
            ("train.beta1".into(), format!("{:e}", self.train.beta1)),
            ("train.beta2".into(), format!("{:e}", self.train.beta2)),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.epochs".into(), self.train.epochs.to_string()),
            (
                "train.max_steps".into(),
                self.train
                    .max_steps
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            ("train.eval_every".into(), self.train.eval_every.to_string()),
            ("train.patience".into(), self.train.patience.to_string()),
            ("train.clip_norm".into(), format!("{:e}", self.train.clip_norm)),
            (
                "train.eval_max_examples".into(),
                self.train.eval_max_examples.to_string(),
            ),
            ("eval.beam_width".into(), self.eval.beam_width.to_string()),
            ("eval.probe_width".into(), self.eval.probe_width.to_string()),
            ("eval.per_user_csv".into(), b(self.eval.per_user_csv)),
            ("eval.valid_hr_users".into(), self.eval.valid_hr_users.to_string()),
            (
                "eval.max_title_tokens".into(),
                self.eval.max_title_tokens.to_string(),
            ),
            ("synth.items".into(), self.synth.items.to_string()),
            ("synth.users".into(), self.synth.users.to_string()),
            ("synth.categories".into(), self.synth.categories.to_string()),
            ("synth.subcats".into(), self.synth.subcats_per_category.to_string()),
            ("synth.item_emb_dim".into(), self.synth.item_emb_dim.to_string()),
            ("synth.seq_min".into(), self.synth.seq_min.to_string()),
            ("synth.seq_max".into(), self.synth.seq_max.to_string()),
            ("synth.prefer_prob".into(), format!("{:e}", self.synth.prefer_prob)),
            (
                "synth.zipf_exponent".into(),
                format!("{:e}", self.synth.zipf_exponent),
            ),
            (
                "synth.empty_description_every".into(),
                self.synth.empty_description_every.to_string(),
            ),
        ];
        out.sort();
        out
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.canonical_entries() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|byte| format!("{byte:02x}")).collect()
    }
}

pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    sidrec_core::io::splitmix64(seed ^ sidrec_core::io::fnv1a(tag.as_bytes()))
}
