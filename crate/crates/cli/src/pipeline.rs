//! Stage runner: each subcommand reads its upstream artifacts (verifying
//! the config hash they were built with), computes, and writes its own
//! artifacts plus a `.meta.json` sidecar embedding the hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sidrec_core::catalog::{
    filter_and_sequence, load_catalog, load_embeddings, load_interactions, EmbeddingMatrix,
    ItemCatalog,
};
use sidrec_core::corpus::{
    assemble_corpus, make_asymmetric_examples, make_item_alignment_examples,
    make_seq_rec_examples, make_test_examples, make_tsalign_examples, make_valid_examples,
    read_corpus_split, split_leave_last_out, write_corpus_split, Corpus,
};
use sidrec_core::decode_eval::{
    comprehension_eval, full_rank_eval, hr_at_k_ranker, write_per_user_csv, EvalReport, ProbeItem,
};
use sidrec_core::extractor::{build_token_clusters, extract_all, write_semantics};
use sidrec_core::init::{
    build_init_matrix, read_init_matrix, write_init_matrix, write_init_report, EmbeddingTable,
    InitPlan,
};
use sidrec_core::model::tokenizer::{build_vocabulary, corpus_texts};
use sidrec_core::model::train::{train, TrainOptions, TrainReport};
use sidrec_core::model::{checkpoint, Model};
use sidrec_core::quantizer::{preprocess, read_codebook, rq_encode, rq_fit, write_codebook};
use sidrec_core::sidspace::{
    assign_sids, build_trie, read_sid_map, write_sid_map, SidLayout, SidTrie, Vocabulary,
};
use sidrec_core::synth;

use crate::config::{sub_seed, PipelineConfig};
use crate::{CliError, Result};

pub const STAGES: [&str; 10] = [
    "synth", "quantize", "mint", "extract", "init", "corpus", "train", "eval", "probe", "ablate",
];

// workdir artifact names
pub const CODEBOOK: &str = "codebook.bin";
pub const PREP_EMBEDDINGS: &str = "embeddings.prep.txt";
pub const SID_MAP: &str = "sid_map.tsv";
pub const SEMANTICS: &str = "semantics.jsonl";
pub const INIT_MATRIX: &str = "init_matrix.bin";
pub const INIT_REPORT: &str = "init_report.json";
pub const CORPUS_TRAIN: &str = "corpus.train.jsonl";
pub const CORPUS_VALID: &str = "corpus.valid.jsonl";
pub const CORPUS_TEST: &str = "corpus.test.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const CORPUS_META: &str = "corpus.meta.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const PER_USER_CSV: &str = "per_user.csv";
pub const PROBE_REPORT: &str = "probe_report.json";
pub const ABLATE_CSV: &str = "ablate.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    config_hash: String,
}

fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn write_meta(artifact: &Path, hash: &str) -> Result<()> {
    let meta = ArtifactMeta {
        config_hash: hash.to_string(),
    };
    let body = serde_json::to_vec_pretty(&meta)
        .map_err(|e| CliError::Runtime(format!("meta serialization: {e}")))?;
    sidrec_core::io::write_atomic(&meta_path(artifact), &body).map_err(CliError::Core)
}

/// Upstream artifact gate: missing file or missing/mismatched hash points
/// the user at the stage to (re-)run.
fn check_artifact(artifact: &Path, stage: &str, hash: &str) -> Result<()> {
    if !artifact.exists() {
        return Err(CliError::Prerequisite {
            artifact: artifact.display().to_string(),
            stage: stage.to_string(),
        });
    }
    let meta_file = meta_path(artifact);
    let stale = || CliError::Stale {
        artifact: artifact.display().to_string(),
        stage: stage.to_string(),
    };
    let text = std::fs::read_to_string(&meta_file).map_err(|_| stale())?;
    let meta: ArtifactMeta = serde_json::from_str(&text).map_err(|_| stale())?;
    if meta.config_hash != hash {
        return Err(stale());
    }
    Ok(())
}

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Prerequisite {
            artifact: path.display().to_string(),
            stage: "synth".to_string(),
        })
    }
}

fn layout_of(cfg: &PipelineConfig) -> Result<SidLayout> {
    SidLayout::new(cfg.quantizer.codes_per_level.clone()).map_err(CliError::Core)
}

fn load_filtered(cfg: &PipelineConfig) -> Result<ItemCatalog> {
    require_input(&cfg.paths.catalog)?;
    require_input(&cfg.paths.interactions)?;
    let catalog = load_catalog(&cfg.paths.catalog)?;
    let log = load_interactions(&cfg.paths.interactions, &catalog)?;
    Ok(filter_and_sequence(&log, &catalog, cfg.min_count)?)
}

fn load_prep_embeddings(cfg: &PipelineConfig, catalog: &ItemCatalog) -> Result<EmbeddingMatrix> {
    let path = cfg.paths.workdir.join(PREP_EMBEDDINGS);
    check_artifact(&path, "quantize", &cfg.config_hash())?;
    Ok(load_embeddings(&path, catalog)?)
}

pub fn stage_synth(cfg: &PipelineConfig) -> Result<()> {
    let data = synth::generate(&cfg.synth)?;
    std::fs::create_dir_all(&cfg.paths.workdir)
        .map_err(|e| CliError::Runtime(format!("create workdir: {e}")))?;
    sidrec_core::catalog::write_catalog(&cfg.paths.catalog, &data.catalog)?;
    sidrec_core::catalog::write_interactions(&cfg.paths.interactions, &data.log)?;
    sidrec_core::catalog::write_text_embeddings(&cfg.paths.embeddings, &data.item_embeddings)?;
    data.table.write(&cfg.paths.embedding_table)?;
    log::info!(
        "synth: {} items, {} users, {} events",
        data.catalog.n_items(),
        cfg.synth.users,
        data.log.events.len()
    );
    Ok(())
}

pub fn stage_quantize(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let filtered = load_filtered(cfg)?;
    require_input(&cfg.paths.embeddings)?;
    let embeddings = load_embeddings(&cfg.paths.embeddings, &filtered)?;
    let prep = preprocess(&embeddings, &cfg.quantizer)?;
    let prep_path = cfg.paths.workdir.join(PREP_EMBEDDINGS);
    sidrec_core::catalog::write_text_embeddings(&prep_path, &prep)?;
    write_meta(&prep_path, &hash)?;

    let codebook = rq_fit(&prep, &cfg.quantizer)?;
    let path = cfg.paths.workdir.join(CODEBOOK);
    write_codebook(&path, &codebook)?;
    write_meta(&path, &hash)?;
    log::info!(
        "quantize: {} items -> {} levels over dim {}",
        prep.n_items(),
        codebook.n_levels(),
        codebook.dim
    );
    Ok(())
}

pub fn stage_mint(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let cb_path = cfg.paths.workdir.join(CODEBOOK);
    check_artifact(&cb_path, "quantize", &hash)?;
    let codebook = read_codebook(&cb_path)?;
    let filtered = load_filtered(cfg)?;
    let prep = load_prep_embeddings(cfg, &filtered)?;
    let layout = layout_of(cfg)?;

    let encoded = rq_encode(&prep, &codebook)?;
    let sids = assign_sids(&encoded, &prep.item_order, &layout, sub_seed(cfg.seed, "sids"))?;
    let path = cfg.paths.workdir.join(SID_MAP);
    write_sid_map(&path, &sids, &layout)?;
    write_meta(&path, &hash)?;
    log::info!("mint: {} unique sid tuples", sids.len());
    Ok(())
}

pub fn stage_extract(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let sid_path = cfg.paths.workdir.join(SID_MAP);
    check_artifact(&sid_path, "mint", &hash)?;
    let layout = layout_of(cfg)?;
    let sids = read_sid_map(&sid_path, &layout)?;
    let filtered = load_filtered(cfg)?;

    let clusters = build_token_clusters(&sids, &layout);
    let semantics = extract_all(&clusters, &filtered, &cfg.extractor)?;
    let path = cfg.paths.workdir.join(SEMANTICS);
    write_semantics(&path, &semantics)?;
    write_meta(&path, &hash)?;
    log::info!("extract: semantics for {} tokens", semantics.len());
    Ok(())
}

pub fn stage_init(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let sem_path = cfg.paths.workdir.join(SEMANTICS);
    check_artifact(&sem_path, "extract", &hash)?;
    let semantics = sidrec_core::extractor::read_semantics(&sem_path)?;
    require_input(&cfg.paths.embedding_table)?;
    let table = EmbeddingTable::load(&cfg.paths.embedding_table)?;
    if table.dim != cfg.model.dim {
        return Err(CliError::Config(format!(
            "embedding table dim {} must match model.dim {}",
            table.dim, cfg.model.dim
        )));
    }
    let layout = layout_of(cfg)?;
    let mut plan = InitPlan::semantic_depth(layout.levels(), cfg.init.depth, sub_seed(cfg.seed, "init"));
    plan.full_covariance = cfg.init.full_covariance;

    let (matrix, report) = build_init_matrix(&semantics, &layout, &table, &plan)?;
    let m_path = cfg.paths.workdir.join(INIT_MATRIX);
    write_init_matrix(&m_path, &matrix)?;
    write_meta(&m_path, &hash)?;
    let r_path = cfg.paths.workdir.join(INIT_REPORT);
    write_init_report(&r_path, &report)?;
    write_meta(&r_path, &hash)?;
    log::info!(
        "init[{}]: {} semantic rows, {} gaussian rows, {} fallbacks",
        plan.label(),
        report.semantic_count,
        report.gaussian_count,
        report.fallback_tokens.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    counts: BTreeMap<String, usize>,
    valid_examples: usize,
    test_examples: usize,
    excluded_users: usize,
    tsalign: bool,
}

pub fn stage_corpus(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.config_hash();
    let sid_path = cfg.paths.workdir.join(SID_MAP);
    check_artifact(&sid_path, "mint", &hash)?;
    let layout = layout_of(cfg)?;
    let sids = read_sid_map(&sid_path, &layout)?;
    let filtered = load_filtered(cfg)?;
    let split = split_leave_last_out(&filtered);

    let mut parts = vec![
        make_seq_rec_examples(
            &split,
            &sids,
            &layout,
            cfg.corpus.max_hist,
            cfg.corpus.sliding_windows,
        )?,
        make_item_alignment_examples(&filtered, &sids, &layout)?,
        make_asymmetric_examples(&filtered, &split, &sids, &layout, cfg.corpus.max_hist)?,
    ];
    if cfg.corpus.tsalign {
        let sem_path = cfg.paths.workdir.join(SEMANTICS);
        check_artifact(&sem_path, "extract", &hash)?;
        let semantics = sidrec_core::extractor::read_semantics(&sem_path)?;
        parts.push(make_tsalign_examples(&semantics));
    }
    let valid = make_valid_examples(&split, &sids, &layout, cfg.corpus.max_hist)?;
    let test = make_test_examples(&split, &sids, &layout, cfg.corpus.max_hist)?;
    let corpus = assemble_corpus(
        parts,
        valid,
        test,
        cfg.corpus.weights.clone(),
        &layout,
        sub_seed(cfg.seed, "corpus"),
    )?;

    let vocab = build_vocabulary(
        corpus_texts(&corpus.train)
            .chain(corpus_texts(&corpus.valid))
            .chain(corpus_texts(&corpus.test)),
        &layout,
    )?;

    let wd = &cfg.paths.workdir;
    for (name, slice) in [
        (CORPUS_TRAIN, &corpus.train),
        (CORPUS_VALID, &corpus.valid),
        (CORPUS_TEST, &corpus.test),
    ] {
        let path = wd.join(name);
        write_corpus_split(&path, slice)?;
        write_meta(&path, &hash)?;
    }
    let vocab_path = wd.join(VOCAB);
    vocab.write(&vocab_path)?;
    write_meta(&vocab_path, &hash)?;

    let meta = CorpusMeta {
        counts: corpus
            .counts()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        valid_examples: corpus.valid.len(),
        test_examples: corpus.test.len(),
        excluded_users: split.excluded_users.len(),
        tsalign: cfg.corpus.tsalign,
    };
    let meta_file = wd.join(CORPUS_META);
    let body = serde_json::to_vec_pretty(&meta)
        .map_err(|e| CliError::Runtime(format!("corpus meta: {e}")))?;
    sidrec_core::io::write_atomic(&meta_file, &body)?;
    write_meta(&meta_file, &hash)?;
    log::info!(
        "corpus: {} train / {} valid / {} test examples (vocab {})",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        vocab.len()
    );
    Ok(())
}

fn read_corpus(cfg: &PipelineConfig, hash: &str) -> Result<(Corpus, Vocabulary, SidLayout)> {
    let wd = &cfg.paths.workdir;
    for name in [CORPUS_TRAIN, CORPUS_VALID, CORPUS_TEST, VOCAB] {
        check_artifact(&wd.join(name), "corpus", hash)?;
    }
    let layout = layout_of(cfg)?;
    let train = read_corpus_split(&wd.join(CORPUS_TRAIN))?;
    let valid = read_corpus_split(&wd.join(CORPUS_VALID))?;
    let test = read_corpus_split(&wd.join(CORPUS_TEST))?;
    let vocab = Vocabulary::read(&wd.join(VOCAB), layout.total_tokens())?;
    let corpus = Corpus {
        train,
        valid,
        test,
        weights: cfg.corpus.weights.clone(),
        seed: sub_seed(cfg.seed, "corpus"),
    };
    Ok((corpus, vocab, layout))
}

fn read_trie(cfg: &PipelineConfig, hash: &str) -> Result<(SidTrie, SidLayout)> {
    let sid_path = cfg.paths.workdir.join(SID_MAP);
    check_artifact(&sid_path, "mint", hash)?;
    let layout = layout_of(cfg)?;
    let sids = read_sid_map(&sid_path, &layout)?;
    let trie = build_trie(&sids)?;
    Ok((trie, layout))
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    let hash = cfg.config_hash();
    let (corpus, vocab, layout) = read_corpus(cfg, &hash)?;
    let init_path = cfg.paths.workdir.join(INIT_MATRIX);
    check_artifact(&init_path, "init", &hash)?;
    let init_matrix = read_init_matrix(&init_path)?;
    let (trie, _) = read_trie(cfg, &hash)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = Model::<f32>::new(model_cfg)?;
    model.inject_sid_embeddings(&init_matrix, &vocab)?;

    let ranker = hr_at_k_ranker(
        &corpus.valid,
        &trie,
        &layout,
        &vocab,
        cfg.eval.probe_width,
        5,
        cfg.eval.valid_hr_users,
        sub_seed(cfg.seed, "valid-hr"),
    );
    let options = TrainOptions {
        config: cfg.train.clone(),
        valid_ranker: Some(&ranker),
    };
    let report = train(&mut model, &corpus, &vocab, &options)?;

    let ckpt_path = cfg.paths.workdir.join(CHECKPOINT);
    let mut meta = serde_json::Map::new();
    meta.insert("config_hash".into(), serde_json::json!(hash));
    meta.insert("stopped_early".into(), serde_json::json!(report.stopped_early));
    checkpoint::save(&ckpt_path, &model, meta)?;
    write_meta(&ckpt_path, &hash)?;

    let report_path = cfg.paths.workdir.join(TRAIN_REPORT);
    report.write_csv(&report_path)?;
    write_meta(&report_path, &hash)?;
    log::info!(
        "train: {} steps (planned {}), best eval loss {:?}",
        report.steps_run,
        report.planned_steps,
        report.best_eval_loss
    );
    Ok(report)
}

fn load_checkpoint(cfg: &PipelineConfig, hash: &str) -> Result<Model<f32>> {
    let path = cfg.paths.workdir.join(CHECKPOINT);
    check_artifact(&path, "train", hash)?;
    let (model, header) = checkpoint::load(&path)?;
    if header.meta.get("config_hash").and_then(|v| v.as_str()) != Some(hash) {
        return Err(CliError::Stale {
            artifact: path.display().to_string(),
            stage: "train".to_string(),
        });
    }
    Ok(model)
}

pub fn stage_eval(cfg: &PipelineConfig) -> Result<EvalReport> {
    let hash = cfg.config_hash();
    let model = load_checkpoint(cfg, &hash)?;
    let (corpus, vocab, layout) = read_corpus(cfg, &hash)?;
    let (trie, _) = read_trie(cfg, &hash)?;

    let outcome = full_rank_eval(
        &model,
        &corpus.test,
        &trie,
        &layout,
        &vocab,
        cfg.eval.beam_width,
    )?;
    let path = cfg.paths.workdir.join(EVAL_REPORT);
    outcome.report.write(&path)?;
    write_meta(&path, &hash)?;
    if cfg.eval.per_user_csv {
        let csv_path = cfg.paths.workdir.join(PER_USER_CSV);
        write_per_user_csv(&csv_path, &outcome.per_user)?;
        write_meta(&csv_path, &hash)?;
    }
    log::info!(
        "eval: users {} hr@10 {:.4} ndcg@10 {:.4}",
        outcome.report.users_evaluated,
        outcome.report.hr["10"],
        outcome.report.ndcg["10"]
    );
    Ok(outcome.report)
}

pub fn stage_probe(cfg: &PipelineConfig) -> Result<EvalReport> {
    let hash = cfg.config_hash();
    let model = load_checkpoint(cfg, &hash)?;
    let (trie, layout) = read_trie(cfg, &hash)?;
    let sids = read_sid_map(&cfg.paths.workdir.join(SID_MAP), &layout)?;
    let filtered = load_filtered(cfg)?;
    let vocab = Vocabulary::read(&cfg.paths.workdir.join(VOCAB), layout.total_tokens())?;

    let items: Vec<ProbeItem> = filtered
        .items
        .iter()
        .filter_map(|(id, item)| {
            sids.get(id).map(|tuple| ProbeItem {
                title: item.title.clone(),
                tuple: tuple.clone(),
            })
        })
        .collect();
    let (acc1, acc2) = comprehension_eval(
        &model,
        &items,
        &trie,
        &layout,
        &vocab,
        cfg.eval.probe_width,
        cfg.eval.max_title_tokens,
    )?;
    let report = EvalReport {
        hr: BTreeMap::new(),
        ndcg: BTreeMap::new(),
        acc1: Some(acc1),
        acc2: Some(acc2),
        users_evaluated: items.len(),
        beam_width: cfg.eval.probe_width,
    };
    let path = cfg.paths.workdir.join(PROBE_REPORT);
    report.write(&path)?;
    write_meta(&path, &hash)?;
    log::info!("probe: acc1 {acc1:.4} acc2 {acc2:.4} over {} items", items.len());
    Ok(report)
}

/// One ablation arm: init depth x TS-Align inclusion.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub init_depth: usize,
    pub tsalign: bool,
    pub hr3: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub acc1: f64,
    pub acc2: f64,
    pub early_eval_loss: f64,
    pub best_eval_loss: f64,
    pub steps_run: usize,
}

pub fn arm_config(base: &PipelineConfig, depth: usize, tsalign: bool) -> Result<PipelineConfig> {
    let mut cfg = base.clone();
    let label = arm_label(depth, tsalign);
    cfg.paths.workdir = base.paths.workdir.join("ablate").join(label);
    cfg.init.depth = depth;
    cfg.corpus.tsalign = tsalign;
    cfg.finish()?;
    Ok(cfg)
}

pub fn arm_label(depth: usize, tsalign: bool) -> String {
    let init = if depth == 0 {
        "random".to_string()
    } else {
        format!("sa{depth}")
    };
    format!("{init}_{}", if tsalign { "tsalign" } else { "no_tsalign" })
}

/// Run the full chain for one arm and collect its metrics.
pub fn run_arm(cfg: &PipelineConfig, depth: usize, tsalign: bool) -> Result<AblationRow> {
    let arm = arm_config(cfg, depth, tsalign)?;
    stage_quantize(&arm)?;
    stage_mint(&arm)?;
    stage_extract(&arm)?;
    stage_init(&arm)?;
    stage_corpus(&arm)?;
    let train_report = stage_train(&arm)?;
    let eval_report = stage_eval(&arm)?;
    let probe_report = stage_probe(&arm)?;
    Ok(AblationRow {
        arm: arm_label(depth, tsalign),
        init_depth: depth,
        tsalign,
        hr3: eval_report.hr["3"],
        hr5: eval_report.hr["5"],
        hr10: eval_report.hr["10"],
        ndcg3: eval_report.ndcg["3"],
        ndcg5: eval_report.ndcg["5"],
        ndcg10: eval_report.ndcg["10"],
        acc1: probe_report.acc1.unwrap_or(0.0),
        acc2: probe_report.acc2.unwrap_or(0.0),
        early_eval_loss: train_report.early_eval_loss_mean(0.1).unwrap_or(f64::NAN),
        best_eval_loss: train_report.best_eval_loss.unwrap_or(f64::NAN),
        steps_run: train_report.steps_run,
    })
}

/// The 4 x 2 grid: init depth (random / 1 / 2 / 3 levels) crossed with
/// TS-Align on/off. Writes one merged CSV next to the per-arm workdirs.
pub fn stage_ablate(cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for depth in 0..=cfg.quantizer.levels.min(3) {
        for tsalign in [true, false] {
            log::info!("ablate arm: {}", arm_label(depth, tsalign));
            rows.push(run_arm(cfg, depth, tsalign)?);
        }
    }
    let mut csv = String::from(
        "arm,init_depth,tsalign,hr3,hr5,hr10,ndcg3,ndcg5,ndcg10,acc1,acc2,early_eval_loss,best_eval_loss,steps_run\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.arm,
            r.init_depth,
            r.tsalign,
            r.hr3,
            r.hr5,
            r.hr10,
            r.ndcg3,
            r.ndcg5,
            r.ndcg10,
            r.acc1,
            r.acc2,
            r.early_eval_loss,
            r.best_eval_loss,
            r.steps_run
        ));
    }
    let path = cfg.paths.workdir.join(ABLATE_CSV);
    sidrec_core::io::write_atomic(&path, csv.as_bytes())?;
    write_meta(&path, &cfg.config_hash())?;
    Ok(rows)
}

/// Dispatch a subcommand by name.
pub fn run_stage(name: &str, cfg: &PipelineConfig) -> Result<()> {
    match name {
        "synth" => stage_synth(cfg),
        "quantize" => stage_quantize(cfg),
        "mint" => stage_mint(cfg),
        "extract" => stage_extract(cfg),
        "init" => stage_init(cfg),
        "corpus" => stage_corpus(cfg),
        "train" => stage_train(cfg).map(|_| ()),
        "eval" => stage_eval(cfg).map(|_| ()),
        "probe" => stage_probe(cfg).map(|_| ()),
        "ablate" => stage_ablate(cfg).map(|_| ()),
        other => Err(CliError::Config(format!("unknown subcommand {other}"))),
    }
}

/// Convenience for tests and the ablation driver: the whole chain through
/// eval and probe in one call.
pub fn run_full_chain(cfg: &PipelineConfig) -> Result<(TrainReport, EvalReport, EvalReport)> {
    stage_synth(cfg)?;
    stage_quantize(cfg)?;
    stage_mint(cfg)?;
    stage_extract(cfg)?;
    stage_init(cfg)?;
    stage_corpus(cfg)?;
    let train_report = stage_train(cfg)?;
    let eval_report = stage_eval(cfg)?;
    let probe_report = stage_probe(cfg)?;
    Ok((train_report, eval_report, probe_report))
}

/// Example instruction rendered for documentation and smoke tests.
pub fn describe_artifacts(cfg: &PipelineConfig) -> Vec<(String, PathBuf)> {
    let wd = &cfg.paths.workdir;
    [
        ("codebook", CODEBOOK),
        ("sid map", SID_MAP),
        ("semantics", SEMANTICS),
        ("init matrix", INIT_MATRIX),
        ("train corpus", CORPUS_TRAIN),
        ("checkpoint", CHECKPOINT),
        ("eval report", EVAL_REPORT),
        ("probe report", PROBE_REPORT),
    ]
    .into_iter()
    .map(|(label, name)| (label.to_string(), wd.join(name)))
    .collect()
}
