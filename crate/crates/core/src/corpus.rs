//! Multi-task instruction corpus: next-item prediction over SID histories,
//! bidirectional item-level title/SID alignment, asymmetric prediction
//! into natural language, and token-level semantic alignment, plus the
//! leave-last-out split and the weighted sampling stream used in training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemCatalog;
use crate::error::{Error, Result};
use crate::extractor::TokenSemantics;
use crate::io;
use crate::sidspace::{SidLayout, SidTuple};

pub const SEQ_REC_TEMPLATE: &str = include_str!("../fixtures/templates/seq_rec.instruction.txt");
pub const TITLE2SID_TEMPLATE: &str =
    include_str!("../fixtures/templates/title2sid.instruction.txt");
pub const SID2TITLE_TEMPLATE: &str =
    include_str!("../fixtures/templates/sid2title.instruction.txt");
pub const ASYM1_TEMPLATE: &str = include_str!("../fixtures/templates/asym1.instruction.txt");
pub const ASYM2_TEMPLATE: &str = include_str!("../fixtures/templates/asym2.instruction.txt");
pub const TSALIGN_S2T_TEMPLATE: &str =
    include_str!("../fixtures/templates/tsalign_s2t.instruction.txt");
pub const TSALIGN_T2S_TEMPLATE: &str =
    include_str!("../fixtures/templates/tsalign_t2s.instruction.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    SeqRec,
    Sid2title,
    Title2sid,
    Asym1,
    Asym2,
    TsalignS2t,
    TsalignT2s,
}

impl TaskTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskTag::SeqRec => "seq_rec",
            TaskTag::Sid2title => "sid2title",
            TaskTag::Title2sid => "title2sid",
            TaskTag::Asym1 => "asym1",
            TaskTag::Asym2 => "asym2",
            TaskTag::TsalignS2t => "tsalign_s2t",
            TaskTag::TsalignT2s => "tsalign_t2s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub response: String,
    pub task: TaskTag,
    /// User the example belongs to, when user-derived.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

/// Per-user leave-last-out split: last item is the test target, the one
/// before it the validation target, everything earlier the training
/// prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub train_prefix: Vec<String>,
    pub valid_target: String,
    pub test_target: String,
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub entries: BTreeMap<String, SplitEntry>,
    pub excluded_users: Vec<String>,
}

pub fn split_leave_last_out(catalog: &ItemCatalog) -> Split {
    let mut split = Split::default();
    for (user, seq) in &catalog.sequences {
        if seq.len() < 3 {
            log::warn!("excluding user {user}: sequence length {} < 3", seq.len());
            split.excluded_users.push(user.clone());
            continue;
        }
        let n = seq.len();
        split.entries.insert(
            user.clone(),
            SplitEntry {
                train_prefix: seq[..n - 2].to_vec(),
                valid_target: seq[n - 2].clone(),
                test_target: seq[n - 1].clone(),
            },
        );
    }
    split
}

fn sid_string(
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    item: &str,
) -> Result<String> {
    sids.get(item)
        .map(|t| layout.format_tuple(t))
        .ok_or_else(|| Error::Contract(format!("item {item} has no sid")))
}

/// Histories render as SID strings joined by ", ", most recent last,
/// truncated to the most recent `max_hist` items.
fn render_history(
    items: &[String],
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    max_hist: usize,
) -> Result<String> {
    let start = items.len().saturating_sub(max_hist);
    let parts: Vec<String> = items[start..]
        .iter()
        .map(|i| sid_string(sids, layout, i))
        .collect::<Result<_>>()?;
    Ok(parts.join(", "))
}

pub fn render_seq_rec(history: &str) -> String {
    SEQ_REC_TEMPLATE.replace("{history}", history)
}

pub fn render_title2sid(title: &str) -> String {
    TITLE2SID_TEMPLATE.replace("{title}", title)
}

pub fn render_sid2title(sid: &str) -> String {
    SID2TITLE_TEMPLATE.replace("{sid}", sid)
}

pub fn render_asym1(history: &str) -> String {
    ASYM1_TEMPLATE.replace("{history}", history)
}

pub fn render_asym2(history: &str) -> String {
    ASYM2_TEMPLATE.replace("{history}", history)
}

pub fn render_tsalign_s2t(description: &str) -> String {
    TSALIGN_S2T_TEMPLATE.replace("{description}", description)
}

pub fn render_tsalign_t2s(token: &str) -> String {
    TSALIGN_T2S_TEMPLATE.replace("{token}", token)
}

/// Sliding-window next-item examples over each user's training prefix.
/// Windows whose target equals the user's held-out test item are dropped
/// so test targets never leak into training responses.
pub fn make_seq_rec_examples(
    split: &Split,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    max_hist: usize,
    sliding_windows: bool,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (user, entry) in &split.entries {
        let prefix = &entry.train_prefix;
        if prefix.len() < 2 {
            continue;
        }
        let targets: Vec<usize> = if sliding_windows {
            (1..prefix.len()).collect()
        } else {
            vec![prefix.len() - 1]
        };
        for t in targets {
            if prefix[t] == entry.test_target {
                continue;
            }
            let history = render_history(&prefix[..t], sids, layout, max_hist)?;
            out.push(InstructionExample {
                instruction: render_seq_rec(&history),
                response: sid_string(sids, layout, &prefix[t])?,
                task: TaskTag::SeqRec,
                user: Some(user.clone()),
            });
        }
    }
    Ok(out)
}

/// Validation examples: full training prefix -> validation target.
pub fn make_valid_examples(
    split: &Split,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    max_hist: usize,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (user, entry) in &split.entries {
        let history = render_history(&entry.train_prefix, sids, layout, max_hist)?;
        out.push(InstructionExample {
            instruction: render_seq_rec(&history),
            response: sid_string(sids, layout, &entry.valid_target)?,
            task: TaskTag::SeqRec,
            user: Some(user.clone()),
        });
    }
    Ok(out)
}

/// Test examples: full history (training prefix plus validation target)
/// -> test target.
pub fn make_test_examples(
    split: &Split,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    max_hist: usize,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (user, entry) in &split.entries {
        let mut full = entry.train_prefix.clone();
        full.push(entry.valid_target.clone());
        let history = render_history(&full, sids, layout, max_hist)?;
        out.push(InstructionExample {
            instruction: render_seq_rec(&history),
            response: sid_string(sids, layout, &entry.test_target)?,
            task: TaskTag::SeqRec,
            user: Some(user.clone()),
        });
    }
    Ok(out)
}

/// Two examples per item: title -> SID and SID -> title.
pub fn make_item_alignment_examples(
    catalog: &ItemCatalog,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::with_capacity(catalog.n_items() * 2);
    for (id, item) in &catalog.items {
        let sid = sid_string(sids, layout, id)?;
        out.push(InstructionExample {
            instruction: render_title2sid(&item.title),
            response: sid.clone(),
            task: TaskTag::Title2sid,
            user: None,
        });
        out.push(InstructionExample {
            instruction: render_sid2title(&sid),
            response: item.title.clone(),
            task: TaskTag::Sid2title,
            user: None,
        });
    }
    Ok(out)
}

/// Per user: SID history -> next item's title (asym1) and description
/// (asym2); targets come from the training prefix only, and items with an
/// empty description are excluded from asym2.
pub fn make_asymmetric_examples(
    catalog: &ItemCatalog,
    split: &Split,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
    max_hist: usize,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (user, entry) in &split.entries {
        let prefix = &entry.train_prefix;
        if prefix.len() < 2 {
            continue;
        }
        let target = &prefix[prefix.len() - 1];
        let history = render_history(&prefix[..prefix.len() - 1], sids, layout, max_hist)?;
        let item = catalog
            .items
            .get(target)
            .ok_or_else(|| Error::Contract(format!("item {target} missing from catalog")))?;
        out.push(InstructionExample {
            instruction: render_asym1(&history),
            response: item.title.clone(),
            task: TaskTag::Asym1,
            user: Some(user.clone()),
        });
        if !item.description.trim().is_empty() {
            out.push(InstructionExample {
                instruction: render_asym2(&history),
                response: item.description.clone(),
                task: TaskTag::Asym2,
                user: Some(user.clone()),
            });
        }
    }
    Ok(out)
}

/// Exactly two token-level alignment examples per extracted token:
/// semantics -> token and token -> semantics.
pub fn make_tsalign_examples(semantics: &[TokenSemantics]) -> Vec<InstructionExample> {
    let mut out = Vec::with_capacity(semantics.len() * 2);
    for s in semantics {
        out.push(InstructionExample {
            instruction: render_tsalign_s2t(&s.description),
            response: s.token.clone(),
            task: TaskTag::TsalignS2t,
            user: None,
        });
        out.push(InstructionExample {
            instruction: render_tsalign_t2s(&s.token),
            response: s.description.clone(),
            task: TaskTag::TsalignT2s,
            user: None,
        });
    }
    out
}

/// Relative sampling weight per example, keyed by task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusWeights {
    pub seq_rec: f64,
    pub sid2title: f64,
    pub title2sid: f64,
    pub asym1: f64,
    pub asym2: f64,
    pub tsalign: f64,
}

impl Default for CorpusWeights {
    fn default() -> Self {
        Self {
            seq_rec: 1.0,
            sid2title: 0.25,
            title2sid: 0.25,
            asym1: 0.25,
            asym2: 0.25,
            tsalign: 0.25,
        }
    }
}

impl CorpusWeights {
    pub fn weight_of(&self, task: TaskTag) -> f64 {
        match task {
            TaskTag::SeqRec => self.seq_rec,
            TaskTag::Sid2title => self.sid2title,
            TaskTag::Title2sid => self.title2sid,
            TaskTag::Asym1 => self.asym1,
            TaskTag::Asym2 => self.asym2,
            TaskTag::TsalignS2t | TaskTag::TsalignT2s => self.tsalign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.seq_rec,
            self.sid2title,
            self.title2sid,
            self.asym1,
            self.asym2,
            self.tsalign,
        ];
        if all.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("task weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<InstructionExample>,
    pub valid: Vec<InstructionExample>,
    pub test: Vec<InstructionExample>,
    pub weights: CorpusWeights,
    pub seed: u64,
}

impl Corpus {
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.train {
            *counts.entry(e.task.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Weighted-with-replacement sampling stream over training examples;
    /// the per-example probability is proportional to its task weight.
    pub fn sample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut cumulative = Vec::with_capacity(self.train.len());
        let mut total = 0.0f64;
        for e in &self.train {
            total += self.weights.weight_of(e.task);
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(io::splitmix64(seed ^ 0x90ab_11ce));
        (0..n)
            .map(|_| {
                let dart = rng.gen_range(0.0..total);
                cumulative.partition_point(|&c| c <= dart).min(self.train.len() - 1)
            })
            .collect()
    }
}

fn validate_example(example: &InstructionExample, layout: &SidLayout) -> Result<()> {
    let check_text = |text: &str| -> std::result::Result<(), String> {
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                if let Some(close) = text[i..].find('>') {
                    let token = &text[i..i + close + 1];
                    let body = &token[1..token.len() - 1];
                    let mut parts = body.splitn(2, '_');
                    let letter = parts.next().unwrap_or("");
                    let digits = parts.next().unwrap_or("");
                    if letter.len() == 1
                        && letter.as_bytes()[0].is_ascii_lowercase()
                        && !digits.is_empty()
                        && digits.bytes().all(|b| b.is_ascii_digit())
                    {
                        let level = (letter.as_bytes()[0] - b'a') as usize;
                        let code: usize = digits.parse().map_err(|_| token.to_string())?;
                        if level >= layout.levels() || code >= layout.counts[level] {
                            return Err(token.to_string());
                        }
                    }
                    i += close + 1;
                    continue;
                }
            }
            i += 1;
        }
        Ok(())
    };
    for text in [&example.instruction, &example.response] {
        if let Err(token) = check_text(text) {
            return Err(Error::CorpusBuild {
                task: example.task.as_str().to_string(),
                message: format!("sid token {token} does not parse"),
            });
        }
    }
    // SID-valued responses must be a full valid tuple or single token
    match example.task {
        TaskTag::SeqRec | TaskTag::Title2sid => {
            layout
                .parse_tuple(&example.response)
                .map_err(|e| Error::CorpusBuild {
                    task: example.task.as_str().to_string(),
                    message: e.to_string(),
                })?;
        }
        TaskTag::TsalignS2t => {
            let ok = (0..layout.levels()).any(|level| {
                (0..layout.counts[level])
                    .any(|code| layout.token_string(level, code) == example.response)
            });
            if !ok {
                return Err(Error::CorpusBuild {
                    task: example.task.as_str().to_string(),
                    message: format!("response {} is not a minted token", example.response),
                });
            }
        }
        _ => {}
    }
    if example.instruction.is_empty() || example.response.is_empty() {
        return Err(Error::CorpusBuild {
            task: example.task.as_str().to_string(),
            message: "empty instruction or response".into(),
        });
    }
    Ok(())
}

/// Concatenate the task slices, validate every example, and shuffle the
/// training split with the given seed.
pub fn assemble_corpus(
    parts: Vec<Vec<InstructionExample>>,
    valid: Vec<InstructionExample>,
    test: Vec<InstructionExample>,
    weights: CorpusWeights,
    layout: &SidLayout,
    seed: u64,
) -> Result<Corpus> {
    weights.validate()?;
    let mut train: Vec<InstructionExample> = parts.into_iter().flatten().collect();
    for example in train.iter().chain(&valid).chain(&test) {
        validate_example(example, layout)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(io::splitmix64(seed ^ 0x5741_0f13));
    // Fisher-Yates
    for i in (1..train.len()).rev() {
        let j = rng.gen_range(0..=i);
        train.swap(i, j);
    }
    Ok(Corpus {
        train,
        valid,
        test,
        weights,
        seed,
    })
}

pub fn write_corpus_split(path: &Path, examples: &[InstructionExample]) -> Result<()> {
    io::write_jsonl(path, examples)
}

pub fn read_corpus_split(path: &Path) -> Result<Vec<InstructionExample>> {
    io::read_jsonl(path)
}
