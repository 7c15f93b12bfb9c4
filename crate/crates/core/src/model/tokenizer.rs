//! Word-level tokenizer over the expanded vocabulary: SID tokens match
//! greedily as atomic units, remaining text is lowercased and split into
//! alphanumeric runs and single punctuation marks.

use std::collections::BTreeSet;

use crate::corpus::InstructionExample;
use crate::error::Result;
use crate::sidspace::{SidLayout, Vocabulary, EOS, UNK};

use super::{Batch, Sequence};

/// True for `<x_123>`-shaped surfaces (one lowercase letter family).
fn scan_sid_like(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    if bytes.len() < 5 || bytes[0] != b'<' {
        return None;
    }
    if !bytes[1].is_ascii_lowercase() || bytes[2] != b'_' {
        return None;
    }
    let mut i = 3;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i == 3 || i >= bytes.len() || bytes[i] != b'>' {
        return None;
    }
    Some(&text[..i + 1])
}

fn scan_special(text: &str) -> Option<&str> {
    for special in [UNK, EOS] {
        if text.starts_with(special) {
            return Some(&text[..special.len()]);
        }
    }
    None
}

/// Split text into word-level surface tokens. SID tokens and specials stay
/// atomic; words are lowercased; every other non-space char stands alone.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let ch = rest.chars().next().expect("non-empty");
        if ch.is_whitespace() {
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '<' {
            if let Some(tok) = scan_sid_like(rest).or_else(|| scan_special(rest)) {
                out.push(tok.to_string());
                rest = &rest[tok.len()..];
                continue;
            }
        }
        if ch.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, c)| !c.is_alphanumeric())
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
        } else {
            out.push(rest[..ch.len_utf8()].to_string());
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

/// Map surface tokens to vocabulary ids, unknown words to `<unk>`.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize_words(text)
        .into_iter()
        .map(|t| vocab.id(&t).unwrap_or_else(|| vocab.unk_id()))
        .collect()
}

/// Punctuation that attaches to the previous token without a space.
fn attaches_left(token: &str) -> bool {
    matches!(token, "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "'" | "\"")
}

fn is_sid_token(token: &str) -> bool {
    scan_sid_like(token) == Some(token)
}

/// Inverse of `encode` up to whitespace: words joined by single spaces,
/// consecutive SID tokens concatenated, attachable punctuation glued to
/// the previous token.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let mut prev_sid = false;
    for &id in ids {
        let token = vocab.token(id);
        let sid = is_sid_token(token);
        if !out.is_empty() && !(sid && prev_sid) && !attaches_left(token) {
            out.push(' ');
        }
        out.push_str(token);
        prev_sid = sid;
    }
    out
}

/// Word tokens (specials first, then sorted unique corpus words, then SID
/// tokens) drawn from every split so evaluation prompts stay in
/// vocabulary.
pub fn build_vocabulary<'a>(
    texts: impl Iterator<Item = &'a str>,
    layout: &SidLayout,
) -> Result<Vocabulary> {
    let mut words = BTreeSet::new();
    for text in texts {
        for token in tokenize_words(text) {
            if !is_sid_token(&token) && token != UNK && token != EOS {
                words.insert(token);
            }
        }
    }
    let mut pre = vec![UNK.to_string(), EOS.to_string()];
    pre.extend(words);
    Vocabulary::new(pre, layout.mint_tokens())
}

pub fn corpus_texts(examples: &[InstructionExample]) -> impl Iterator<Item = &str> {
    examples
        .iter()
        .flat_map(|e| [e.instruction.as_str(), e.response.as_str()])
}

/// Render one example as a training sequence:
/// instruction ids ++ response ids ++ eos, loss on response and eos.
/// Overlong sequences are truncated from the left of the instruction.
pub fn example_to_sequence(
    example: &InstructionExample,
    vocab: &Vocabulary,
    max_seq: usize,
) -> Sequence {
    let mut instr = encode(&example.instruction, vocab);
    let mut resp = encode(&example.response, vocab);
    resp.push(vocab.eos_id());
    if instr.len() + resp.len() > max_seq {
        let keep = max_seq.saturating_sub(resp.len()).max(1);
        instr.drain(..instr.len() - keep);
    }
    let instr_len = instr.len();
    let mut ids = instr;
    ids.extend(resp);
    Sequence { ids, instr_len }
}

pub fn examples_to_batch(
    examples: &[InstructionExample],
    vocab: &Vocabulary,
    max_seq: usize,
) -> Batch {
    Batch {
        sequences: examples
            .iter()
            .map(|e| example_to_sequence(e, vocab, max_seq))
            .collect(),
    }
}
