//! SID token space: minted token strings (one letter family per level),
//! collision-resolved item -> tuple assignment, the expanded vocabulary,
//! and the prefix trie of valid tuples used by constrained decoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::quantizer::EncodeResult;

/// Shape of the SID space: number of codes per level. Level `l` mints
/// tokens `<x_k>` where `x` is the l-th letter of the alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidLayout {
    pub counts: Vec<usize>,
}

impl SidLayout {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.len() > 26 {
            return Err(Error::Config(format!(
                "sid layout must have 1..=26 levels, got {}",
                counts.len()
            )));
        }
        if counts.iter().any(|&k| k < 1) {
            return Err(Error::Config("every level needs at least one code".into()));
        }
        Ok(Self { counts })
    }

    pub fn levels(&self) -> usize {
        self.counts.len()
    }

    pub fn level_letter(&self, level: usize) -> char {
        (b'a' + level as u8) as char
    }

    pub fn token_string(&self, level: usize, code: usize) -> String {
        format!("<{}_{}>", self.level_letter(level), code)
    }

    /// Position of a (level, code) token within the minted token list.
    pub fn ordinal(&self, level: usize, code: usize) -> usize {
        self.counts[..level].iter().sum::<usize>() + code
    }

    pub fn total_tokens(&self) -> usize {
        self.counts.iter().sum()
    }

    /// All SID token strings, level-major, code-ascending.
    pub fn mint_tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for (level, &k) in self.counts.iter().enumerate() {
            for code in 0..k {
                out.push(self.token_string(level, code));
            }
        }
        out
    }

    /// Parse a concatenated tuple like `<a_251><b_198><c_238>`: levels in
    /// order, indices in range, nothing left over.
    pub fn parse_tuple(&self, text: &str) -> Result<SidTuple> {
        let mut rest = text;
        let mut codes = Vec::with_capacity(self.levels());
        for level in 0..self.levels() {
            let (code, tail) = self.parse_one(rest, level)?;
            codes.push(code);
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::Contract(format!(
                "trailing input {rest:?} after {} sid tokens",
                self.levels()
            )));
        }
        Ok(SidTuple { codes })
    }

    fn parse_one<'a>(&self, text: &'a str, level: usize) -> Result<(usize, &'a str)> {
        let letter = self.level_letter(level);
        let err = |msg: String| Error::Contract(msg);
        let rest = text
            .strip_prefix('<')
            .ok_or_else(|| err(format!("expected '<{letter}_' at {text:?}")))?;
        let rest = rest
            .strip_prefix(letter)
            .and_then(|r| r.strip_prefix('_'))
            .ok_or_else(|| err(format!("expected level-{} token <{letter}_k> at {text:?}", level + 1)))?;
        let close = rest
            .find('>')
            .ok_or_else(|| err(format!("unterminated sid token at {text:?}")))?;
        let digits = &rest[..close];
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err(format!("bad sid index {digits:?}")));
        }
        let code: usize = digits
            .parse()
            .map_err(|_| err(format!("bad sid index {digits:?}")))?;
        if code >= self.counts[level] {
            return Err(err(format!(
                "sid index {code} out of range for level {} (K={})",
                level + 1,
                self.counts[level]
            )));
        }
        Ok((code, &rest[close + 1..]))
    }

    pub fn format_tuple(&self, tuple: &SidTuple) -> String {
        let mut s = String::new();
        for (level, &code) in tuple.codes.iter().enumerate() {
            s.push_str(&self.token_string(level, code));
        }
        s
    }
}

/// One item's semantic identifier: exactly one code per level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SidTuple {
    pub codes: Vec<usize>,
}

impl fmt::Display for SidTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.codes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
    }
}

/// Expanded vocabulary: pretrained (word-level plus specials) tokens first,
/// then SID tokens; ids contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    n_pre: usize,
}

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

impl Vocabulary {
    pub fn new(pre_tokens: Vec<String>, sid_tokens: Vec<String>) -> Result<Self> {
        let pre_set: HashSet<&String> = pre_tokens.iter().collect();
        for sid in &sid_tokens {
            if pre_set.contains(sid) {
                return Err(Error::Contract(format!(
                    "sid token {sid} collides with a pretrained token"
                )));
            }
        }
        let n_pre = pre_tokens.len();
        let mut tokens = pre_tokens;
        tokens.extend(sid_tokens);
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Contract(format!("duplicate token {t}")));
            }
        }
        Ok(Self {
            tokens,
            id_of,
            n_pre,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_pre(&self) -> usize {
        self.n_pre
    }

    pub fn n_sid(&self) -> usize {
        self.tokens.len() - self.n_pre
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn unk_id(&self) -> u32 {
        self.id_of[UNK]
    }

    pub fn eos_id(&self) -> u32 {
        self.id_of[EOS]
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_sid(&self, id: u32) -> bool {
        (id as usize) >= self.n_pre
    }

    /// Global id of a (level, code) SID token given the layout that minted
    /// the tail of this vocabulary.
    pub fn sid_id(&self, layout: &SidLayout, level: usize, code: usize) -> u32 {
        (self.n_pre + layout.ordinal(level, code)) as u32
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        io::write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path, n_sid: usize) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if n_sid > tokens.len() {
            return Err(Error::Contract(format!(
                "vocabulary has {} tokens, expected at least {n_sid} sid tokens",
                tokens.len()
            )));
        }
        let n_pre = tokens.len() - n_sid;
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            id_of.insert(t.clone(), i as u32);
        }
        Ok(Self {
            tokens,
            id_of,
            n_pre,
        })
    }
}

/// Resolve identical code tuples to unique SIDs: within each colliding
/// group the lexicographically first item keeps its codes and the rest
/// draw a fresh unused last-level code from a dedicated seeded stream.
pub fn assign_sids(
    encode: &EncodeResult,
    item_order: &[String],
    layout: &SidLayout,
    seed: u64,
) -> Result<BTreeMap<String, SidTuple>> {
    if encode.codes.len() != item_order.len() {
        return Err(Error::Contract(format!(
            "{} code rows for {} items",
            encode.codes.len(),
            item_order.len()
        )));
    }
    let levels = layout.levels();
    let last = levels - 1;
    let k_last = layout.counts[last];

    let mut by_item: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for (i, id) in item_order.iter().enumerate() {
        by_item.insert(id.as_str(), &encode.codes[i]);
    }

    // Group by the first L-1 codes; claim raw tuples in sorted item order.
    let mut claimed: HashMap<Vec<usize>, HashSet<usize>> = HashMap::new();
    let mut deferred: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut out = BTreeMap::new();
    for (id, codes) in &by_item {
        let prefix: Vec<usize> = codes[..last].to_vec();
        let taken = claimed.entry(prefix.clone()).or_default();
        if taken.insert(codes[last]) {
            out.insert(id.to_string(), SidTuple { codes: codes.to_vec() });
        } else {
            deferred.push((id, prefix));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(io::splitmix64(seed ^ 0x5ebc_01d5));
    for (id, prefix) in deferred {
        let taken = claimed.get_mut(&prefix).expect("prefix seen");
        let free: Vec<usize> = (0..k_last).filter(|c| !taken.contains(c)).collect();
        if free.is_empty() {
            return Err(Error::SidCapacity {
                l1: prefix.first().copied().unwrap_or(0),
                l2: prefix.get(1).copied().unwrap_or(0),
                group: taken.len() + 1,
                level: levels,
                capacity: k_last,
            });
        }
        let pick = free[rng.gen_range(0..free.len())];
        taken.insert(pick);
        let mut codes = prefix;
        codes.push(pick);
        out.insert(id.to_string(), SidTuple { codes });
    }
    Ok(out)
}

/// Prefix trie over assigned tuples; every root-to-leaf path has exactly
/// `levels` edges and leaves carry the owning item id.
#[derive(Debug, Clone, Default)]
pub struct TrieNode {
    pub children: BTreeMap<usize, TrieNode>,
    pub item: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SidTrie {
    pub depth: usize,
    root: TrieNode,
}

impl SidTrie {
    pub fn root(&self) -> &TrieNode {
        &self.root
    }

    pub fn node(&self, prefix: &[usize]) -> Option<&TrieNode> {
        let mut node = &self.root;
        for code in prefix {
            node = node.children.get(code)?;
        }
        Some(node)
    }

    pub fn contains(&self, tuple: &SidTuple) -> bool {
        self.node(&tuple.codes).is_some_and(|n| n.item.is_some())
    }

    pub fn item_for(&self, tuple: &SidTuple) -> Option<&str> {
        self.node(&tuple.codes).and_then(|n| n.item.as_deref())
    }

    pub fn leaf_count(&self) -> usize {
        fn walk(node: &TrieNode) -> usize {
            node.item.is_some() as usize + node.children.values().map(walk).sum::<usize>()
        }
        walk(&self.root)
    }
}

pub fn build_trie(sids: &BTreeMap<String, SidTuple>) -> Result<SidTrie> {
    let mut depth = 0;
    let mut root = TrieNode::default();
    for (item, tuple) in sids {
        if depth == 0 {
            depth = tuple.codes.len();
        } else if depth != tuple.codes.len() {
            return Err(Error::Contract("mixed tuple depths".into()));
        }
        let mut node = &mut root;
        for &code in &tuple.codes {
            node = node.children.entry(code).or_default();
        }
        if let Some(existing) = &node.item {
            return Err(Error::Contract(format!(
                "duplicate tuple {tuple} for {existing} and {item}"
            )));
        }
        node.item = Some(item.clone());
    }
    Ok(SidTrie { depth, root })
}

/// SID map file: `item_id<TAB><a_i><b_j><c_k>` per line.
pub fn write_sid_map(
    path: &Path,
    sids: &BTreeMap<String, SidTuple>,
    layout: &SidLayout,
) -> Result<()> {
    let mut out = String::new();
    for (item, tuple) in sids {
        out.push_str(item);
        out.push('\t');
        out.push_str(&layout.format_tuple(tuple));
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())
}

pub fn read_sid_map(path: &Path, layout: &SidLayout) -> Result<BTreeMap<String, SidTuple>> {
    let text = io::read_to_string(path)?;
    let display = path.display().to_string();
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (item, sid_text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&display, idx + 1, "expected item_id<TAB>sid"))?;
        let tuple = layout
            .parse_tuple(sid_text)
            .map_err(|e| Error::parse(&display, idx + 1, e.to_string()))?;
        if out.insert(item.to_string(), tuple).is_some() {
            return Err(Error::parse(&display, idx + 1, format!("duplicate item {item}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout3(k: usize) -> SidLayout {
        SidLayout::new(vec![k, k, k]).unwrap()
    }

    fn encode_of(codes: Vec<Vec<usize>>) -> EncodeResult {
        EncodeResult {
            codes,
            final_residuals: Vec::new(),
            dim: 0,
        }
    }

    #[test]
    fn mint_format_matches_family_letters() {
        let layout = layout3(256);
        assert_eq!(layout.token_string(0, 236), "<a_236>");
        assert_eq!(layout.token_string(1, 231), "<b_231>");
        assert_eq!(layout.token_string(2, 226), "<c_226>");
    }

    #[test]
    fn mint_counts() {
        let layout = layout3(256);
        let tokens = layout.mint_tokens();
        assert_eq!(tokens.len(), 768);
        assert_eq!(tokens[0], "<a_0>");
        assert_eq!(tokens[256], "<b_0>");
        assert_eq!(tokens[767], "<c_255>");
    }

    #[test]
    fn minted_tokens_always_carry_brackets() {
        let layout = layout3(16);
        assert!(layout.mint_tokens().iter().all(|t| t.contains('<')));
    }

    #[test]
    fn parse_known_tuple() {
        let layout = layout3(256);
        let t = layout.parse_tuple("<a_251><b_198><c_238>").unwrap();
        assert_eq!(t.codes, vec![251, 198, 238]);
    }

    #[test]
    fn parse_rejects_wrong_level_order() {
        let layout = layout3(256);
        assert!(layout.parse_tuple("<b_1><a_1><c_1>").is_err());
    }

    #[test]
    fn parse_rejects_out_of_range_and_garbage() {
        let layout = layout3(16);
        assert!(layout.parse_tuple("<a_16><b_0><c_0>").is_err());
        assert!(layout.parse_tuple("<a_1><b_0><c_0>x").is_err());
        assert!(layout.parse_tuple("<a_1><b_0>").is_err());
    }

    #[test]
    fn collision_keeps_first_item_and_prefix() {
        let layout = layout3(16);
        let enc = encode_of(vec![vec![5, 7, 9], vec![5, 7, 9]]);
        let order = vec!["itemB".to_string(), "itemA".to_string()];
        let sids = assign_sids(&enc, &order, &layout, 42).unwrap();
        // itemA sorts first -> keeper
        assert_eq!(sids["itemA"].codes, vec![5, 7, 9]);
        let other = &sids["itemB"].codes;
        assert_eq!(&other[..2], &[5, 7]);
        assert_ne!(other[2], 9);
        // deterministic draw
        let again = assign_sids(&enc, &order, &layout, 42).unwrap();
        assert_eq!(sids, again);
        let reseeded = assign_sids(&enc, &order, &layout, 43).unwrap();
        assert_eq!(reseeded["itemA"].codes, vec![5, 7, 9]);
    }

    #[test]
    fn no_collision_is_identity() {
        let layout = layout3(16);
        let enc = encode_of(vec![vec![1, 2, 3], vec![4, 5, 6]]);
        let order = vec!["a".to_string(), "b".to_string()];
        let sids = assign_sids(&enc, &order, &layout, 0).unwrap();
        assert_eq!(sids["a"].codes, vec![1, 2, 3]);
        assert_eq!(sids["b"].codes, vec![4, 5, 6]);
    }

    #[test]
    fn capacity_error_by_pigeonhole() {
        let layout = layout3(256);
        let n = 300;
        let enc = encode_of(vec![vec![0, 0, 0]; n]);
        let order: Vec<String> = (0..n).map(|i| format!("i{i:04}")).collect();
        match assign_sids(&enc, &order, &layout, 1) {
            Err(Error::SidCapacity { capacity, .. }) => assert_eq!(capacity, 256),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn assignment_is_injective() {
        let layout = layout3(8);
        // many engineered collisions
        let mut codes = Vec::new();
        let mut order = Vec::new();
        for i in 0..30 {
            codes.push(vec![i % 2, (i / 2) % 2, i % 4]);
            order.push(format!("i{i:03}"));
        }
        let sids = assign_sids(&encode_of(codes), &order, &layout, 5).unwrap();
        let unique: HashSet<&SidTuple> = sids.values().collect();
        assert_eq!(unique.len(), sids.len());
    }

    #[test]
    fn trie_shares_prefixes_and_counts_leaves() {
        let layout = layout3(8);
        let enc = encode_of(vec![vec![1, 2, 3], vec![1, 5, 6], vec![1, 5, 7]]);
        let order = vec!["a".into(), "b".into(), "c".into()];
        let sids = assign_sids(&enc, &order, &layout, 0).unwrap();
        let trie = build_trie(&sids).unwrap();
        assert_eq!(trie.root().children.len(), 1);
        assert_eq!(trie.leaf_count(), 3);
        assert!(trie.contains(&SidTuple { codes: vec![1, 2, 3] }));
        assert!(!trie.contains(&SidTuple { codes: vec![1, 2, 4] }));
        assert_eq!(trie.item_for(&SidTuple { codes: vec![1, 5, 6] }), Some("b"));
    }

    #[test]
    fn trie_rejects_duplicate_tuple() {
        let mut sids = BTreeMap::new();
        sids.insert("a".to_string(), SidTuple { codes: vec![1, 2, 3] });
        sids.insert("b".to_string(), SidTuple { codes: vec![1, 2, 3] });
        assert!(build_trie(&sids).is_err());
    }

    #[test]
    fn vocabulary_ids_contiguous_pre_first() {
        let pre = vec![UNK.to_string(), EOS.to_string(), "apple".to_string()];
        let layout = SidLayout::new(vec![2, 2]).unwrap();
        let vocab = Vocabulary::new(pre, layout.mint_tokens()).unwrap();
        assert_eq!(vocab.len(), 7);
        assert_eq!(vocab.n_pre(), 3);
        assert_eq!(vocab.id("apple"), Some(2));
        assert_eq!(vocab.id("<a_0>"), Some(3));
        assert_eq!(vocab.sid_id(&layout, 1, 1), 6);
        assert!(vocab.is_sid(3));
        assert!(!vocab.is_sid(2));
    }

    #[test]
    fn vocabulary_rejects_overlap() {
        let pre = vec![UNK.to_string(), EOS.to_string(), "<a_0>".to_string()];
        assert!(Vocabulary::new(pre, vec!["<a_0>".to_string()]).is_err());
    }

    #[test]
    fn sid_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = layout3(16);
        let enc = encode_of(vec![vec![1, 2, 3], vec![4, 5, 6]]);
        let order = vec!["a".to_string(), "b".to_string()];
        let sids = assign_sids(&enc, &order, &layout, 0).unwrap();
        let path = dir.path().join("sids.tsv");
        write_sid_map(&path, &sids, &layout).unwrap();
        let back = read_sid_map(&path, &layout).unwrap();
        assert_eq!(sids, back);
    }

    mod props {
        use super::{assign_sids, build_trie, encode_of, layout3, ChaCha8Rng, SidTuple};
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};

        proptest! {
            #[test]
            fn format_parse_roundtrip(a in 0usize..256, b in 0usize..256, c in 0usize..256) {
                let layout = layout3(256);
                let tuple = SidTuple { codes: vec![a, b, c] };
                let text = layout.format_tuple(&tuple);
                prop_assert_eq!(layout.parse_tuple(&text).unwrap(), tuple);
            }

            #[test]
            fn trie_paths_biject_with_tuples(seed in 0u64..500) {
                let layout = layout3(6);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.gen_range(1..30usize);
                let codes: Vec<Vec<usize>> = (0..n)
                    .map(|_| (0..3).map(|_| rng.gen_range(0..6usize)).collect())
                    .collect();
                let order: Vec<String> = (0..n).map(|i| format!("i{i:03}")).collect();
                let sids = assign_sids(&encode_of(codes), &order, &layout, seed).unwrap();
                let trie = build_trie(&sids).unwrap();
                prop_assert_eq!(trie.leaf_count(), sids.len());
                for tuple in sids.values() {
                    prop_assert!(trie.contains(tuple));
                }
            }
        }
    }
}
