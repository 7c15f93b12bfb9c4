//! Trie-constrained beam search over SID tuples, free-text beam decoding,
//! full-ranking HR@K / NDCG@K, and the bidirectional title/SID
//! comprehension probes.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::InstructionExample;
use crate::error::{Error, Result};
use crate::io;
use crate::model::tokenizer::{decode, encode};
use crate::model::{log_softmax, Model, Real};
use crate::sidspace::{SidLayout, SidTrie, SidTuple, Vocabulary};

/// Complete constrained hypothesis: tuple plus total log-probability.
pub type ScoredTuple = (SidTuple, f64);

struct Hypothesis<F: Real> {
    codes: Vec<usize>,
    state: crate::model::DecodeState<F>,
    logits: Vec<F>,
    score: f64,
}

/// Beam search that expands only trie-valid continuations; every returned
/// tuple is a trie leaf. Scores are sums of token log-probabilities (all
/// tuples share the same length, so no length normalization); ties break
/// lexicographically on the code tuple.
pub fn beam_search_constrained<F: Real>(
    model: &Model<F>,
    prompt: &[u32],
    trie: &SidTrie,
    layout: &SidLayout,
    vocab: &Vocabulary,
    width: usize,
) -> Result<Vec<ScoredTuple>> {
    if width < 1 {
        return Err(Error::Contract("beam width must be >= 1".into()));
    }
    if trie.root().children.is_empty() {
        return Err(Error::Contract("empty sid trie".into()));
    }
    let (state, logits) = model.prefill(prompt)?;
    let mut frontier = vec![Hypothesis {
        codes: Vec::new(),
        state,
        logits,
        score: 0.0,
    }];

    for level in 0..trie.depth {
        // (parent index, code, new score)
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (idx, hyp) in frontier.iter().enumerate() {
            let node = trie.node(&hyp.codes).expect("frontier paths are valid");
            let logp = log_softmax(&hyp.logits);
            for &code in node.children.keys() {
                let token = vocab.sid_id(layout, level, code);
                candidates.push((idx, code, hyp.score + logp[token as usize]));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("finite scores")
                .then_with(|| {
                    let ta = (&frontier[a.0].codes, a.1);
                    let tb = (&frontier[b.0].codes, b.1);
                    ta.cmp(&tb)
                })
        });
        candidates.truncate(width);

        let last_level = level + 1 == trie.depth;
        let mut next = Vec::with_capacity(candidates.len());
        for (parent, code, score) in candidates {
            let mut codes = frontier[parent].codes.clone();
            codes.push(code);
            let mut state = frontier[parent].state.clone();
            let logits = if last_level {
                Vec::new()
            } else {
                let token = vocab.sid_id(layout, level, code);
                model.decode_step(&mut state, token)?
            };
            next.push(Hypothesis {
                codes,
                state,
                logits,
                score,
            });
        }
        frontier = next;
    }

    Ok(frontier
        .into_iter()
        .map(|h| (SidTuple { codes: h.codes }, h.score))
        .collect())
}

/// Unconstrained beam decoding to `<eos>` (or `max_new` tokens) over the
/// full vocabulary; returns token ids without the eos, best first.
pub fn beam_search_text<F: Real>(
    model: &Model<F>,
    prompt: &[u32],
    vocab: &Vocabulary,
    width: usize,
    max_new: usize,
) -> Result<Vec<(Vec<u32>, f64)>> {
    if width < 1 {
        return Err(Error::Contract("beam width must be >= 1".into()));
    }
    struct TextHyp<F: Real> {
        ids: Vec<u32>,
        state: Option<crate::model::DecodeState<F>>,
        logits: Vec<F>,
        score: f64,
        finished: bool,
    }
    let (state, logits) = model.prefill(prompt)?;
    let mut beams = vec![TextHyp::<F> {
        ids: Vec::new(),
        state: Some(state),
        logits,
        score: 0.0,
        finished: false,
    }];
    let eos = vocab.eos_id();

    for _ in 0..max_new {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        // candidate = (beam index, token or None for keep-finished, score)
        let mut candidates: Vec<(usize, Option<u32>, f64)> = Vec::new();
        for (idx, beam) in beams.iter().enumerate() {
            if beam.finished {
                candidates.push((idx, None, beam.score));
                continue;
            }
            let logp = log_softmax(&beam.logits);
            // top `width` continuations of this beam suffice
            let mut order: Vec<u32> = (0..logp.len() as u32).collect();
            order.sort_by(|&a, &b| {
                logp[b as usize]
                    .partial_cmp(&logp[a as usize])
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            for &token in order.iter().take(width) {
                candidates.push((idx, Some(token), beam.score + logp[token as usize]));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2).expect("finite").then_with(|| {
                let ka = (&beams[a.0].ids, a.1);
                let kb = (&beams[b.0].ids, b.1);
                ka.cmp(&kb)
            })
        });
        candidates.truncate(width);

        let mut next = Vec::with_capacity(candidates.len());
        for (parent, token, score) in candidates {
            match token {
                None => next.push(TextHyp {
                    ids: beams[parent].ids.clone(),
                    state: None,
                    logits: Vec::new(),
                    score,
                    finished: true,
                }),
                Some(token) => {
                    let mut ids = beams[parent].ids.clone();
                    let finished = token == eos;
                    if !finished {
                        ids.push(token);
                    }
                    let mut state = beams[parent]
                        .state
                        .clone()
                        .expect("live beams keep state");
                    let logits = if finished {
                        Vec::new()
                    } else {
                        model.decode_step(&mut state, token)?
                    };
                    next.push(TextHyp {
                        ids,
                        state: (!finished).then_some(state),
                        logits,
                        score,
                        finished,
                    });
                }
            }
        }
        beams = next;
    }

    Ok(beams.into_iter().map(|b| (b.ids, b.score)).collect())
}

/// 1 iff the target sits within the first k ranked items.
pub fn hit_ratio_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    if ranked.iter().take(k).any(|i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: 1/log2(rank+1) when rank <= k, else 0.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match ranked.iter().take(k).position(|i| i == target) {
        Some(pos) => 1.0 / ((pos as f64 + 2.0).log2()),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub hr: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc2: Option<f64>,
    pub users_evaluated: usize,
    pub beam_width: usize,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        io::write_atomic(path, &body)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerUserRow {
    pub user: String,
    pub rank: Option<usize>,
    pub hit3: f64,
    pub hit5: f64,
    pub hit10: f64,
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub report: EvalReport,
    pub per_user: Vec<PerUserRow>,
}

/// Full-ranking evaluation: for every test example, run the constrained
/// beam, map tuples to items through the trie, and average HR/NDCG at
/// K in {3, 5, 10}. A beam that returns nothing counts as a miss.
pub fn full_rank_eval(
    model: &Model<f32>,
    test_examples: &[InstructionExample],
    trie: &SidTrie,
    layout: &SidLayout,
    vocab: &Vocabulary,
    width: usize,
) -> Result<RankOutcome> {
    let ks = [3usize, 5, 10];
    let rows: Vec<(PerUserRow, [f64; 3], [f64; 3])> = test_examples
        .par_iter()
        .map(|example| {
            let prompt = encode(&example.instruction, vocab);
            let target_tuple = layout.parse_tuple(&example.response)?;
            let target_item = trie
                .item_for(&target_tuple)
                .ok_or_else(|| Error::Contract(format!("target {target_tuple} not in trie")))?
                .to_string();
            let ranked: Vec<String> =
                match beam_search_constrained(model, &prompt, trie, layout, vocab, width) {
                    Ok(tuples) => tuples
                        .iter()
                        .filter_map(|(t, _)| trie.item_for(t).map(|s| s.to_string()))
                        .collect(),
                    Err(e) => {
                        log::warn!("beam produced no tuples: {e}");
                        Vec::new()
                    }
                };
            let mut hr = [0.0f64; 3];
            let mut ndcg = [0.0f64; 3];
            for (i, &k) in ks.iter().enumerate() {
                hr[i] = hit_ratio_at_k(&ranked, &target_item, k);
                ndcg[i] = ndcg_at_k(&ranked, &target_item, k);
            }
            let row = PerUserRow {
                user: example.user.clone().unwrap_or_default(),
                rank: ranked.iter().position(|i| *i == target_item).map(|p| p + 1),
                hit3: hr[0],
                hit5: hr[1],
                hit10: hr[2],
            };
            Ok((row, hr, ndcg))
        })
        .collect::<Result<_>>()?;

    let n = rows.len().max(1) as f64;
    let mut hr_sum = [0.0f64; 3];
    let mut ndcg_sum = [0.0f64; 3];
    let mut per_user = Vec::with_capacity(rows.len());
    for (row, hr, ndcg) in rows {
        for i in 0..3 {
            hr_sum[i] += hr[i];
            ndcg_sum[i] += ndcg[i];
        }
        per_user.push(row);
    }
    let report = EvalReport {
        hr: ks
            .iter()
            .zip(hr_sum)
            .map(|(k, s)| (k.to_string(), s / n))
            .collect(),
        ndcg: ks
            .iter()
            .zip(ndcg_sum)
            .map(|(k, s)| (k.to_string(), s / n))
            .collect(),
        acc1: None,
        acc2: None,
        users_evaluated: per_user.len(),
        beam_width: width,
    };
    Ok(RankOutcome { report, per_user })
}

pub fn write_per_user_csv(path: &Path, rows: &[PerUserRow]) -> Result<()> {
    let mut out = String::from("user,rank,hit3,hit5,hit10\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.user,
            r.rank.map(|v| v.to_string()).unwrap_or_default(),
            r.hit3,
            r.hit5,
            r.hit10
        ));
    }
    io::write_atomic(path, out.as_bytes())
}

fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Inputs for one comprehension probe item.
#[derive(Debug, Clone)]
pub struct ProbeItem {
    pub title: String,
    pub tuple: SidTuple,
}

/// Title2SID (constrained beam, top-1 tuple match) and SID2Title
/// (unconstrained beam, top-1 normalized text match) accuracies.
pub fn comprehension_eval(
    model: &Model<f32>,
    items: &[ProbeItem],
    trie: &SidTrie,
    layout: &SidLayout,
    vocab: &Vocabulary,
    width: usize,
    max_title_tokens: usize,
) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Ok((0.0, 0.0));
    }
    let hits: Vec<(u32, u32)> = items
        .par_iter()
        .map(|item| {
            let sid_text = layout.format_tuple(&item.tuple);

            let t2s_prompt = encode(&crate::corpus::render_title2sid(&item.title), vocab);
            let tuples =
                beam_search_constrained(model, &t2s_prompt, trie, layout, vocab, width)?;
            let hit1 = tuples.first().is_some_and(|(t, _)| *t == item.tuple) as u32;

            let s2t_prompt = encode(&crate::corpus::render_sid2title(&sid_text), vocab);
            let texts = beam_search_text(model, &s2t_prompt, vocab, width, max_title_tokens)?;
            let hit2 = texts
                .first()
                .is_some_and(|(ids, _)| {
                    normalize_text(&decode(ids, vocab)) == normalize_text(&item.title)
                }) as u32;
            Ok((hit1, hit2))
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let acc1 = hits.iter().map(|(a, _)| *a as f64).sum::<f64>() / n;
    let acc2 = hits.iter().map(|(_, b)| *b as f64).sum::<f64>() / n;
    Ok((acc1, acc2))
}

/// HR@k ranker over a capped, seeded subset of validation examples; used
/// for the periodic metric during training.
pub fn hr_at_k_ranker<'a>(
    valid_examples: &'a [InstructionExample],
    trie: &'a SidTrie,
    layout: &'a SidLayout,
    vocab: &'a Vocabulary,
    width: usize,
    k: usize,
    cap: usize,
    seed: u64,
) -> impl Fn(&Model<f32>) -> f64 + Sync + 'a {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..valid_examples.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(io::splitmix64(seed ^ 0x8a1d));
    indices.shuffle(&mut rng);
    indices.truncate(cap.max(1));
    indices.sort_unstable();
    move |model: &Model<f32>| {
        let hits: f64 = indices
            .par_iter()
            .map(|&i| {
                let example = &valid_examples[i];
                let prompt = encode(&example.instruction, vocab);
                let Ok(target) = layout.parse_tuple(&example.response) else {
                    return 0.0;
                };
                let Some(target_item) = trie.item_for(&target) else {
                    return 0.0;
                };
                match beam_search_constrained(model, &prompt, trie, layout, vocab, width.max(k)) {
                    Ok(tuples) => {
                        let ranked: Vec<String> = tuples
                            .iter()
                            .filter_map(|(t, _)| trie.item_for(t).map(|s| s.to_string()))
                            .collect();
                        hit_ratio_at_k(&ranked, target_item, k)
                    }
                    Err(_) => 0.0,
                }
            })
            .sum();
        hits / indices.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sidspace::{build_trie, Vocabulary, EOS, UNK};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn tiny_setup(
        counts: Vec<usize>,
        tuples: &[(&str, &[usize])],
        seed: u64,
    ) -> (Model<f32>, SidTrie, SidLayout, Vocabulary) {
        let layout = SidLayout::new(counts).unwrap();
        let sids: BTreeMap<String, SidTuple> = tuples
            .iter()
            .map(|(id, codes)| (id.to_string(), SidTuple { codes: codes.to_vec() }))
            .collect();
        let trie = build_trie(&sids).unwrap();
        let pre = vec![UNK.to_string(), EOS.to_string(), "go".to_string()];
        let vocab = Vocabulary::new(pre, layout.mint_tokens()).unwrap();
        let model = Model::<f32>::new(ModelConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq: 16,
            vocab_size: vocab.len(),
            tie_embeddings: true,
            dropout: 0.0,
            seed,
        })
        .unwrap();
        (model, trie, layout, vocab)
    }

    #[test]
    fn single_item_trie_forces_its_tuple() {
        let (model, trie, layout, vocab) =
            tiny_setup(vec![4, 4, 4], &[("only", &[2, 1, 3])], 5);
        for width in [1usize, 4, 16] {
            let out =
                beam_search_constrained(&model, &[2], &trie, &layout, &vocab, width).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].0.codes, vec![2, 1, 3]);
        }
    }

    #[test]
    fn beam_matches_exhaustive_scoring() {
        // 2x2x2 trie, width 8: order must equal full enumeration scored by
        // independent re-forwarding of every prefix
        for seed in 0..5u64 {
            let tuples: Vec<(String, Vec<usize>)> = (0..8)
                .map(|i| (format!("i{i}"), vec![i / 4, (i / 2) % 2, i % 2]))
                .collect();
            let refs: Vec<(&str, &[usize])> = tuples
                .iter()
                .map(|(n, c)| (n.as_str(), c.as_slice()))
                .collect();
            let (model, trie, layout, vocab) = tiny_setup(vec![2, 2, 2], &refs, seed);
            let prompt = vec![vocab.id("go").unwrap()];
            let beam =
                beam_search_constrained(&model, &prompt, &trie, &layout, &vocab, 8).unwrap();
            assert_eq!(beam.len(), 8);

            // oracle: score every tuple by chaining forward_logits
            let mut oracle: Vec<(SidTuple, f64)> = tuples
                .iter()
                .map(|(_, codes)| {
                    let mut ids = prompt.clone();
                    let mut score = 0.0f64;
                    for (level, &code) in codes.iter().enumerate() {
                        let logp = model.forward_logits(&ids).unwrap();
                        let token = vocab.sid_id(&layout, level, code);
                        score += logp[token as usize];
                        ids.push(token);
                    }
                    (SidTuple { codes: codes.clone() }, score)
                })
                .collect();
            oracle.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
            });

            let got: Vec<&SidTuple> = beam.iter().map(|(t, _)| t).collect();
            let want: Vec<&SidTuple> = oracle.iter().map(|(t, _)| t).collect();
            assert_eq!(got, want, "seed {seed}");
            for (b, o) in beam.iter().zip(&oracle) {
                assert!((b.1 - o.1).abs() < 1e-6, "score drift {} vs {}", b.1, o.1);
            }
        }
    }

    #[test]
    fn beam_returns_only_trie_leaves() {
        let (model, trie, layout, vocab) = tiny_setup(
            vec![4, 4, 4],
            &[("a", &[0, 1, 2]), ("b", &[0, 1, 3]), ("c", &[2, 2, 2])],
            9,
        );
        let out = beam_search_constrained(&model, &[1], &trie, &layout, &vocab, 20).unwrap();
        assert_eq!(out.len(), 3);
        for (tuple, _) in &out {
            assert!(trie.contains(tuple), "hallucinated {tuple}");
        }
        // scores non-increasing
        for w in out.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn metric_closed_forms() {
        let ranked: Vec<String> = (1..=12).map(|i| format!("i{i}")).collect();
        assert_eq!(hit_ratio_at_k(&ranked, "i1", 3), 1.0);
        assert_eq!(hit_ratio_at_k(&ranked, "i4", 3), 0.0);
        assert_eq!(ndcg_at_k(&ranked, "i1", 3), 1.0);
        assert_eq!(ndcg_at_k(&ranked, "i3", 3), 0.5);
        assert_eq!(ndcg_at_k(&ranked, "i11", 10), 0.0);
        assert_eq!(hit_ratio_at_k(&ranked, "missing", 12), 0.0);
    }

    #[test]
    fn metrics_match_bruteforce_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(1..30usize);
            let mut ranked: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
            for i in (1..ranked.len()).rev() {
                let j = rng.gen_range(0..=i);
                ranked.swap(i, j);
            }
            let target = format!("i{}", rng.gen_range(0..n + 3));
            for k in [1usize, 3, 5, 10] {
                // independent recount
                let mut hit = 0.0;
                let mut nd = 0.0;
                for (pos, item) in ranked.iter().enumerate().take(k) {
                    if *item == target {
                        hit = 1.0;
                        nd = 1.0 / ((pos + 2) as f64).log2();
                        break;
                    }
                }
                assert!((hit_ratio_at_k(&ranked, &target, k) - hit).abs() < 1e-12);
                assert!((ndcg_at_k(&ranked, &target, k) - nd).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hr_ndcg_monotonicity_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let ranked: Vec<String> = (0..15).map(|i| format!("i{i}")).collect();
            let target = format!("i{}", rng.gen_range(0..15));
            let hr: Vec<f64> = [3, 5, 10]
                .iter()
                .map(|&k| hit_ratio_at_k(&ranked, &target, k))
                .collect();
            let nd: Vec<f64> = [3, 5, 10]
                .iter()
                .map(|&k| ndcg_at_k(&ranked, &target, k))
                .collect();
            assert!(hr[0] <= hr[1] && hr[1] <= hr[2]);
            for i in 0..3 {
                assert!(nd[i] <= hr[i]);
                assert!((0.0..=1.0).contains(&nd[i]));
            }
        }
    }

    #[test]
    fn text_beam_stops_at_eos_and_orders_scores() {
        let (model, _, _, vocab) = tiny_setup(vec![2, 2, 2], &[("x", &[0, 0, 0])], 3);
        let out = beam_search_text(&model, &[1, 2], &vocab, 4, 6).unwrap();
        assert_eq!(out.len(), 4);
        for w in out.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        for (ids, _) in &out {
            assert!(ids.len() <= 6);
            assert!(ids.iter().all(|&i| i != vocab.eos_id()));
        }
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            hr: [("3".to_string(), 0.1), ("5".to_string(), 0.2)].into(),
            ndcg: [("3".to_string(), 0.05)].into(),
            acc1: Some(0.5),
            acc2: None,
            users_evaluated: 10,
            beam_width: 20,
        };
        let path = dir.path().join("report.json");
        report.write(&path).unwrap();
        let back = EvalReport::read(&path).unwrap();
        assert_eq!(back.hr["3"], 0.1);
        assert_eq!(back.acc1, Some(0.5));
        assert_eq!(back.acc2, None);
        assert_eq!(back.beam_width, 20);
    }
}
