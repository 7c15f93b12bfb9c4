//! Seeded synthetic catalog, interaction log, item embeddings, and word
//! table for self-contained runs. Items carry latent category/subcategory
//! structure; item embeddings are category centroids plus noise; titles
//! name the category, subcategory, and a unique serial; and the word table
//! shares geometry with the item-embedding space through a fixed random
//! projection, so keyword mean pooling recovers real cluster structure.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{
    write_catalog, write_interactions, write_text_embeddings, EmbeddingMatrix, InteractionLog,
    Item, ItemCatalog,
};
use crate::error::Result;
use crate::init::EmbeddingTable;
use crate::io;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub items: usize,
    pub users: usize,
    pub categories: usize,
    pub subcats_per_category: usize,
    pub item_emb_dim: usize,
    pub table_dim: usize,
    pub seq_min: usize,
    pub seq_max: usize,
    /// Probability that an event stays within the user's preferred
    /// category.
    pub prefer_prob: f64,
    /// Within-category popularity skew (0 = uniform).
    pub zipf_exponent: f64,
    /// Every n-th item gets an empty description.
    pub empty_description_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            items: 200,
            users: 500,
            categories: 6,
            subcats_per_category: 4,
            item_emb_dim: 16,
            table_dim: 64,
            seq_min: 7,
            seq_max: 14,
            prefer_prob: 0.8,
            zipf_exponent: 0.7,
            empty_description_every: 7,
            seed: 7,
        }
    }
}

// geometry scales: anchors in item-embedding space, words mapped into the
// table space by a fixed projection
const SUB_SCALE: f64 = 0.55;
const ITEM_SCALE: f64 = 0.3;
const EMB_NOISE: f64 = 0.07;
const WORD_PROJ_SCALE: f64 = 0.35;
const WORD_NOISE: f64 = 0.02;
const GENERIC_WORD_STD: f64 = 0.03;

const CATEGORY_NAMES: [&str; 12] = [
    "lumber", "optics", "textile", "circuit", "garden", "marine", "alpine", "archive", "foundry",
    "orchard", "saddle", "quarry",
];

const SYLLABLES: [&str; 20] = [
    "ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ta", "ve", "zo", "fen", "gar", "hel",
    "jun", "mor", "pli", "tru", "wex",
];

const GENERIC_WORDS: [&str; 8] = ["pro", "kit", "set", "duty", "grade", "series", "line", "works"];

#[derive(Debug, Clone)]
pub struct SynthData {
    pub catalog: ItemCatalog,
    pub log: InteractionLog,
    pub item_embeddings: EmbeddingMatrix,
    pub table: EmbeddingTable,
}

fn gauss_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std >= 0");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gauss_vec(rng, dim, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..4usize);
        let word: String = (0..n)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if used.insert(word.clone()) {
            return word;
        }
    }
}

/// Deterministic generation of the full synthetic dataset.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(io::splitmix64(cfg.seed ^ 0x5e_17b0));
    let g = cfg.categories.min(CATEGORY_NAMES.len());
    let s = cfg.subcats_per_category.max(1);
    let dq = cfg.item_emb_dim;
    let dt = cfg.table_dim;

    // latent geometry
    let cat_anchor: Vec<Vec<f64>> = (0..g).map(|_| unit_vec(&mut rng, dq)).collect();
    let sub_anchor: Vec<Vec<Vec<f64>>> = (0..g)
        .map(|_| (0..s).map(|_| unit_vec(&mut rng, dq)).collect())
        .collect();
    // fixed projection from item-embedding space into the word-table space
    let proj: Vec<f64> = gauss_vec(&mut rng, dt * dq, 1.0 / (dq as f64).sqrt());
    let project = |concept: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut out = gauss_vec(rng, dt, WORD_NOISE);
        for (r, slot) in out.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..dq {
                dot += proj[r * dq + c] * concept[c];
            }
            *slot += WORD_PROJ_SCALE * dot;
        }
        out
    };

    // words: category names are real words, subcategory and extra theme
    // words are generated, serials are per item
    let mut used: BTreeSet<String> = CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
    used.extend(GENERIC_WORDS.iter().map(|s| s.to_string()));
    let sub_word: Vec<Vec<String>> = (0..g)
        .map(|_| (0..s).map(|_| pseudo_word(&mut rng, &mut used)).collect())
        .collect();
    let extra_words: Vec<Vec<Vec<String>>> = (0..g)
        .map(|_| {
            (0..s)
                .map(|_| (0..2).map(|_| pseudo_word(&mut rng, &mut used)).collect())
                .collect()
        })
        .collect();

    // items
    let mut items = Vec::with_capacity(cfg.items);
    let mut emb = Vec::with_capacity(cfg.items * dq);
    let mut item_dirs: Vec<Vec<f64>> = Vec::with_capacity(cfg.items);
    for idx in 0..cfg.items {
        let cat = idx % g;
        let sub = (idx / g) % s;
        let dir = unit_vec(&mut rng, dq);
        let noise = gauss_vec(&mut rng, dq, EMB_NOISE);
        for c in 0..dq {
            let v = cat_anchor[cat][c]
                + SUB_SCALE * sub_anchor[cat][sub][c]
                + ITEM_SCALE * dir[c]
                + noise[c];
            emb.push(v as f32);
        }
        item_dirs.push(dir);

        let serial = format!("sn{idx:04}");
        let extra = &extra_words[cat][sub][idx % 2];
        let generic = GENERIC_WORDS[idx % GENERIC_WORDS.len()];
        let title = format!(
            "{} {} {} {} {}",
            CATEGORY_NAMES[cat], sub_word[cat][sub], extra, generic, serial
        );
        let description = if cfg.empty_description_every > 0
            && idx % cfg.empty_description_every == cfg.empty_description_every - 1
        {
            String::new()
        } else {
            format!(
                "durable {} {} {} built for {} work",
                sub_word[cat][sub],
                extra_words[cat][sub][(idx + 1) % 2],
                generic,
                CATEGORY_NAMES[cat]
            )
        };
        items.push(Item {
            item_id: format!("i{idx:04}"),
            title,
            description,
            brand: Some(format!("brand{}", idx % 5)),
            categories: Some(CATEGORY_NAMES[cat].to_string()),
        });
    }

    // word table: every word that appears in titles/descriptions plus the
    // template vocabulary gets a vector; theme words carry projected
    // concept geometry, the rest are small noise
    let mut words: Vec<(String, Vec<f64>)> = Vec::new();
    for (c, anchor) in cat_anchor.iter().enumerate().take(g) {
        words.push((CATEGORY_NAMES[c].to_string(), project(anchor, &mut rng)));
        for (su, sw) in sub_word[c].iter().enumerate() {
            let mut concept = vec![0.0; dq];
            for i in 0..dq {
                concept[i] = anchor[i] * 0.4 + SUB_SCALE * sub_anchor[c][su][i];
            }
            words.push((sw.clone(), project(&concept, &mut rng)));
            for ew in &extra_words[c][su] {
                words.push((ew.clone(), project(&concept, &mut rng)));
            }
        }
    }
    for (idx, dir) in item_dirs.iter().enumerate() {
        let mut concept = vec![0.0; dq];
        for i in 0..dq {
            concept[i] = ITEM_SCALE * dir[i] / ITEM_SCALE.max(1e-9) * 0.8;
        }
        words.push((format!("sn{idx:04}"), project(&concept, &mut rng)));
    }
    for w in GENERIC_WORDS {
        words.push((w.to_string(), gauss_vec(&mut rng, dt, GENERIC_WORD_STD)));
    }
    for w in ["durable", "built", "for", "work"] {
        words.push((w.to_string(), gauss_vec(&mut rng, dt, GENERIC_WORD_STD)));
    }
    let table_words: Vec<String> = words.iter().map(|(w, _)| w.clone()).collect();
    let table_data: Vec<f32> = words
        .iter()
        .flat_map(|(_, v)| v.iter().map(|x| *x as f32))
        .collect();
    let table = EmbeddingTable::new(table_words, dt, table_data)?;

    // per-category item pools with zipf popularity
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); g];
    for idx in 0..cfg.items {
        by_cat[idx % g].push(idx);
    }
    let zipf_weights = |pool: &[usize]| -> Vec<f64> {
        pool.iter()
            .enumerate()
            .map(|(rank, _)| 1.0 / ((rank + 1) as f64).powf(cfg.zipf_exponent))
            .collect()
    };
    let cat_weights: Vec<Vec<f64>> = by_cat.iter().map(|p| zipf_weights(p)).collect();
    let draw_weighted = |weights: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = weights.iter().sum();
        let mut dart = rng.gen_range(0.0..total);
        for (i, w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    };

    // interactions: each user prefers one category
    let mut events = Vec::new();
    for u in 0..cfg.users {
        let preferred = rng.gen_range(0..g);
        let len = rng.gen_range(cfg.seq_min..=cfg.seq_max);
        for j in 0..len {
            let item_idx = if rng.gen_range(0.0..1.0) < cfg.prefer_prob {
                let pool = &by_cat[preferred];
                pool[draw_weighted(&cat_weights[preferred], &mut rng)]
            } else {
                rng.gen_range(0..cfg.items)
            };
            events.push((
                format!("u{u:04}"),
                format!("i{item_idx:04}"),
                (u as i64) * 100_000 + (j as i64) * 10,
            ));
        }
    }

    let catalog = ItemCatalog {
        items: items
            .into_iter()
            .map(|item| (item.item_id.clone(), item))
            .collect(),
        sequences: Default::default(),
    };
    let item_order: Vec<String> = catalog.items.keys().cloned().collect();
    let item_embeddings = EmbeddingMatrix::new(dq, item_order, emb)?;

    Ok(SynthData {
        catalog,
        log: InteractionLog { events },
        item_embeddings,
        table,
    })
}

/// Standard artifact names inside a synth directory.
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const ITEM_EMBEDDINGS_FILE: &str = "item_embeddings.txt";
pub const WORD_TABLE_FILE: &str = "word_vectors.txt";

pub fn write_all(dir: &Path, data: &SynthData) -> Result<()> {
    write_catalog(&dir.join(CATALOG_FILE), &data.catalog)?;
    write_interactions(&dir.join(INTERACTIONS_FILE), &data.log)?;
    write_text_embeddings(&dir.join(ITEM_EMBEDDINGS_FILE), &data.item_embeddings)?;
    data.table.write(&dir.join(WORD_TABLE_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::filter_and_sequence;
    use crate::quantizer::{kmeans_fit, QuantizerConfig};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            items: 60,
            users: 80,
            categories: 4,
            subcats_per_category: 2,
            item_emb_dim: 8,
            table_dim: 16,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.catalog.items.len(), b.catalog.items.len());
        assert_eq!(a.log.events, b.log.events);
        assert_eq!(a.item_embeddings.data(), b.item_embeddings.data());
        let (ta, tb) = (a.table, b.table);
        assert_eq!(ta.words(), tb.words());
        for i in 0..ta.len() {
            assert_eq!(ta.row(i), tb.row(i));
        }
    }

    #[test]
    fn titles_are_unique_and_structured() {
        let data = generate(&small_cfg()).unwrap();
        let titles: BTreeSet<&str> = data
            .catalog
            .items
            .values()
            .map(|i| i.title.as_str())
            .collect();
        assert_eq!(titles.len(), data.catalog.items.len());
        for item in data.catalog.items.values() {
            assert!(item.title.contains(item.categories.as_deref().unwrap()));
            assert!(item.title.contains(&item.item_id[1..]));
        }
    }

    #[test]
    fn filtering_keeps_most_of_the_catalog() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let filtered = filter_and_sequence(&data.log, &data.catalog, 5).unwrap();
        assert!(filtered.n_users() >= cfg.users * 9 / 10, "{}", filtered.n_users());
        assert!(filtered.n_items() >= cfg.items * 6 / 10, "{}", filtered.n_items());
        for seq in filtered.sequences.values() {
            assert!(seq.len() >= 5);
        }
    }

    #[test]
    fn level_one_clusters_recover_categories() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let fit = kmeans_fit(
            data.item_embeddings.data(),
            cfg.item_emb_dim,
            cfg.categories,
            &QuantizerConfig {
                seed: 3,
                ..QuantizerConfig::default()
            },
        )
        .unwrap();
        // majority category purity per cluster
        let mut purity_total = 0usize;
        for c in 0..cfg.categories {
            let members: Vec<usize> = fit
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == c)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut counts = vec![0usize; cfg.categories];
            for &m in &members {
                let id = &data.item_embeddings.item_order[m];
                let idx: usize = id[1..].parse().unwrap();
                counts[idx % cfg.categories] += 1;
            }
            purity_total += counts.iter().max().unwrap();
        }
        let purity = purity_total as f64 / cfg.items as f64;
        assert!(purity > 0.9, "cluster/category purity {purity}");
    }

    #[test]
    fn word_table_covers_title_vocabulary() {
        let data = generate(&small_cfg()).unwrap();
        for item in data.catalog.items.values() {
            for word in item.title.split_whitespace() {
                assert!(data.table.lookup(word).is_some(), "missing vector for {word}");
            }
        }
    }

    #[test]
    fn files_roundtrip_through_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small_cfg()).unwrap();
        write_all(dir.path(), &data).unwrap();
        let catalog = crate::catalog::load_catalog(&dir.path().join(CATALOG_FILE)).unwrap();
        assert_eq!(catalog.n_items(), data.catalog.n_items());
        let log =
            crate::catalog::load_interactions(&dir.path().join(INTERACTIONS_FILE), &catalog)
                .unwrap();
        assert_eq!(log.events.len(), data.log.events.len());
        let emb =
            crate::catalog::load_embeddings(&dir.path().join(ITEM_EMBEDDINGS_FILE), &catalog)
                .unwrap();
        assert_eq!(emb.dim, data.item_embeddings.dim);
        let table = EmbeddingTable::load(&dir.path().join(WORD_TABLE_FILE)).unwrap();
        assert_eq!(table.len(), data.table.len());
    }
}
