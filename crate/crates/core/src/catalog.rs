//! Item metadata, dense item embeddings, and user interaction logs.
//!
//! File formats:
//! - catalog: UTF-8 JSONL, keys `item_id`, `title`, `description` (optional
//!   `brand`, `categories`);
//! - interactions: UTF-8 JSONL, keys `user_id`, `item_id`, `timestamp`
//!   (integer seconds);
//! - embeddings: text header `n_items dim`, then `item_id v1 ... v_dim` per
//!   line; or a binary variant with a 16-byte magic+dims header and f32
//!   little-endian rows (rows follow the catalog's item ids in sorted order).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SIDEMB1\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user: u64,
    pub item: u32,
    pub timestamp: i64,
}

/// Interaction events with user/item ids interned against a catalog.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub events: Vec<(String, String, i64)>,
}

/// Items plus per-user chronological sequences.
#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    pub items: BTreeMap<String, Item>,
    pub sequences: BTreeMap<String, Vec<String>>,
}

impl ItemCatalog {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    /// Item ids in sorted order; the canonical row order for binary
    /// embedding files and collision resolution.
    pub fn sorted_item_ids(&self) -> Vec<String> {
        self.items.keys().cloned().collect()
    }
}

/// Dense item embeddings, rows aligned to `item_order`.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub item_order: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, item_order: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("embedding dim must be > 0".into()));
        }
        if data.len() != dim * item_order.len() {
            return Err(Error::DimMismatch {
                expected: dim * item_order.len(),
                got: data.len(),
            });
        }
        Ok(Self {
            dim,
            item_order,
            data,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_order.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Parse a catalog JSONL file. Duplicate item ids and empty titles are
/// rejected; empty descriptions are kept.
pub fn load_catalog(path: &Path) -> Result<ItemCatalog> {
    let text = io::read_to_string(path)?;
    let display = path.display().to_string();
    let mut items = BTreeMap::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(line)
            .map_err(|e| Error::parse(&display, idx + 1, e.to_string()))?;
        if item.title.trim().is_empty() {
            return Err(Error::parse(&display, idx + 1, "empty title"));
        }
        if let Some(&first) = first_line.get(&item.item_id) {
            return Err(Error::DuplicateItem {
                id: item.item_id,
                first_line: first,
            });
        }
        first_line.insert(item.item_id.clone(), idx + 1);
        items.insert(item.item_id.clone(), item);
    }
    Ok(ItemCatalog {
        items,
        sequences: BTreeMap::new(),
    })
}

pub fn write_catalog(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let items: Vec<&Item> = catalog.items.values().collect();
    io::write_jsonl(path, &items)
}

#[derive(Debug, Deserialize, Serialize)]
struct RawEvent {
    user_id: String,
    item_id: String,
    timestamp: i64,
}

/// Parse an interaction JSONL file, validating that every event's item is
/// present in the catalog.
pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let rows: Vec<RawEvent> = io::read_jsonl(path)?;
    let display = path.display().to_string();
    let mut events = Vec::with_capacity(rows.len());
    for (idx, row) in rows.into_iter().enumerate() {
        if !catalog.items.contains_key(&row.item_id) {
            return Err(Error::parse(
                &display,
                idx + 1,
                format!("event references unknown item {}", row.item_id),
            ));
        }
        events.push((row.user_id, row.item_id, row.timestamp));
    }
    Ok(InteractionLog { events })
}

pub fn write_interactions(path: &Path, log: &InteractionLog) -> Result<()> {
    let rows: Vec<RawEvent> = log
        .events
        .iter()
        .map(|(u, i, t)| RawEvent {
            user_id: u.clone(),
            item_id: i.clone(),
            timestamp: *t,
        })
        .collect();
    io::write_jsonl(path, &rows)
}

/// Iteratively drop users and items with fewer than `min_count`
/// interactions until a fixpoint, then build chronological sequences
/// (timestamp ties broken by input order).
pub fn filter_and_sequence(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    min_count: usize,
) -> Result<ItemCatalog> {
    if min_count < 1 {
        return Err(Error::Contract("min_count must be >= 1".into()));
    }
    let mut live: Vec<bool> = vec![true; log.events.len()];
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (i, (user, item, _)) in log.events.iter().enumerate() {
            if live[i] {
                *user_counts.entry(user.as_str()).or_insert(0) += 1;
                *item_counts.entry(item.as_str()).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for (i, (user, item, _)) in log.events.iter().enumerate() {
            if live[i]
                && (user_counts[user.as_str()] < min_count
                    || item_counts[item.as_str()] < min_count)
            {
                live[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut per_user: BTreeMap<String, Vec<(i64, usize, String)>> = BTreeMap::new();
    let mut kept_items: HashSet<&str> = HashSet::new();
    for (i, (user, item, ts)) in log.events.iter().enumerate() {
        if live[i] {
            kept_items.insert(item.as_str());
            per_user
                .entry(user.clone())
                .or_default()
                .push((*ts, i, item.clone()));
        }
    }

    let mut sequences = BTreeMap::new();
    for (user, mut events) in per_user {
        events.sort_by_key(|(ts, input_idx, _)| (*ts, *input_idx));
        sequences.insert(user, events.into_iter().map(|(_, _, item)| item).collect());
    }

    let items = catalog
        .items
        .iter()
        .filter(|(id, _)| kept_items.contains(id.as_str()))
        .map(|(id, item)| (id.clone(), item.clone()))
        .collect();

    Ok(ItemCatalog { items, sequences })
}

/// Load embeddings (text or binary container) and check catalog coverage.
/// Rows for items outside the catalog are dropped; missing catalog items
/// are an error.
pub fn load_embeddings(path: &Path, catalog: &ItemCatalog) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let matrix = if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_binary_embeddings(path, &bytes, catalog)?
    } else {
        parse_text_embeddings(path, &bytes, catalog)?
    };
    let covered: HashSet<&str> = matrix.item_order.iter().map(|s| s.as_str()).collect();
    let missing: Vec<String> = catalog
        .items
        .keys()
        .filter(|id| !covered.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::EmbeddingCoverage { missing });
    }
    Ok(matrix)
}

fn parse_text_embeddings(
    path: &Path,
    bytes: &[u8],
    catalog: &ItemCatalog,
) -> Result<EmbeddingMatrix> {
    let display = path.display().to_string();
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::parse(&display, 1, "embedding file is not utf-8"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&display, 1, "empty embedding file"))?;
    let mut parts = header.split_whitespace();
    let n_items: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(&display, 1, "header must be 'n_items dim'"))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(&display, 1, "header must be 'n_items dim'"))?;
    if dim == 0 {
        return Err(Error::parse(&display, 1, "dim must be > 0"));
    }

    let mut item_order = Vec::new();
    let mut data = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .ok_or_else(|| Error::parse(&display, idx + 1, "missing item id"))?
            .to_string();
        let values: Vec<f32> = fields
            .map(|f| {
                f.parse::<f32>()
                    .map_err(|e| Error::parse(&display, idx + 1, e.to_string()))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                &display,
                idx + 1,
                format!("expected {dim} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("embedding row for {id}"),
                row: rows - 1,
            });
        }
        if !catalog.items.contains_key(&id) {
            continue;
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse(
                &display,
                idx + 1,
                format!("duplicate embedding row for {id}"),
            ));
        }
        item_order.push(id);
        data.extend_from_slice(&values);
    }
    if rows != n_items {
        return Err(Error::parse(
            &display,
            1,
            format!("header declares {n_items} rows, file has {rows}"),
        ));
    }
    EmbeddingMatrix::new(dim, item_order, data)
}

fn parse_binary_embeddings(
    path: &Path,
    bytes: &[u8],
    catalog: &ItemCatalog,
) -> Result<EmbeddingMatrix> {
    let display = path.display().to_string();
    if bytes.len() < 16 {
        return Err(Error::parse(&display, 1, "truncated binary header"));
    }
    let n_items = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::parse(&display, 1, "dim must be > 0"));
    }
    let expected = 16 + n_items * dim * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            &display,
            1,
            format!("expected {expected} bytes, file has {}", bytes.len()),
        ));
    }
    // Binary rows carry no ids; they follow the catalog's sorted item order.
    let item_order = catalog.sorted_item_ids();
    if item_order.len() != n_items {
        return Err(Error::parse(
            &display,
            1,
            format!(
                "binary file has {n_items} rows but catalog has {} items",
                item_order.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(n_items * dim);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    for (row_idx, row) in data.chunks_exact(dim).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "binary embedding".into(),
                row: row_idx,
            });
        }
    }
    EmbeddingMatrix::new(dim, item_order, data)
}

pub fn write_text_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", matrix.n_items(), matrix.dim));
    for (i, id) in matrix.item_order.iter().enumerate() {
        out.push_str(id);
        for v in matrix.row(i) {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())
}

pub fn write_binary_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + matrix.data().len() * 4);
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&(matrix.n_items() as u32).to_le_bytes());
    bytes.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    for v in matrix.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::io::write_atomic(path, &bytes)
}
