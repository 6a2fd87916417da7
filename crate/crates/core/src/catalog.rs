//! Dataset loading, validation, chronological splitting and the
//! user/item/attribute graph.
//!
//! External ids are interned to dense indices in sorted order (users, items,
//! attributes each sorted by external id). Graph node indices place users
//! first, then items, then attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Tsv,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(format!("unknown data format `{other}` (expected jsonl or tsv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub ts: i64,
}

/// Users, items, attributes and timestamped interactions over dense indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub ids: IdMap,
    /// `item_attrs[v]` is the sorted, non-empty attribute set of item `v`.
    pub item_attrs: Vec<Vec<usize>>,
    /// Per-user interactions, sorted non-decreasing by timestamp.
    pub interactions: Vec<Vec<Interaction>>,
}

/// Dense index ↔ external id mapping; index `i` is position `i` in each list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub attributes: Vec<String>,
}

impl IdMap {
    fn lookup(list: &[String], kind: &'static str, id: &str) -> Result<usize> {
        list.binary_search_by(|probe| probe.as_str().cmp(id))
            .map_err(|_| Error::UnknownId { kind, id: id.to_string() })
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        Self::lookup(&self.users, "user", id)
    }

    pub fn item(&self, id: &str) -> Result<usize> {
        Self::lookup(&self.items, "item", id)
    }

    pub fn attribute(&self, id: &str) -> Result<usize> {
        Self::lookup(&self.attributes, "attribute", id)
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Interaction { user: String, item: String, ts: i64 },
    Item { item: String, attrs: Vec<String> },
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum RecordOut<'a> {
    Item { item: &'a str, attrs: Vec<&'a str> },
    Interaction { user: &'a str, item: &'a str, ts: i64 },
}

fn parse_line(line: &str, lineno: usize, format: DataFormat) -> Result<Record> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    match format {
        DataFormat::Jsonl => serde_json::from_str(line).map_err(|e| err(e.to_string())),
        DataFormat::Tsv => {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["interaction", user, item, ts] => Ok(Record::Interaction {
                    user: user.to_string(),
                    item: item.to_string(),
                    ts: ts.trim().parse().map_err(|e| err(format!("bad timestamp `{ts}`: {e}")))?,
                }),
                ["item", item, attrs] => Ok(Record::Item {
                    item: item.to_string(),
                    attrs: attrs.split(',').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect(),
                }),
                ["item", item] => Ok(Record::Item { item: item.to_string(), attrs: Vec::new() }),
                _ => Err(err(format!("unrecognized record `{line}`"))),
            }
        }
    }
}

/// Loads and validates a dataset file.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Catalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format)
}

pub fn parse_dataset(text: &str, format: DataFormat) -> Result<Catalog> {
    let mut item_attrs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut interactions: Vec<(String, String, i64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1, format)? {
            Record::Interaction { user, item, ts } => interactions.push((user, item, ts)),
            Record::Item { item, attrs } => {
                if item_attrs.contains_key(&item) {
                    return Err(Error::Parse { line: i + 1, msg: format!("duplicate item record `{item}`") });
                }
                item_attrs.insert(item, attrs.into_iter().collect());
            }
        }
    }
    Catalog::from_raw(item_attrs, interactions)
}

impl Catalog {
    /// Builds a validated catalog from external-id records. Interactions keep
    /// their input order among equal timestamps.
    pub fn from_raw(item_attrs: BTreeMap<String, BTreeSet<String>>, interactions: Vec<(String, String, i64)>) -> Result<Self> {
        if let Some((item, _)) = item_attrs.iter().find(|(_, a)| a.is_empty()) {
            return Err(Error::Validation(format!("item `{item}` has an empty attribute set")));
        }
        let attributes: BTreeSet<&String> = item_attrs.values().flatten().collect();
        let users: BTreeSet<&String> = interactions.iter().map(|(u, _, _)| u).collect();
        let ids = IdMap {
            users: users.into_iter().cloned().collect(),
            items: item_attrs.keys().cloned().collect(),
            attributes: attributes.into_iter().cloned().collect(),
        };
        let item_attr_idx = item_attrs
            .values()
            .map(|attrs| attrs.iter().map(|a| ids.attribute(a)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut per_user = vec![Vec::new(); ids.users.len()];
        for (u, v, ts) in &interactions {
            let item = ids.item(v).map_err(|_| Error::Validation(format!("interaction references unknown item `{v}`")))?;
            per_user[ids.user(u)?].push(Interaction { item, ts: *ts });
        }
        for list in &mut per_user {
            list.sort_by_key(|x| x.ts);
        }
        let catalog = Catalog { ids, item_attrs: item_attr_idx, interactions: per_user };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let (n_items, n_attrs) = (self.n_items(), self.n_attrs());
        if self.item_attrs.len() != n_items {
            return Err(Error::Validation("item_attrs length differs from item count".into()));
        }
        for (v, attrs) in self.item_attrs.iter().enumerate() {
            if attrs.is_empty() {
                return Err(Error::Validation(format!("item `{}` has an empty attribute set", self.ids.items[v])));
            }
            if attrs.iter().any(|&a| a >= n_attrs) || attrs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("item `{}` has invalid attribute indices", self.ids.items[v])));
            }
        }
        if self.interactions.len() != self.n_users() {
            return Err(Error::Validation("interaction table length differs from user count".into()));
        }
        for (u, list) in self.interactions.iter().enumerate() {
            if list.iter().any(|x| x.item >= n_items) {
                return Err(Error::Validation(format!("user `{}` references an unknown item", self.ids.users[u])));
            }
            if list.windows(2).any(|w| w[0].ts > w[1].ts) {
                return Err(Error::Validation(format!("user `{}` interactions are not chronological", self.ids.users[u])));
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.ids.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.ids.items.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.ids.attributes.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }

    /// Chronological item list of user `u`.
    pub fn user_items(&self, u: usize) -> Vec<usize> {
        self.interactions[u].iter().map(|x| x.item).collect()
    }

    pub fn item_has_attr(&self, v: usize, a: usize) -> bool {
        self.item_attrs[v].binary_search(&a).is_ok()
    }

    /// Inverse of `item_attrs`: for each attribute, the sorted items carrying it.
    pub fn attr_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_attrs()];
        for (v, attrs) in self.item_attrs.iter().enumerate() {
            for &a in attrs {
                out[a].push(v);
            }
        }
        out
    }

    /// Same vocabulary, different interactions.
    fn with_interactions(&self, interactions: Vec<Vec<Interaction>>) -> Catalog {
        Catalog { ids: self.ids.clone(), item_attrs: self.item_attrs.clone(), interactions }
    }

    /// Writes the catalog in the JSONL exchange format (items first, then
    /// interactions user by user).
    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        for (v, attrs) in self.item_attrs.iter().enumerate() {
            let rec = RecordOut::Item {
                item: &self.ids.items[v],
                attrs: attrs.iter().map(|&a| self.ids.attributes[a].as_str()).collect(),
            };
            serde_json::to_writer(&mut out, &rec).expect("serialize");
            out.push(b'\n');
        }
        for (u, list) in self.interactions.iter().enumerate() {
            for x in list {
                let rec = RecordOut::Interaction { user: &self.ids.users[u], item: &self.ids.items[x.item], ts: x.ts };
                serde_json::to_writer(&mut out, &rec).expect("serialize");
                out.push(b'\n');
            }
        }
        String::from_utf8(out).expect("utf8")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Train/validation/test catalogs sharing one vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCatalog {
    pub train: Catalog,
    pub valid: Catalog,
    pub test: Catalog,
}

/// Per-user chronological split. Equal timestamps are ordered randomly
/// (seeded); users with fewer than three interactions stay entirely in train.
/// When a ratio is positive each of valid/test receives at least one interaction.
pub fn split_interactions(catalog: &Catalog, ratios: [f64; 3], seed: u64) -> Result<SplitCatalog> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut train = Vec::with_capacity(catalog.n_users());
    let mut valid = Vec::with_capacity(catalog.n_users());
    let mut test = Vec::with_capacity(catalog.n_users());
    for (u, list) in catalog.interactions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut list = list.clone();
        for group in list.chunk_by_mut(|a, b| a.ts == b.ts) {
            group.shuffle(&mut rng);
        }
        let n = list.len();
        let (n_valid, n_test) = if n < 3 {
            (0, 0)
        } else {
            let count = |r: f64| if r > 0.0 { ((r * n as f64).round() as usize).max(1) } else { 0 };
            let (nv, nt) = (count(ratios[1]), count(ratios[2]));
            if nv + nt >= n {
                (usize::from(ratios[1] > 0.0), usize::from(ratios[2] > 0.0))
            } else {
                (nv, nt)
            }
        };
        let n_train = n - n_valid - n_test;
        let te = list.split_off(n_train + n_valid);
        let va = list.split_off(n_train);
        train.push(list);
        valid.push(va);
        test.push(te);
    }
    Ok(SplitCatalog {
        train: catalog.with_interactions(train),
        valid: catalog.with_interactions(valid),
        test: catalog.with_interactions(test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    User,
    Item,
    Attribute,
}

/// Tri-partite user/item/attribute graph built from training interactions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    /// Distinct `(user, item)` pairs, sorted.
    pub edges_uv: Vec<(usize, usize)>,
    /// `(attribute, item)` pairs, sorted.
    pub edges_av: Vec<(usize, usize)>,
}

impl HeteroGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items + self.n_attrs
    }

    pub fn user_node(&self, u: usize) -> usize {
        u
    }

    pub fn item_node(&self, v: usize) -> usize {
        self.n_users + v
    }

    pub fn attr_node(&self, a: usize) -> usize {
        self.n_users + self.n_items + a
    }

    pub fn node_kind(&self, n: usize) -> NodeKind {
        if n < self.n_users {
            NodeKind::User
        } else if n < self.n_users + self.n_items {
            NodeKind::Item
        } else {
            NodeKind::Attribute
        }
    }
}

pub fn build_graph(train: &Catalog) -> HeteroGraph {
    let edges_uv: BTreeSet<(usize, usize)> = train
        .interactions
        .iter()
        .enumerate()
        .flat_map(|(u, list)| list.iter().map(move |x| (u, x.item)))
        .collect();
    let edges_av: BTreeSet<(usize, usize)> =
        train.item_attrs.iter().enumerate().flat_map(|(v, attrs)| attrs.iter().map(move |&a| (a, v))).collect();
    HeteroGraph {
        n_users: train.n_users(),
        n_items: train.n_items(),
        n_attrs: train.n_attrs(),
        edges_uv: edges_uv.into_iter().collect(),
        edges_av: edges_av.into_iter().collect(),
    }
}
