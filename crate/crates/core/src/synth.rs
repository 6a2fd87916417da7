//! Synthetic catalogs: a genre-structured benchmark with persistent short-term
//! tastes, and a small noise-free catalog where attribute sets identify items.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    /// Non-genre attributes.
    pub features: usize,
    /// Features characteristic of each genre.
    pub features_per_genre: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that the next interaction keeps the current taste.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            users: 200,
            items: 500,
            genres: 6,
            features: 24,
            features_per_genre: 6,
            min_interactions: 15,
            max_interactions: 30,
            persistence: 0.7,
            seed: 5,
        }
    }
}

fn attr_name(a: usize, genres: usize) -> String {
    if a < genres {
        format!("genre{a:02}")
    } else {
        format!("feat{:02}", a - genres)
    }
}

/// Items carry one genre plus two features from that genre's pool and
/// sometimes one unrelated feature. Users hold a few favourite genres and a
/// current taste `(genre, feature)` that persists across consecutive
/// interactions.
pub fn benchmark_catalog(cfg: &BenchmarkConfig) -> Result<Catalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_attrs = cfg.genres + cfg.features;
    let pool = |g: usize| -> Vec<usize> { (0..cfg.features_per_genre).map(|j| cfg.genres + (g * (cfg.features / cfg.genres) + j) % cfg.features).collect() };

    let mut item_sets: Vec<BTreeSet<usize>> = Vec::with_capacity(cfg.items);
    for _ in 0..cfg.items {
        let g = rng.random_range(0..cfg.genres);
        let mut set: BTreeSet<usize> = [g].into();
        set.extend(pool(g).choose_multiple(&mut rng, 2));
        if rng.random_bool(0.5) {
            set.insert(rng.random_range(cfg.genres..n_attrs));
        }
        item_sets.push(set);
    }
    let by_genre_feature = |g: usize, f: usize| -> Vec<usize> { (0..cfg.items).filter(|&v| item_sets[v].contains(&g) && item_sets[v].contains(&f)).collect() };

    let mut interactions = Vec::new();
    for u in 0..cfg.users {
        let favourites: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.genres, 2).into_iter().collect();
        let n = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let mut seen = BTreeSet::new();
        let mut taste: Option<(usize, usize)> = None;
        let mut ts = 0i64;
        while seen.len() < n {
            let keep = taste.is_some() && rng.random_bool(cfg.persistence);
            if !keep {
                let g = if rng.random_bool(0.8) { *favourites.choose(&mut rng).expect("two favourites") } else { rng.random_range(0..cfg.genres) };
                taste = Some((g, *pool(g).choose(&mut rng).expect("non-empty pool")));
            }
            let (g, f) = taste.expect("taste set");
            let mut options: Vec<usize> = by_genre_feature(g, f).into_iter().filter(|v| !seen.contains(v)).collect();
            if options.is_empty() {
                options = (0..cfg.items).filter(|&v| item_sets[v].contains(&g) && !seen.contains(&v)).collect();
            }
            let Some(&v) = options.choose(&mut rng) else {
                taste = None;
                continue;
            };
            seen.insert(v);
            interactions.push((format!("user{u:04}"), format!("item{v:04}"), ts));
            ts += 1;
        }
    }
    let item_attrs: BTreeMap<String, BTreeSet<String>> =
        item_sets.iter().enumerate().map(|(v, s)| (format!("item{v:04}"), s.iter().map(|&a| attr_name(a, cfg.genres)).collect())).collect();
    Catalog::from_raw(item_attrs, interactions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFreeConfig {
    pub users: usize,
    pub items: usize,
    pub attrs: usize,
    pub attrs_per_item: usize,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for NoiseFreeConfig {
    fn default() -> Self {
        NoiseFreeConfig { users: 40, items: 50, attrs: 20, attrs_per_item: 3, interactions_per_user: 6, seed: 3 }
    }
}

/// Every item gets a distinct attribute set of fixed size.
pub fn noise_free_catalog(cfg: &NoiseFreeConfig) -> Result<Catalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sets: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
    let mut ordered = Vec::new();
    while ordered.len() < cfg.items {
        let s: BTreeSet<usize> = rand::seq::index::sample(&mut rng, cfg.attrs, cfg.attrs_per_item).into_iter().collect();
        if sets.insert(s.clone()) {
            ordered.push(s);
        }
    }
    // make sure every attribute occurs somewhere
    for a in 0..cfg.attrs {
        if !ordered.iter().any(|s| s.contains(&a)) {
            let v = rng.random_range(0..ordered.len());
            let mut s = ordered[v].clone();
            s.insert(a);
            if sets.insert(s.clone()) {
                ordered[v] = s;
            }
        }
    }
    let item_attrs = ordered.iter().enumerate().map(|(v, s)| (format!("item{v:03}"), s.iter().map(|a| format!("attr{a:02}")).collect())).collect();
    let mut interactions = Vec::new();
    for u in 0..cfg.users {
        let mut items: Vec<usize> = (0..cfg.items).collect();
        items.shuffle(&mut rng);
        for (t, v) in items.into_iter().take(cfg.interactions_per_user).enumerate() {
            interactions.push((format!("user{u:03}"), format!("item{v:03}"), t as i64));
        }
    }
    Catalog::from_raw(item_attrs, interactions)
}
