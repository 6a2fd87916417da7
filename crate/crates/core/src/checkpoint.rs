//! JSON checkpoint container shared by all trained components.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::catalog::HeteroGraph;
use crate::error::{Error, Result};
use crate::graph_embed::{KgEmbeddings, TransEConfig};
use crate::params::{NamedTensor, ParamSet};
use crate::policy::{PolicyConfig, PolicyNet};
use crate::recommender::{ModelConfig, RecModel};

pub const FORMAT: &str = "msmcr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, params: &ParamSet) -> Self {
        Checkpoint { format: FORMAT.into(), version: VERSION, kind: kind.into(), meta, tensors: params.to_tensors() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!("{}: unsupported format {} v{}", path.display(), ck.format, ck.version)));
        }
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("{}: expected a {kind} checkpoint, found {}", path.display(), ck.kind)));
        }
        Ok(ck)
    }

    pub fn params(&self) -> Result<ParamSet> {
        ParamSet::from_tensors(self.tensors.clone()).map_err(Error::Checkpoint)
    }

    fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing meta field `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta field `{key}`: {e}")))
    }
}

pub fn kg_checkpoint(kg: &KgEmbeddings, config: &TransEConfig) -> Checkpoint {
    let mut p = ParamSet::default();
    p.insert("users", kg.users.clone());
    p.insert("items", kg.items.clone());
    p.insert("attrs", kg.attrs.clone());
    p.insert("relations", kg.relations.clone());
    Checkpoint::new("kg", serde_json::json!({ "config": config }), &p)
}

pub fn kg_from_checkpoint(ck: &Checkpoint) -> Result<KgEmbeddings> {
    let p = ck.params()?;
    let get = |n: &str| -> Result<Mat> { p.get(n).cloned().ok_or_else(|| Error::Checkpoint(format!("missing tensor `{n}`"))) };
    Ok(KgEmbeddings { users: get("users")?, items: get("items")?, attrs: get("attrs")?, relations: get("relations")? })
}

pub fn rec_checkpoint(model: &RecModel) -> Checkpoint {
    let meta = serde_json::json!({
        "config": model.config,
        "n_users": model.n_users,
        "n_items": model.n_items,
        "n_attrs": model.n_attrs,
    });
    Checkpoint::new("recommender", meta, &model.params)
}

/// Restores a recommender and checks it against the graph it will run on.
pub fn rec_from_checkpoint(ck: &Checkpoint, graph: &HeteroGraph) -> Result<RecModel> {
    let config: ModelConfig = ck.meta_field("config")?;
    let dims: (usize, usize, usize) = (ck.meta_field("n_users")?, ck.meta_field("n_items")?, ck.meta_field("n_attrs")?);
    if dims != (graph.n_users, graph.n_items, graph.n_attrs) {
        return Err(Error::Checkpoint(format!("recommender was trained on {dims:?} users/items/attributes, dataset has {:?}", (graph.n_users, graph.n_items, graph.n_attrs))));
    }
    let template = RecModel::new(config, graph)?;
    let params = ck.params()?;
    if params.names() != template.params.names() || params.values().iter().zip(template.params.values()).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Checkpoint("recommender tensors do not match the configured architecture".into()));
    }
    Ok(RecModel { params, ..template })
}

pub fn policy_checkpoint(net: &PolicyNet, config: &PolicyConfig) -> Checkpoint {
    let meta = serde_json::json!({
        "config": config,
        "n_attrs": net.n_attrs,
        "max_turns": net.max_turns,
        "list_size": net.list_size,
        "hidden": net.hidden,
    });
    Checkpoint::new("policy", meta, &net.params)
}

pub fn policy_from_checkpoint(ck: &Checkpoint) -> Result<(PolicyNet, PolicyConfig)> {
    let config: PolicyConfig = ck.meta_field("config")?;
    let template = PolicyNet::new(ck.meta_field("n_attrs")?, ck.meta_field("max_turns")?, ck.meta_field("list_size")?, ck.meta_field("hidden")?, 0);
    let params = ck.params()?;
    if params.names() != template.params.names() || params.values().iter().zip(template.params.values()).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Checkpoint("policy tensors do not match the stored dimensions".into()));
    }
    Ok((PolicyNet { params, ..template }, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let net = PolicyNet::new(5, 4, 3, 7, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        policy_checkpoint(&net, &PolicyConfig::default()).save(&path).unwrap();
        let (back, cfg) = policy_from_checkpoint(&Checkpoint::load(&path, "policy").unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(cfg, PolicyConfig::default());
        assert!(Checkpoint::load(&path, "recommender").is_err());
    }

    #[test]
    fn rec_round_trip_and_dimension_check() {
        let g = HeteroGraph { n_users: 1, n_items: 2, n_attrs: 2, edges_uv: vec![(0, 0)], edges_av: vec![(0, 0), (1, 1)] };
        let m = RecModel::new(ModelConfig { dim: 4, ..Default::default() }, &g).unwrap();
        let ck = rec_checkpoint(&m);
        let text = serde_json::to_string(&ck).unwrap();
        let ck: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(rec_from_checkpoint(&ck, &g).unwrap(), m);
        let other = HeteroGraph { n_items: 3, ..g };
        assert!(rec_from_checkpoint(&ck, &other).is_err());
    }

    #[test]
    fn kg_round_trip() {
        let kg = KgEmbeddings { users: Mat::eye(2), items: Mat::ones((3, 2)), attrs: Mat::zeros((1, 2)), relations: Mat::eye(2) * 0.1 };
        assert_eq!(kg_from_checkpoint(&kg_checkpoint(&kg, &TransEConfig::default())).unwrap(), kg);
    }
}
