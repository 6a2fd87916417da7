//! Relational graph convolution over the user/item/attribute graph, plus the
//! TransE pretraining used by the user simulator.

mod rgcn;
mod transe;

pub use rgcn::{
    encode_graph, rgcn_forward, rgcn_layer, GraphOperators, NodeEmbeddings, Relation, RgcnLayerVars,
    RgcnLayerWeights, RgcnParams,
};
pub use transe::{train_transe, transe_distance, triple_hinge, KgEmbeddings, TransEConfig};
