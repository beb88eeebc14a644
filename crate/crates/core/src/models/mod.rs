//! Flat Multi-CNN classifiers and the hierarchical per-node baseline.

mod hierarchical;
mod manifest;
mod multicnn;

use serde::{Deserialize, Serialize};

use crate::catalog::Product;
use crate::error::{Error, Result};

pub use hierarchical::{
    hashed_bow, stable_hash, train_hierarchical, HierarchicalConfig, HierarchicalModel, NodeClassifier,
    SparseVector,
};
pub use manifest::{LoadedModel, Manifest, ModelKind};
pub use multicnn::{
    ChannelSpec, DictionarySet, EncodedProduct, ModelConfig, MultiCnn, StructuredMode, StructuredSpec,
};

/// One ranked class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub label: String,
    pub probability: f64,
}

/// Anything that ranks the taxonomy's leaves for a product.
pub trait Classifier: Send + Sync {
    fn labels(&self) -> &[String];

    fn num_classes(&self) -> usize {
        self.labels().len()
    }

    /// Top-`k` per product, probabilities descending, ties by class index.
    fn predict_topk_batch(&self, products: &[&Product], k: usize) -> Result<Vec<Vec<Prediction>>>;

    fn predict_topk(&self, product: &Product, k: usize) -> Result<Vec<Prediction>> {
        Ok(self.predict_topk_batch(&[product], k)?.remove(0))
    }
}

pub(crate) fn check_k(k: usize, classes: usize) -> Result<()> {
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={classes}, got {k}"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
