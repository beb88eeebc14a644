//! On-disk model layout: `manifest.json` naming the config, dictionary files,
//! checkpoint and (for the hierarchical model) taxonomy, all relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Classifier, DictionarySet, HierarchicalConfig, HierarchicalModel, ModelConfig, MultiCnn, NodeClassifier,
    Prediction,
};
use crate::catalog::{Product, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ParamStore, Tensor};
use crate::text::Dictionary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Multicnn,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchical: Option<HierarchicalConfig>,
    /// Dictionary name to file name.
    #[serde(default)]
    pub dictionaries: BTreeMap<String, String>,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<String>,
    /// Node path to the child slot a data-starved node always picks.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub degenerate: BTreeMap<String, usize>,
    pub config_hash: String,
}

fn dictionary_file(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("dict_{safe}.tsv")
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl MultiCnn<f32> {
    /// Writes dictionaries, checkpoint and manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut dictionaries = BTreeMap::new();
        for name in self.config().dictionary_names() {
            let file = dictionary_file(name);
            self.dictionaries()[name].save(dir.join(&file))?;
            dictionaries.insert(name.to_string(), file);
        }
        let hash = self.config().hash();
        Checkpoint {
            config_hash: hash,
            params: self.params().clone(),
        }
        .save(dir.join(CHECKPOINT_FILE))?;
        write_manifest(
            dir,
            &Manifest {
                kind: ModelKind::Multicnn,
                labels: self.class_labels().to_vec(),
                model: Some(self.config().clone()),
                hierarchical: None,
                dictionaries,
                checkpoint: CHECKPOINT_FILE.into(),
                taxonomy: None,
                degenerate: BTreeMap::new(),
                config_hash: hex::encode(hash),
            },
        )
    }
}

impl HierarchicalConfig {
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }
}

impl HierarchicalModel {
    /// Per-node weight blocks keyed by node path (`<path>.w`, `<path>.b`).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tax = self.taxonomy();
        tax.save(dir.join(TAXONOMY_FILE))?;
        let dim = self.config().hash_dim;
        let mut params = ParamStore::new();
        let mut degenerate = BTreeMap::new();
        for (&node, clf) in self.node_classifiers() {
            let key = tax.path_key(node);
            match clf {
                NodeClassifier::Trained { weights, bias } => {
                    params.add(format!("{key}.w"), Tensor::matrix(bias.len(), dim, weights.clone())?)?;
                    params.add(format!("{key}.b"), Tensor::vector(bias.clone()))?;
                }
                NodeClassifier::Degenerate { child } => {
                    degenerate.insert(key, *child);
                }
            }
        }
        let hash = self.config().hash();
        Checkpoint {
            config_hash: hash,
            params,
        }
        .save(dir.join(CHECKPOINT_FILE))?;
        write_manifest(
            dir,
            &Manifest {
                kind: ModelKind::Hierarchical,
                labels: self.labels().to_vec(),
                model: None,
                hierarchical: Some(self.config().clone()),
                dictionaries: BTreeMap::new(),
                checkpoint: CHECKPOINT_FILE.into(),
                taxonomy: Some(TAXONOMY_FILE.into()),
                degenerate,
                config_hash: hex::encode(hash),
            },
        )
    }
}

/// A frozen model read back from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Flat(MultiCnn<f32>),
    Hierarchical(HierarchicalModel),
}

impl LoadedModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir)?;
        let ck = Checkpoint::load(dir.join(&manifest.checkpoint))?;
        if hex::encode(ck.config_hash) != manifest.config_hash {
            return Err(Error::Config("checkpoint config hash does not match manifest".into()));
        }
        match manifest.kind {
            ModelKind::Multicnn => {
                let config = manifest
                    .model
                    .ok_or_else(|| Error::Config("manifest lacks model config".into()))?;
                if hex::encode(config.hash()) != manifest.config_hash {
                    return Err(Error::Config("model config hash does not match manifest".into()));
                }
                let mut dicts = DictionarySet::new();
                for (name, file) in &manifest.dictionaries {
                    dicts.insert(name.clone(), Dictionary::load(dir.join(file))?);
                }
                Ok(LoadedModel::Flat(MultiCnn::from_params(
                    config,
                    Arc::new(dicts),
                    manifest.labels,
                    ck.params,
                )?))
            }
            ModelKind::Hierarchical => {
                let config = manifest
                    .hierarchical
                    .ok_or_else(|| Error::Config("manifest lacks hierarchical config".into()))?;
                let tax_file = manifest
                    .taxonomy
                    .ok_or_else(|| Error::Config("manifest lacks taxonomy".into()))?;
                let tax = Taxonomy::load(dir.join(tax_file))?;
                let by_key: BTreeMap<String, usize> = (0..tax.len()).map(|n| (tax.path_key(n), n)).collect();
                let node_of = |key: &str| {
                    by_key
                        .get(key)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("unknown taxonomy node {key:?}")))
                };
                let mut nodes = BTreeMap::new();
                for (key, &child) in &manifest.degenerate {
                    nodes.insert(node_of(key)?, NodeClassifier::Degenerate { child });
                }
                let blocks: Vec<_> = ck.params.iter().collect();
                for pair in blocks.chunks(2) {
                    let [w, b] = pair else {
                        return Err(Error::Config("unpaired node weight block".into()));
                    };
                    let key = w
                        .name
                        .strip_suffix(".w")
                        .filter(|k| b.name.strip_suffix(".b") == Some(*k))
                        .ok_or_else(|| Error::Config(format!("unexpected block {:?}", w.name)))?;
                    nodes.insert(
                        node_of(key)?,
                        NodeClassifier::Trained {
                            weights: w.value.data().to_vec(),
                            bias: b.value.data().to_vec(),
                        },
                    );
                }
                let model = HierarchicalModel::from_parts(tax, config, nodes)?;
                if model.labels() != manifest.labels.as_slice() {
                    return Err(Error::Config("taxonomy leaves do not match manifest labels".into()));
                }
                Ok(LoadedModel::Hierarchical(model))
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Flat(_) => ModelKind::Multicnn,
            LoadedModel::Hierarchical(_) => ModelKind::Hierarchical,
        }
    }

    pub fn config_hash(&self) -> String {
        match self {
            LoadedModel::Flat(m) => hex::encode(m.config().hash()),
            LoadedModel::Hierarchical(m) => hex::encode(m.config().hash()),
        }
    }

    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            LoadedModel::Flat(m) => m,
            LoadedModel::Hierarchical(m) => m,
        }
    }
}

impl Classifier for LoadedModel {
    fn labels(&self) -> &[String] {
        self.classifier().labels()
    }

    fn predict_topk_batch(&self, products: &[&Product], k: usize) -> Result<Vec<Vec<Prediction>>> {
        self.classifier().predict_topk_batch(products, k)
    }
}
