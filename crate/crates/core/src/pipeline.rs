//! End-to-end training runs and their on-disk layout.
//!
//! A run directory holds `config.txt`, `taxonomy.txt`, the dictionaries
//! and checkpoint of the best model with its `manifest.json`,
//! `metrics.jsonl` (one record per epoch), the held-out `validation.jsonl`
//! and `test.jsonl` splits, and `test_metrics.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::catalog::{split, stratify, write_corpus, LabeledExample, Taxonomy};
use crate::config::{DictionarySizes, RunConfig};
use crate::error::{Error, Result};
use crate::models::{
    train_hierarchical, Classifier, DictionarySet, HierarchicalModel, ModelConfig, ModelKind, MultiCnn,
    StructuredMode,
};
use crate::text::{build_attribute_dictionary, build_dictionary};
use crate::train::{evaluate, train, EpochMetrics, MetricsReport};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";

/// Builds every dictionary `config` names from `examples`.
pub fn build_dictionaries(
    config: &ModelConfig,
    examples: &[LabeledExample],
    sizes: DictionarySizes,
) -> Result<DictionarySet> {
    let mut dicts = DictionarySet::new();
    for ch in &config.channels {
        if dicts.contains_key(&ch.dictionary) {
            continue;
        }
        let texts = examples.iter().map(|ex| ex.product.text(&ch.attribute));
        dicts.insert(ch.dictionary.clone(), build_dictionary(texts, sizes.for_attribute(&ch.attribute))?);
    }
    if config.structured.mode != StructuredMode::None {
        let products: Vec<_> = examples.iter().map(|ex| ex.product.clone()).collect();
        dicts.insert(
            config.structured.dictionary.clone(),
            build_attribute_dictionary(&products, sizes.structured)?,
        );
    }
    Ok(dicts)
}

/// A trained model of either kind.
pub enum Trained {
    Flat(MultiCnn<f32>),
    Hierarchical(HierarchicalModel),
}

impl Trained {
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            Trained::Flat(m) => m,
            Trained::Hierarchical(m) => m,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Trained::Flat(m) => m.save(dir),
            Trained::Hierarchical(m) => m.save(dir),
        }
    }
}

pub struct RunSummary {
    pub model: Trained,
    pub best_epoch: Option<usize>,
    pub curve: Vec<EpochMetrics>,
    pub test: MetricsReport,
    pub test_examples: Vec<LabeledExample>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Splits, stratifies the training share, trains, evaluates on the test
/// split and, when `out` is given, writes the run directory.
pub fn run_training(
    config: &RunConfig,
    taxonomy: &Taxonomy,
    examples: &[LabeledExample],
    out: Option<&Path>,
) -> Result<RunSummary> {
    config.validate()?;
    let parts = split(examples, config.split, config.seed())?;
    if parts.train.is_empty() || parts.test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} examples are too few to split into train and test",
            examples.len()
        )));
    }
    let train_set = stratify(&parts.train, config.stratify_floor);
    log::info!(
        "split: {} train ({} after stratification), {} validation, {} test",
        parts.train.len(),
        train_set.len(),
        parts.validation.len(),
        parts.test.len()
    );
    let mut metrics_log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join(CONFIG_FILE), config.to_text()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
            taxonomy.save(dir.join(TAXONOMY_FILE))?;
            write_corpus(dir.join(VALIDATION_FILE), &parts.validation)?;
            write_corpus(dir.join(TEST_FILE), &parts.test)?;
            Some(create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let mut log_err = None;
    let mut on_epoch = |m: &EpochMetrics| {
        if let Some(w) = metrics_log.as_mut() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log_err.get_or_insert(e);
            }
        }
    };

    let labels = taxonomy.leaf_labels();
    let (model, best_epoch, curve) = match config.kind {
        ModelKind::Multicnn => {
            let mut mc = config.model.clone();
            mc.num_classes = labels.len();
            let dicts = build_dictionaries(&mc, &parts.train, config.dictionary_sizes)?;
            let init = MultiCnn::new(mc, Arc::new(dicts), labels, config.seed())?;
            let outcome = train(init, &train_set, &parts.validation, &config.train, &mut on_epoch)?;
            (Trained::Flat(outcome.best), outcome.best_epoch, outcome.curve)
        }
        ModelKind::Hierarchical => {
            let m = train_hierarchical(&train_set, taxonomy, &config.hierarchical)?;
            (Trained::Hierarchical(m), None, Vec::new())
        }
    };
    if let Some(e) = log_err {
        return Err(Error::Stream(e));
    }
    let test = evaluate(model.classifier(), &parts.test)?;
    log::info!("test top-1 {:.4}", test.top1());
    if let Some(dir) = out {
        model.save(dir)?;
        let text = serde_json::to_string_pretty(&test)? + "\n";
        std::fs::write(dir.join(TEST_METRICS_FILE), text).map_err(|e| Error::io(dir.join(TEST_METRICS_FILE), e))?;
    }
    Ok(RunSummary {
        model,
        best_epoch,
        curve,
        test,
        test_examples: parts.test,
    })
}
