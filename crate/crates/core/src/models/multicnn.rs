use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_k, top_k_indices, Classifier, Prediction};
use crate::catalog::Product;
use crate::error::{Error, Result};
use crate::tensor::{ops, ConvBankSpec, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::text::{encode_padded, serialize_structured, tokenize, Dictionary, MIN_ENCODED_LEN, PAD};

/// Dictionaries by name, as referenced from [`ModelConfig`].
pub type DictionarySet = BTreeMap<String, Dictionary>;

/// One free-text attribute and the dictionary that encodes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub attribute: String,
    pub dictionary: String,
    pub max_len: usize,
}

impl ChannelSpec {
    pub fn new(attribute: &str, max_len: usize) -> Self {
        ChannelSpec {
            attribute: attribute.to_string(),
            dictionary: attribute.to_string(),
            max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuredMode {
    /// Unstructured channels only.
    None,
    /// Mean of the structured-string word embeddings.
    WordAvg,
    /// One more conv channel over the serialized attributes.
    Conv,
}

impl std::str::FromStr for StructuredMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StructuredMode::None),
            "word_avg" => Ok(StructuredMode::WordAvg),
            "conv" => Ok(StructuredMode::Conv),
            other => Err(Error::Config(format!(
                "structured_mode must be none, word_avg or conv, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub mode: StructuredMode,
    pub dictionary: String,
    pub max_len: usize,
    pub with_separator: bool,
}

impl Default for StructuredSpec {
    fn default() -> Self {
        StructuredSpec {
            mode: StructuredMode::Conv,
            dictionary: "structured".to_string(),
            max_len: 256,
            with_separator: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: Vec<ChannelSpec>,
    pub structured: StructuredSpec,
    pub conv: ConvBankSpec,
    pub fc_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![
                ChannelSpec::new("product_name", 32),
                ChannelSpec::new("product_short_description", 256),
            ],
            structured: StructuredSpec::default(),
            conv: ConvBankSpec::default(),
            fc_sizes: vec![512, 512],
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.conv.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one unstructured channel is required".into()));
        }
        if self.channels.iter().any(|c| c.max_len == 0) || self.structured.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if self.fc_sizes.contains(&0) {
            return Err(Error::Config("fully-connected sizes must be >= 1".into()));
        }
        self.conv.validate()
    }

    /// Width of the concatenated feature vector fed to the dense stack.
    pub fn feature_width(&self) -> usize {
        let per_channel = self.conv.output_width();
        let structured = match self.structured.mode {
            StructuredMode::None => 0,
            StructuredMode::WordAvg => self.embed_dim(),
            StructuredMode::Conv => per_channel,
        };
        self.channels.len() * per_channel + structured
    }

    pub fn dictionary_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.channels.iter().map(|c| c.dictionary.as_str()).collect();
        if self.structured.mode != StructuredMode::None {
            names.push(&self.structured.dictionary);
        }
        names
    }

    fn resolve<'a>(&self, dicts: &'a DictionarySet, name: &str) -> Result<&'a Dictionary> {
        dicts
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown dictionary {name:?}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    fn padded_len(&self) -> usize {
        MIN_ENCODED_LEN.max(self.conv.max_width())
    }
}

/// A product mapped to dictionary indices, ready for the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedProduct {
    pub channels: Vec<Vec<usize>>,
    /// Conv mode: padded sequence. Word-avg mode: real tokens, or a lone
    /// PAD when there are none.
    pub structured: Option<Vec<usize>>,
    pub structured_real: usize,
}

#[derive(Debug, Clone)]
struct ConvChannel {
    embedding: ParamId,
    filters: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct Layout {
    channels: Vec<ConvChannel>,
    structured_conv: Option<ConvChannel>,
    structured_embedding: Option<ParamId>,
    dense: Vec<(ParamId, ParamId)>,
}

/// Per-attribute conv channels, max-over-time pooling, concatenation and a
/// dense stack ending in class logits.
#[derive(Debug, Clone)]
pub struct MultiCnn<T: Real = f32> {
    config: ModelConfig,
    dicts: Arc<DictionarySet>,
    labels: Vec<String>,
    params: ParamStore<T>,
    layout: Layout,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

const EMBED_INIT: f64 = 0.25;

/// Parameter shapes in creation order.
fn param_shapes(config: &ModelConfig, dicts: &DictionarySet) -> Result<Vec<(String, Vec<usize>, f64)>> {
    let d = config.embed_dim();
    let f = config.conv.filters_per_width;
    let mut out = Vec::new();
    let conv_channel = |out: &mut Vec<(String, Vec<usize>, f64)>, name: &str, vocab: usize| {
        out.push((format!("emb.{name}"), vec![vocab, d], EMBED_INIT));
        for &w in &config.conv.widths {
            let fan_in = (w * d) as f64;
            out.push((format!("conv.{name}.w{w}"), vec![w * d, f], (6.0 / fan_in).sqrt()));
            out.push((format!("conv.{name}.b{w}"), vec![f], 0.0));
        }
    };
    for (i, ch) in config.channels.iter().enumerate() {
        let vocab = config.resolve(dicts, &ch.dictionary)?.len();
        conv_channel(&mut out, &format!("{i}.{}", ch.attribute), vocab);
    }
    match config.structured.mode {
        StructuredMode::None => {}
        StructuredMode::Conv => {
            let vocab = config.resolve(dicts, &config.structured.dictionary)?.len();
            conv_channel(&mut out, "structured", vocab);
        }
        StructuredMode::WordAvg => {
            let vocab = config.resolve(dicts, &config.structured.dictionary)?.len();
            out.push(("emb.structured".to_string(), vec![vocab, d], EMBED_INIT));
        }
    }
    let mut width = config.feature_width();
    let mut sizes = config.fc_sizes.clone();
    sizes.push(config.num_classes);
    let last = sizes.len() - 1;
    for (i, &s) in sizes.iter().enumerate() {
        let fan = if i < last { width } else { width + s };
        let bound = (6.0 / fan as f64).sqrt();
        out.push((format!("fc{i}.w"), vec![width, s], bound));
        out.push((format!("fc{i}.b"), vec![s], 0.0));
        width = s;
    }
    Ok(out)
}

fn build_layout<T: Real>(config: &ModelConfig, params: &ParamStore<T>) -> Result<Layout> {
    let id = |name: String| {
        params
            .id(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    };
    let conv_channel = |name: &str| -> Result<ConvChannel> {
        Ok(ConvChannel {
            embedding: id(format!("emb.{name}"))?,
            filters: config
                .conv
                .widths
                .iter()
                .map(|w| Ok((id(format!("conv.{name}.w{w}"))?, id(format!("conv.{name}.b{w}"))?)))
                .collect::<Result<_>>()?,
        })
    };
    let channels = config
        .channels
        .iter()
        .enumerate()
        .map(|(i, ch)| conv_channel(&format!("{i}.{}", ch.attribute)))
        .collect::<Result<_>>()?;
    let (structured_conv, structured_embedding) = match config.structured.mode {
        StructuredMode::None => (None, None),
        StructuredMode::Conv => (Some(conv_channel("structured")?), None),
        StructuredMode::WordAvg => (None, Some(id("emb.structured".into())?)),
    };
    let dense = (0..=config.fc_sizes.len())
        .map(|i| Ok((id(format!("fc{i}.w"))?, id(format!("fc{i}.b"))?)))
        .collect::<Result<_>>()?;
    Ok(Layout {
        channels,
        structured_conv,
        structured_embedding,
        dense,
    })
}

/// `true` where a width-`width` window covers at least one real token.
fn window_mask(indices: &[usize], width: usize) -> Vec<bool> {
    indices
        .windows(width)
        .map(|w| w.iter().any(|&i| i != PAD))
        .collect()
}

impl<T: Real> MultiCnn<T> {
    /// Fresh model with seeded initialization: embeddings uniform in
    /// (-0.25, 0.25), layers feeding a ReLU uniform in +-sqrt(6/fan_in), the
    /// output layer uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn new(config: ModelConfig, dicts: Arc<DictionarySet>, labels: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} labels for {} classes",
                labels.len(),
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, bound) in param_shapes(&config, &dicts)? {
            let t = if bound > 0.0 {
                uniform(&mut rng, &shape, bound)
            } else {
                Tensor::zeros(&shape)
            };
            params.add(name, t)?;
        }
        let layout = build_layout(&config, &params)?;
        Ok(MultiCnn {
            config,
            dicts,
            labels,
            params,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        dicts: Arc<DictionarySet>,
        labels: Vec<String>,
        params: ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let want = param_shapes(&config, &dicts)?;
        if want.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                want.len()
            )));
        }
        for ((name, shape, _), p) in want.iter().zip(params.iter()) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?}{:?} does not match expected {name:?}{shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        if labels.len() != config.num_classes {
            return Err(Error::Config("label count does not match num_classes".into()));
        }
        let layout = build_layout(&config, &params)?;
        Ok(MultiCnn {
            config,
            dicts,
            labels,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dictionaries(&self) -> &Arc<DictionarySet> {
        &self.dicts
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn class_labels(&self) -> &[String] {
        &self.labels
    }

    /// Same model in another element type.
    pub fn cast<U: Real>(&self) -> MultiCnn<U> {
        MultiCnn {
            config: self.config.clone(),
            dicts: self.dicts.clone(),
            labels: self.labels.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn encode(&self, product: &Product) -> EncodedProduct {
        let min_len = self.config.padded_len();
        let channels = self
            .config
            .channels
            .iter()
            .map(|ch| {
                let dict = &self.dicts[&ch.dictionary];
                encode_padded(product.text(&ch.attribute), dict, ch.max_len, min_len).indices
            })
            .collect();
        let s = &self.config.structured;
        let (structured, structured_real) = match s.mode {
            StructuredMode::None => (None, 0),
            StructuredMode::Conv => {
                let text = serialize_structured(product, s.with_separator);
                let seq = encode_padded(&text, &self.dicts[&s.dictionary], s.max_len, min_len);
                let real = seq.real_len;
                (Some(seq.indices), real)
            }
            StructuredMode::WordAvg => {
                let text = serialize_structured(product, s.with_separator);
                let dict = &self.dicts[&s.dictionary];
                let real: Vec<usize> = tokenize(&text)
                    .iter()
                    .take(s.max_len)
                    .map(|t| dict.lookup(t))
                    .collect();
                let n = real.len();
                (Some(if real.is_empty() { vec![PAD] } else { real }), n)
            }
        };
        EncodedProduct {
            channels,
            structured,
            structured_real,
        }
    }

    fn conv_features(&self, tape: &mut Tape<T>, channel: &ConvChannel, indices: &[usize], out: &mut Vec<Var>) -> Result<()> {
        let emb = tape.embedding(&self.params, channel.embedding, indices)?;
        for (&width, &(w, b)) in self.config.conv.widths.iter().zip(&channel.filters) {
            let map = tape.conv1d(&self.params, emb, w, b, width)?;
            let mask = window_mask(indices, width);
            let pooled = tape.maxpool_time(map, Some(&mask))?;
            out.push(tape.relu(pooled));
        }
        Ok(())
    }

    /// Concatenated pooled features of one product, shape `[feature_width]`.
    pub fn features(&self, tape: &mut Tape<T>, enc: &EncodedProduct) -> Result<Var> {
        let mut parts = Vec::new();
        for (channel, indices) in self.layout.channels.iter().zip(&enc.channels) {
            self.conv_features(tape, channel, indices, &mut parts)?;
        }
        if let Some(seq) = &enc.structured {
            if let Some(channel) = &self.layout.structured_conv {
                self.conv_features(tape, channel, seq, &mut parts)?;
            } else if let Some(table) = self.layout.structured_embedding {
                let emb = tape.embedding(&self.params, table, seq)?;
                parts.push(tape.mean_time(emb, enc.structured_real)?);
            }
        }
        tape.concat(&parts)
    }

    /// Logits `[B x num_classes]` for a batch of encoded products.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &[&EncodedProduct]) -> Result<Var> {
        self.forward_impl(tape, batch, None)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<T>,
        batch: &[&EncodedProduct],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let rows = batch
            .iter()
            .map(|enc| self.features(tape, enc))
            .collect::<Result<Vec<_>>>()?;
        let mut x = tape.stack_rows(&rows)?;
        let last = self.layout.dense.len() - 1;
        for (i, &(w, b)) in self.layout.dense.iter().enumerate() {
            x = tape.linear(&self.params, x, w, b)?;
            if i < last {
                x = tape.relu(x);
                if let Some((rate, rng)) = dropout.as_mut() {
                    // Inverted dropout: survivors are scaled so inference needs no change.
                    let keep = T::lit(1.0 / (1.0 - *rate));
                    let shape = tape.value(x).shape().to_vec();
                    let n = tape.value(x).len();
                    let mask = (0..n)
                        .map(|_| if rng.random_bool(*rate) { T::zero() } else { keep })
                        .collect();
                    x = tape.mask(x, Tensor::new(shape, mask)?)?;
                }
            }
        }
        Ok(x)
    }

    pub fn logits_batch(&self, products: &[&Product]) -> Result<Tensor<T>> {
        let enc: Vec<EncodedProduct> = products.iter().map(|p| self.encode(p)).collect();
        let refs: Vec<&EncodedProduct> = enc.iter().collect();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &refs)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits(&self, product: &Product) -> Result<Tensor<T>> {
        let l = self.logits_batch(&[product])?;
        l.reshape(vec![self.config.num_classes])
    }

    /// Softmax probabilities `[B x C]`.
    pub fn probabilities(&self, products: &[&Product]) -> Result<Tensor<T>> {
        Ok(ops::softmax(&self.logits_batch(products)?))
    }

    /// Mean cross-entropy of an encoded batch, recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &[&EncodedProduct], labels: &[usize]) -> Result<Var> {
        let logits = self.forward(tape, batch)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// [`Self::loss`] with dropout on the hidden dense activations.
    pub fn loss_with_dropout(
        &self,
        tape: &mut Tape<T>,
        batch: &[&EncodedProduct],
        labels: &[usize],
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let logits = self.forward_impl(tape, batch, Some((rate, rng)))?;
        tape.softmax_cross_entropy(logits, labels)
    }
}

impl<T: Real> Classifier for MultiCnn<T> {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn predict_topk_batch(&self, products: &[&Product], k: usize) -> Result<Vec<Vec<Prediction>>> {
        check_k(k, self.config.num_classes)?;
        if products.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.probabilities(products)?;
        Ok((0..probs.rows())
            .map(|r| {
                let row: Vec<f64> = probs.row(r).iter().map(|p| p.as_f64()).collect();
                top_k_indices(&row, k)
                    .into_iter()
                    .map(|c| Prediction {
                        class: c,
                        label: self.labels[c].clone(),
                        probability: row[c],
                    })
                    .collect()
            })
            .collect())
    }
}
