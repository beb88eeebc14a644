//! Synthetic labeled corpora with known structure, for checking what each
//! model variant can and cannot learn.
//!
//! * `Standard`: titles mix class-specific and shared words (`title_overlap`
//!   is the shared share). With attribute signal, half of the signalled
//!   classes carry an attribute whose *name* is unique to the class, the
//!   other half a `style` attribute whose *value* is unique to the class.
//!   A noise attribute `pattern` draws from the same style values, so a bag
//!   of attribute words is ambiguous where the `name value` bigram is not.
//! * `Separator`: titles carry no signal. Classes come in pairs; one member
//!   has `style: trimN` and `color: C`, the other `style: trimN color C`.
//!   Both flatten to the same words unless attributes are separated.
//! * `Confusable`: a three-level taxonomy with two top-level departments.
//!   Leaf `j` of one department and leaf `j` of the other use the same two
//!   words in opposite order, so unigram features cannot pick the
//!   department while the leaf within it is easy.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{write_corpus, LabeledExample, Product, Taxonomy};
use crate::error::{Error, Result};

pub const TAXONOMY_FILE: &str = "taxonomy.txt";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

const TITLE_LEN: usize = 8;
const CLASS_VOCAB: usize = 12;
const SHARED_VOCAB: usize = 300;
const COLORS: [&str; 10] = [
    "black", "white", "red", "blue", "green", "grey", "navy", "pink", "brown", "beige",
];
const SIZES: [&str; 6] = ["xs", "s", "m", "l", "xl", "xxl"];
const BRANDS: usize = 25;
const PATTERN_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    Separator,
    Confusable,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Scenario::Standard),
            "separator" => Ok(Scenario::Separator),
            "confusable" => Ok(Scenario::Confusable),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scenario {s:?} (standard, separator, confusable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrSignal {
    None,
    /// Every other class carries an identifying attribute.
    Weak,
    Strong,
}

impl FromStr for AttrSignal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttrSignal::None),
            "weak" => Ok(AttrSignal::Weak),
            "strong" => Ok(AttrSignal::Strong),
            _ => Err(Error::InvalidArgument(format!(
                "unknown attribute signal {s:?} (none, weak, strong)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub classes: usize,
    pub per_class: usize,
    pub title_overlap: f64,
    pub attr_signal: AttrSignal,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            scenario: Scenario::Standard,
            classes: 50,
            per_class: 200,
            title_overlap: 0.3,
            attr_signal: AttrSignal::Strong,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 1 {
            return Err(Error::InvalidArgument(format!(
                "need classes >= 2 and per-class >= 1, got {} and {}",
                self.classes, self.per_class
            )));
        }
        if !(0.0..=1.0).contains(&self.title_overlap) {
            return Err(Error::InvalidArgument(format!(
                "title overlap must be in [0, 1], got {}",
                self.title_overlap
            )));
        }
        if self.scenario != Scenario::Standard && !self.classes.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "the {:?} scenario pairs classes and needs an even class count",
                self.scenario
            )));
        }
        Ok(())
    }
}

/// How a class can be recognised from its attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassSignal {
    /// An attribute with this name is present.
    Presence { attribute: String },
    /// The attribute has this value.
    Value { attribute: String, value: String },
    /// Attribute boundaries distinguish this class from its pair.
    Boundary { pair: String },
    /// Word order in the title distinguishes this class from its pair.
    WordOrder { pair: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SyntheticSpec,
    pub products: usize,
    /// Classes whose attributes (or word order) identify them.
    pub signals: BTreeMap<String, ClassSignal>,
}

impl Truth {
    pub fn identifying_classes(&self) -> Vec<&str> {
        self.signals
            .iter()
            .filter(|(_, s)| matches!(s, ClassSignal::Presence { .. } | ClassSignal::Value { .. }))
            .map(|(l, _)| l.as_str())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    pub examples: Vec<LabeledExample>,
    pub truth: Truth,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.taxonomy.save(dir.join(TAXONOMY_FILE))?;
        write_corpus(dir.join(CORPUS_FILE), &self.examples)?;
        let path = dir.join(TRUTH_FILE);
        let text = serde_json::to_string_pretty(&self.truth)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

fn shared_word(i: usize) -> String {
    format!("w{i:03}")
}

fn pick_shared(rng: &mut ChaCha8Rng) -> String {
    shared_word(rng.random_range(0..SHARED_VOCAB))
}

fn shared_title(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| pick_shared(rng)).collect()
}

fn noise_attributes(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    vec![
        ("color".into(), COLORS.choose(rng).unwrap().to_string()),
        ("size".into(), SIZES.choose(rng).unwrap().to_string()),
        ("brand".into(), format!("brand{}", rng.random_range(0..BRANDS))),
    ]
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corpus = match spec.scenario {
        Scenario::Standard => standard(spec, &mut rng),
        Scenario::Separator => separator(spec, &mut rng),
        Scenario::Confusable => confusable(spec, &mut rng),
    }?;
    debug_assert_eq!(corpus.examples.len(), spec.classes * spec.per_class);
    Ok(corpus)
}

fn product(label: &str, i: usize, title: Vec<String>, mut attrs: Vec<(String, String)>, rng: &mut ChaCha8Rng) -> LabeledExample {
    attrs.shuffle(rng);
    LabeledExample {
        product: Product {
            id: format!("{label}-{i:05}"),
            unstructured: [("product_name".to_string(), title.join(" "))].into(),
            structured: attrs,
        },
        label: label.to_string(),
    }
}

fn standard(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpus> {
    let labels: Vec<String> = (0..spec.classes).map(|c| format!("type{c:03}")).collect();
    let paths: Vec<[String; 2]> = labels
        .iter()
        .enumerate()
        .map(|(c, l)| [format!("dept{}", c / 10), l.clone()])
        .collect();
    let taxonomy = Taxonomy::from_paths(paths)?;

    let mut signals = BTreeMap::new();
    for (c, label) in labels.iter().enumerate() {
        let signalled = match spec.attr_signal {
            AttrSignal::None => false,
            AttrSignal::Weak => c % 2 == 0,
            AttrSignal::Strong => true,
        };
        if !signalled {
            continue;
        }
        // Alternate between the two signal kinds over signalled classes.
        let s = if (c / if spec.attr_signal == AttrSignal::Weak { 2 } else { 1 }) % 2 == 0 {
            ClassSignal::Presence {
                attribute: format!("trait_k{c}"),
            }
        } else {
            ClassSignal::Value {
                attribute: "style".into(),
                value: format!("s{c}"),
            }
        };
        signals.insert(label.clone(), s);
    }
    let style_values: Vec<String> = signals
        .values()
        .filter_map(|s| match s {
            ClassSignal::Value { value, .. } => Some(value.clone()),
            _ => None,
        })
        .collect();

    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, label) in labels.iter().enumerate() {
        for i in 0..spec.per_class {
            let title = (0..TITLE_LEN)
                .map(|_| {
                    if rng.random_bool(spec.title_overlap) {
                        pick_shared(rng)
                    } else {
                        format!("c{c}v{}", rng.random_range(0..CLASS_VOCAB))
                    }
                })
                .collect();
            let mut attrs = noise_attributes(rng);
            if !style_values.is_empty() && rng.random_bool(PATTERN_RATE) {
                attrs.push(("pattern".into(), style_values.choose(rng).unwrap().clone()));
            }
            match signals.get(label) {
                Some(ClassSignal::Presence { attribute }) => attrs.push((attribute.clone(), "yes".into())),
                Some(ClassSignal::Value { attribute, value }) => attrs.push((attribute.clone(), value.clone())),
                _ => {}
            }
            examples.push(product(label, i, title, attrs, rng));
        }
    }
    Ok(SyntheticCorpus {
        taxonomy,
        truth: Truth {
            spec: spec.clone(),
            products: examples.len(),
            signals,
        },
        examples,
    })
}

fn separator(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpus> {
    let pairs = spec.classes / 2;
    let labels: Vec<String> = (0..spec.classes).map(|c| format!("kind{c:03}")).collect();
    let paths: Vec<[String; 2]> = labels
        .iter()
        .enumerate()
        .map(|(c, l)| [format!("group{}", c / 2), l.clone()])
        .collect();
    let taxonomy = Taxonomy::from_paths(paths)?;
    let mut signals = BTreeMap::new();
    for p in 0..pairs {
        let (a, b) = (&labels[2 * p], &labels[2 * p + 1]);
        signals.insert(a.clone(), ClassSignal::Boundary { pair: b.clone() });
        signals.insert(b.clone(), ClassSignal::Boundary { pair: a.clone() });
    }
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, label) in labels.iter().enumerate() {
        let trim = format!("trim{}", c / 2);
        for i in 0..spec.per_class {
            let title = shared_title(rng, TITLE_LEN);
            let color = COLORS.choose(rng).unwrap();
            // Fixed attribute order, so without separators both flatten alike.
            let attrs = if c % 2 == 0 {
                vec![("style".to_string(), trim.clone()), ("color".to_string(), color.to_string())]
            } else {
                vec![("style".to_string(), format!("{trim} color {color}"))]
            };
            let mut ex = product(label, i, title, Vec::new(), rng);
            ex.product.structured = attrs;
            examples.push(ex);
        }
    }
    Ok(SyntheticCorpus {
        taxonomy,
        truth: Truth {
            spec: spec.clone(),
            products: examples.len(),
            signals,
        },
        examples,
    })
}

/// Leaves per group in the confusable taxonomy.
const GROUP_SIZE: usize = 4;

fn confusable(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpus> {
    let pairs = spec.classes / 2;
    let depts = ["mens", "womens"];
    let mut labels = Vec::with_capacity(spec.classes);
    let mut paths = Vec::with_capacity(spec.classes);
    let mut signals = BTreeMap::new();
    for (d, dept) in depts.iter().enumerate() {
        for j in 0..pairs {
            let label = format!("{dept}_style{j:02}");
            let other = format!("{}_style{j:02}", depts[1 - d]);
            paths.push([dept.to_string(), format!("{dept} group{}", j / GROUP_SIZE), label.clone()]);
            signals.insert(label.clone(), ClassSignal::WordOrder { pair: other });
            labels.push((d, j, label));
        }
    }
    let taxonomy = Taxonomy::from_paths(paths)?;
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for (d, j, label) in &labels {
        let (x, y) = (format!("x{j}"), format!("y{j}"));
        for i in 0..spec.per_class {
            let mut title = shared_title(rng, TITLE_LEN - 2);
            let at = rng.random_range(0..=title.len());
            let bigram = if *d == 0 { [x.clone(), y.clone()] } else { [y.clone(), x.clone()] };
            title.splice(at..at, bigram);
            let attrs = noise_attributes(rng);
            examples.push(product(label, i, title, attrs, rng));
        }
    }
    Ok(SyntheticCorpus {
        taxonomy,
        truth: Truth {
            spec: spec.clone(),
            products: examples.len(),
            signals,
        },
        examples,
    })
}
