//! One multinomial logistic-regression classifier per taxonomy node over
//! hashed bag-of-words features, decoded top-down with a beam.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_k, Classifier, Prediction};
use crate::catalog::{LabeledExample, NodeId, Product, Taxonomy};
use crate::error::{Error, Result};
use crate::text::tokenize;

/// Sorted `(bucket, count)` pairs.
pub type SparseVector = Vec<(u32, f32)>;

/// FNV-1a, 64 bit. Fixed across processes and platforms.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token counts of every free-text attribute (title and descriptions),
/// hashed into `hash_dim` buckets.
pub fn hashed_bow(product: &Product, hash_dim: usize) -> SparseVector {
    let hash_dim = hash_dim.max(2) as u64;
    let mut counts: BTreeMap<u32, f32> = BTreeMap::new();
    for text in product.unstructured.values() {
        for tok in tokenize(text) {
            let bucket = (stable_hash(tok.as_bytes()) % hash_dim) as u32;
            *counts.entry(bucket).or_insert(0.0) += 1.0;
        }
    }
    counts.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalConfig {
    pub hash_dim: usize,
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig {
            hash_dim: 1 << 18,
            l2: 1e-4,
            epochs: 50,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl HierarchicalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 2 || !self.hash_dim.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash_dim must be a power of two >= 2, got {}",
                self.hash_dim
            )));
        }
        if !(self.l2 >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("l2 must be >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeClassifier {
    /// `weights` is `[children x hash_dim]` row-major.
    Trained { weights: Vec<f32>, bias: Vec<f32> },
    /// Fewer than two children had training data; always picks this child slot.
    Degenerate { child: usize },
}

#[derive(Debug, Clone)]
pub struct HierarchicalModel {
    taxonomy: Taxonomy,
    config: HierarchicalConfig,
    labels: Vec<String>,
    class_of_leaf: HashMap<NodeId, usize>,
    nodes: BTreeMap<NodeId, NodeClassifier>,
}

fn softmax_f64(mut z: Vec<f64>) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
    z
}

fn node_scores(weights: &[f32], bias: &[f32], hash_dim: usize, x: &SparseVector) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(c, &b)| {
            let row = &weights[c * hash_dim..(c + 1) * hash_dim];
            b as f64 + x.iter().map(|&(j, v)| row[j as usize] as f64 * v as f64).sum::<f64>()
        })
        .collect()
}

/// Regularized SGD on one node's softmax regression. L2 decay is applied
/// through a shared scale factor so each step only touches active features.
fn fit_node(
    samples: &[(&SparseVector, usize)],
    classes: usize,
    config: &HierarchicalConfig,
    seed: u64,
) -> (Vec<f32>, Vec<f32>) {
    let dim = config.hash_dim;
    let mut v = vec![0f32; classes * dim];
    let mut bias = vec![0f32; classes];
    let mut scale = 1.0f64;
    let lr = config.learning_rate;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = samples[i];
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    let row = &v[c * dim..(c + 1) * dim];
                    bias[c] as f64 + scale * x.iter().map(|&(j, val)| row[j as usize] as f64 * val as f64).sum::<f64>()
                })
                .collect();
            let p = softmax_f64(scores);
            scale *= 1.0 - lr * config.l2;
            for c in 0..classes {
                let g = p[c] - if c == y { 1.0 } else { 0.0 };
                if g == 0.0 {
                    continue;
                }
                let step = (lr * g / scale) as f32;
                let row = &mut v[c * dim..(c + 1) * dim];
                for &(j, val) in x.iter() {
                    row[j as usize] -= step * val;
                }
                bias[c] -= (lr * g) as f32;
            }
            if scale < 1e-3 {
                v.iter_mut().for_each(|w| *w = (*w as f64 * scale) as f32);
                scale = 1.0;
            }
        }
    }
    v.iter_mut().for_each(|w| *w = (*w as f64 * scale) as f32);
    (v, bias)
}

/// Trains every internal node with two or more children, each on the
/// examples whose label falls in its subtree. Nodes train in parallel and
/// independently; the result does not depend on scheduling.
pub fn train_hierarchical(
    examples: &[LabeledExample],
    taxonomy: &Taxonomy,
    config: &HierarchicalConfig,
) -> Result<HierarchicalModel> {
    config.validate()?;
    let leaves: Vec<NodeId> = examples
        .iter()
        .map(|ex| {
            taxonomy
                .leaf(&ex.label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} is not a leaf", ex.label)))
        })
        .collect::<Result<_>>()?;
    let feats: Vec<SparseVector> = examples
        .par_iter()
        .map(|ex| hashed_bow(&ex.product, config.hash_dim))
        .collect();

    let decision_nodes: Vec<NodeId> = taxonomy
        .internal_nodes()
        .filter(|&n| taxonomy.node(n).children.len() >= 2)
        .collect();

    let trained: Vec<(NodeId, NodeClassifier)> = decision_nodes
        .par_iter()
        .map(|&node| {
            let children = &taxonomy.node(node).children;
            let samples: Vec<(&SparseVector, usize)> = leaves
                .iter()
                .zip(&feats)
                .filter_map(|(&leaf, x)| {
                    children
                        .iter()
                        .position(|&c| taxonomy.is_ancestor_or_self(c, leaf))
                        .map(|slot| (x, slot))
                })
                .collect();
            let mut covered: Vec<usize> = samples.iter().map(|s| s.1).collect();
            covered.sort_unstable();
            covered.dedup();
            let clf = if covered.len() < 2 {
                NodeClassifier::Degenerate {
                    child: covered.first().copied().unwrap_or(0),
                }
            } else {
                let seed = config.seed ^ stable_hash(taxonomy.path_key(node).as_bytes());
                let (weights, bias) = fit_node(&samples, children.len(), config, seed);
                NodeClassifier::Trained { weights, bias }
            };
            (node, clf)
        })
        .collect();

    HierarchicalModel::from_parts(taxonomy.clone(), config.clone(), trained.into_iter().collect())
}

impl HierarchicalModel {
    pub fn from_parts(
        taxonomy: Taxonomy,
        config: HierarchicalConfig,
        nodes: BTreeMap<NodeId, NodeClassifier>,
    ) -> Result<Self> {
        config.validate()?;
        for (&n, clf) in &nodes {
            let children = taxonomy.node(n).children.len();
            let ok = match clf {
                NodeClassifier::Trained { weights, bias } => {
                    bias.len() == children && weights.len() == children * config.hash_dim
                }
                NodeClassifier::Degenerate { child } => *child < children,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "classifier for {:?} does not fit the taxonomy",
                    taxonomy.path_key(n)
                )));
            }
        }
        let labels = taxonomy.leaf_labels();
        let class_of_leaf = taxonomy
            .leaves()
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, i))
            .collect();
        Ok(HierarchicalModel {
            taxonomy,
            config,
            labels,
            class_of_leaf,
            nodes,
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn config(&self) -> &HierarchicalConfig {
        &self.config
    }

    pub fn node_classifiers(&self) -> &BTreeMap<NodeId, NodeClassifier> {
        &self.nodes
    }

    pub fn class_of_leaf(&self, leaf: NodeId) -> usize {
        self.class_of_leaf[&leaf]
    }

    pub fn features(&self, product: &Product) -> SparseVector {
        hashed_bow(product, self.config.hash_dim)
    }

    /// Conditional distribution over `node`'s children.
    pub fn node_probabilities(&self, node: NodeId, x: &SparseVector) -> Vec<f64> {
        let children = self.taxonomy.node(node).children.len();
        match self.nodes.get(&node) {
            Some(NodeClassifier::Trained { weights, bias }) => {
                softmax_f64(node_scores(weights, bias, self.config.hash_dim, x))
            }
            Some(NodeClassifier::Degenerate { child }) => {
                let mut p = vec![0.0; children];
                p[*child] = 1.0;
                p
            }
            None => vec![1.0 / children as f64; children],
        }
    }

    /// Most likely child at each level, root to leaf.
    pub fn greedy_path(&self, product: &Product) -> Vec<NodeId> {
        let x = self.features(product);
        let mut path = vec![self.taxonomy.root()];
        let mut cur = self.taxonomy.root();
        while !self.taxonomy.node(cur).children.is_empty() {
            let p = self.node_probabilities(cur, &x);
            let best = super::top_k_indices(&p, 1)[0];
            cur = self.taxonomy.node(cur).children[best];
            path.push(cur);
        }
        path
    }

    /// For each decision depth (0 = the root's choice), how many top-1
    /// predictions first leave the true path there.
    pub fn error_depths(&self, examples: &[LabeledExample]) -> Result<Vec<usize>> {
        let depth = self.taxonomy.leaves().iter().map(|&l| self.taxonomy.node(l).depth).max().unwrap_or(0);
        let mut counts = vec![0; depth];
        for ex in examples {
            let truth = self
                .taxonomy
                .leaf(&ex.label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} is not a leaf", ex.label)))?;
            let (predicted, _) = self.topk(&ex.product, 1, DEFAULT_BEAM)?[0];
            if predicted != truth {
                let (tp, pp) = (self.taxonomy.path(truth), self.taxonomy.path(predicted));
                let shared = tp.iter().zip(&pp).take_while(|(a, b)| a == b).count();
                counts[shared - 1] += 1;
            }
        }
        Ok(counts)
    }

    /// Beam search from the root. A leaf's score is the product of the
    /// conditional probabilities along its path. Partial paths are pruned to
    /// `beam` per level; leaves are kept as they are reached.
    pub fn topk(&self, product: &Product, k: usize, beam: usize) -> Result<Vec<(NodeId, f64)>> {
        check_k(k, self.labels.len())?;
        if beam < k {
            return Err(Error::InvalidArgument(format!("beam {beam} is smaller than k {k}")));
        }
        let x = self.features(product);
        let mut frontier: Vec<(NodeId, f64)> = vec![(self.taxonomy.root(), 1.0)];
        let mut done: Vec<(NodeId, f64)> = Vec::new();
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &(node, score) in &frontier {
                let p = self.node_probabilities(node, &x);
                for (&child, &pc) in self.taxonomy.node(node).children.iter().zip(&p) {
                    let s = score * pc;
                    if self.taxonomy.is_leaf(child) {
                        done.push((child, s));
                    } else {
                        next.push((child, s));
                    }
                }
            }
            next.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            next.truncate(beam);
            frontier = next;
        }
        done.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(self.class_of_leaf[&a.0].cmp(&self.class_of_leaf[&b.0]))
        });
        done.truncate(k);
        Ok(done)
    }
}

/// Default beam for top-k queries.
pub const DEFAULT_BEAM: usize = 10;

impl Classifier for HierarchicalModel {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn predict_topk_batch(&self, products: &[&Product], k: usize) -> Result<Vec<Vec<Prediction>>> {
        products
            .iter()
            .map(|p| {
                Ok(self
                    .topk(p, k, DEFAULT_BEAM.max(k))?
                    .into_iter()
                    .map(|(leaf, score)| {
                        let class = self.class_of_leaf[&leaf];
                        Prediction {
                            class,
                            label: self.labels[class].clone(),
                            probability: score,
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(title: &str) -> Product {
        Product::new(title).with_text("product_name", title)
    }

    fn example(id: usize, title: &str, label: &str) -> LabeledExample {
        LabeledExample {
            product: Product::new(format!("{id}")).with_text("product_name", title),
            label: label.into(),
        }
    }

    #[test]
    fn hashed_bow_examples() {
        assert!(hashed_bow(&Product::new("e"), 1 << 18).is_empty());
        let a = hashed_bow(&product("a a b"), 1 << 18);
        let mut counts: Vec<f32> = a.iter().map(|x| x.1).collect();
        counts.sort_by(f32::total_cmp);
        assert_eq!(counts, vec![1.0, 2.0]);
        // with two buckets every token collides into at most two slots
        let tiny = hashed_bow(&product("a a b c d e"), 2);
        assert_eq!(tiny.iter().map(|x| x.1).sum::<f32>(), 6.0);
        assert_eq!(hashed_bow(&product("b a a"), 64), hashed_bow(&product("a b a"), 64));
        // description text counts too
        let with_desc = product("a").with_text("product_short_description", "a");
        assert_eq!(hashed_bow(&with_desc, 64).iter().map(|x| x.1).sum::<f32>(), 2.0);
    }

    #[test]
    fn stable_hash_known_value() {
        // FNV-1a 64 test vectors
        assert_eq!(stable_hash(b""), 0xcbf29ce484222325);
        assert_eq!(stable_hash(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn separable_two_level_corpus_is_learned() {
        let tax = Taxonomy::parse("Shoes > Boots\nShoes > Sandals\nShirts > Tees\nShirts > Polos\n").unwrap();
        let mut data = Vec::new();
        let words = [("Boots", "boot leather"), ("Sandals", "sandal strap"), ("Tees", "tee crew"), ("Polos", "polo collar")];
        for i in 0..20 {
            for (label, w) in words {
                data.push(example(data.len(), &format!("{w} item{i}"), label));
            }
        }
        let cfg = HierarchicalConfig {
            hash_dim: 1 << 10,
            epochs: 20,
            ..Default::default()
        };
        let model = train_hierarchical(&data, &tax, &cfg).unwrap();
        for ex in &data {
            let top = model.predict_topk(&ex.product, 1).unwrap();
            assert_eq!(top[0].label, ex.label);
        }
    }

    #[test]
    fn single_child_chain_has_no_classifier() {
        let tax = Taxonomy::parse("A > B > X\nA > B > Y\n").unwrap();
        let data = vec![example(0, "x", "X"), example(1, "y", "Y")];
        let cfg = HierarchicalConfig {
            hash_dim: 64,
            epochs: 5,
            ..Default::default()
        };
        let model = train_hierarchical(&data, &tax, &cfg).unwrap();
        // root -> A and A -> B are single-child links
        assert_eq!(model.node_classifiers().len(), 1);
        let b = tax.find_any("B").unwrap();
        assert!(model.node_classifiers().contains_key(&b));
    }

    #[test]
    fn node_without_data_for_all_children_is_degenerate() {
        let tax = Taxonomy::parse("X\nY\nZ\n").unwrap();
        let data = vec![example(0, "y", "Y"), example(1, "yy", "Y")];
        let cfg = HierarchicalConfig {
            hash_dim: 64,
            epochs: 2,
            ..Default::default()
        };
        let model = train_hierarchical(&data, &tax, &cfg).unwrap();
        assert_eq!(
            model.node_classifiers()[&0],
            NodeClassifier::Degenerate { child: 1 }
        );
        let top = model.predict_topk(&product("anything"), 1).unwrap();
        assert_eq!(top[0].label, "Y");
        assert_eq!(top[0].probability, 1.0);
    }

    #[test]
    fn path_scores_multiply() {
        let tax = Taxonomy::parse("A > X\nA > Y\nB > Z\n").unwrap();
        let a = tax.find_any("A").unwrap();
        let cfg = HierarchicalConfig {
            hash_dim: 2,
            ..Default::default()
        };
        // root: logits ln(0.6), ln(0.4); A: ln(0.5), ln(0.5)
        let mut nodes = BTreeMap::new();
        nodes.insert(
            0,
            NodeClassifier::Trained {
                weights: vec![0.0; 4],
                bias: vec![0.6f32.ln(), 0.4f32.ln()],
            },
        );
        nodes.insert(
            a,
            NodeClassifier::Trained {
                weights: vec![0.0; 4],
                bias: vec![0.0, 0.0],
            },
        );
        let model = HierarchicalModel::from_parts(tax.clone(), cfg, nodes).unwrap();
        let top = model.topk(&Product::new("p"), 3, 3).unwrap();
        assert_eq!(top[0].0, tax.find_any("Z").unwrap());
        assert!((top[0].1 - 0.4).abs() < 1e-6);
        assert!((top[1].1 - 0.30).abs() < 1e-6);
        assert_eq!(top[1].0, tax.find_any("X").unwrap());
        assert!(model.topk(&Product::new("p"), 2, 1).is_err());
    }

    #[test]
    fn greedy_equals_beam_one() {
        let tax = Taxonomy::parse("A > X\nA > Y\nB > Z\nB > W\n").unwrap();
        let mut data = Vec::new();
        for i in 0..10 {
            for (l, w) in [("X", "x q"), ("Y", "y q"), ("Z", "z r"), ("W", "w r")] {
                data.push(example(data.len(), &format!("{w} n{i}"), l));
            }
        }
        let cfg = HierarchicalConfig {
            hash_dim: 256,
            epochs: 3,
            ..Default::default()
        };
        let model = train_hierarchical(&data, &tax, &cfg).unwrap();
        for title in ["x", "q r", "w", "unseen words", "y q z"] {
            let p = product(title);
            let beam = model.topk(&p, 1, 1).unwrap()[0].0;
            assert_eq!(beam, *model.greedy_path(&p).last().unwrap());
        }
    }

    #[test]
    fn error_depths_count_first_wrong_decision() {
        let tax = Taxonomy::parse("A > X\nA > Y\nB > Z\n").unwrap();
        let a = tax.find_any("A").unwrap();
        let cfg = HierarchicalConfig {
            hash_dim: 2,
            ..Default::default()
        };
        // Always predicts X.
        let mut nodes = BTreeMap::new();
        for (node, bias) in [(0, [0.9f32, 0.1]), (a, [0.8, 0.2])] {
            nodes.insert(
                node,
                NodeClassifier::Trained {
                    weights: vec![0.0; 4],
                    bias: bias.map(f32::ln).to_vec(),
                },
            );
        }
        let model = HierarchicalModel::from_parts(tax, cfg, nodes).unwrap();
        let data = [
            example(0, "a", "X"),
            example(1, "b", "Y"),
            example(2, "c", "Y"),
            example(3, "d", "Z"),
        ];
        assert_eq!(model.error_depths(&data).unwrap(), vec![1, 2]);
        assert!(model.error_depths(&[example(4, "e", "Q")]).is_err());
    }
}
