//! Labeled product data: the taxonomy, corpus ingest, stratification and
//! stratified train/validation/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A catalog item: free-text attributes plus ordered name/value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    #[serde(default)]
    pub unstructured: BTreeMap<String, String>,
    #[serde(default)]
    pub structured: Vec<(String, String)>,
}

impl Product {
    pub fn new(id: impl Into<String>) -> Self {
        Product {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn with_text(mut self, name: impl Into<String>, text: impl Into<String>) -> Self {
        self.unstructured.insert(name.into(), text.into());
        self
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.structured.push((name.into(), value.into()));
        self
    }

    /// Missing attributes read as empty text.
    pub fn text(&self, name: &str) -> &str {
        self.unstructured.get(name).map(String::as_str).unwrap_or("")
    }

    /// Checks the product-level invariants, returning the offending field names.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        if self.id.is_empty() {
            bad.push("id".to_string());
        }
        if self.unstructured.keys().any(|k| k.is_empty()) {
            bad.push("unstructured".to_string());
        }
        if self.structured.iter().any(|(n, _)| n.is_empty()) {
            bad.push("structured".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub product: Product,
    pub label: String,
}

/// One corpus line.
#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    label: String,
    #[serde(default)]
    unstructured: BTreeMap<String, String>,
    #[serde(default)]
    structured: Vec<(String, String)>,
}

impl From<&LabeledExample> for Record {
    fn from(ex: &LabeledExample) -> Self {
        Record {
            id: ex.product.id.clone(),
            label: ex.label.clone(),
            unstructured: ex.product.unstructured.clone(),
            structured: ex.product.structured.clone(),
        }
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub struct TaxonomyNode {
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
}

/// Rooted tree whose leaves are the product types. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    leaves: Vec<NodeId>,
    leaf_by_name: HashMap<String, NodeId>,
}

pub const PATH_SEPARATOR: &str = " > ";

impl Taxonomy {
    /// Builds a taxonomy from root-to-leaf paths (the root itself is implicit).
    pub fn from_paths<I, P, S>(paths: I) -> Result<Self>
    where
        I: IntoIterator<Item = P>,
        P: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut nodes = vec![TaxonomyNode {
            name: "root".to_string(),
            parent: None,
            children: Vec::new(),
            depth: 0,
        }];
        let mut any = false;
        for path in paths {
            let mut cur = 0;
            let mut len = 0;
            for seg in path {
                let seg = seg.as_ref().trim();
                if seg.is_empty() {
                    return Err(Error::Taxonomy("empty node name".into()));
                }
                len += 1;
                let existing = nodes[cur]
                    .children
                    .iter()
                    .copied()
                    .find(|&c| nodes[c].name == seg);
                cur = match existing {
                    Some(c) => c,
                    None => {
                        let id = nodes.len();
                        let depth = nodes[cur].depth + 1;
                        nodes.push(TaxonomyNode {
                            name: seg.to_string(),
                            parent: Some(cur),
                            children: Vec::new(),
                            depth,
                        });
                        nodes[cur].children.push(id);
                        id
                    }
                };
            }
            if len == 0 {
                return Err(Error::Taxonomy("empty path".into()));
            }
            any = true;
        }
        if !any {
            return Err(Error::Taxonomy("no paths".into()));
        }
        let leaves: Vec<NodeId> = (0..nodes.len())
            .filter(|&i| i != 0 && nodes[i].children.is_empty())
            .collect();
        let mut leaf_by_name = HashMap::new();
        for &l in &leaves {
            if leaf_by_name.insert(nodes[l].name.clone(), l).is_some() {
                return Err(Error::Taxonomy(format!(
                    "leaf name {:?} appears more than once",
                    nodes[l].name
                )));
            }
        }
        Ok(Taxonomy {
            nodes,
            leaves,
            leaf_by_name,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let paths: Vec<Vec<&str>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split(PATH_SEPARATOR.trim()).collect())
            .collect();
        Self::from_paths(paths)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One root-to-leaf path per line, in leaf order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &leaf in &self.leaves {
            let names: Vec<&str> = self.path(leaf)[1..]
                .iter()
                .map(|&n| self.nodes[n].name.as_str())
                .collect();
            out.push_str(&names.join(PATH_SEPARATOR));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &TaxonomyNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    /// Leaves in file order; this order defines class indices.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves
            .iter()
            .map(|&l| self.nodes[l].name.clone())
            .collect()
    }

    pub fn leaf(&self, label: &str) -> Option<NodeId> {
        self.leaf_by_name.get(label).copied()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        id != 0 && self.nodes[id].children.is_empty()
    }

    pub fn find_any(&self, name: &str) -> Option<NodeId> {
        (1..self.nodes.len()).find(|&i| self.nodes[i].name == name)
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Human-readable key used to name per-node blocks, e.g. `root > Shoes`.
    pub fn path_key(&self, id: NodeId) -> String {
        self.path(id)
            .iter()
            .map(|&n| self.nodes[n].name.as_str())
            .collect::<Vec<_>>()
            .join(PATH_SEPARATOR)
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.nodes[i].children.is_empty())
    }

    pub fn is_ancestor_or_self(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes[c].parent;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub examples: Vec<LabeledExample>,
    pub errors: Vec<RecordError>,
}

/// Reads a line-delimited corpus, keeping every valid record and reporting
/// the rest. Only an unreadable file is fatal.
pub fn ingest(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file), taxonomy)
}

pub fn ingest_reader<R: BufRead>(reader: R, taxonomy: &Taxonomy) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| RecordError {
            line: lineno,
            message,
        };
        let rec: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(fail(format!("malformed record: {e}")));
                continue;
            }
        };
        let product = Product {
            id: rec.id,
            unstructured: rec.unstructured,
            structured: rec.structured,
        };
        if let Err(fields) = product.validate() {
            report
                .errors
                .push(fail(format!("invalid fields: {}", fields.join(", "))));
            continue;
        }
        if taxonomy.leaf(&rec.label).is_none() {
            let why = if taxonomy.find_any(&rec.label).is_some() {
                "is not a leaf"
            } else {
                "is not in the taxonomy"
            };
            report
                .errors
                .push(fail(format!("label {:?} {why}", rec.label)));
            continue;
        }
        if !seen.insert(product.id.clone()) {
            report
                .errors
                .push(fail(format!("duplicate id {:?}", product.id)));
            continue;
        }
        report.examples.push(LabeledExample {
            product,
            label: rec.label,
        });
    }
    Ok(report)
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, &Record::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Groups example indices by label, classes in order of first appearance.
fn by_class(examples: &[LabeledExample]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        match pos.get(ex.label.as_str()) {
            Some(&p) => order[p].1.push(i),
            None => {
                pos.insert(&ex.label, order.len());
                order.push((ex.label.clone(), vec![i]));
            }
        }
    }
    order
}

/// Repeats examples of every class below `floor` cyclically until the class
/// reaches `floor`. The input comes first, unchanged; repeats are appended.
pub fn stratify(examples: &[LabeledExample], floor: usize) -> Vec<LabeledExample> {
    let floor = floor.max(1);
    let mut out = examples.to_vec();
    for (_, idx) in by_class(examples) {
        let n = idx.len();
        for j in 0..floor.saturating_sub(n) {
            out.push(examples[idx[j % n]].clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties go to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = [
            n as f64 * self.train,
            n as f64 * self.validation,
            n as f64 * self.test,
        ];
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Stratified split: each class is shuffled with `seed` and apportioned by
/// `fractions`. Classes are visited in sorted label order so the result does
/// not depend on input order beyond within-class order.
pub fn split(
    examples: &[LabeledExample],
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let mut classes = by_class(examples);
    classes.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit::default();
    for (_, mut idx) in classes {
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = fractions.apportion(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let ex = examples[i].clone();
            if j < n_train {
                out.train.push(ex);
            } else if j < n_train + n_val {
                out.validation.push(ex);
            } else {
                out.test.push(ex);
            }
        }
    }
    Ok(out)
}
