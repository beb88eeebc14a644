//! Tokenization, dictionaries and structured-attribute serialization.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::catalog::Product;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "__sep__";
pub const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN];

/// Encoded sequences are left-padded to at least the widest default filter.
pub const MIN_ENCODED_LEN: usize = 5;

/// Lowercases and splits on runs of Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Turns an attribute name or value into plain words: `_`, `-` and `/`
/// become spaces, whitespace runs collapse, everything is lowercased.
pub fn naturalize(s: &str) -> String {
    let replaced: String = s
        .chars()
        .map(|c| if matches!(c, '_' | '-' | '/') { ' ' } else { c })
        .collect();
    replaced
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Flattens structured attributes into one string, `name value` per
/// attribute in stored order, optionally joined by the separator token.
pub fn serialize_structured(product: &Product, with_separator: bool) -> String {
    let joiner = if with_separator { " __sep__ " } else { " " };
    product
        .structured
        .iter()
        .map(|(name, value)| {
            let (n, v) = (naturalize(name), naturalize(value));
            match (n.is_empty(), v.is_empty()) {
                (false, false) => format!("{n} {v}"),
                (false, true) => n,
                (true, _) => v,
            }
        })
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(joiner)
}

/// Token to index map. Indices 0..3 are PAD, UNK and SEP; the rest are dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Default for Dictionary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Dictionary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Dictionary {
            tokens,
            freqs: vec![0; RESERVED.len()],
            index,
        }
    }

    fn push(&mut self, token: String, freq: u64) {
        debug_assert!(!self.index.contains_key(&token));
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.freqs.push(freq);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Index for a token, UNK when absent.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn frequency(&self, index: usize) -> Option<u64> {
        self.freqs.get(index).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// `index<TAB>token<TAB>frequency`, one row per entry, ascending.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            writeln!(w, "{i}\t{t}\t{f}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |why: &str| Error::format("dictionary", format!("line {}: {why}", i + 1));
            let mut cols = line.split('\t');
            let (Some(idx), Some(tok), Some(freq), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad("expected three tab-separated columns"));
            };
            let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
            let freq: u64 = freq.parse().map_err(|_| bad("bad frequency"))?;
            if idx != i {
                return Err(bad("indices must be dense and ascending"));
            }
            if i < RESERVED.len() && tok != RESERVED[i] {
                return Err(bad("reserved rows must come first"));
            }
            if tok.is_empty() || index.insert(tok.to_string(), i).is_some() {
                return Err(bad("empty or duplicate token"));
            }
            tokens.push(tok.to_string());
            freqs.push(freq);
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::format("dictionary", "missing reserved rows"));
        }
        Ok(Dictionary {
            tokens,
            freqs,
            index,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn count_tokens<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

/// Most frequent first, ties lexicographic.
fn ranked(counts: HashMap<String, u64>) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Frequency-trimmed dictionary over `tokenize` of every string.
pub fn build_dictionary<'a, I>(corpus: I, max_size: usize) -> Result<Dictionary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < RESERVED.len() {
        return Err(Error::InvalidArgument(format!(
            "dictionary max_size must be at least {}, got {max_size}",
            RESERVED.len()
        )));
    }
    let mut dict = Dictionary::reserved_only();
    for (tok, f) in ranked(count_tokens(corpus))
        .into_iter()
        .take(max_size - RESERVED.len())
    {
        dict.push(tok, f);
    }
    Ok(dict)
}

/// Joint dictionary over naturalized attribute names and values. Every
/// name token is kept; value tokens fill whatever capacity remains.
pub fn build_attribute_dictionary(products: &[Product], max_size: usize) -> Result<Dictionary> {
    let names: Vec<String> = products
        .iter()
        .flat_map(|p| p.structured.iter().map(|(n, _)| naturalize(n)))
        .collect();
    let values: Vec<String> = products
        .iter()
        .flat_map(|p| p.structured.iter().map(|(_, v)| naturalize(v)))
        .collect();
    let joint = count_tokens(names.iter().chain(&values).map(String::as_str));
    let name_tokens: HashSet<String> = names.iter().flat_map(|n| tokenize(n)).collect();
    let required = name_tokens.len() + RESERVED.len();
    if required > max_size {
        return Err(Error::InvalidArgument(format!(
            "attribute dictionary needs at least {required} entries to hold every attribute-name token, max_size is {max_size}"
        )));
    }
    let mut dict = Dictionary::reserved_only();
    let (named, rest): (Vec<_>, Vec<_>) = ranked(joint)
        .into_iter()
        .partition(|(t, _)| name_tokens.contains(t));
    for (tok, f) in named {
        dict.push(tok, f);
    }
    let room = max_size - dict.len();
    for (tok, f) in rest.into_iter().take(room) {
        dict.push(tok, f);
    }
    Ok(dict)
}

/// Dictionary indices for one attribute's text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    /// Number of trailing entries that come from real tokens.
    pub real_len: usize,
    pub source_attribute: String,
}

impl TokenSequence {
    pub fn with_source(mut self, attribute: impl Into<String>) -> Self {
        self.source_attribute = attribute.into();
        self
    }

    /// The real (non-padding) suffix.
    pub fn real(&self) -> &[usize] {
        &self.indices[self.indices.len() - self.real_len..]
    }
}

/// Tokenize, look up (UNK for misses), keep the first `max_len` tokens and
/// left-pad with PAD to at least [`MIN_ENCODED_LEN`].
pub fn encode(text: &str, dict: &Dictionary, max_len: usize) -> TokenSequence {
    encode_padded(text, dict, max_len, MIN_ENCODED_LEN)
}

pub fn encode_padded(text: &str, dict: &Dictionary, max_len: usize, min_len: usize) -> TokenSequence {
    let max_len = max_len.max(1);
    let real: Vec<usize> = tokenize(text)
        .iter()
        .take(max_len)
        .map(|t| dict.lookup(t))
        .collect();
    let real_len = real.len();
    let pad = min_len.saturating_sub(real_len);
    let mut indices = vec![PAD; pad];
    indices.extend(real);
    TokenSequence {
        indices,
        real_len,
        source_attribute: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The boxed example's attribute order.
    pub(crate) fn table_one_product() -> Product {
        Product::new("rails-top")
            .with_text("product_name", "Rails Womens Plaid Spread Collar Button Down Top")
            .with_text(
                "product_short_description",
                "This Rails Button Down Top is guaranteed authentic. It's crafted with 100% Rayon.",
            )
            .with_attr("assembled_product_weight", "0.5 Pounds")
            .with_attr("color", "White")
            .with_attr("clothing_size_type", "Regular")
            .with_attr("maternity", "N")
            .with_attr("clothing_size_group", "Women")
            .with_attr("age_demographic", "Women")
            .with_attr("brand", "Rails")
            .with_attr("fabric_material", "Jersey")
            .with_attr("clothing_size", "S")
            .with_attr("style_sleeve", "Long Sleeves")
            .with_attr("actual_color", "White Navy Sky")
            .with_attr("country_of_origin_assembly", "CN")
            .with_attr("personalizable", "N")
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Rails Womens Plaid Spread Collar Button Down Top"),
            ["rails", "womens", "plaid", "spread", "collar", "button", "down", "top"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  a \t b  "), ["a", "b"]);
        assert_eq!(tokenize("x\u{3000}y\u{a0}z"), ["x", "y", "z"]);
    }

    #[test]
    fn naturalize_examples() {
        assert_eq!(naturalize("fabric_material"), "fabric material");
        assert_eq!(naturalize("style_sleeve"), "style sleeve");
        assert_eq!(naturalize("abc"), "abc");
        assert_eq!(naturalize("Sleeve-Style / Tank__Top"), "sleeve style tank top");
    }

    #[test]
    fn serialize_table_one() {
        let s = serialize_structured(&table_one_product(), true);
        assert_eq!(
            s,
            "assembled product weight 0.5 pounds __sep__ color white __sep__ clothing size type regular __sep__ maternity n __sep__ clothing size group women __sep__ age demographic women __sep__ brand rails __sep__ fabric material jersey __sep__ clothing size s __sep__ style sleeve long sleeves __sep__ actual color white navy sky __sep__ country of origin assembly cn __sep__ personalizable n"
        );
        let plain = serialize_structured(&table_one_product(), false);
        assert!(!plain.contains(SEP_TOKEN));
        assert!(plain.starts_with("assembled product weight 0.5 pounds color white"));
    }

    #[test]
    fn serialize_edge_cases() {
        assert_eq!(serialize_structured(&Product::new("x"), true), "");
        let one = Product::new("x").with_attr("color", "red");
        assert_eq!(serialize_structured(&one, true), "color red");
    }

    #[test]
    fn build_dictionary_keeps_most_frequent() {
        let d = build_dictionary(["a a b", "a c"], 4).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.get("a"), Some(3));
        assert_eq!(d.frequency(3), Some(3));
        assert!(!d.contains("b") && !d.contains("c"));

        // ties are lexicographic
        let d = build_dictionary(["z y x", "x"], 5).unwrap();
        assert_eq!(d.token(3), Some("x"));
        assert_eq!(d.token(4), Some("y"));

        let d = build_dictionary(["a a b"], 3).unwrap();
        assert_eq!(d.len(), 3);
        assert!(build_dictionary(["a"], 2).is_err());
    }

    #[test]
    fn build_dictionary_exact_cap_at_full_scale() {
        let words: Vec<String> = (0..500_001).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let d = build_dictionary([text.as_str()], 500_000).unwrap();
        assert_eq!(d.len(), 500_000);
    }

    #[test]
    fn attribute_names_survive_trimming() {
        let mut products = vec![Product::new("p0").with_attr("color", "red")];
        for i in 0..50 {
            products.push(Product::new(format!("p{}", i + 1)).with_attr("size", "big big big huge"));
        }
        let d = build_attribute_dictionary(&products, 6).unwrap();
        assert!(d.contains("color"));
        assert!(d.contains("size"));
        assert_eq!(d.len(), 6);
        assert!(d.contains("big"));
        assert!(!d.contains("red"));

        let err = build_attribute_dictionary(&products, 4).unwrap_err();
        assert!(err.to_string().contains("at least 5"));

        assert_eq!(build_attribute_dictionary(&[], 100).unwrap().len(), 3);
    }

    #[test]
    fn encode_padding_truncation_and_unk() {
        let d = build_dictionary(["a b c d e f g h i j"], 100).unwrap();
        let e = encode("", &d, 8);
        assert_eq!(e.indices, vec![PAD; 5]);
        assert_eq!(e.real_len, 0);

        let e = encode("zzz", &d, 8);
        assert_eq!(e.indices, vec![PAD, PAD, PAD, PAD, UNK]);
        assert_eq!(e.real(), &[UNK]);

        let e = encode("a b c d e f g h i j", &d, 4);
        let want: Vec<usize> = ["a", "b", "c", "d"].iter().map(|t| d.lookup(t)).collect();
        assert_eq!(e.indices[1..], want[..]);
        assert_eq!(e.indices[0], PAD);

        let e = encode("a b c d e f", &d, 6);
        assert_eq!(e.indices.len(), 6);
        assert_eq!(e.real_len, 6);
    }

    #[test]
    fn separator_is_never_unknown() {
        let p = table_one_product();
        let s = serialize_structured(&p, true);
        let d = build_attribute_dictionary(&[p], 64).unwrap();
        let e = encode(&s, &d, 256);
        assert_eq!(e.indices.iter().filter(|&&i| i == SEP).count(), 12);
    }

    #[test]
    fn dictionary_file_round_trip() {
        let d = build_dictionary(["b a a c", "c c"], 10).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("0\t<pad>\t0\n1\t<unk>\t0\n2\t__sep__\t0\n3\tc\t3\n"));
        let back = Dictionary::read_from(&buf[..]).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);

        assert!(Dictionary::read_from(&b"0\t<pad>\t0\n2\t<unk>\t0\n"[..]).is_err());
        assert!(Dictionary::read_from(&b"0\tx\t0\n"[..]).is_err());
    }
}
