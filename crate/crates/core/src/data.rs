//! Corpora, point clouds, their file formats, and model files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{M3Error, Result};
use crate::finite::{Document, FiniteM3Model};

/// Documents over a vocabulary of `vocab_size` words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub vocab: Vec<String>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn new(docs: Vec<Document>, vocab: Vec<String>) -> Result<Self> {
        let vocab_size = vocab.len();
        for (d, doc) in docs.iter().enumerate() {
            if let Some(&w) = doc.tokens.iter().find(|&&w| w >= vocab_size) {
                return Err(M3Error::InvalidParameter(format!(
                    "document {d} has token {w} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(Self { docs, vocab, vocab_size })
    }

    /// Vocabulary named `w0, w1, ...`.
    pub fn with_anonymous_vocab(docs: Vec<Document>, vocab_size: usize) -> Result<Self> {
        Self::new(docs, anonymous_vocab(vocab_size))
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Document::len).sum()
    }

    /// First `n` documents and the rest, sharing the vocabulary.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.docs.len());
        let part = |docs: &[Document]| Corpus {
            docs: docs.to_vec(),
            vocab: self.vocab.clone(),
            vocab_size: self.vocab_size,
        };
        (part(&self.docs[..n]), part(&self.docs[n..]))
    }
}

fn anonymous_vocab(v: usize) -> Vec<String> {
    (0..v).map(|i| format!("w{i}")).collect()
}

/// Points with optional ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<DVector<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<DVector<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(M3Error::Dimension {
                    expected: points.len(),
                    got: l.len(),
                });
            }
        }
        if let Some(first) = points.first() {
            if let Some(p) = points.iter().find(|p| p.len() != first.len()) {
                return Err(M3Error::Dimension {
                    expected: first.len(),
                    got: p.len(),
                });
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, DVector::len)
    }
}

/// A bag-of-words read together with the number of document ids that had no
/// entries and were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOfWords {
    pub corpus: Corpus,
    pub dropped_empty: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| M3Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| M3Error::io(path, e))
}

/// Reads a UCI bag-of-words corpus: `docword` holds the lines `D`, `V`,
/// `NNZ` followed by `docID wordID count` triples with 1-based ids; `vocab`
/// holds one word per line. Without a vocabulary file words are named
/// `w0, w1, ...`.
pub fn read_bag_of_words(docword: &Path, vocab: Option<&Path>) -> Result<BagOfWords> {
    let vocab_text = vocab.map(read_text).transpose()?;
    parse_bag_of_words(&read_text(docword)?, vocab_text.as_deref())
}

fn parse_header(lines: &mut std::iter::Enumerate<std::str::Lines<'_>>, name: &str) -> Result<usize> {
    let (i, line) = lines.next().ok_or_else(|| M3Error::Parse {
        line: 0,
        msg: format!("missing header line {name}"),
    })?;
    line.trim().parse().map_err(|_| M3Error::Parse {
        line: i + 1,
        msg: format!("expected a non-negative integer {name}, got {line:?}"),
    })
}

pub fn parse_bag_of_words(docword: &str, vocab: Option<&str>) -> Result<BagOfWords> {
    let mut lines = docword.lines().enumerate();
    let d = parse_header(&mut lines, "D")?;
    let v = parse_header(&mut lines, "V")?;
    let nnz = parse_header(&mut lines, "NNZ")?;
    let mut tokens: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut seen = 0usize;
    let mut last_line = 3;
    for (i, line) in lines {
        let line_no = i + 1;
        last_line = line_no;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| M3Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected \"docID wordID count\", got {line:?}")));
        }
        let mut nums = [0i64; 3];
        for (n, f) in nums.iter_mut().zip(&fields) {
            *n = f.parse().map_err(|_| err(format!("{f:?} is not an integer")))?;
        }
        let [doc, word, count] = nums;
        if doc < 1 || doc as usize > d {
            return Err(err(format!("docID {doc} outside 1..={d}")));
        }
        if word < 1 || word as usize > v {
            return Err(err(format!("wordID {word} outside 1..={v}")));
        }
        if count < 1 {
            return Err(err(format!("count must be positive, got {count}")));
        }
        tokens
            .entry(doc as usize)
            .or_default()
            .extend(std::iter::repeat(word as usize - 1).take(count as usize));
        seen += 1;
    }
    if seen != nnz {
        return Err(M3Error::Parse {
            line: last_line,
            msg: format!("header declares NNZ = {nnz} but {seen} entries were read"),
        });
    }
    let vocab = match vocab {
        Some(text) => {
            let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            if words.len() != v {
                return Err(M3Error::Dimension {
                    expected: v,
                    got: words.len(),
                });
            }
            words
        }
        None => anonymous_vocab(v),
    };
    let dropped_empty = d - tokens.len();
    if dropped_empty > 0 {
        log::warn!("dropped {dropped_empty} documents without entries");
    }
    let docs = tokens.into_values().map(Document::new).collect();
    Ok(BagOfWords {
        corpus: Corpus::new(docs, vocab)?,
        dropped_empty,
    })
}

/// UCI bag-of-words text of a corpus; entries sorted by document then word.
pub fn format_bag_of_words(corpus: &Corpus) -> String {
    let mut body = String::new();
    let mut nnz = 0;
    for (d, doc) in corpus.docs.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &w in &doc.tokens {
            *counts.entry(w).or_default() += 1;
        }
        for (w, c) in counts {
            body.push_str(&format!("{} {} {}\n", d + 1, w + 1, c));
            nnz += 1;
        }
    }
    format!("{}\n{}\n{}\n{}", corpus.docs.len(), corpus.vocab_size, nnz, body)
}

pub fn write_bag_of_words(corpus: &Corpus, docword: &Path, vocab: &Path) -> Result<()> {
    write_text(docword, &format_bag_of_words(corpus))?;
    let mut words = corpus.vocab.join("\n");
    words.push('\n');
    write_text(vocab, &words)
}

/// Reads a numeric CSV. A first row with a non-numeric feature field is
/// taken as a header. `label_column` is removed from the features and its
/// values are encoded as integers in order of first appearance.
pub fn read_points_csv(path: &Path, label_column: Option<usize>) -> Result<PointCloud> {
    parse_points_csv(&read_text(path)?, label_column)
}

pub fn parse_points_csv(text: &str, label_column: Option<usize>) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| M3Error::Csv(e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(M3Error::Parse {
                line,
                msg: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        if let Some(c) = label_column {
            if c >= w {
                return Err(M3Error::InvalidParameter(format!("label column {c} but rows have {w} fields")));
            }
        }
        let features: Vec<(usize, &str)> = rec.iter().enumerate().filter(|(k, _)| Some(*k) != label_column).collect();
        let parsed: Vec<Option<f64>> = features.iter().map(|(_, f)| f.parse().ok()).collect();
        if points.is_empty() && labels.is_empty() && parsed.iter().any(Option::is_none) && i == 0 {
            continue;
        }
        let mut x = Vec::with_capacity(features.len());
        for ((_, raw), value) in features.iter().zip(parsed) {
            x.push(value.ok_or_else(|| M3Error::Parse {
                line,
                msg: format!("{raw:?} is not a number"),
            })?);
        }
        points.push(DVector::from_vec(x));
        if let Some(c) = label_column {
            let next = codes.len();
            labels.push(*codes.entry(rec[c].to_string()).or_insert(next));
        }
    }
    PointCloud::new(points, label_column.map(|_| labels))
}

/// Features `x0, x1, ...` and an optional trailing `label` column, written
/// with shortest round-trip float formatting.
pub fn format_points_csv(cloud: &PointCloud) -> String {
    let mut out = (0..cloud.dim()).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    if cloud.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, p) in cloud.points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &cloud.labels {
            row.push(l[i].to_string());
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_points_csv(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_text(path, &format_points_csv(cloud))
}

/// One integer label per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| M3Error::Parse {
                line: i + 1,
                msg: format!("{l:?} is not a non-negative integer label"),
            })
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut s: String = labels.iter().map(|l| format!("{l}\n")).collect();
    if s.is_empty() {
        s.push('\n');
    }
    write_text(path, &s)
}

pub const SCHEMA_VERSION: u32 = 1;

/// Types stored in model files, tagged by `KIND`.
pub trait ModelKind: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl ModelKind for FiniteM3Model {
    const KIND: &'static str = "finite-m3";
}

impl ModelKind for crate::infinite::InfinitePosterior {
    const KIND: &'static str = "infinite-m3";
}

impl ModelKind for crate::hybrid::HybridPosterior {
    const KIND: &'static str = "hybrid-m3";
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EnvelopeOut<'a, T> {
    schema_version: u32,
    kind: &'a str,
    model: &'a T,
}

/// JSON text with a `schemaVersion` field. Floats use shortest round-trip
/// formatting, so loading reproduces every value exactly.
pub fn model_to_json<T: ModelKind>(model: &T) -> Result<String> {
    serde_json::to_string_pretty(&EnvelopeOut {
        schema_version: SCHEMA_VERSION,
        kind: T::KIND,
        model,
    })
    .map_err(|e| M3Error::ModelFormat(e.to_string()))
}

pub fn model_from_json<T: ModelKind>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| M3Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let version = value
        .get("schemaVersion")
        .ok_or_else(|| M3Error::ModelFormat("missing schemaVersion".into()))?;
    if version.as_u64() != Some(u64::from(SCHEMA_VERSION)) {
        let shown = match version {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        return Err(M3Error::UnsupportedVersion(shown));
    }
    let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or_default();
    if kind != T::KIND {
        return Err(M3Error::ModelFormat(format!("expected a {} model, found {kind:?}", T::KIND)));
    }
    let model = value
        .get("model")
        .cloned()
        .ok_or_else(|| M3Error::ModelFormat("missing model".into()))?;
    serde_json::from_value(model).map_err(|e| M3Error::ModelFormat(e.to_string()))
}

pub fn save_model<T: ModelKind>(model: &T, path: &Path) -> Result<()> {
    write_text(path, &model_to_json(model)?)
}

pub fn load_model<T: ModelKind>(path: &Path) -> Result<T> {
    model_from_json(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry_bag_of_words() {
        let b = parse_bag_of_words("1\n1\n1\n1 1 3\n", None).unwrap();
        assert_eq!(b.corpus.docs, vec![Document::new(vec![0, 0, 0])]);
        assert_eq!(b.corpus.vocab_size, 1);
    }

    #[test]
    fn empty_bag_of_words() {
        let b = parse_bag_of_words("0\n5\n0\n", None).unwrap();
        assert!(b.corpus.docs.is_empty());
        assert_eq!(b.corpus.vocab_size, 5);
    }

    #[test]
    fn malformed_triple_names_line_four() {
        match parse_bag_of_words("1\n1\n1\n1 1\n", None) {
            Err(M3Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bag_of_words_errors() {
        assert!(matches!(parse_bag_of_words("1\n2\n2\n1 1 1\n", None), Err(M3Error::Parse { .. })));
        assert!(matches!(parse_bag_of_words("1\n2\n1\n1 3 1\n", None), Err(M3Error::Parse { line: 4, .. })));
        assert!(matches!(parse_bag_of_words("1\n2\n1\n1 1 0\n", None), Err(M3Error::Parse { line: 4, .. })));
        assert!(parse_bag_of_words("1\n2\n1\n1 1 1\n", Some("a\n")).is_err());
    }

    #[test]
    fn sparse_doc_ids_are_dropped() {
        let b = parse_bag_of_words("3\n2\n2\n1 2 1\n3 1 2\n", Some("x\ny\n")).unwrap();
        assert_eq!(b.dropped_empty, 1);
        assert_eq!(b.corpus.docs, vec![Document::new(vec![1]), Document::new(vec![0, 0])]);
        assert_eq!(b.corpus.vocab, vec!["x", "y"]);
    }

    #[test]
    fn bag_of_words_round_trip() {
        let c = Corpus::with_anonymous_vocab(vec![Document::new(vec![2, 0, 2]), Document::new(vec![1])], 3).unwrap();
        let back = parse_bag_of_words(&format_bag_of_words(&c), Some(&c.vocab.join("\n"))).unwrap();
        assert_eq!(back.corpus.docs, vec![Document::new(vec![0, 2, 2]), Document::new(vec![1])]);
    }

    #[test]
    fn csv_with_and_without_header() {
        let plain = parse_points_csv("1,2\n3,4\n", None).unwrap();
        assert_eq!(plain.len(), 2);
        assert_eq!(plain.dim(), 2);
        assert!(plain.labels.is_none());
        let headed = parse_points_csv("a,b\n1,2\n3,4\n", None).unwrap();
        assert_eq!(plain, headed);
    }

    #[test]
    fn csv_labels_factor_encoded() {
        let c = parse_points_csv("x,y,kind\n1,2,cat\n3,4,dog\n5,6,cat\n", Some(2)).unwrap();
        assert_eq!(c.labels, Some(vec![0, 1, 0]));
        assert_eq!(c.points[2], DVector::from_vec(vec![5.0, 6.0]));
    }

    #[test]
    fn ragged_csv_rejected() {
        assert!(matches!(parse_points_csv("1,2\n3\n", None), Err(M3Error::Parse { line: 2, .. })));
    }

    #[test]
    fn points_csv_round_trip_is_exact() {
        let pts = vec![DVector::from_vec(vec![0.1 + 0.2, -1e-300]), DVector::from_vec(vec![1.0 / 3.0, 7.0])];
        let c = PointCloud::new(pts, Some(vec![4, 1])).unwrap();
        let back = parse_points_csv(&format_points_csv(&c), Some(2)).unwrap();
        assert_eq!(back.points, c.points);
        assert_eq!(back.labels, Some(vec![0, 1]));
    }

    #[test]
    fn unsupported_and_truncated_model_files() {
        let t = nalgebra::DMatrix::from_row_slice(1, 2, &[0.25, 0.75]);
        let m = FiniteM3Model::new(t.clone(), t, 0.5, 2.0, 1.0 / 3.0).unwrap();
        let json = model_to_json(&m).unwrap();
        assert_eq!(model_from_json::<FiniteM3Model>(&json).unwrap(), m);
        let v99 = json.replace("\"schemaVersion\": 1", "\"schemaVersion\": \"99\"");
        assert!(matches!(
            model_from_json::<FiniteM3Model>(&v99),
            Err(M3Error::UnsupportedVersion(v)) if v == "99"
        ));
        assert!(matches!(
            model_from_json::<FiniteM3Model>(&json[..json.len() / 2]),
            Err(M3Error::Parse { .. })
        ));
    }
}
