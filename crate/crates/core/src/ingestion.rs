//! Word-vector tables, block fixtures and declared proxies.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::block::Block;
use crate::decoder::ProxyMatrix;
use crate::error::{Result, RsdError};
use crate::scalar::Real;

/// Source tag for proxies induced from the block's own coordinates.
pub const COSINE_SOURCE: &str = "cosine (coordinate-induced; self-compatibility diagnostic)";

/// Default number of leading embedding-file lines kept as readout vocabulary.
pub const DEFAULT_READOUT_CAP: usize = 50_000;

/// Token → vector table with a fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<T> {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<T>,
    source: String,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn from_rows(tokens: Vec<String>, vectors: Array2<T>) -> Result<Self> {
        if tokens.len() != vectors.nrows() {
            return Err(RsdError::Ingestion(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(RsdError::Ingestion(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            vectors,
            source: "<memory>".into(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, token: &str) -> Option<ArrayView1<'_, T>> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Loads every line of a whitespace-separated `token v1 … vD` file.
fn unreadable(path: &Path, e: std::io::Error) -> RsdError {
    RsdError::Ingestion(format!("{}: {e}", path.display()))
}

pub fn load_embeddings<T: Real>(path: impl AsRef<Path>) -> Result<EmbeddingTable<T>> {
    load_embeddings_filtered(path, |_, _| true)
}

/// Loads the lines for which `keep(token, line_number)` holds. Lines are
/// still parsed and checked for a consistent dimension.
pub fn load_embeddings_filtered<T: Real>(
    path: impl AsRef<Path>,
    mut keep: impl FnMut(&str, usize) -> bool,
) -> Result<EmbeddingTable<T>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path).map_err(|e| unreadable(path, e))?);
    let mut dim: Option<usize> = None;
    let mut tokens = Vec::new();
    let mut index = HashMap::new();
    let mut flat: Vec<T> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| unreadable(path, e))?;
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let mut values = Vec::new();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| RsdError::Parse {
                path: display.clone(),
                line: lineno,
                detail: format!("not a number: {f:?}"),
            })?;
            values.push(T::lit(v));
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(RsdError::Parse {
                path: display,
                line: lineno,
                detail: format!("expected {d} values, found {}", values.len()),
            });
        }
        if !keep(token, lineno) {
            continue;
        }
        if index.contains_key(token) {
            log::warn!("{display}:{lineno}: duplicate token {token:?} ignored");
            continue;
        }
        index.insert(token.to_string(), tokens.len());
        tokens.push(token.to_string());
        flat.extend(values);
    }
    let d = dim.ok_or_else(|| RsdError::Ingestion(format!("{display}: no vectors")))?;
    let vectors = Array2::from_shape_vec((tokens.len(), d), flat).expect("rows have dimension d");
    Ok(EmbeddingTable {
        tokens,
        index,
        vectors,
        source: display,
    })
}

/// Keeps the tokens in `wanted` plus the first `readout_cap` lines.
pub fn load_embeddings_for<T: Real>(
    path: impl AsRef<Path>,
    wanted: &HashSet<String>,
    readout_cap: usize,
) -> Result<EmbeddingTable<T>> {
    load_embeddings_filtered(path, |tok, line| line <= readout_cap || wanted.contains(tok))
}

/// Lowercases, splits on whitespace and strips surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Mean-pools in-vocabulary token vectors per statement. Returns the block
/// and per-statement token coverage.
pub fn embed_statements<T: Real>(
    statements: &[String],
    table: &EmbeddingTable<T>,
) -> Result<(Block<T>, Array1<T>)> {
    let mut x = Array2::<T>::zeros((statements.len(), table.dim()));
    let mut coverage = Array1::zeros(statements.len());
    for (i, statement) in statements.iter().enumerate() {
        let tokens = tokenize(statement);
        let mut row = x.row_mut(i);
        let mut hits = 0usize;
        for tok in &tokens {
            if let Some(v) = table.get(tok) {
                row.zip_mut_with(&v, |a, &b| *a = *a + b);
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(RsdError::Ingestion(format!(
                "no in-vocabulary tokens in item {i}: {statement:?}"
            )));
        }
        let h = T::lit(hits as f64);
        row.mapv_inplace(|a| a / h);
        coverage[i] = T::lit(hits as f64 / tokens.len() as f64);
    }
    Ok((Block::new(statements.to_vec(), x)?, coverage))
}

/// Every statement token missing from `table`.
pub fn missing_tokens<T: Real>(statements: &[String], table: &EmbeddingTable<T>) -> Vec<String> {
    let mut seen = HashSet::new();
    statements
        .iter()
        .flat_map(|s| tokenize(s))
        .filter(|t| !table.contains(t) && seen.insert(t.clone()))
        .collect()
}

/// `A_ij = max(0, cos(x_i, x_j))` off the diagonal.
pub fn cosine_proxy<T: Real>(block: &Block<T>) -> Result<ProxyMatrix<T>> {
    let x = block.coords();
    let norms: Vec<T> = x.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n <= T::zero()) {
        return Err(RsdError::Ingestion(format!(
            "item {i} ({:?}) has a zero vector",
            block.items()[i]
        )));
    }
    let gram = x.dot(&x.t());
    let n = block.n_items();
    let raw = Array2::from_shape_fn((n, n), |(i, j)| (gram[[i, j]] / (norms[i] * norms[j])).max(T::zero()));
    ProxyMatrix::clipped(&raw, COSINE_SOURCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicAffinity {
    pub same_topic: f64,
    pub cross_topic: f64,
}

impl Default for TopicAffinity {
    fn default() -> Self {
        Self {
            same_topic: 1.0,
            cross_topic: 0.15,
        }
    }
}

/// One fixture line: the item text and its optional topic label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureItem {
    pub text: String,
    pub topic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockFixture {
    pub name: String,
    pub items: Vec<FixtureItem>,
}

impl BlockFixture {
    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|it| it.text.clone()).collect()
    }
}

/// Declared topic-affinity proxy.
pub fn topic_proxy<T: Real>(items: &[FixtureItem], affinity: TopicAffinity) -> Result<ProxyMatrix<T>> {
    let TopicAffinity { same_topic, cross_topic } = affinity;
    if !(0.0 <= cross_topic && cross_topic < same_topic && same_topic <= 1.0) {
        return Err(RsdError::Ingestion(format!(
            "topic affinities need 0 <= cross < same <= 1, got {cross_topic} / {same_topic}"
        )));
    }
    let topics = items
        .iter()
        .map(|it| {
            it.topic
                .as_deref()
                .ok_or_else(|| RsdError::Ingestion(format!("item {:?} has no topic label", it.text)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = items.len();
    let a = Array2::from_shape_fn((n, n), |(i, j)| match (i == j, topics[i] == topics[j]) {
        (true, _) => T::zero(),
        (false, true) => T::lit(same_topic),
        (false, false) => T::lit(cross_topic),
    });
    ProxyMatrix::new(a, format!("topic (same {same_topic}, cross {cross_topic})"))
}

/// Reads one item per line with an optional tab-separated topic. Blank lines
/// and lines starting with `#` are skipped.
pub fn load_block_fixture(path: impl AsRef<Path>) -> Result<BlockFixture> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    let items: Vec<FixtureItem> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| match l.split_once('\t') {
            Some((item, topic)) => FixtureItem {
                text: item.trim().to_string(),
                topic: Some(topic.trim().to_string()).filter(|t| !t.is_empty()),
            },
            None => FixtureItem {
                text: l.trim().to_string(),
                topic: None,
            },
        })
        .collect();
    if items.is_empty() {
        return Err(RsdError::Ingestion(format!("{}: no items", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "block".into());
    Ok(BlockFixture { name, items })
}

/// Reads an `N × N` proxy from a headerless CSV file.
pub fn load_proxy_csv<T: Real>(path: impl AsRef<Path>, n: usize) -> Result<ProxyMatrix<T>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| RsdError::Ingestion(format!("{display}: {e}")))?;
    let mut flat = Vec::with_capacity(n * n);
    let mut rows = 0;
    for (lineno, record) in reader.records().enumerate() {
        let record = record.map_err(|e| RsdError::Ingestion(format!("{display}: {e}")))?;
        if record.len() != n {
            return Err(RsdError::Parse {
                path: display,
                line: lineno + 1,
                detail: format!("expected {n} columns, found {}", record.len()),
            });
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| RsdError::Parse {
                path: display.clone(),
                line: lineno + 1,
                detail: format!("not a number: {field:?}"),
            })?;
            flat.push(T::lit(v));
        }
        rows += 1;
    }
    if rows != n {
        return Err(RsdError::Ingestion(format!("{display}: expected {n} rows, found {rows}")));
    }
    let a = Array2::from_shape_vec((n, n), flat).expect("n*n values");
    ProxyMatrix::new(a, format!("file {display}"))
        .map_err(|e| RsdError::Ingestion(format!("{display}: {e}")))
}
