//! Artist text features: tokenization, vocabulary, tf-idf and semantic
//! enrichment from entity annotations plus a knowledge-base snapshot.

mod kb;

pub use kb::{
    enrich_document, filter_entities, load_annotations, load_kb_snapshot, AnnotationSet, KbRecord, KbSnapshot,
    PropertySelection, MUSIC_CLASSES,
};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An artist biography.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub artist_id: String,
    pub text: String,
}

impl Document {
    pub fn new(artist_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            artist_id: artist_id.into(),
            text: text.into(),
        }
    }
}

/// Lowercases and splits on anything that is neither alphanumeric nor `_`,
/// dropping tokens shorter than two characters.
///
/// ```
/// use coldrec::text::tokenize;
/// assert_eq!(tokenize("The Beatles, rock!"), ["the", "beatles", "rock"]);
/// assert_eq!(tokenize("Abbey_Road_Studios 1969"), ["abbey_road_studios", "1969"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

/// Ranked term list with document frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    df: Vec<usize>,
    n_docs: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn df(&self, idx: usize) -> usize {
        self.df[idx]
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, idx: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df[idx] as f64)).ln() + 1.0
    }

    /// `N` on the first line, then `term<TAB>df` per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        (|| {
            writeln!(w, "{}", self.n_docs)?;
            for (t, df) in self.terms.iter().zip(&self.df) {
                writeln!(w, "{t}\t{df}")?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 1, "empty vocabulary file"))?
            .map_err(|e| Error::io(path, e))?;
        let n_docs = first.trim().parse().map_err(|_| Error::parse(&name, 1, "bad document count"))?;
        let mut terms = Vec::new();
        let mut df = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (t, d) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&name, n + 2, "expected `term<TAB>df`"))?;
            terms.push(t.to_string());
            df.push(d.parse().map_err(|_| Error::parse(&name, n + 2, "bad df"))?);
        }
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            terms,
            index,
            df,
            n_docs,
        })
    }
}

/// Keeps the `cap` terms with the highest document frequency, ties broken
/// lexicographically.
pub fn build_vocab(corpus: &[Document], cap: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidInput("vocabulary cap must be at least 1".into()));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        let mut terms = tokenize(&doc.text);
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_unstable_by(|(ta, da), (tb, db)| db.cmp(da).then_with(|| ta.cmp(tb)));
    ranked.truncate(cap);
    let (terms, df): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocabulary {
        terms,
        index,
        df,
        n_docs: corpus.len(),
    })
}

/// Sparse weights over a vocabulary, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.entries
            .binary_search_by_key(&idx, |(i, _)| *i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, w) in &self.entries {
            v[i] = w;
        }
        v
    }
}

/// Raw term counts times smoothed idf, then L2-normalized. Documents with no
/// vocabulary terms map to the zero vector.
pub fn tfidf_transform(doc: &Document, vocab: &Vocabulary) -> FeatureVector {
    let mut tf: HashMap<usize, f64> = HashMap::new();
    for t in tokenize(&doc.text) {
        if let Some(i) = vocab.index_of(&t) {
            *tf.entry(i).or_insert(0.0) += 1.0;
        }
    }
    let mut entries: Vec<(usize, f64)> = tf.into_iter().map(|(i, c)| (i, c * vocab.idf(i))).collect();
    entries.sort_unstable_by_key(|(i, _)| *i);
    let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let normalized = norm > 0.0;
    if normalized {
        for (_, w) in &mut entries {
            *w /= norm;
        }
    }
    FeatureVector {
        dim: vocab.len(),
        entries,
        normalized,
    }
}

/// Dense `#docs × |vocab|` tf-idf matrix.
pub fn tfidf_matrix(docs: &[Document], vocab: &Vocabulary) -> Array2<f64> {
    let mut out = Array2::zeros((docs.len(), vocab.len()));
    for (r, doc) in docs.iter().enumerate() {
        for (i, w) in tfidf_transform(doc, vocab).entries {
            out[[r, i]] = w;
        }
    }
    out
}

/// Reads `{"artist_id": ..., "text": ...}` lines.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let docs: Vec<Document> = kb::read_jsonl(path.as_ref())?;
    if let Some(d) = docs.iter().find(|d| d.text.is_empty()) {
        return Err(Error::InvalidInput(format!("document for `{}` is empty", d.artist_id)));
    }
    Ok(docs)
}

pub fn save_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    kb::write_jsonl(path.as_ref(), docs)
}
