use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{Error, Result};

/// Ontology classes whose entities survive filtering.
pub const MUSIC_CLASSES: [&str; 8] = [
    "MusicalArtist",
    "Band",
    "MusicGenre",
    "MusicalWork",
    "RecordLabel",
    "Instrument",
    "Engineer",
    "Place",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbRecord {
    pub entity_id: String,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub properties: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub categories: Vec<String>,
}

/// Offline knowledge-base snapshot keyed by entity id, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KbSnapshot {
    records: IndexMap<String, KbRecord>,
}

impl KbSnapshot {
    pub fn from_records(records: impl IntoIterator<Item = KbRecord>) -> Result<Self> {
        let mut out = IndexMap::new();
        for r in records {
            if out.contains_key(&r.entity_id) {
                return Err(Error::InvalidInput(format!("duplicate entity `{}`", r.entity_id)));
            }
            out.insert(r.entity_id.clone(), r);
        }
        Ok(Self { records: out })
    }

    pub fn get(&self, entity_id: &str) -> Option<&KbRecord> {
        self.records.get(entity_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &KbRecord> {
        self.records.values()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.records.values().collect::<Vec<_>>())
    }
}

pub fn load_kb_snapshot(path: impl AsRef<Path>) -> Result<KbSnapshot> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut records = IndexMap::new();
    for (line, rec) in read_jsonl_numbered::<KbRecord>(path)? {
        if records.contains_key(&rec.entity_id) {
            return Err(Error::parse(&name, line, format!("duplicate entity `{}`", rec.entity_id)));
        }
        records.insert(rec.entity_id.clone(), rec);
    }
    Ok(KbSnapshot { records })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AnnotationLine {
    artist_id: String,
    entities: Vec<String>,
}

/// Entity ids detected in each artist's biography.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    by_artist: IndexMap<String, Vec<String>>,
}

impl AnnotationSet {
    pub fn insert(&mut self, artist_id: impl Into<String>, entities: Vec<String>) {
        self.by_artist.insert(artist_id.into(), entities);
    }

    pub fn entities(&self, artist_id: &str) -> &[String] {
        self.by_artist.get(artist_id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_artist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_artist.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines: Vec<AnnotationLine> = self
            .by_artist
            .iter()
            .map(|(a, e)| AnnotationLine {
                artist_id: a.clone(),
                entities: e.clone(),
            })
            .collect();
        write_jsonl(path.as_ref(), &lines)
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::default();
    for (_, line) in read_jsonl_numbered::<AnnotationLine>(path.as_ref())? {
        set.by_artist.entry(line.artist_id).or_default().extend(line.entities);
    }
    Ok(set)
}

/// Class → property names to copy into the enriched text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PropertySelection(pub BTreeMap<String, Vec<String>>);

impl Default for PropertySelection {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        let mut put = |class: &str, props: &[&str]| {
            m.insert(class.to_string(), props.iter().map(|p| p.to_string()).collect());
        };
        put("MusicalArtist", &["homeTown", "instrument", "genre", "associatedBand"]);
        put("MusicalWork", &["writer", "producer", "recordedIn"]);
        put("MusicGenre", &["stylisticOrigin", "instrument"]);
        Self(m)
    }
}

impl PropertySelection {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
    }

    /// Property names for an entity, following its class order.
    fn for_classes<'a>(&'a self, classes: &[String]) -> Vec<&'a str> {
        let mut out: Vec<&str> = Vec::new();
        for c in classes {
            for p in self.0.get(c).into_iter().flatten() {
                if !out.contains(&p.as_str()) {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// Keeps entities present in `kb` with at least one music-domain class, in
/// input order and without duplicates.
pub fn filter_entities(entities: &[String], kb: &KbSnapshot) -> Vec<String> {
    let mut seen = HashSet::new();
    entities
        .iter()
        .filter(|e| {
            kb.get(e)
                .is_some_and(|r| r.classes.iter().any(|c| MUSIC_CLASSES.contains(&c.as_str())))
        })
        .filter(|e| seen.insert(e.as_str()))
        .cloned()
        .collect()
}

/// Appends each entity's selected property values and then its categories
/// to the biography, space separated. Internal whitespace in a value becomes
/// `_` so the value tokenizes as a single term.
pub fn enrich_document(doc: &Document, entities: &[String], kb: &KbSnapshot, props: &PropertySelection) -> Document {
    let mut text = doc.text.clone();
    let mut push = |value: &str| {
        let joined = value.split_whitespace().collect::<Vec<_>>().join("_");
        if !joined.is_empty() {
            text.push(' ');
            text.push_str(&joined);
        }
    };
    for e in entities {
        let Some(rec) = kb.get(e) else { continue };
        for p in props.for_classes(&rec.classes) {
            for v in rec.properties.get(p).into_iter().flatten() {
                push(v);
            }
        }
        for c in &rec.categories {
            push(c);
        }
    }
    Document {
        artist_id: doc.artist_id.clone(),
        text,
    }
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, v)| v).collect())
}

fn read_jsonl_numbered<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let name = path.display().to_string();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::parse(&name, n + 1, e.to_string()))?;
        out.push((n + 1, v));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
