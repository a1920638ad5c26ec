//! Feedback matrices, the item→artist relation and artist-disjoint splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Sparse user × item play-count matrix.
///
/// Ids are kept in first-appearance order and indices are dense. Stored
/// counts are always at least 1; absence means zero. Entries remember their
/// insertion order, which is the order they are written back out in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeedbackMatrix {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    entries: IndexMap<(usize, usize), u64>,
}

impl FeedbackMatrix {
    /// Empty matrix over fixed id lists. Duplicate ids are rejected.
    pub fn with_ids(user_ids: Vec<String>, item_ids: Vec<String>) -> Result<Self> {
        let user_index = index_of(&user_ids, "user")?;
        let item_index = index_of(&item_ids, "item")?;
        Ok(Self {
            user_ids,
            item_ids,
            user_index,
            item_index,
            entries: IndexMap::new(),
        })
    }

    /// Adds `count` plays, registering unseen ids at the end of the id lists.
    pub fn add(&mut self, user: &str, item: &str, count: u64) {
        if count == 0 {
            return;
        }
        let u = intern(&mut self.user_ids, &mut self.user_index, user);
        let i = intern(&mut self.item_ids, &mut self.item_index, item);
        *self.entries.entry((u, i)).or_insert(0) += count;
    }

    /// Adds plays by index. Panics if an index is out of range.
    pub fn add_at(&mut self, user: usize, item: usize, count: u64) {
        assert!(user < self.user_ids.len() && item < self.item_ids.len());
        if count > 0 {
            *self.entries.entry((user, item)).or_insert(0) += count;
        }
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn get(&self, user: usize, item: usize) -> u64 {
        self.entries.get(&(user, item)).copied().unwrap_or(0)
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.entries.iter().map(|(&(u, i), &c)| (u, i, c))
    }

    /// Sum of all stored counts.
    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Per-user sparse rows of `(item, count)`.
    pub fn user_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.n_users()];
        for (u, i, c) in self.iter() {
            rows[u].push((i, c as f64));
        }
        rows
    }

    /// Per-item sparse columns of `(user, count)`.
    pub fn item_cols(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_items()];
        for (u, i, c) in self.iter() {
            cols[i].push((u, c as f64));
        }
        cols
    }

    /// Copy of this matrix whose user list is exactly `user_ids`, in that
    /// order. Every user with stored entries must appear in `user_ids`.
    pub fn with_user_order(&self, user_ids: &[String]) -> Result<Self> {
        let mut out = Self::with_ids(user_ids.to_vec(), self.item_ids.clone())?;
        for (u, i, c) in self.iter() {
            let id = &self.user_ids[u];
            let nu = out.user_index(id).ok_or_else(|| {
                Error::InvalidInput(format!("user `{id}` has feedback but is not in the target user list"))
            })?;
            out.add_at(nu, i, c);
        }
        Ok(out)
    }

    /// Writes `user<TAB>item<TAB>count` lines in insertion order.
    pub fn write_triples<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (u, i, c) in self.iter() {
            writeln!(w, "{}\t{}\t{}", self.user_ids[u], self.item_ids[i], c)?;
        }
        w.flush()
    }

    pub fn save_triples(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_triples(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

fn index_of(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(map)
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    ids.push(id.to_string());
    index.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

/// Parses triples from a reader. `source_name` labels parse errors.
pub fn read_triples<R: Read>(reader: R, source_name: &str) -> Result<FeedbackMatrix> {
    let mut m = FeedbackMatrix::with_ids(Vec::new(), Vec::new())?;
    let mut lines = 0usize;
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        lines += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(source_name, lineno, "expected `user<TAB>item<TAB>count`"));
        }
        let count: u64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(source_name, lineno, format!("bad count `{}`", fields[2])))?;
        if count < 1 {
            return Err(Error::parse(source_name, lineno, "count must be at least 1"));
        }
        m.add(fields[0], fields[1], count);
    }
    if lines == 0 {
        return Err(Error::parse(source_name, 0, "empty triples file"));
    }
    Ok(m)
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<FeedbackMatrix> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_triples(f, &path.display().to_string())
}

/// Total map from item id to artist id, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtistMap {
    item_to_artist: IndexMap<String, String>,
}

impl ArtistMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item: impl Into<String>, artist: impl Into<String>) {
        self.item_to_artist.insert(item.into(), artist.into());
    }

    pub fn artist_of(&self, item: &str) -> Option<&str> {
        self.item_to_artist.get(item).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.item_to_artist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_to_artist.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.item_to_artist.iter().map(|(i, a)| (i.as_str(), a.as_str()))
    }

    /// Distinct artists of the given items, in first-appearance order.
    pub fn artists_of_items(&self, items: &[String]) -> Result<Vec<String>> {
        let mut seen = IndexMap::new();
        for item in items {
            let a = self.require(item)?;
            seen.entry(a.to_string()).or_insert(());
        }
        Ok(seen.into_keys().collect())
    }

    fn require(&self, item: &str) -> Result<&str> {
        self.artist_of(item)
            .ok_or_else(|| Error::InvalidInput(format!("item `{item}` has no artist mapping")))
    }

    pub fn read<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::parse(source_name, n + 1, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((item, artist)) if !item.is_empty() && !artist.is_empty() && !artist.contains('\t') => {
                    map.insert(item, artist)
                }
                _ => return Err(Error::parse(source_name, n + 1, "expected `item<TAB>artist`")),
            }
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        (|| {
            for (i, a) in self.iter() {
                writeln!(w, "{i}\t{a}")?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path, e))
    }
}

/// Sums each user's counts over all songs of the same artist. Columns of the
/// result are artists in order of first appearance over `m`'s items.
pub fn aggregate_to_artist(m: &FeedbackMatrix, am: &ArtistMap) -> Result<FeedbackMatrix> {
    let artists = am.artists_of_items(m.item_ids())?;
    let mut r = FeedbackMatrix::with_ids(m.user_ids().to_vec(), artists)?;
    let col: Vec<usize> = m
        .item_ids()
        .iter()
        .map(|item| r.item_index(am.artist_of(item).unwrap_or_default()).unwrap_or(0))
        .collect();
    for (u, i, c) in m.iter() {
        r.add_at(u, col[i], c);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::InvalidInput(format!("unknown partition `{other}`"))),
        }
    }
}

/// Train/validation/test fractions of artists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidInput(format!("split ratios must be non-negative: {self:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split ratios must sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Artist counts per partition: floor for val and test, remainder to train.
    pub fn counts(&self, n_artists: usize) -> Result<[usize; 3]> {
        self.validate()?;
        // the epsilon absorbs products like 0.1 * 30 = 3.0000000000000004 in
        // the other direction (e.g. 0.7 * 10 = 6.999999999999999)
        let floor = |r: f64| ((n_artists as f64) * r + 1e-9).floor() as usize;
        let val = floor(self.val);
        let test = floor(self.test);
        if val + test > n_artists {
            return Err(Error::InvalidInput("split ratios exceed artist count".into()));
        }
        let counts = [n_artists - val - test, val, test];
        for (p, (&ratio, &count)) in Partition::ALL
            .iter()
            .zip([self.train, self.val, self.test].iter().zip(counts.iter()))
        {
            if ratio > 0.0 && count == 0 {
                return Err(Error::InvalidInput(format!(
                    "partition `{p}` has ratio {ratio} but receives no artists out of {n_artists}"
                )));
            }
        }
        Ok(counts)
    }
}

/// Artist-disjoint partition of a feedback matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: FeedbackMatrix,
    pub val: FeedbackMatrix,
    pub test: FeedbackMatrix,
    pub artist_assignment: BTreeMap<String, Partition>,
}

impl SplitBundle {
    pub fn part(&self, p: Partition) -> &FeedbackMatrix {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn artists_in(&self, p: Partition) -> impl Iterator<Item = &str> {
        self.artist_assignment
            .iter()
            .filter(move |(_, &q)| q == p)
            .map(|(a, _)| a.as_str())
    }

    /// Writes `train.tsv`, `val.tsv`, `test.tsv`, `artist_assignment.tsv`
    /// and a `users.ids` file holding the shared user order.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in Partition::ALL {
            self.part(p).save_triples(dir.join(format!("{p}.tsv")))?;
        }
        let mut lines = String::new();
        for (a, p) in &self.artist_assignment {
            lines.push_str(&format!("{a}\t{p}\n"));
        }
        write_string(&dir.join("artist_assignment.tsv"), &lines)?;
        write_ids(dir.join("users.ids"), self.train.user_ids())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let users = read_ids(dir.join("users.ids"))?;
        let load = |p: Partition| -> Result<FeedbackMatrix> {
            let path = dir.join(format!("{p}.tsv"));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if text.is_empty() {
                return FeedbackMatrix::with_ids(users.clone(), Vec::new());
            }
            read_triples(text.as_bytes(), &path.display().to_string())?.with_user_order(&users)
        };
        let path = dir.join("artist_assignment.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut artist_assignment = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let (a, p) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path.display().to_string(), n + 1, "expected `artist<TAB>partition`"))?;
            artist_assignment.insert(a.to_string(), p.parse()?);
        }
        Ok(Self {
            train: load(Partition::Train)?,
            val: load(Partition::Val)?,
            test: load(Partition::Test)?,
            artist_assignment,
        })
    }
}

/// Shuffles artists with a seeded generator and sends every item's feedback
/// column wholesale to its artist's partition. Users are shared by all three
/// partitions.
pub fn split_by_artist(m: &FeedbackMatrix, am: &ArtistMap, ratios: SplitRatios, seed: u64) -> Result<SplitBundle> {
    let mut artists = am.artists_of_items(m.item_ids())?;
    let counts = ratios.counts(artists.len())?;
    artists.shuffle(&mut seed::rng(seed));

    let mut artist_assignment = BTreeMap::new();
    let mut cursor = 0;
    for (p, n) in Partition::ALL.iter().zip(counts) {
        for a in &artists[cursor..cursor + n] {
            artist_assignment.insert(a.clone(), *p);
        }
        cursor += n;
    }
    let assign = |art: Option<&str>| artist_assignment[art.unwrap_or_default()];
    let item_part: Vec<Partition> = m.item_ids().iter().map(|i| assign(am.artist_of(i))).collect();

    let mut parts: Vec<FeedbackMatrix> = Partition::ALL
        .iter()
        .map(|p| {
            let items = m
                .item_ids()
                .iter()
                .zip(&item_part)
                .filter(|(_, q)| *q == p)
                .map(|(i, _)| i.clone())
                .collect();
            FeedbackMatrix::with_ids(m.user_ids().to_vec(), items)
        })
        .collect::<Result<_>>()?;
    let local: Vec<usize> = m
        .item_ids()
        .iter()
        .zip(&item_part)
        .map(|(id, p)| parts[*p as usize].item_index(id).unwrap_or_default())
        .collect();
    for (u, i, c) in m.iter() {
        parts[item_part[i] as usize].add_at(u, local[i], c);
    }
    let test = parts.pop().unwrap_or_else(|| unreachable!());
    let val = parts.pop().unwrap_or_else(|| unreachable!());
    let train = parts.pop().unwrap_or_else(|| unreachable!());
    Ok(SplitBundle {
        train,
        val,
        test,
        artist_assignment,
    })
}

pub(crate) fn write_string(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One id per line.
pub fn write_ids(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let mut s = String::with_capacity(ids.len() * 8);
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    write_string(path.as_ref(), &s)
}

pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
