//! Desk-scale synthetic corpus with known latent structure.
//!
//! Artists draw a latent vector; songs perturb their artist's vector; users
//! play songs with probability increasing in the inner product. Biographies
//! read the first quarter of the coordinates, knowledge-base entities the
//! second quarter, and spectrograms the second half.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{KeyValues, PipelineConfig};
use crate::audio::synth_spectrogram;
use crate::container::{save_matrix, Section};
use crate::data::{ArtistMap, FeedbackMatrix};
use crate::error::{Error, Result};
use crate::seed;
use crate::text::{save_documents, AnnotationSet, Document, KbRecord, KbSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub artists: usize,
    pub songs_per_artist: usize,
    pub dim: usize,
    /// Probability of flipping each text or knowledge-base signal token.
    pub text_noise: f64,
    /// Spectrogram noise amplitude; also scales noise on template weights.
    pub audio_noise: f64,
    pub plays_min: usize,
    pub plays_max: usize,
    /// Sharpness of the play distribution over songs.
    pub preference: f64,
    /// Standard deviation of a song around its artist.
    pub song_spread: f64,
    pub bins: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 500,
            artists: 200,
            songs_per_artist: 10,
            dim: 16,
            text_noise: 0.1,
            audio_noise: 0.3,
            plays_min: 20,
            plays_max: 60,
            preference: 2.0,
            song_spread: 0.5,
            bins: 32,
            frames: 160,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, source)?;
        let mut s = Self::default();
        kv.take("users", &mut s.users)?;
        kv.take("artists", &mut s.artists)?;
        kv.take("songs_per_artist", &mut s.songs_per_artist)?;
        kv.take("dim", &mut s.dim)?;
        kv.take("text_noise", &mut s.text_noise)?;
        kv.take("audio_noise", &mut s.audio_noise)?;
        kv.take("plays_min", &mut s.plays_min)?;
        kv.take("plays_max", &mut s.plays_max)?;
        kv.take("preference", &mut s.preference)?;
        kv.take("song_spread", &mut s.song_spread)?;
        kv.take("bins", &mut s.bins)?;
        kv.take("frames", &mut s.frames)?;
        kv.take("seed", &mut s.seed)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if [self.users, self.artists, self.songs_per_artist, self.plays_min, self.bins, self.frames]
            .contains(&0)
        {
            return Err(Error::InvalidInput("synthetic counts must be at least 1".into()));
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            return Err(Error::InvalidInput("latent dim must be a positive multiple of 4".into()));
        }
        if self.plays_max < self.plays_min {
            return Err(Error::InvalidInput("plays_max must be at least plays_min".into()));
        }
        if !(0.0..=1.0).contains(&self.text_noise) || self.audio_noise < 0.0 || self.song_spread < 0.0 {
            return Err(Error::InvalidInput("noise levels must be non-negative (text noise at most 1)".into()));
        }
        Ok(())
    }
}

/// Configuration written next to a generated corpus.
pub fn desk_config(spec: &SyntheticSpec) -> PipelineConfig {
    let mut c = PipelineConfig {
        seed: spec.seed,
        ..PipelineConfig::default()
    };
    for w in [&mut c.wmf_songs, &mut c.wmf_artists] {
        w.k = 32;
        w.alpha = 10.0;
        w.lambda = 1.0;
    }
    c.artist_net.hidden = 256;
    c.artist_net.dropout = 0.5;
    c.track_scale = 0.0625;
    c.patch_frames = (spec.frames * 3 / 5).max(64).min(spec.frames);
    c.train_artist.max_epochs = 80;
    c.train_artist.patience = 10;
    c.train_track.max_epochs = 40;
    c.train_track.patience = 8;
    c.train_fusion.max_epochs = 80;
    c.train_fusion.patience = 10;
    c
}

const FILLER: [&str; 24] = [
    "music", "band", "album", "tour", "record", "sound", "song", "live", "studio", "released", "debut", "single",
    "group", "career", "formed", "known", "style", "member", "chart", "label", "stage", "show", "years", "fans",
];

fn sign(v: f64) -> char {
    if v >= 0.0 {
        'p'
    } else {
        'n'
    }
}

fn noisy_sign<R: Rng>(v: f64, noise: f64, rng: &mut R) -> char {
    let flip = rng.random::<f64>() < noise;
    sign(if flip { -v } else { v })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gaussian(rows: usize, cols: usize, seed_: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed_);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

fn id(prefix: &str, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).max(1).to_string().len();
    format!("{prefix}{i:0width$}")
}

/// Writes the corpus and a ready-to-run `config.conf` into `dir`; returns
/// the config path.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("spectrograms")).map_err(|e| Error::io(dir, e))?;
    let d = spec.dim;
    let n_songs = spec.artists * spec.songs_per_artist;

    let artist_ids: Vec<String> = (0..spec.artists).map(|j| id("ar", j, spec.artists)).collect();
    let song_ids: Vec<String> = (0..n_songs).map(|s| id("so", s, n_songs)).collect();
    let user_ids: Vec<String> = (0..spec.users).map(|u| id("us", u, spec.users)).collect();
    let artist_of = |s: usize| s / spec.songs_per_artist;

    let a = gaussian(spec.artists, d, seed::named(spec.seed, "artists"));
    let mut songs = gaussian(n_songs, d, seed::named(spec.seed, "songs")) * spec.song_spread;
    for (s, mut row) in songs.axis_iter_mut(Axis(0)).enumerate() {
        row += &a.row(artist_of(s));
    }
    let users = gaussian(spec.users, d, seed::named(spec.seed, "users"));

    let mut am = ArtistMap::new();
    for (s, sid) in song_ids.iter().enumerate() {
        am.insert(sid.clone(), artist_ids[artist_of(s)].clone());
    }
    am.save(dir.join("artists.tsv"))?;

    let mut plays = FeedbackMatrix::with_ids(user_ids.clone(), song_ids.clone())?;
    let mut rng = seed::rng(seed::named(spec.seed, "plays"));
    let logits = users.dot(&songs.t()) * (spec.preference / (d as f64).sqrt());
    for (u, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut cdf = Vec::with_capacity(n_songs);
        let mut acc = 0.0;
        for v in row {
            acc += (v - max).exp();
            cdf.push(acc);
        }
        let n = rng.random_range(spec.plays_min..=spec.plays_max);
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let x = rng.random::<f64>() * acc;
            let s = cdf.partition_point(|c| *c <= x).min(n_songs - 1);
            *counts.entry(s).or_insert(0u64) += 1;
        }
        for (s, c) in counts {
            plays.add_at(u, s, c);
        }
    }
    plays.save_triples(dir.join("plays.tsv"))?;

    let quarter = d / 4;
    let mut rng = seed::rng(seed::named(spec.seed, "text"));
    let mut docs = Vec::with_capacity(spec.artists);
    for (j, aid) in artist_ids.iter().enumerate() {
        let mut tokens: Vec<String> = Vec::new();
        for i in 0..quarter {
            let v = a[[j, i]];
            let reps = ((3.0 * v.abs()).round() as usize).max(1);
            let tok = format!("w{i}{}", noisy_sign(v, spec.text_noise, &mut rng));
            tokens.extend(std::iter::repeat_n(tok, reps));
        }
        for _ in 0..12 {
            tokens.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
        }
        tokens.shuffle(&mut rng);
        docs.push(Document::new(aid.clone(), tokens.join(" ")));
    }
    save_documents(dir.join("documents.jsonl"), &docs)?;

    let mut rng = seed::rng(seed::named(spec.seed, "kb"));
    let mut records = Vec::new();
    let mut annotations = AnnotationSet::default();
    let kb_dims: Vec<usize> = (quarter..2 * quarter).collect();
    let (genre_dims, instrument_dims) = kb_dims.split_at(kb_dims.len().div_ceil(2));
    let n_players = (spec.artists / 5).max(1);
    for p in 0..n_players {
        let i = kb_dims[rng.random_range(0..kb_dims.len())];
        let mut properties = BTreeMap::new();
        properties.insert("genre".to_string(), vec![format!("K{i} {}1", sign(rng.random::<f64>() - 0.5))]);
        properties.insert("team".to_string(), vec![format!("Club {}", rng.random_range(0..10))]);
        records.push(KbRecord {
            entity_id: format!("dbr:Player_{p}"),
            classes: vec!["SoccerPlayer".into(), "Athlete".into()],
            properties,
            categories: vec![format!("Category:K{i} {}", sign(rng.random::<f64>() - 0.5))],
        });
    }
    for (j, aid) in artist_ids.iter().enumerate() {
        let value = |i: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let v = a[[j, i]];
            let level = ((v.abs() / 0.6).floor() as usize).min(2);
            format!("K{i} {}{level}", noisy_sign(v, spec.text_noise, rng))
        };
        let mut properties = BTreeMap::new();
        properties.insert("genre".to_string(), genre_dims.iter().map(|&i| value(i, &mut rng)).collect());
        properties.insert("instrument".to_string(), instrument_dims.iter().map(|&i| value(i, &mut rng)).collect());
        properties.insert("homeTown".to_string(), vec![format!("Town {}", rng.random_range(0..20))]);
        let categories = kb_dims
            .iter()
            .map(|&i| format!("Category:K{i} {}", noisy_sign(a[[j, i]], spec.text_noise, &mut rng)))
            .collect();
        let entity = format!("dbr:Artist_{j}");
        records.push(KbRecord {
            entity_id: entity.clone(),
            classes: vec!["MusicalArtist".into()],
            properties,
            categories,
        });
        let player = format!("dbr:Player_{}", rng.random_range(0..n_players));
        annotations.insert(aid.clone(), vec![entity, player]);
    }
    KbSnapshot::from_records(records)?.save(dir.join("kb.jsonl"))?;
    annotations.save(dir.join("annotations.jsonl"))?;

    let half = d / 2;
    let mut rng = seed::rng(seed::named(spec.seed, "audio"));
    for (s, sid) in song_ids.iter().enumerate() {
        let weights: Vec<f64> = (half..d)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (softplus(1.5 * songs[[s, i]]) + 0.3 * spec.audio_noise * e).max(0.0)
            })
            .collect();
        let noise_seed = seed::named(spec.seed, sid);
        synth_spectrogram(spec.bins, spec.frames, &weights, spec.audio_noise, noise_seed)
            .save(dir.join("spectrograms").join(format!("{sid}.cqts")))?;
    }

    save_matrix(
        dir.join("truth.csmx"),
        &[
            Section::f64("artists", a),
            Section::f64("songs", songs),
            Section::f64("users", users),
        ],
    )?;

    let config = desk_config(spec);
    let path = dir.join("config.conf");
    let text = format!(
        "# synthetic corpus, seed {}\n{}",
        spec.seed,
        config.to_text()
    );
    crate::data::write_string(&path, &text)?;
    Ok(path)
}
