use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::factorization::WmfConfig;
use crate::models::{ArtistNetOptions, FusionVariant, TrackNetOptions, TrainConfig};

/// Parsed `key = value` lines with their line numbers. `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    source: String,
    entries: IndexMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(source, n + 1, format!("expected `key = value`, got `{line}`")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(source, n + 1, "empty key"));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), n + 1)).is_some() {
                return Err(Error::parse(source, n + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and removes `key`, keeping `current` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, current: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.shift_remove(key) {
            *current = v
                .parse()
                .map_err(|e| Error::parse(&self.source, line, format!("bad value for `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.shift_remove(key)
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, (_, line))) => Err(Error::parse(&self.source, line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub triples: PathBuf,
    pub artists: PathBuf,
    pub documents: PathBuf,
    pub annotations: PathBuf,
    pub kb: PathBuf,
    pub spectrograms: PathBuf,
    /// JSON property selection; the built-in selection when absent.
    pub properties: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub out: PathBuf,
    pub seed: u64,
    pub split: SplitRatios,
    pub wmf_songs: WmfConfig,
    pub wmf_artists: WmfConfig,
    pub enrich: bool,
    pub vocab_size: usize,
    pub artist_net: ArtistNetOptions,
    pub track_net: TrackNetOptions,
    pub track_scale: f64,
    pub patch_frames: usize,
    pub log_compress: bool,
    pub train_artist: TrainConfig,
    pub train_track: TrainConfig,
    pub train_fusion: TrainConfig,
    pub fusion_variants: Vec<FusionVariant>,
    pub eval_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataPaths {
                triples: "plays.tsv".into(),
                artists: "artists.tsv".into(),
                documents: "documents.jsonl".into(),
                annotations: "annotations.jsonl".into(),
                kb: "kb.jsonl".into(),
                spectrograms: "spectrograms".into(),
                properties: None,
            },
            out: "out".into(),
            seed: 0,
            split: SplitRatios::default(),
            wmf_songs: WmfConfig::default(),
            wmf_artists: WmfConfig::default(),
            enrich: true,
            vocab_size: 10_000,
            artist_net: ArtistNetOptions::default(),
            track_net: TrackNetOptions::default(),
            track_scale: 0.125,
            patch_frames: 323,
            log_compress: true,
            train_artist: TrainConfig::default(),
            train_track: TrainConfig::default(),
            train_fusion: TrainConfig::default(),
            fusion_variants: vec![FusionVariant::Lin, FusionVariant::H1],
            eval_k: 500,
        }
    }
}

fn take_wmf(kv: &mut KeyValues, prefix: &str, w: &mut WmfConfig) -> Result<()> {
    kv.take(&format!("{prefix}.k"), &mut w.k)?;
    kv.take(&format!("{prefix}.alpha"), &mut w.alpha)?;
    kv.take(&format!("{prefix}.lambda"), &mut w.lambda)?;
    kv.take(&format!("{prefix}.iterations"), &mut w.iterations)?;
    kv.take(&format!("{prefix}.init_scale"), &mut w.init_scale)?;
    Ok(())
}

fn take_train(kv: &mut KeyValues, prefix: &str, t: &mut TrainConfig) -> Result<()> {
    kv.take(&format!("{prefix}.batch"), &mut t.batch)?;
    kv.take(&format!("{prefix}.epochs"), &mut t.max_epochs)?;
    kv.take(&format!("{prefix}.patience"), &mut t.patience)?;
    kv.take(&format!("{prefix}.lr"), &mut t.adam.lr)?;
    Ok(())
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, source)?;
        let mut c = Self::default();
        kv.take("data.triples", &mut c.data.triples)?;
        kv.take("data.artists", &mut c.data.artists)?;
        kv.take("data.documents", &mut c.data.documents)?;
        kv.take("data.annotations", &mut c.data.annotations)?;
        kv.take("data.kb", &mut c.data.kb)?;
        kv.take("data.spectrograms", &mut c.data.spectrograms)?;
        if let Some((v, _)) = kv.take_raw("data.properties") {
            c.data.properties = Some(v.into());
        }
        kv.take("out", &mut c.out)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("split.train", &mut c.split.train)?;
        kv.take("split.val", &mut c.split.val)?;
        kv.take("split.test", &mut c.split.test)?;
        take_wmf(&mut kv, "wmf.songs", &mut c.wmf_songs)?;
        take_wmf(&mut kv, "wmf.artists", &mut c.wmf_artists)?;
        kv.take("text.enrich", &mut c.enrich)?;
        kv.take("text.vocab_size", &mut c.vocab_size)?;
        kv.take("artist.hidden", &mut c.artist_net.hidden)?;
        kv.take("artist.dropout", &mut c.artist_net.dropout)?;
        kv.take("track.scale", &mut c.track_scale)?;
        kv.take("track.width", &mut c.track_net.width)?;
        kv.take("track.dropout", &mut c.track_net.dropout)?;
        kv.take("track.patch_frames", &mut c.patch_frames)?;
        kv.take("track.log_compress", &mut c.log_compress)?;
        take_train(&mut kv, "train.artist", &mut c.train_artist)?;
        take_train(&mut kv, "train.track", &mut c.train_track)?;
        take_train(&mut kv, "train.fusion", &mut c.train_fusion)?;
        if let Some((v, line)) = kv.take_raw("fusion.variants") {
            c.fusion_variants = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_>>()
                .map_err(|e| Error::parse(source, line, e.to_string()))?;
        }
        kv.take("eval.k", &mut c.eval_k)?;
        kv.finish()?;

        let d = &mut c.data;
        for p in [
            &mut d.triples,
            &mut d.artists,
            &mut d.documents,
            &mut d.annotations,
            &mut d.kb,
            &mut d.spectrograms,
        ] {
            *p = resolve(base, std::mem::take(p));
        }
        d.properties = d.properties.take().map(|p| resolve(base, p));
        c.out = resolve(base, std::mem::take(&mut c.out));
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        for w in [&self.wmf_songs, &self.wmf_artists] {
            w.validate()?;
        }
        for t in [&self.train_artist, &self.train_track, &self.train_fusion] {
            t.validate()?;
        }
        if self.eval_k == 0 || self.vocab_size == 0 || self.artist_net.hidden == 0 {
            return Err(Error::InvalidInput("eval.k, text.vocab_size and artist.hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.artist_net.dropout) || !(0.0..1.0).contains(&self.track_net.dropout) {
            return Err(Error::InvalidInput("dropout rates must lie in [0, 1)".into()));
        }
        crate::models::track_filters(self.track_scale)?;
        if self.fusion_variants.is_empty() {
            return Err(Error::InvalidInput("fusion.variants must name at least one variant".into()));
        }
        Ok(())
    }

    /// Renders every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |p: &Path| p.display().to_string();
        let d = &self.data;
        let _ = writeln!(s, "data.triples = {}", p(&d.triples));
        let _ = writeln!(s, "data.artists = {}", p(&d.artists));
        let _ = writeln!(s, "data.documents = {}", p(&d.documents));
        let _ = writeln!(s, "data.annotations = {}", p(&d.annotations));
        let _ = writeln!(s, "data.kb = {}", p(&d.kb));
        let _ = writeln!(s, "data.spectrograms = {}", p(&d.spectrograms));
        if let Some(props) = &d.properties {
            let _ = writeln!(s, "data.properties = {}", p(props));
        }
        let _ = writeln!(s, "out = {}", p(&self.out));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "split.train = {}", self.split.train);
        let _ = writeln!(s, "split.val = {}", self.split.val);
        let _ = writeln!(s, "split.test = {}", self.split.test);
        for (name, w) in [("songs", &self.wmf_songs), ("artists", &self.wmf_artists)] {
            let _ = writeln!(s, "wmf.{name}.k = {}", w.k);
            let _ = writeln!(s, "wmf.{name}.alpha = {}", w.alpha);
            let _ = writeln!(s, "wmf.{name}.lambda = {}", w.lambda);
            let _ = writeln!(s, "wmf.{name}.iterations = {}", w.iterations);
            let _ = writeln!(s, "wmf.{name}.init_scale = {}", w.init_scale);
        }
        let _ = writeln!(s, "text.enrich = {}", self.enrich);
        let _ = writeln!(s, "text.vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "artist.hidden = {}", self.artist_net.hidden);
        let _ = writeln!(s, "artist.dropout = {}", self.artist_net.dropout);
        let _ = writeln!(s, "track.scale = {}", self.track_scale);
        let _ = writeln!(s, "track.width = {}", self.track_net.width);
        let _ = writeln!(s, "track.dropout = {}", self.track_net.dropout);
        let _ = writeln!(s, "track.patch_frames = {}", self.patch_frames);
        let _ = writeln!(s, "track.log_compress = {}", self.log_compress);
        for (name, t) in [
            ("artist", &self.train_artist),
            ("track", &self.train_track),
            ("fusion", &self.train_fusion),
        ] {
            let _ = writeln!(s, "train.{name}.batch = {}", t.batch);
            let _ = writeln!(s, "train.{name}.epochs = {}", t.max_epochs);
            let _ = writeln!(s, "train.{name}.patience = {}", t.patience);
            let _ = writeln!(s, "train.{name}.lr = {}", t.adam.lr);
        }
        let variants: Vec<String> = self.fusion_variants.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "fusion.variants = {}", variants.join(", "));
        let _ = writeln!(s, "eval.k = {}", self.eval_k);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_resolves_paths() {
        let text = "# desk run\nseed = 7\nwmf.songs.k = 32 # smaller\ndata.triples = a/plays.tsv\nout = /tmp/x\nfusion.variants = h1\n";
        let c = PipelineConfig::parse(text, "cfg", Path::new("/base")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.wmf_songs.k, 32);
        assert_eq!(c.wmf_artists.k, 200);
        assert_eq!(c.data.triples, PathBuf::from("/base/a/plays.tsv"));
        assert_eq!(c.out, PathBuf::from("/tmp/x"));
        assert_eq!(c.fusion_variants, vec![FusionVariant::H1]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = PipelineConfig::parse("seed = 1\nwmf.songs.k = many\n", "cfg", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
        let err = PipelineConfig::parse("\n\nfrobnicate = 1\n", "cfg", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
        assert!(PipelineConfig::parse("seed 1\n", "cfg", Path::new(".")).is_err());
        assert!(PipelineConfig::parse("seed = 1\nseed = 2\n", "cfg", Path::new(".")).is_err());
        assert!(PipelineConfig::parse("split.train = 0.9\n", "cfg", Path::new(".")).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = PipelineConfig::parse("", "cfg", Path::new("/r")).unwrap();
        c.train_track.adam.lr = 0.003;
        c.data.properties = Some("/r/props.json".into());
        let back = PipelineConfig::parse(&c.to_text(), "cfg", Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }
}
