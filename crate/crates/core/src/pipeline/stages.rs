use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::audio::{log_compress, Spectrogram};
use crate::container::{load_labeled, save_labeled};
use crate::data::{aggregate_to_artist, load_triples, split_by_artist, write_string, ArtistMap, Partition, SplitBundle};
use crate::error::{Error, Result};
use crate::eval::{assert_cold_start, make_baseline_factors, map_at_k, BaselineKind, EvalReport};
use crate::factorization::{factorize_wmf_traced, fold_in_items, WmfConfig};
use crate::models::{
    build_artist_net_with, build_embedding_net, build_fusion_net, build_track_net_with, extract_embeddings,
    load_params, predict_factors, save_params, train_mapping, DenseFeatures, EmbeddingSet,
    FusionVariant, PatchFeatures, TrainConfig, TrainOutcome,
};
use crate::neural::NetworkSpec;
use crate::seed;
use crate::text::{
    build_vocab, enrich_document, filter_entities, load_annotations, load_documents, load_kb_snapshot, save_documents,
    tfidf_matrix, Document, PropertySelection, Vocabulary,
};

/// A pipeline stage with the artifacts it reads and writes, relative to
/// the output directory.
#[derive(Debug, Clone, Copy)]
pub struct StageInfo {
    pub name: &'static str,
    pub inputs: &'static [&'static str],
    pub outputs: &'static [&'static str],
}

pub const STAGES: &[StageInfo] = &[
    StageInfo {
        name: "split",
        inputs: &[],
        outputs: &[
            "splits/train.tsv",
            "splits/val.tsv",
            "splits/test.tsv",
            "splits/artist_assignment.tsv",
            "splits/users.ids",
        ],
    },
    StageInfo {
        name: "factorize-songs",
        inputs: &["splits/train.tsv", "splits/val.tsv", "splits/users.ids"],
        outputs: &[
            "factors/song_users.csmx",
            "factors/song_train.csmx",
            "factors/song_val.csmx",
            "factors/song_objective.tsv",
        ],
    },
    StageInfo {
        name: "factorize-artists",
        inputs: &["splits/train.tsv", "splits/val.tsv", "splits/users.ids"],
        outputs: &[
            "factors/artist_users.csmx",
            "factors/artist_train.csmx",
            "factors/artist_val.csmx",
            "factors/artist_objective.tsv",
        ],
    },
    StageInfo {
        name: "enrich",
        inputs: &[],
        outputs: &["text/documents.jsonl"],
    },
    StageInfo {
        name: "vectorize",
        inputs: &["text/documents.jsonl", "splits/artist_assignment.tsv"],
        outputs: &["text/vocab.tsv", "text/tfidf.csmx"],
    },
    StageInfo {
        name: "train-artist",
        inputs: &["text/tfidf.csmx", "factors/artist_train.csmx", "factors/artist_val.csmx"],
        outputs: &["models/artist.csmx", "models/artist_log.tsv"],
    },
    StageInfo {
        name: "train-track",
        inputs: &["factors/song_train.csmx", "factors/song_val.csmx"],
        outputs: &["models/track.csmx", "models/track_log.tsv"],
    },
    StageInfo {
        name: "extract",
        inputs: &["text/tfidf.csmx", "models/artist.csmx", "models/track.csmx"],
        outputs: &["embeddings/artist.csmx", "embeddings/track.csmx"],
    },
    StageInfo {
        name: "train-fusion",
        inputs: &[
            "embeddings/artist.csmx",
            "embeddings/track.csmx",
            "factors/song_train.csmx",
            "factors/song_val.csmx",
        ],
        outputs: &["models/sem-emb.csmx", "models/sem-emb_log.tsv"],
    },
    StageInfo {
        name: "evaluate",
        inputs: &[
            "splits/train.tsv",
            "splits/test.tsv",
            "factors/song_users.csmx",
            "factors/artist_users.csmx",
            "text/tfidf.csmx",
            "models/artist.csmx",
            "models/track.csmx",
            "embeddings/artist.csmx",
            "embeddings/track.csmx",
            "models/sem-emb.csmx",
        ],
        outputs: &["eval/index.json"],
    },
    StageInfo {
        name: "report",
        inputs: &["eval/index.json"],
        outputs: &["report.tsv", "report.json"],
    },
];

pub fn stage_names() -> Vec<&'static str> {
    STAGES.iter().map(|s| s.name).collect()
}

fn producer(artifact: &str) -> &'static str {
    STAGES
        .iter()
        .find(|s| s.outputs.contains(&artifact))
        .map_or("unknown", |s| s.name)
}

fn require(out: &Path, artifact: &str) -> Result<PathBuf> {
    let p = out.join(artifact);
    if !p.exists() {
        return Err(Error::MissingArtifact {
            path: p,
            stage: producer(artifact).to_string(),
        });
    }
    Ok(p)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs one named stage, or every stage in order for `all`.
pub fn run_stage(cfg: &PipelineConfig, name: &str) -> Result<()> {
    if name == "all" {
        for s in STAGES {
            run_stage(cfg, s.name)?;
        }
        return Ok(());
    }
    let Some(info) = STAGES.iter().find(|s| s.name == name) else {
        let mut valid: Vec<String> = stage_names().into_iter().map(String::from).collect();
        valid.push("all".into());
        return Err(Error::UnknownStage {
            name: name.to_string(),
            valid,
        });
    };
    cfg.validate()?;
    for input in info.inputs {
        require(&cfg.out, input)?;
    }
    mkdir(&cfg.out)?;
    let ctx = Ctx {
        cfg,
        out: &cfg.out,
        seed: seed::named(cfg.seed, name),
    };
    match name {
        "split" => ctx.split(),
        "factorize-songs" => ctx.factorize(false),
        "factorize-artists" => ctx.factorize(true),
        "enrich" => ctx.enrich(),
        "vectorize" => ctx.vectorize(),
        "train-artist" => ctx.train_artist(),
        "train-track" => ctx.train_track(),
        "extract" => ctx.extract(),
        "train-fusion" => ctx.train_fusion(),
        "evaluate" => ctx.evaluate(),
        "report" => super::report::write_report(&cfg.out),
        _ => unreachable!("stage table and dispatch agree"),
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    seed: u64,
}

/// Approach names in report order.
pub const SONG_APPROACHES: [&str; 6] = ["audio", "sem-emb", "mm-lf-lin", "mm-lf-h1", "random", "upper-bound"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalIndex {
    pub song: Vec<String>,
    pub artist: Vec<String>,
}

fn fusion_name(v: FusionVariant) -> String {
    format!("mm-lf-{v}")
}

/// Patches for evaluation and training draw from one seed so the fixed
/// evaluation patch is the same in every stage.
fn patch_seed(cfg: &PipelineConfig) -> u64 {
    seed::named(cfg.seed, "patches")
}

fn write_log(path: PathBuf, outcome: &TrainOutcome) -> Result<()> {
    write_string(&path, &outcome.log_tsv())
}

impl Ctx<'_> {
    fn artist_map(&self) -> Result<ArtistMap> {
        ArtistMap::load(&self.cfg.data.artists)
    }

    fn split(&self) -> Result<()> {
        let m = load_triples(&self.cfg.data.triples)?;
        let am = self.artist_map()?;
        let bundle = split_by_artist(&m, &am, self.cfg.split, self.seed)?;
        bundle.save(self.out.join("splits"))
    }

    fn bundle(&self) -> Result<SplitBundle> {
        SplitBundle::load(self.out.join("splits"))
    }

    fn factorize(&self, artists: bool) -> Result<()> {
        let bundle = self.bundle()?;
        let (prefix, wmf, train, val) = if artists {
            let am = self.artist_map()?;
            (
                "artist",
                &self.cfg.wmf_artists,
                aggregate_to_artist(&bundle.train, &am)?,
                aggregate_to_artist(&bundle.val, &am)?,
            )
        } else {
            ("song", &self.cfg.wmf_songs, bundle.train.clone(), bundle.val.clone())
        };
        let cfg = WmfConfig {
            seed: self.seed,
            ..wmf.clone()
        };
        let (model, trace) = factorize_wmf_traced(&train, &cfg)?;
        let val_items = fold_in_items(&model.user_factors, &val, cfg.alpha, cfg.lambda)?;
        let dir = self.out.join("factors");
        mkdir(&dir)?;
        save_labeled(dir.join(format!("{prefix}_users.csmx")), "factors", train.user_ids(), &model.user_factors)?;
        save_labeled(dir.join(format!("{prefix}_train.csmx")), "factors", train.item_ids(), &model.item_factors)?;
        save_labeled(dir.join(format!("{prefix}_val.csmx")), "factors", val.item_ids(), &val_items)?;
        let mut log = String::from("iteration\tobjective\n");
        for (i, v) in trace.iter().enumerate() {
            log.push_str(&format!("{i}\t{v:.9}\n"));
        }
        write_string(&dir.join(format!("{prefix}_objective.tsv")), &log)
    }

    fn enrich(&self) -> Result<()> {
        let docs = load_documents(&self.cfg.data.documents)?;
        let out: Vec<Document> = if self.cfg.enrich {
            let kb = load_kb_snapshot(&self.cfg.data.kb)?;
            let ann = load_annotations(&self.cfg.data.annotations)?;
            let props = match &self.cfg.data.properties {
                Some(p) => PropertySelection::load(p)?,
                None => PropertySelection::default(),
            };
            docs.iter()
                .map(|d| enrich_document(d, &filter_entities(ann.entities(&d.artist_id), &kb), &kb, &props))
                .collect()
        } else {
            docs
        };
        let dir = self.out.join("text");
        mkdir(&dir)?;
        save_documents(dir.join("documents.jsonl"), &out)
    }

    fn vectorize(&self) -> Result<()> {
        let docs = load_documents(self.out.join("text/documents.jsonl"))?;
        let bundle = self.bundle()?;
        let by_artist: HashMap<&str, &Document> = docs.iter().map(|d| (d.artist_id.as_str(), d)).collect();
        let artists: Vec<String> = bundle.artist_assignment.keys().cloned().collect();
        let ordered: Vec<Document> = artists
            .iter()
            .map(|a| by_artist.get(a.as_str()).map_or_else(|| Document::new(a.clone(), ""), |d| (*d).clone()))
            .collect();
        let train: Vec<Document> = ordered
            .iter()
            .filter(|d| bundle.artist_assignment[&d.artist_id] == Partition::Train)
            .cloned()
            .collect();
        let vocab = build_vocab(&train, self.cfg.vocab_size)?;
        let dir = self.out.join("text");
        vocab.save(dir.join("vocab.tsv"))?;
        save_labeled(dir.join("tfidf.csmx"), "tfidf", &artists, &tfidf_matrix(&ordered, &vocab))
    }

    fn tfidf(&self) -> Result<EmbeddingSet> {
        let (ids, m) = load_labeled(self.out.join("text/tfidf.csmx"), "tfidf")?;
        EmbeddingSet::new(ids, m)
    }

    fn factors(&self, file: &str) -> Result<EmbeddingSet> {
        let (ids, m) = load_labeled(self.out.join("factors").join(file), "factors")?;
        EmbeddingSet::new(ids, m)
    }

    fn artist_net(&self) -> Result<NetworkSpec> {
        let vocab = Vocabulary::load(self.out.join("text/vocab.tsv"))?;
        build_artist_net_with(vocab.len(), self.cfg.wmf_artists.k, &self.cfg.artist_net)
    }

    fn train_cfg(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, ..*base }
    }

    fn train_artist(&self) -> Result<()> {
        let tfidf = self.tfidf()?;
        let train = self.factors("artist_train.csmx")?;
        let val = self.factors("artist_val.csmx")?;
        let xtr = tfidf.rows_for(&train.ids)?;
        let xva = tfidf.rows_for(&val.ids)?;
        let net = self.artist_net()?;
        let (ftr, fva) = (DenseFeatures::single(xtr.view()), DenseFeatures::single(xva.view()));
        let outcome = train_mapping(
            &net,
            &ftr,
            train.data.view(),
            Some((&fva, val.data.view())),
            &self.train_cfg(&self.cfg.train_artist),
        )?;
        let dir = self.out.join("models");
        mkdir(&dir)?;
        save_params(dir.join("artist.csmx"), &outcome.params)?;
        write_log(dir.join("artist_log.tsv"), &outcome)
    }

    fn spectrograms(&self, ids: &[String]) -> Result<Vec<Spectrogram>> {
        ids.iter()
            .map(|id| {
                let s = Spectrogram::load(self.cfg.data.spectrograms.join(format!("{id}.cqts")))?;
                if self.cfg.log_compress {
                    log_compress(&s)
                } else {
                    Ok(s)
                }
            })
            .collect()
    }

    fn track_net(&self, bins: usize) -> Result<NetworkSpec> {
        build_track_net_with(
            bins,
            self.cfg.patch_frames,
            self.cfg.wmf_songs.k,
            self.cfg.track_scale,
            &self.cfg.track_net,
        )
    }

    fn train_track(&self) -> Result<()> {
        let train = self.factors("song_train.csmx")?;
        let val = self.factors("song_val.csmx")?;
        let str_ = self.spectrograms(&train.ids)?;
        let sva = self.spectrograms(&val.ids)?;
        let bins = str_.first().map_or(0, |s| s.bins());
        let net = self.track_net(bins)?;
        let ftr = PatchFeatures::new(&str_, &train.ids, self.cfg.patch_frames, patch_seed(self.cfg))?;
        let fva = PatchFeatures::new(&sva, &val.ids, self.cfg.patch_frames, patch_seed(self.cfg))?;
        let outcome = train_mapping(
            &net,
            &ftr,
            train.data.view(),
            Some((&fva, val.data.view())),
            &self.train_cfg(&self.cfg.train_track),
        )?;
        let dir = self.out.join("models");
        mkdir(&dir)?;
        save_params(dir.join("track.csmx"), &outcome.params)?;
        write_log(dir.join("track_log.tsv"), &outcome)
    }

    fn all_songs(&self) -> Result<Vec<String>> {
        Ok(self.artist_map()?.iter().map(|(s, _)| s.to_string()).collect())
    }

    fn extract(&self) -> Result<()> {
        let tfidf = self.tfidf()?;
        let anet = self.artist_net()?;
        let aparams = load_params(self.out.join("models/artist.csmx"), &anet)?;
        let artist = extract_embeddings(&anet, &aparams, &DenseFeatures::single(tfidf.data.view()), tfidf.ids.clone())?;

        let songs = self.all_songs()?;
        let specs = self.spectrograms(&songs)?;
        let tnet = self.track_net(specs.first().map_or(0, |s| s.bins()))?;
        let tparams = load_params(self.out.join("models/track.csmx"), &tnet)?;
        let feats = PatchFeatures::new(&specs, &songs, self.cfg.patch_frames, patch_seed(self.cfg))?;
        let track = extract_embeddings(&tnet, &tparams, &feats, songs.clone())?;

        let dir = self.out.join("embeddings");
        mkdir(&dir)?;
        artist.save(dir.join("artist.csmx"))?;
        track.save(dir.join("track.csmx"))
    }

    /// Artist embedding of each song's artist, and the song's own track
    /// embedding, row-aligned with `songs`.
    fn song_features(&self, songs: &[String]) -> Result<(Array2<f64>, Array2<f64>)> {
        let am = self.artist_map()?;
        let artist = EmbeddingSet::load(self.out.join("embeddings/artist.csmx"))?;
        let track = EmbeddingSet::load(self.out.join("embeddings/track.csmx"))?;
        let artists = songs
            .iter()
            .map(|s| {
                am.artist_of(s)
                    .map(String::from)
                    .ok_or_else(|| Error::InvalidInput(format!("song `{s}` has no artist")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((artist.rows_for(&artists)?, track.rows_for(songs)?))
    }

    fn sem_net(&self, dim_a: usize) -> Result<NetworkSpec> {
        build_embedding_net(dim_a, self.cfg.wmf_songs.k)
    }

    fn train_fusion(&self) -> Result<()> {
        let train = self.factors("song_train.csmx")?;
        let val = self.factors("song_val.csmx")?;
        let (atr, ttr) = self.song_features(&train.ids)?;
        let (ava, tva) = self.song_features(&val.ids)?;
        let dir = self.out.join("models");
        mkdir(&dir)?;
        let k = self.cfg.wmf_songs.k;

        let mut jobs: Vec<(String, NetworkSpec, bool)> = vec![("sem-emb".into(), self.sem_net(atr.ncols())?, false)];
        for v in &self.cfg.fusion_variants {
            jobs.push((fusion_name(*v), build_fusion_net(*v, atr.ncols(), ttr.ncols(), k)?, true));
        }
        for (name, net, fused) in jobs {
            let (ftr, fva) = if fused {
                (
                    DenseFeatures::new(vec![atr.view(), ttr.view()])?,
                    DenseFeatures::new(vec![ava.view(), tva.view()])?,
                )
            } else {
                (DenseFeatures::single(atr.view()), DenseFeatures::single(ava.view()))
            };
            let cfg = TrainConfig {
                seed: seed::named(self.seed, &name),
                ..self.cfg.train_fusion
            };
            let outcome = train_mapping(&net, &ftr, train.data.view(), Some((&fva, val.data.view())), &cfg)?;
            save_params(dir.join(format!("{name}.csmx")), &outcome.params)?;
            write_log(dir.join(format!("{name}_log.tsv")), &outcome)?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let bundle = self.bundle()?;
        assert_cold_start(&bundle.train, &bundle.test)?;
        let dir = self.out.join("eval");
        mkdir(&dir)?;
        let k = self.cfg.eval_k;
        let test = &bundle.test;
        let songs: Vec<String> = test.item_ids().to_vec();
        let users = self.factors("song_users.csmx")?.rows_for(test.user_ids())?;

        let mut index = EvalIndex {
            song: Vec::new(),
            artist: Vec::new(),
        };
        let mut record = |name: &str, report: EvalReport, artist: bool| -> Result<()> {
            report.save(&dir, name)?;
            if artist {
                index.artist.push(name.to_string());
            } else {
                index.song.push(name.to_string());
            }
            Ok(())
        };

        let specs = self.spectrograms(&songs)?;
        let tnet = self.track_net(specs.first().map_or(0, |s| s.bins()))?;
        let tparams = load_params(self.out.join("models/track.csmx"), &tnet)?;
        let audio = predict_factors(
            &tnet,
            &tparams,
            &PatchFeatures::new(&specs, &songs, self.cfg.patch_frames, patch_seed(self.cfg))?,
        )?;
        record("audio", map_at_k(&users, &audio, test, k)?, false)?;

        let (a, t) = self.song_features(&songs)?;
        let sem = self.sem_net(a.ncols())?;
        let sparams = load_params(self.out.join("models/sem-emb.csmx"), &sem)?;
        let pred = predict_factors(&sem, &sparams, &DenseFeatures::single(a.view()))?;
        record("sem-emb", map_at_k(&users, &pred, test, k)?, false)?;

        for v in &self.cfg.fusion_variants {
            let name = fusion_name(*v);
            let net = build_fusion_net(*v, a.ncols(), t.ncols(), self.cfg.wmf_songs.k)?;
            let params = load_params(require(self.out, &format!("models/{name}.csmx"))?, &net)?;
            let pred = predict_factors(&net, &params, &DenseFeatures::new(vec![a.view(), t.view()])?)?;
            record(&name, map_at_k(&users, &pred, test, k)?, false)?;
        }

        let wmf = WmfConfig {
            seed: seed::named(self.seed, "upper-bound"),
            ..self.cfg.wmf_songs.clone()
        };
        let random = make_baseline_factors(BaselineKind::Random, test, wmf.k, &wmf, seed::named(self.seed, "random"))?;
        record("random", map_at_k(&users, &random.item_factors, test, k)?, false)?;
        let ub = make_baseline_factors(BaselineKind::UpperBound, test, wmf.k, &wmf, wmf.seed)?;
        let ub_users = ub.user_factors.as_ref().expect("upper bound refits users");
        record("upper-bound", map_at_k(ub_users, &ub.item_factors, test, k)?, false)?;

        let am = self.artist_map()?;
        let artist_test = aggregate_to_artist(test, &am)?;
        let artist_users = self.factors("artist_users.csmx")?.rows_for(artist_test.user_ids())?;
        let tfidf = self.tfidf()?;
        let anet = self.artist_net()?;
        let aparams = load_params(self.out.join("models/artist.csmx"), &anet)?;
        let x = tfidf.rows_for(artist_test.item_ids())?;
        let pred = predict_factors(&anet, &aparams, &DenseFeatures::single(x.view()))?;
        let name = if self.cfg.enrich { "a-sem" } else { "a-text" };
        record(name, map_at_k(&artist_users, &pred, &artist_test, k)?, true)?;

        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
        write_string(&dir.join("index.json"), &(json + "\n"))
    }
}
