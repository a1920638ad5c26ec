use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coldrec::container::{load_matrix, section};
use coldrec::data::load_triples;
use coldrec::pipeline::{generate_synthetic_dataset, run_stage, PipelineConfig, SyntheticSpec, SONG_APPROACHES, STAGES};
use coldrec::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        users: 60,
        artists: 20,
        songs_per_artist: 4,
        frames: 80,
        bins: 16,
        seed: 9,
        ..SyntheticSpec::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn synthetic_generation_is_deterministic_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec();
    generate_synthetic_dataset(&spec, a.path()).unwrap();
    generate_synthetic_dataset(&spec, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta, tb);
    for f in ["plays.tsv", "artists.tsv", "documents.jsonl", "kb.jsonl", "annotations.jsonl", "truth.csmx", "config.conf"] {
        assert!(ta.contains_key(Path::new(f)), "{f} missing");
    }
    let spectrograms = ta.keys().filter(|p| p.starts_with("spectrograms")).count();
    assert_eq!(spectrograms, spec.artists * spec.songs_per_artist);

    let other = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&SyntheticSpec { seed: 10, ..spec }, other.path()).unwrap();
    assert_ne!(tree(other.path())[Path::new("plays.tsv")], ta[Path::new("plays.tsv")]);
}

#[test]
fn play_counts_follow_latent_affinity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        seed: 4,
        ..small_spec()
    };
    generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let plays = load_triples(dir.path().join("plays.tsv")).unwrap();
    let truth = load_matrix(dir.path().join("truth.csmx")).unwrap();
    let users = section(&truth, "users").unwrap();
    let songs = section(&truth, "songs").unwrap();
    let index = |id: &str| id[2..].parse::<usize>().unwrap();
    let mut counts = Vec::new();
    let mut affinity = Vec::new();
    for (u, uid) in plays.user_ids().iter().enumerate() {
        for (i, sid) in plays.item_ids().iter().enumerate() {
            counts.push(plays.get(u, i) as f64);
            affinity.push(users.row(index(uid)).dot(&songs.row(index(sid))));
        }
    }
    let rho = pearson(&ranks(&counts), &ranks(&affinity));
    assert!(rho > 0.0, "spearman {rho}");
}

#[test]
fn full_pipeline_on_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = generate_synthetic_dataset(&small_spec(), dir.path()).unwrap();
    let cfg = PipelineConfig::load(&config).unwrap();

    for stage in &STAGES[..STAGES.len() - 3] {
        run_stage(&cfg, stage.name).unwrap();
    }
    match run_stage(&cfg, "evaluate") {
        Err(Error::MissingArtifact { stage, path }) => {
            assert_eq!(stage, "train-fusion");
            assert!(path.ends_with("models/sem-emb.csmx"));
        }
        other => panic!("{other:?}"),
    }
    match run_stage(&cfg, "train-everything") {
        Err(Error::UnknownStage { valid, .. }) => assert_eq!(valid.len(), STAGES.len() + 1),
        other => panic!("{other:?}"),
    }

    for stage in &STAGES[STAGES.len() - 3..] {
        run_stage(&cfg, stage.name).unwrap();
    }
    for stage in STAGES {
        for out in stage.outputs {
            assert!(cfg.out.join(out).exists(), "{} did not write {out}", stage.name);
        }
    }
    let report = std::fs::read_to_string(cfg.out.join("report.tsv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, SONG_APPROACHES);

    let before = std::fs::read(cfg.out.join("factors/song_train.csmx")).unwrap();
    run_stage(&cfg, "factorize-songs").unwrap();
    assert_eq!(before, std::fs::read(cfg.out.join("factors/song_train.csmx")).unwrap());
}

#[test]
fn config_file_errors_are_reported_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "seed = 1\nwmf.songs.k = many\n").unwrap();
    match PipelineConfig::load(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "seed = 1\nno.such.key = 3\n").unwrap();
    assert!(PipelineConfig::load(&path).is_err());
}
