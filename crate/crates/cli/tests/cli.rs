use std::process::Command;

fn coldrec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coldrec"))
}

#[test]
fn usage_errors_exit_with_one() {
    let out = coldrec().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = coldrec().args(["run", "split"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = coldrec().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn stages_are_listed_in_order() {
    let out = coldrec().arg("stages").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().collect();
    assert_eq!(names.first(), Some(&"split"));
    assert_eq!(names.last(), Some(&"report"));
    assert_eq!(names.len(), 11);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.conf");
    std::fs::write(&spec, "users = 30\nartists = 10\nsongs_per_artist = 2\nframes = 64\nbins = 8\n").unwrap();
    let corpus = dir.path().join("corpus");
    let out = coldrec()
        .args(["synth", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&corpus)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = corpus.join("config.conf");

    let out = coldrec().args(["run", "no-such-stage", "--config"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("valid stages"));

    let out = coldrec()
        .args(["run", "train-artist", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("fresh"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vectorize"));

    let out = coldrec().args(["run", "split", "--config"]).arg(&config).output().unwrap();
    assert!(out.status.success());
    assert!(corpus.join("out/splits/train.tsv").exists());

    let out = coldrec().args(["run", "split", "--config"]).arg(dir.path().join("missing.conf")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
