use std::path::Path;

use serde::Serialize;

use super::stages::EvalIndex;
use crate::data::write_string;
use crate::error::{Error, Result};
use crate::eval::{paired_ttest, EvalReport, TTest};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub approach: String,
    pub map: f64,
    pub std_error: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// `None` when the paired differences have zero variance.
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub k: usize,
    pub song: Vec<ReportRow>,
    pub artist: Vec<ReportRow>,
    pub comparisons: Vec<Comparison>,
}

impl Report {
    pub fn map_of(&self, approach: &str) -> Option<&ReportRow> {
        self.song.iter().chain(&self.artist).find(|r| r.approach == approach)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("approach\tmap\tusers\n");
        for r in &self.song {
            s.push_str(&format!("{}\t{:.9}\t{}\n", r.approach, r.map, r.users));
        }
        s
    }
}

fn row(name: &str, r: &EvalReport) -> ReportRow {
    ReportRow {
        approach: name.to_string(),
        map: r.map,
        std_error: r.std_error,
        users: r.users,
    }
}

/// Builds the comparison table from the per-approach evaluation files.
/// Every pair of song-level approaches gets a paired t-test over users.
pub fn build_report(eval_dir: &Path) -> Result<Report> {
    let index_path = eval_dir.join("index.json");
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: EvalIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Parse {
            source_name: index_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let song: Vec<(String, EvalReport)> = index
        .song
        .iter()
        .map(|n| EvalReport::load(eval_dir, n).map(|r| (n.clone(), r)))
        .collect::<Result<_>>()?;
    let artist: Vec<(String, EvalReport)> = index
        .artist
        .iter()
        .map(|n| EvalReport::load(eval_dir, n).map(|r| (n.clone(), r)))
        .collect::<Result<_>>()?;
    let k = song.first().map_or(0, |(_, r)| r.k);

    let mut comparisons = Vec::new();
    for (i, (na, ra)) in song.iter().enumerate() {
        for (nb, rb) in &song[i + 1..] {
            let users_a: Vec<&str> = ra.per_user.iter().map(|(u, _)| u.as_str()).collect();
            let users_b: Vec<&str> = rb.per_user.iter().map(|(u, _)| u.as_str()).collect();
            if users_a != users_b {
                return Err(Error::Shape(format!("`{na}` and `{nb}` were evaluated on different users")));
            }
            let test = match paired_ttest(&ra.aps(), &rb.aps()) {
                Ok(t) => Some(t),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            comparisons.push(Comparison {
                a: na.clone(),
                b: nb.clone(),
                test,
            });
        }
    }
    Ok(Report {
        k,
        song: song.iter().map(|(n, r)| row(n, r)).collect(),
        artist: artist.iter().map(|(n, r)| row(n, r)).collect(),
        comparisons,
    })
}

/// Writes `report.tsv` and `report.json` into `out`.
pub fn write_report(out: &Path) -> Result<()> {
    let report = build_report(&out.join("eval"))?;
    write_string(&out.join("report.tsv"), &report.to_tsv())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_string(&out.join("report.json"), &(json + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(aps: &[f64]) -> EvalReport {
        let per_user: Vec<(String, f64)> = aps.iter().enumerate().map(|(i, a)| (format!("u{i}"), *a)).collect();
        let (map, std_error) = crate::eval::mean_and_std_error(aps);
        EvalReport {
            users: per_user.len(),
            per_user,
            map,
            k: 10,
            skipped: 0,
            std_error,
        }
    }

    #[test]
    fn report_from_eval_dir() {
        let dir = tempfile::tempdir().unwrap();
        let eval = dir.path().join("eval");
        std::fs::create_dir_all(&eval).unwrap();
        report(&[0.5, 0.25, 1.0]).save(&eval, "x").unwrap();
        report(&[0.5, 0.25, 1.0]).save(&eval, "y").unwrap();
        report(&[0.1, 0.2, 0.4]).save(&eval, "z").unwrap();
        report(&[0.3, 0.2]).save(&eval, "a-sem").unwrap();
        let index = EvalIndex {
            song: vec!["x".into(), "y".into(), "z".into()],
            artist: vec!["a-sem".into()],
        };
        std::fs::write(eval.join("index.json"), serde_json::to_string(&index).unwrap()).unwrap();
        write_report(dir.path()).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "approach\tmap\tusers");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("z\t0.233333333\t3"));
        let r = build_report(&eval).unwrap();
        assert_eq!(r.comparisons.len(), 3);
        assert!(r.comparisons[0].test.is_none());
        assert!(r.comparisons[1].test.is_some());
        assert!((r.map_of("a-sem").unwrap().map - 0.25).abs() < 1e-12);
    }
}
