//! Top-K ranking, average precision, MAP@K, the paired t-test and baseline
//! factors.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{write_string, FeedbackMatrix};
use crate::error::{Error, Result};
use crate::factorization::{factorize_wmf, WmfConfig};
use crate::seed;

/// Indices of the `k` highest scores, descending; ties go to the lower
/// index.
///
/// ```
/// use ndarray::arr2;
/// let items = arr2(&[[1.0], [3.0], [3.0], [2.0]]);
/// let top = coldrec::eval::rank_items(ndarray::arr1(&[1.0]).view(), items.view(), 3).unwrap();
/// assert_eq!(top, vec![1, 2, 3]);
/// ```
pub fn rank_items(user_factor: ArrayView1<f64>, item_factors: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("cutoff K must be at least 1".into()));
    }
    if item_factors.ncols() != user_factor.len() {
        return Err(Error::Shape(format!(
            "user factor has {} dims, item factors {}",
            user_factor.len(),
            item_factors.ncols()
        )));
    }
    let scores = item_factors.dot(&user_factor);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("non-finite ranking score".into()));
    }
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    Ok(idx)
}

/// Sum of precision@r over relevant hits within the top `k`, divided by
/// `min(|relevant|, k)`.
///
/// ```
/// use std::collections::HashSet;
/// let rel: HashSet<_> = ["A", "C"].into_iter().collect();
/// let ap = coldrec::eval::average_precision(&["A", "B", "C"], &rel, 10).unwrap();
/// assert!((ap - 5.0 / 6.0).abs() < 1e-12);
/// ```
pub fn average_precision<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidInput("average precision needs at least one relevant item".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("cutoff K must be at least 1".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-user AP in ascending user-id order.
    pub per_user: Vec<(String, f64)>,
    pub map: f64,
    pub k: usize,
    pub users: usize,
    pub skipped: usize,
    /// Standard error of the per-user AP mean.
    pub std_error: f64,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    map: f64,
    k: usize,
    users: usize,
    skipped: usize,
    std_error: f64,
}

impl EvalReport {
    pub fn aps(&self) -> Vec<f64> {
        self.per_user.iter().map(|(_, ap)| *ap).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("user\tap\n");
        for (u, ap) in &self.per_user {
            s.push_str(&format!("{u}\t{ap:.12}\n"));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let summary = Summary {
            map: self.map,
            k: self.k,
            users: self.users,
            skipped: self.skipped,
            std_error: self.std_error,
        };
        serde_json::to_string_pretty(&summary).expect("plain struct serializes") + "\n"
    }

    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_string(&dir.join(format!("{stem}.tsv")), &self.to_tsv())?;
        write_string(&dir.join(format!("{stem}.json")), &self.summary_json())
    }

    /// Reads a report written by [`EvalReport::save`].
    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let tsv_path = dir.join(format!("{stem}.tsv"));
        let json_path = dir.join(format!("{stem}.json"));
        let tsv = std::fs::read_to_string(&tsv_path).map_err(|e| Error::io(&tsv_path, e))?;
        let json = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let summary: Summary = serde_json::from_str(&json)
            .map_err(|e| Error::parse(json_path.display().to_string(), e.line(), e.to_string()))?;
        let mut per_user = Vec::new();
        for (i, line) in tsv.lines().enumerate().skip(1) {
            let bad = |m: &str| Error::parse(tsv_path.display().to_string(), i + 1, m.to_string());
            let (u, ap) = line.split_once('\t').ok_or_else(|| bad("expected `user<TAB>ap`"))?;
            let ap: f64 = ap.trim().parse().map_err(|_| bad("ap is not a number"))?;
            per_user.push((u.to_string(), ap));
        }
        Ok(Self {
            per_user,
            map: summary.map,
            k: summary.k,
            users: summary.users,
            skipped: summary.skipped,
            std_error: summary.std_error,
        })
    }
}

pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// MAP@K of `item_factors` (rows aligned with `test.item_ids()`) scored by
/// `user_factors` (rows aligned with `test.user_ids()`). Relevance is a
/// test count of at least one; users with nothing relevant are skipped.
pub fn map_at_k(
    user_factors: &Array2<f64>,
    item_factors: &Array2<f64>,
    test: &FeedbackMatrix,
    k: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::InvalidInput("cutoff K must be at least 1".into()));
    }
    if user_factors.nrows() != test.n_users() || item_factors.nrows() != test.n_items() {
        return Err(Error::Shape(format!(
            "factors ({} users, {} items) do not match the test matrix ({} users, {} items)",
            user_factors.nrows(),
            item_factors.nrows(),
            test.n_users(),
            test.n_items()
        )));
    }
    let rows = test.user_rows();
    let mut order: Vec<usize> = (0..test.n_users()).collect();
    order.sort_by(|a, b| test.user_ids()[*a].cmp(&test.user_ids()[*b]));
    let mut per_user = Vec::new();
    let mut skipped = 0;
    for u in order {
        let relevant: HashSet<usize> = rows[u].iter().filter(|(_, c)| *c >= 1.0).map(|(i, _)| *i).collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let ranked = rank_items(user_factors.row(u), item_factors.view(), k)?;
        per_user.push((test.user_ids()[u].clone(), average_precision(&ranked, &relevant, k)?));
    }
    if per_user.is_empty() {
        return Err(Error::Degenerate("no user has a relevant test item".into()));
    }
    let aps: Vec<f64> = per_user.iter().map(|(_, a)| *a).collect();
    let (map, std_error) = mean_and_std_error(&aps);
    Ok(EvalReport {
        users: per_user.len(),
        per_user,
        map,
        k,
        skipped,
        std_error,
    })
}

/// Fails when an item has feedback in both matrices.
pub fn assert_cold_start(train: &FeedbackMatrix, test: &FeedbackMatrix) -> Result<()> {
    let seen: HashSet<&str> = train.iter().map(|(_, i, _)| train.item_ids()[i].as_str()).collect();
    if let Some((_, i, _)) = test.iter().find(|(_, i, _)| seen.contains(test.item_ids()[*i].as_str())) {
        return Err(Error::InvalidInput(format!(
            "item `{}` has feedback in both train and test",
            test.item_ids()[i]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired two-sided t-test on per-user APs aligned by user.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, se) = mean_and_std_error(&d);
    if !(se > 0.0) {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / se;
    let df = d.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    UpperBound,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Random => "random",
            BaselineKind::UpperBound => "upper_bound",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "upper_bound" | "upper-bound" => Ok(BaselineKind::UpperBound),
            other => Err(Error::InvalidInput(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub item_factors: Array2<f64>,
    /// Present for the upper bound, which also refits the users.
    pub user_factors: Option<Array2<f64>>,
}

/// Random unit-norm item factors, or factors fit on the test feedback.
pub fn make_baseline_factors(
    kind: BaselineKind,
    test: &FeedbackMatrix,
    k: usize,
    cfg: &WmfConfig,
    seed_: u64,
) -> Result<Baseline> {
    match kind {
        BaselineKind::Random => {
            if k == 0 {
                return Err(Error::InvalidInput("k must be at least 1".into()));
            }
            let mut rng = seed::rng(seed_);
            let mut m = Array2::<f64>::from_shape_simple_fn((test.n_items(), k), || StandardNormal.sample(&mut rng));
            for mut r in m.axis_iter_mut(Axis(0)) {
                let n = r.dot(&r).sqrt();
                r /= n;
            }
            Ok(Baseline {
                item_factors: m,
                user_factors: None,
            })
        }
        BaselineKind::UpperBound => {
            let cfg = WmfConfig { k, seed: seed_, ..*cfg };
            let model = factorize_wmf(test, &cfg)?;
            Ok(Baseline {
                item_factors: model.item_factors,
                user_factors: Some(model.user_factors),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn ranking_examples() {
        let items = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(rank_items(arr1(&[1.0, 0.0]).view(), items.view(), 1).unwrap(), vec![0]);
        let equal = arr2(&[[1.0], [1.0], [1.0]]);
        assert_eq!(rank_items(arr1(&[1.0]).view(), equal.view(), 2).unwrap(), vec![0, 1]);
        assert!(rank_items(arr1(&[1.0]).view(), items.view(), 1).is_err());
        assert!(rank_items(arr1(&[1.0, 0.0]).view(), items.view(), 0).is_err());
        assert_eq!(rank_items(arr1(&[1.0, 0.0]).view(), items.view(), 10).unwrap().len(), 2);
    }

    #[test]
    fn ranking_matches_full_sort() {
        use rand::Rng;
        let mut rng = seed::rng(4);
        for _ in 0..20 {
            let items = Array2::from_shape_simple_fn((57, 3), || (rng.random_range(0..5) as f64) / 2.0);
            let u = arr1(&[1.0, 0.5, -0.25]);
            let scores = items.dot(&u);
            let mut full: Vec<usize> = (0..57).collect();
            full.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
            for k in [1, 5, 30, 57] {
                assert_eq!(rank_items(u.view(), items.view(), k).unwrap(), full[..k]);
            }
        }
    }

    #[test]
    fn ap_examples() {
        let a: HashSet<_> = ["A"].into_iter().collect();
        assert_eq!(average_precision(&["A", "B"], &a, 10).unwrap(), 1.0);
        assert_eq!(average_precision(&["B", "A"], &a, 10).unwrap(), 0.5);
        let ac: HashSet<_> = ["A", "C"].into_iter().collect();
        assert!((average_precision(&["A", "B", "C"], &ac, 10).unwrap() - 0.833333333333).abs() < 1e-9);
        assert!(average_precision(&["A"], &HashSet::<&str>::new(), 1).is_err());
        // cutoff normalization: 3 relevant, K = 1, hit at rank 1
        let abc: HashSet<_> = ["A", "B", "C"].into_iter().collect();
        assert_eq!(average_precision(&["A", "B", "C"], &abc, 1).unwrap(), 1.0);
    }

    fn matrix(entries: &[(&str, &str, u64)]) -> FeedbackMatrix {
        let mut m = FeedbackMatrix::default();
        for (u, i, c) in entries {
            m.add(u, i, *c);
        }
        m
    }

    #[test]
    fn map_examples() {
        let test = matrix(&[("u1", "a", 1), ("u2", "b", 2)]);
        let items = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let users = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let r = map_at_k(&users, &items, &test, 10).unwrap();
        assert_eq!(r.map, 1.0);
        let users = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let r = map_at_k(&users, &items, &test, 10).unwrap();
        assert_eq!(r.aps(), vec![1.0, 0.5]);
        assert_eq!(r.map, 0.75);
        assert!(r.to_tsv().starts_with("user\tap\nu1\t"));
        assert!(r.summary_json().contains("\"map\": 0.75"));

        let scaled = items.mapv(|v| v * 7.0);
        assert_eq!(map_at_k(&users, &scaled, &test, 10).unwrap().map, 0.75);
    }

    #[test]
    fn skipped_users_counted() {
        let mut test = FeedbackMatrix::with_ids(vec!["u0".into(), "u1".into()], vec!["a".into()]).unwrap();
        test.add("u1", "a", 1);
        let r = map_at_k(&arr2(&[[1.0], [1.0]]), &arr2(&[[1.0]]), &test, 5).unwrap();
        assert_eq!((r.users, r.skipped), (1, 1));
        let empty = FeedbackMatrix::with_ids(vec!["u0".into()], vec!["a".into()]).unwrap();
        assert!(matches!(map_at_k(&arr2(&[[1.0]]), &arr2(&[[1.0]]), &empty, 5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ttest_examples() {
        assert!(matches!(paired_ttest(&[0.5, 0.2], &[0.5, 0.2]), Err(Error::Degenerate(_))));
        let r = paired_ttest(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        let r = paired_ttest(&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.t - 3.464101615).abs() < 1e-8);
        assert!((r.p - 0.0742).abs() < 5e-5);
        assert!(paired_ttest(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn baselines() {
        let test = matrix(&[("u1", "a", 3), ("u2", "b", 1), ("u1", "c", 2), ("u3", "b", 4)]);
        let cfg = WmfConfig {
            iterations: 10,
            ..WmfConfig::default()
        };
        let r = make_baseline_factors(BaselineKind::Random, &test, 4, &cfg, 1).unwrap();
        for row in r.item_factors.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(r, make_baseline_factors(BaselineKind::Random, &test, 4, &cfg, 1).unwrap());
        let ub = make_baseline_factors(BaselineKind::UpperBound, &test, 2, &cfg, 1).unwrap();
        assert_eq!(ub.user_factors.unwrap().dim(), (3, 2));
        assert_eq!("upper-bound".parse::<BaselineKind>().unwrap(), BaselineKind::UpperBound);
    }

    #[test]
    fn cold_start_check() {
        let train = matrix(&[("u1", "a", 1)]);
        assert!(assert_cold_start(&train, &matrix(&[("u1", "b", 1)])).is_ok());
        assert!(assert_cold_start(&train, &matrix(&[("u2", "a", 1)])).is_err());
    }
}
