//! Detection scores, threshold metrics, accuracy and the leave-one-domain-out harness.
//!
//! Score convention throughout: higher means more out-of-distribution.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};
use crate::features::{FeatureSet, Role};
use crate::model::{self, AdapterParams};
use crate::trainer::{self, TrainConfig};

/// Quantile levels reported for energy distributions.
pub const PERCENTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub closed_scores: Vec<f64>,
    pub open_scores: Vec<f64>,
}

impl DetectionScores {
    pub fn new(closed_scores: Vec<f64>, open_scores: Vec<f64>) -> Result<Self> {
        let ds = DetectionScores {
            closed_scores,
            open_scores,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.closed_scores.is_empty() || self.open_scores.is_empty() {
            return Err(CroftError::Validation(format!(
                "detection needs both populations (closed: {}, open: {})",
                self.closed_scores.len(),
                self.open_scores.len()
            )));
        }
        if self
            .closed_scores
            .iter()
            .chain(self.open_scores.iter())
            .any(|s| !s.is_finite())
        {
            return Err(CroftError::NonFinite("detection score".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Energy,
    Knn { k: usize },
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Detector::Energy => f.write_str("energy"),
            Detector::Knn { k } => write!(f, "knn(k={k})"),
        }
    }
}

/// Metrics for one evaluation run. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id_acc: Option<f64>,
    pub ood_acc: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    /// Role name to the energies at [`PERCENTILE_LEVELS`].
    pub energy_percentiles: BTreeMap<String, [f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_domain: Option<u32>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        MetricsReport {
            id_acc: None,
            ood_acc: None,
            auroc: None,
            fpr95: None,
            energy_percentiles: BTreeMap::new(),
            detector: None,
            held_out_domain: None,
        }
    }

    /// Fixed-column table for terminals.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>, pct: bool| match v {
            Some(x) if pct => format!("{x:>10.2}"),
            Some(x) => format!("{x:>10.4}"),
            None => format!("{:>10}", "-"),
        };
        let mut out = format!(
            "{:<12}{:>10}{:>10}{:>10}{:>10}\n",
            "detector", "id_acc", "ood_acc", "auroc", "fpr95"
        );
        out.push_str(&format!(
            "{:<12}{}{}{}{}\n",
            self.detector.as_deref().unwrap_or("-"),
            fmt(self.id_acc, true),
            fmt(self.ood_acc, true),
            fmt(self.auroc, false),
            fmt(self.fpr95, false)
        ));
        if !self.energy_percentiles.is_empty() {
            out.push_str(&percentile_table(&self.energy_percentiles));
        }
        out
    }
}

/// Renders per-role energy percentiles as rows of `p5 p25 p50 p75 p95`.
pub fn percentile_table(table: &BTreeMap<String, [f64; 5]>) -> String {
    let mut out = format!(
        "{:<12}{:>9}{:>9}{:>9}{:>9}{:>9}\n",
        "energy", "0.05", "0.25", "0.50", "0.75", "0.95"
    );
    for (role, q) in table {
        out.push_str(&format!(
            "{:<12}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}\n",
            role, q[0], q[1], q[2], q[3], q[4]
        ));
    }
    out
}

/// Quantile by linear interpolation between order statistics (position `q (n - 1)`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CroftError::Validation("percentile of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn energy_percentiles(values: &[f64]) -> Result<[f64; 5]> {
    if values.is_empty() {
        return Err(CroftError::Validation("energy percentiles of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PERCENTILE_LEVELS.map(|q| percentile_sorted(&sorted, q)))
}

/// Per-sample energies of raw image rows under the adapters.
pub fn energy_detector(
    features: ArrayView2<f64>,
    text: ArrayView2<f64>,
    params: &AdapterParams,
) -> Result<Array1<f64>> {
    let s = model::score_matrix(features, text, params)?;
    Ok(model::energy_scores(&s))
}

/// Energies of rows that already live in adapted space (e.g. generated rows).
pub fn energy_of_adapted(
    adapted: ArrayView2<f64>,
    text: ArrayView2<f64>,
    params: &AdapterParams,
) -> Result<Array1<f64>> {
    let v = model::adapt_text(text, params)?;
    let s = model::scores_from_adapted(adapted, v.view(), params.temperature)?;
    Ok(model::energy_scores(&s))
}

fn unit_rows(m: ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(CroftError::Degenerate(format!("zero row {i} in KNN input")));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Distance from every query row to its `k`-th nearest bank row (exhaustive search).
pub fn knn_detector(query: ArrayView2<f64>, bank: ArrayView2<f64>, k: usize, normalize: bool) -> Result<Array1<f64>> {
    let m = bank.nrows();
    if k == 0 || k > m {
        return Err(CroftError::Validation(format!("k = {k} outside [1, {m}]")));
    }
    if query.ncols() != bank.ncols() {
        return Err(CroftError::Dimension(format!(
            "query has {} columns, bank {}",
            query.ncols(),
            bank.ncols()
        )));
    }
    let (q, b) = if normalize {
        (unit_rows(query)?, unit_rows(bank)?)
    } else {
        (query.to_owned(), bank.to_owned())
    };
    let mut dists = vec![0.0; m];
    Ok(q.rows()
        .into_iter()
        .map(|qr| {
            for (j, br) in b.rows().into_iter().enumerate() {
                dists[j] = qr
                    .iter()
                    .zip(br.iter())
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
            }
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// Probability that an open-set score exceeds a closed-set score, ties counted one half.
pub fn auroc(ds: &DetectionScores) -> Result<f64> {
    ds.check()?;
    // Twice the Mann-Whitney count, accumulated as an integer so the result is exact.
    let mut closed = ds.closed_scores.clone();
    closed.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    for &o in &ds.open_scores {
        let below = closed.partition_point(|&c| c < o);
        let not_above = closed.partition_point(|&c| c <= o);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = ds.open_scores.len() as u128 * ds.closed_scores.len() as u128;
    Ok(twice as f64 / (2 * pairs) as f64)
}

/// Fraction of open-set scores at or below the 95th percentile of closed-set scores.
pub fn fpr95(ds: &DetectionScores) -> Result<f64> {
    ds.check()?;
    let threshold = percentile(&ds.closed_scores, 0.95)?;
    let accepted = ds.open_scores.iter().filter(|&&s| s <= threshold).count();
    Ok(accepted as f64 / ds.open_scores.len() as f64)
}

/// Fraction of rows whose argmax score is the label.
pub fn classify_accuracy(
    features: ArrayView2<f64>,
    text: ArrayView2<f64>,
    labels: &[usize],
    params: &AdapterParams,
) -> Result<f64> {
    crate::grad::check_labels(labels, features.nrows(), text.nrows())?;
    if labels.is_empty() {
        return Err(CroftError::Validation("accuracy of an empty set".into()));
    }
    let s = model::score_matrix(features, text, params)?;
    let hits = model::argmax_rows(s.scores.view())
        .into_iter()
        .zip(labels)
        .filter(|(p, &y)| *p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Which closed-set population is compared against the open set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedPopulation {
    /// Closed-set ID rows (open-set vs ID data).
    Id,
    /// Covariate-shifted closed-set rows (closed OOD vs open OOD).
    Ood,
}

/// Detection scores for raw rows under a detector. `bank` holds adapted ID rows for KNN.
pub fn detector_scores(
    detector: Detector,
    rows: &FeatureSet,
    params: &AdapterParams,
    bank: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    match detector {
        Detector::Energy => {
            Ok(energy_detector(rows.image_features.view(), rows.text_features.view(), params)?.to_vec())
        }
        Detector::Knn { k } => {
            let q = model::adapt_image(rows.image_features.view(), params)?;
            Ok(knn_detector(q.view(), bank, k, true)?.to_vec())
        }
    }
}

fn expect_role(fs: &FeatureSet, role: Role, what: &str) -> Result<()> {
    if fs.role != role {
        return Err(CroftError::Validation(format!(
            "{what} must have role {role}, found {}",
            fs.role
        )));
    }
    Ok(())
}

/// Evaluates adapters on ID, optional closed-OOD and optional open-set data.
pub fn evaluate(
    params: &AdapterParams,
    id: &FeatureSet,
    ood: Option<&FeatureSet>,
    open: Option<&FeatureSet>,
    detector: Detector,
    closed_population: ClosedPopulation,
) -> Result<MetricsReport> {
    expect_role(id, Role::ClosedId, "ID feature set")?;
    let mut report = MetricsReport::empty();
    report.detector = Some(detector.to_string());
    let id_labels = id.class_labels()?;
    report.id_acc =
        Some(100.0 * classify_accuracy(id.image_features.view(), id.text_features.view(), &id_labels, params)?);
    let id_energy = energy_detector(id.image_features.view(), id.text_features.view(), params)?;
    report.energy_percentiles.insert(
        Role::ClosedId.to_string(),
        energy_percentiles(id_energy.as_slice().unwrap())?,
    );
    if let Some(ood) = ood {
        expect_role(ood, Role::ClosedOod, "closed-OOD feature set")?;
        let labels = ood.class_labels()?;
        report.ood_acc =
            Some(100.0 * classify_accuracy(ood.image_features.view(), ood.text_features.view(), &labels, params)?);
        let e = energy_detector(ood.image_features.view(), ood.text_features.view(), params)?;
        report
            .energy_percentiles
            .insert(Role::ClosedOod.to_string(), energy_percentiles(e.as_slice().unwrap())?);
    }
    if let Some(open) = open {
        expect_role(open, Role::OpenOod, "open-set feature set")?;
        let e = energy_detector(open.image_features.view(), open.text_features.view(), params)?;
        report
            .energy_percentiles
            .insert(Role::OpenOod.to_string(), energy_percentiles(e.as_slice().unwrap())?);
        let closed = match closed_population {
            ClosedPopulation::Id => id,
            ClosedPopulation::Ood => ood.ok_or_else(|| {
                CroftError::Validation("closed_ood feature set required for closed-OOD vs open-set detection".into())
            })?,
        };
        let bank = model::adapt_image(id.image_features.view(), params)?;
        let ds = DetectionScores::new(
            detector_scores(detector, closed, params, bank.view())?,
            detector_scores(detector, open, params, bank.view())?,
        )?;
        report.auroc = Some(auroc(&ds)?);
        report.fpr95 = Some(fpr95(&ds)?);
    }
    Ok(report)
}

/// Per-domain reports followed by their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub per_domain: Vec<MetricsReport>,
    pub average: MetricsReport,
}

fn mean_of(reports: &[MetricsReport], f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
    vals.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages scalar metrics and percentile tables of several reports.
pub fn average_reports(reports: &[MetricsReport]) -> MetricsReport {
    let mut avg = MetricsReport::empty();
    avg.id_acc = mean_of(reports, |r| r.id_acc);
    avg.ood_acc = mean_of(reports, |r| r.ood_acc);
    avg.auroc = mean_of(reports, |r| r.auroc);
    avg.fpr95 = mean_of(reports, |r| r.fpr95);
    avg.detector = reports.first().and_then(|r| r.detector.clone());
    if let Some(first) = reports.first() {
        for role in first.energy_percentiles.keys() {
            if reports.iter().all(|r| r.energy_percentiles.contains_key(role)) {
                let mut q = [0.0; 5];
                for r in reports {
                    for (a, b) in q.iter_mut().zip(r.energy_percentiles[role].iter()) {
                        *a += b / reports.len() as f64;
                    }
                }
                avg.energy_percentiles.insert(role.clone(), q);
            }
        }
    }
    avg
}

/// Leave-one-domain-out: for every closed-set domain, train on the others and test on it.
///
/// Every domain set must share text features. Detection (when `open_sets` is non-empty)
/// compares the held-out domain against the pooled open sets.
pub fn lodo_evaluate(
    domains: &[FeatureSet],
    open_sets: &[FeatureSet],
    cfg: &TrainConfig,
    detector: Detector,
) -> Result<LodoReport> {
    if domains.len() < 2 {
        return Err(CroftError::Validation(format!(
            "leave-one-domain-out needs at least 2 closed-set domains, got {}",
            domains.len()
        )));
    }
    let open = if open_sets.is_empty() {
        None
    } else {
        Some(FeatureSet::concat(
            &open_sets.iter().collect::<Vec<_>>(),
            Role::OpenOod,
        )?)
    };
    let mut per_domain = Vec::with_capacity(domains.len());
    for held in 0..domains.len() {
        let train_sets: Vec<&FeatureSet> = domains
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held)
            .map(|(_, d)| d)
            .collect();
        let train_set = FeatureSet::concat(&train_sets, Role::ClosedId)?;
        let held_out = FeatureSet::concat(&[&domains[held]], Role::ClosedOod)?;
        let ckpt = trainer::train(&train_set, cfg)?;
        let mut report = evaluate(
            &ckpt.params,
            &train_set,
            Some(&held_out),
            open.as_ref(),
            detector,
            ClosedPopulation::Ood,
        )?;
        report.held_out_domain = domains[held].domain_ids.first().copied();
        per_domain.push(report);
    }
    let average = average_reports(&per_domain);
    Ok(LodoReport { per_domain, average })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds(c: &[f64], o: &[f64]) -> DetectionScores {
        DetectionScores::new(c.to_vec(), o.to_vec()).unwrap()
    }

    fn auroc_pairs(d: &DetectionScores) -> f64 {
        let mut twice = 0u64;
        for &o in &d.open_scores {
            for &c in &d.closed_scores {
                twice += if o > c {
                    2
                } else if o == c {
                    1
                } else {
                    0
                };
            }
        }
        twice as f64 / (2 * d.open_scores.len() * d.closed_scores.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ds(&[-5.0, -4.0, -3.0], &[-1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(auroc(&ds(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0])).unwrap(), 0.5);
        assert_eq!(auroc(&ds(&[-3.0, -1.0], &[-2.0, 0.0])).unwrap(), 0.75);
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr95(&ds(&[-5.0, -4.0, -3.0], &[-1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(fpr95(&ds(&[5.0, 6.0], &[1.0, 2.0])).unwrap(), 1.0);
        let closed: Vec<f64> = (1..=20).map(f64::from).collect();
        assert!((percentile(&closed, 0.95).unwrap() - 19.05).abs() < 1e-12);
        assert_eq!(fpr95(&ds(&closed, &[5.5, 30.0])).unwrap(), 0.5);
    }

    #[test]
    fn empty_population_rejected() {
        assert!(DetectionScores::new(vec![], vec![1.0]).is_err());
        let bad = DetectionScores {
            closed_scores: vec![1.0],
            open_scores: vec![],
        };
        assert!(auroc(&bad).is_err());
        assert!(fpr95(&bad).is_err());
    }

    #[test]
    fn knn_examples() {
        let bank = array![[0.0, 0.0], [1.0, 0.0]];
        let s = knn_detector(array![[0.5, 0.0]].view(), bank.view(), 1, false).unwrap();
        assert_eq!(s[0], 0.5);
        let s = knn_detector(array![[1.0, 0.0]].view(), bank.view(), 1, false).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(knn_detector(array![[1.0, 0.0]].view(), bank.view(), 3, false).is_err());
        assert!(knn_detector(array![[1.0, 0.0]].view(), bank.view(), 0, false).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = crate::instance::random_matrix(&mut rng, 15, 4, 1.0);
        let b = crate::instance::random_matrix(&mut rng, 30, 4, 1.0);
        for k in [1, 3, 30] {
            let got = knn_detector(q.view(), b.view(), k, false).unwrap();
            for i in 0..15 {
                let mut all: Vec<f64> = (0..30)
                    .map(|j| (0..4).map(|c| (q[[i, c]] - b[[j, c]]).powi(2)).sum::<f64>().sqrt())
                    .collect();
                all.sort_by(f64::total_cmp);
                assert_eq!(got[i], all[k - 1]);
            }
        }
    }

    #[test]
    fn accuracy_examples() {
        let p = AdapterParams::identity(2, 1.0);
        let text = array![[1.0, 0.0], [0.0, 1.0]];
        let x = array![[2.0, 1.0], [0.0, 3.0]];
        assert_eq!(classify_accuracy(x.view(), text.view(), &[0, 1], &p).unwrap(), 1.0);
        let x = array![[1.0, 1.0], [0.0, 0.0]];
        assert_eq!(classify_accuracy(x.view(), text.view(), &[0, 0], &p).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = crate::instance::Instance::random(&mut rng, 5, 16, 5);
        let s = model::score_matrix(inst.image.view(), inst.text.view(), &inst.params).unwrap();
        let mut hits = 0;
        for (i, &y) in inst.labels.iter().enumerate() {
            let row = s.scores.row(i);
            if (0..row.len()).all(|j| row[y] > row[j] || (row[y] == row[j] && y <= j)) {
                hits += 1;
            }
        }
        let acc = classify_accuracy(inst.image.view(), inst.text.view(), &inst.labels, &inst.params).unwrap();
        assert_eq!(acc, hits as f64 / inst.labels.len() as f64);
    }

    #[test]
    fn constant_energies_have_flat_percentiles() {
        let q = energy_percentiles(&[-2.0; 7]).unwrap();
        assert!(q.iter().all(|&v| v == -2.0));
        assert!(energy_percentiles(&[]).is_err());
    }

    fn score_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        // Coarse grid so ties occur.
        (0..n).map(|_| (rng.random_range(-40..40) as f64) / 8.0).collect()
    }

    #[test]
    fn auroc_matches_pair_counting_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let nc = rng.random_range(1..=200);
            let no = rng.random_range(1..=200);
            let d = ds(&score_set(&mut rng, nc), &score_set(&mut rng, no));
            assert_eq!(auroc(&d).unwrap(), auroc_pairs(&d));
        }
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_maps(
            closed in prop::collection::vec(-5.0f64..5.0, 1..60),
            open in prop::collection::vec(-5.0f64..5.0, 1..60),
        ) {
            let base = auroc(&ds(&closed, &open)).unwrap();
            let lin = |v: &[f64]| v.iter().map(|x| 2.0 * x + 1.0).collect::<Vec<_>>();
            let cube = |v: &[f64]| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&ds(&lin(&closed), &lin(&open))).unwrap(), base);
            prop_assert_eq!(auroc(&ds(&cube(&closed), &cube(&open))).unwrap(), base);
        }

        #[test]
        fn fpr95_non_increasing_under_upward_shift(
            closed in prop::collection::vec(-5.0f64..5.0, 1..60),
            open in prop::collection::vec(-5.0f64..5.0, 1..60),
            shift in 0.0f64..3.0,
        ) {
            let before = fpr95(&ds(&closed, &open)).unwrap();
            let moved: Vec<f64> = open.iter().map(|x| x + shift).collect();
            let after = fpr95(&ds(&closed, &moved)).unwrap();
            prop_assert!(after <= before);
            prop_assert!((0.0..=1.0).contains(&after));
        }

        #[test]
        fn percentiles_non_decreasing(values in prop::collection::vec(-50.0f64..50.0, 1..100)) {
            let q = energy_percentiles(&values).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
