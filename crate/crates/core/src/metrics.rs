//! Overall accuracy, selection accuracy, and the bandwidth-improvement score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AgentId;
use crate::error::{Error, Result};
use crate::model::BaselineKind;

/// Fraction of equal cells in one pair of label grids.
pub fn cell_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Dimension(format!("label grids of {} and {} cells", pred.len(), gt.len())));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Per-episode cell accuracy, averaged over episodes.
pub fn overall_accuracy(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Dimension(format!("{} predictions for {} episodes", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += cell_accuracy(p, g)?;
    }
    Ok(total / gt.len() as f64)
}

/// Fraction of episodes whose selected set contains the best agent.
pub fn selection_accuracy(selected: &[Vec<AgentId>], best: &[AgentId]) -> Result<f64> {
    if selected.len() != best.len() || best.is_empty() {
        return Err(Error::Dimension(format!(
            "{} selections for {} episodes",
            selected.len(),
            best.len()
        )));
    }
    let hits = selected.iter().zip(best).filter(|(s, b)| s.contains(b)).count();
    Ok(hits as f64 / best.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisInputs {
    /// Accuracy of the method.
    pub accuracy: f64,
    /// Accuracy of the single degraded model.
    pub lower: f64,
    /// Accuracy of the single normal model.
    pub upper: f64,
    /// Bandwidth in Mbytes per frame.
    pub mbytes: f64,
}

impl BisInputs {
    /// `kbpf / 1024` Mbytes.
    pub fn from_kbpf(accuracy: f64, lower: f64, upper: f64, kbpf: f64) -> Self {
        Self {
            accuracy,
            lower,
            upper,
            mbytes: kbpf / 1024.0,
        }
    }
}

/// `(δ - δ̄) / ((δ̂ - δ̄) · ω)`.
pub fn compute_bis(inputs: &BisInputs) -> Result<f64> {
    let BisInputs {
        accuracy,
        lower,
        upper,
        mbytes,
    } = *inputs;
    if !(mbytes > 0.0) || !mbytes.is_finite() {
        return Err(Error::UndefinedMetric(format!("bandwidth must be positive, got {mbytes} MB")));
    }
    if !(upper > lower) {
        return Err(Error::UndefinedMetric(format!(
            "upper bound {upper} does not exceed lower bound {lower}"
        )));
    }
    Ok((accuracy - lower) / ((upper - lower) * mbytes))
}

/// One evaluated method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub overall_acc: f64,
    pub kbpf: Option<f64>,
    #[serde(rename = "BIS")]
    pub bis: Option<f64>,
    pub selection_acc: Option<f64>,
    pub episodes: usize,
}

/// Fills the BIS of every record that transmits, using the single normal
/// and single degraded records in the same list as bounds.
pub fn attach_bis(records: &mut [MetricsRecord]) -> Result<()> {
    let find = |k: BaselineKind| {
        records
            .iter()
            .find(|r| r.method == k.slug())
            .map(|r| r.overall_acc)
            .ok_or_else(|| Error::UndefinedMetric(format!("no `{}` record to bound BIS", k.slug())))
    };
    let upper = find(BaselineKind::SingleNormal)?;
    let lower = find(BaselineKind::SingleDegraded)?;
    for r in records.iter_mut() {
        r.bis = match r.kbpf {
            Some(k) if k > 0.0 => Some(compute_bis(&BisInputs::from_kbpf(r.overall_acc, lower, upper, k))?),
            _ => None,
        };
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

pub fn emit_report(records: &[MetricsRecord], path: &Path, format: ReportFormat) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to report".into()));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(records).map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(path, text + "\n")?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<MetricsRecord>> {
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
        }
        ReportFormat::Json => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
        }
    }
}

/// One accuracy/bandwidth cell of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub setting: String,
    pub accuracy: f64,
    pub kbpf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BisCell {
    pub method: String,
    pub setting: String,
    pub accuracy: f64,
    pub kbpf: f64,
    pub bis: Result<f64>,
}

fn is_bound(method: &str, kind: BaselineKind) -> bool {
    let m = method.trim();
    m.eq_ignore_ascii_case(kind.slug()) || m.eq_ignore_ascii_case(kind.display_name())
}

/// BIS for every row that has a bandwidth, bounded by the single normal and
/// single degraded rows of the same setting.
pub fn bis_table(rows: &[TableRow]) -> Result<Vec<BisCell>> {
    let bound = |setting: &str, kind: BaselineKind| {
        rows.iter()
            .find(|r| r.setting == setting && is_bound(&r.method, kind))
            .map(|r| r.accuracy)
            .ok_or_else(|| Error::UndefinedMetric(format!("setting `{setting}` has no `{}` row", kind.display_name())))
    };
    let mut out = Vec::new();
    for r in rows {
        if is_bound(&r.method, BaselineKind::SingleNormal) || is_bound(&r.method, BaselineKind::SingleDegraded) {
            continue;
        }
        let upper = bound(&r.setting, BaselineKind::SingleNormal)?;
        let lower = bound(&r.setting, BaselineKind::SingleDegraded)?;
        let kbpf = r.kbpf.unwrap_or(0.0);
        out.push(BisCell {
            method: r.method.clone(),
            setting: r.setting.clone(),
            accuracy: r.accuracy,
            kbpf,
            bis: compute_bis(&BisInputs::from_kbpf(r.accuracy, lower, upper, kbpf)),
        });
    }
    Ok(out)
}

pub fn read_table_csv(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(overall_accuracy(&[vec![0, 1, 2]], &[vec![0, 1, 2]]).unwrap(), 1.0);
        assert_eq!(overall_accuracy(&[vec![1, 0, 0, 1]], &[vec![0, 1, 1, 0]]).unwrap(), 0.0);
        assert_eq!(overall_accuracy(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 0]]).unwrap(), 0.75);
        assert!(overall_accuracy(&[vec![1, 2]], &[vec![1, 2, 3]]).is_err());
    }

    #[test]
    fn selection_examples() {
        let best = vec![AgentId(1), AgentId(3)];
        assert_eq!(selection_accuracy(&[vec![AgentId(1)], vec![AgentId(3)]], &best).unwrap(), 1.0);
        assert_eq!(
            selection_accuracy(&[vec![AgentId(2), AgentId(1)], vec![AgentId(4)]], &best).unwrap(),
            0.5
        );
    }

    #[test]
    fn uniform_random_selection_is_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let best: Vec<AgentId> = (0..n).map(|_| AgentId(rng.gen_range(1..=4))).collect();
        let sel: Vec<Vec<AgentId>> = (0..n).map(|_| vec![AgentId(rng.gen_range(1..=4))]).collect();
        assert_abs_diff_eq!(selection_accuracy(&sel, &best).unwrap(), 0.25, epsilon = 0.01);
    }

    fn bis(acc: f64, kbpf: f64) -> f64 {
        compute_bis(&BisInputs::from_kbpf(acc, 68.79, 88.14, kbpf)).unwrap()
    }

    #[test]
    fn bis_anchors() {
        assert_abs_diff_eq!(bis(84.57, 1028.03), 0.812, epsilon = 0.001);
        assert_abs_diff_eq!(bis(72.58, 4096.0), 0.049, epsilon = 0.001);
        assert_abs_diff_eq!(bis(65.31, 1024.03), -0.179, epsilon = 0.001);
        assert_eq!(bis(68.79, 512.0), 0.0);
    }

    #[test]
    fn bis_undefined_cases() {
        let r = compute_bis(&BisInputs::from_kbpf(70.0, 68.0, 88.0, 0.0));
        assert!(matches!(r, Err(Error::UndefinedMetric(_))));
        let r = compute_bis(&BisInputs::from_kbpf(70.0, 88.0, 88.0, 10.0));
        assert!(matches!(r, Err(Error::UndefinedMetric(_))));
    }

    fn record(method: &str, acc: f64, kbpf: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            method: method.into(),
            overall_acc: acc,
            kbpf,
            bis: None,
            selection_acc: Some(0.5),
            episodes: 200,
        }
    }

    #[test]
    fn report_round_trips_and_matches_bis() {
        let mut recs = vec![
            record("single-normal", 0.9, None),
            record("single-degraded", 0.6, None),
            record("ours-with-msg", 0.85, Some(1.140625)),
        ];
        attach_bis(&mut recs).unwrap();
        let want = compute_bis(&BisInputs::from_kbpf(0.85, 0.6, 0.9, 1.140625)).unwrap();
        assert_eq!(recs[2].bis, Some(want));
        assert_eq!(recs[0].bis, None);
        let dir = tempfile::tempdir().unwrap();
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let path = dir.path().join(format!("r.{fmt}"));
            emit_report(&recs, &path, fmt).unwrap();
            assert_eq!(read_report(&path, fmt).unwrap(), recs);
        }
        let head = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(head.starts_with("method,overall_acc,kbpf,BIS,selection_acc,episodes\n"));
        assert!(emit_report(&[], &dir.path().join("e.csv"), ReportFormat::Csv).is_err());
    }

    #[test]
    fn table_needs_bounds_and_reports_zero_bandwidth_per_row() {
        let row = |m: &str, a: f64, k: Option<f64>| TableRow {
            method: m.into(),
            setting: "s".into(),
            accuracy: a,
            kbpf: k,
        };
        let rows = vec![row("Single Normal", 90.0, None), row("x", 80.0, Some(1024.0))];
        assert!(matches!(bis_table(&rows), Err(Error::UndefinedMetric(_))));
        let rows = vec![
            row("Single Normal", 90.0, None),
            row("Single Degraded", 60.0, None),
            row("x", 80.0, Some(0.0)),
            row("y", 75.0, Some(1024.0)),
        ];
        let cells = bis_table(&rows).unwrap();
        assert!(matches!(cells[0].bis, Err(Error::UndefinedMetric(_))));
        assert_abs_diff_eq!(*cells[1].bis.as_ref().unwrap(), 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn bis_monotone(acc in 0.0f64..100.0, d in 0.1f64..10.0, k in 1.0f64..5000.0, dk in 1.0f64..100.0) {
            let lo = 50.0;
            let hi = 90.0;
            let base = compute_bis(&BisInputs::from_kbpf(acc, lo, hi, k)).unwrap();
            let more_acc = compute_bis(&BisInputs::from_kbpf(acc + d, lo, hi, k)).unwrap();
            prop_assert!(more_acc > base);
            let more_bw = compute_bis(&BisInputs::from_kbpf(acc, lo, hi, k + dk)).unwrap();
            if acc > lo { prop_assert!(more_bw < base); }
            if acc < lo { prop_assert!(more_bw > base); }
        }

        #[test]
        fn accuracy_is_permutation_invariant(grids in prop::collection::vec(prop::collection::vec(0usize..3, 8), 1..10), rot in 0usize..10) {
            let gt: Vec<Vec<usize>> = grids.iter().map(|g| g.iter().map(|v| (v + 1) % 3).collect()).collect();
            let pred: Vec<Vec<usize>> = grids.iter().map(|g| g.iter().map(|v| if v % 2 == 0 { (v + 1) % 3 } else { *v }).collect()).collect();
            let a = overall_accuracy(&pred, &gt).unwrap();
            let r = rot % pred.len();
            let mut p2 = pred.clone();
            let mut g2 = gt.clone();
            p2.rotate_left(r);
            g2.rotate_left(r);
            let b = overall_accuracy(&p2, &g2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
