//! Overlap metrics, paired t-tests and per-method evaluation reports.

use std::path::Path;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, ImageTensor, MaskTensor};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Iou,
    Dice,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Iou, Metric::Dice, Metric::Precision, Metric::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Dice => "dice",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl BinaryMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Iou => self.iou,
            Metric::Dice => self.dice,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

/// `num / den`, with 0/0 scored as 1 when both masks are empty and 0
/// otherwise.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of one probability plane against a binary plane. A pixel is
/// predicted positive when its probability exceeds `threshold`.
pub fn binary_metrics_plane(p: ArrayView2<f32>, g: ArrayView2<f32>, threshold: f32) -> Result<BinaryMetrics> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (pv, gv) in p.iter().zip(g.iter()) {
        match (*pv > threshold, *gv > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let both_empty = tp + fp + fn_ == 0;
    Ok(BinaryMetrics {
        iou: ratio(tp, tp + fp + fn_, both_empty),
        dice: ratio(2 * tp, 2 * tp + fp + fn_, both_empty),
        precision: ratio(tp, tp + fp, both_empty),
        recall: ratio(tp, tp + fn_, both_empty),
    })
}

/// Per-image metrics for a batch.
pub fn binary_metrics(p: &MaskTensor, g: &MaskTensor, threshold: f32) -> Result<Vec<BinaryMetrics>> {
    if p.data().shape() != g.data().shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            p.data().shape(),
            g.data().shape()
        )));
    }
    p.data()
        .axis_iter(Axis(0))
        .zip(g.data().axis_iter(Axis(0)))
        .map(|(pi, gi)| binary_metrics_plane(pi.index_axis(Axis(0), 0), gi.index_axis(Axis(0), 0), threshold))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub n: usize,
    pub mean_diff: f64,
    /// The differences have zero variance.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b`.
///
/// Zero-variance differences (up to round-off) are flagged as degenerate: all-zero
/// differences give `t = 0, p = 1`, any other constant gives `t = ±∞, p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("unpaired samples: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats("a paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite sample".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // spread at round-off level (e.g. 0.7 - 0.6 vs 0.6 - 0.5) counts as none
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            t,
            p,
            n,
            mean_diff: mean,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Stats(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        n,
        mean_diff: mean,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ImageRecord {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Iou => self.iou,
            Metric::Dice => self.dice,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over images; 0 for a single image.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub records: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn values(&self, m: Metric) -> Vec<f64> {
        self.records.iter().map(|r| r.get(m)).collect()
    }

    pub fn summary(&self, m: Metric) -> Summary {
        summarize(&self.values(m))
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        Metric::ALL
            .iter()
            .map(|&m| {
                let s = self.summary(m);
                AggregateRow {
                    method: self.method.clone(),
                    dataset: self.dataset.clone(),
                    metric: m,
                    mean: s.mean,
                    std: s.std,
                    n: s.n,
                }
            })
            .collect()
    }

    /// Writes `per_image.csv` and `aggregate.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let per_image = dir.join("per_image.csv");
        let mut w = crate::io::csv_writer(&per_image)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&per_image, e))?;
        let agg = dir.join("aggregate.csv");
        let mut w = crate::io::csv_writer(&agg)?;
        for row in self.aggregate() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&agg, e))
    }

    /// Rebuilds a report from a stored `per_image.csv`.
    pub fn read_per_image(path: &Path, method: &str, dataset: &str) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            records,
        })
    }
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Scores `predictor` on every image of `dataset`, `batch_size` at a time.
/// The predictor receives unit-range images.
pub fn evaluate_method<F>(dataset: &Dataset, dataset_name: &str, method: &str, batch_size: usize, mut predictor: F) -> Result<EvalReport>
where
    F: FnMut(&ImageTensor) -> Result<MaskTensor>,
{
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let names = dataset.names();
    let mut records = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let x = dataset.image_batch(chunk)?;
        let g = dataset.mask_batch(chunk)?;
        let p = predictor(&x)?;
        for (k, m) in binary_metrics(&p, &g, DEFAULT_THRESHOLD)?.into_iter().enumerate() {
            check_dice_identity(&m)?;
            records.push(ImageRecord {
                id: names[chunk[k]].clone(),
                iou: m.iou,
                dice: m.dice,
                precision: m.precision,
                recall: m.recall,
            });
        }
    }
    Ok(EvalReport {
        method: method.into(),
        dataset: dataset_name.into(),
        records,
    })
}

fn check_dice_identity(m: &BinaryMetrics) -> Result<()> {
    let implied = 2.0 * m.iou / (1.0 + m.iou);
    if (implied - m.dice).abs() > 1e-12 {
        return Err(Error::Stats(format!("dice {} disagrees with iou {}", m.dice, m.iou)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonResult {
    pub method_a: String,
    pub method_b: String,
    pub tests: Vec<(Metric, TTest)>,
}

impl ComparisonResult {
    /// Paired tests of `a − b` for every metric; both reports must list the
    /// same images in the same order.
    pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Self> {
        let ids_a: Vec<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
        let ids_b: Vec<&str> = b.records.iter().map(|r| r.id.as_str()).collect();
        if ids_a != ids_b {
            return Err(Error::Stats("reports cover different image sets".into()));
        }
        let tests = Metric::ALL
            .iter()
            .map(|&m| paired_t_test(&a.values(m), &b.values(m)).map(|t| (m, t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            method_a: a.method.clone(),
            method_b: b.method.clone(),
            tests,
        })
    }

    pub fn get(&self, m: Metric) -> Option<&TTest> {
        self.tests.iter().find(|(k, _)| *k == m).map(|(_, t)| t)
    }

    /// CSV with columns `metric,method_a,method_b,t,p,n`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(["metric", "method_a", "method_b", "t", "p", "n"])?;
        for (m, t) in &self.tests {
            w.write_record([
                m.name().to_string(),
                self.method_a.clone(),
                self.method_b.clone(),
                t.t.to_string(),
                t.p.to_string(),
                t.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};

    fn plane(ones: &[(usize, usize)]) -> Array2<f32> {
        let mut a = Array2::zeros((4, 4));
        for &(y, x) in ones {
            a[[y, x]] = 1.0;
        }
        a
    }

    #[test]
    fn hand_counted_cases() {
        let g = plane(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let m = binary_metrics_plane(g.view(), g.view(), 0.5).unwrap();
        assert_eq!((m.iou, m.dice, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        let far = plane(&[(3, 3), (3, 2)]);
        let m = binary_metrics_plane(far.view(), g.view(), 0.5).unwrap();
        assert_eq!((m.iou, m.dice, m.precision, m.recall), (0.0, 0.0, 0.0, 0.0));
        // two of four hit plus two false positives
        let p = plane(&[(0, 0), (0, 1), (3, 3), (3, 2)]);
        let m = binary_metrics_plane(p.view(), g.view(), 0.5).unwrap();
        assert!((m.iou - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!((m.dice, m.precision, m.recall), (0.5, 0.5, 0.5));
        let empty = plane(&[]);
        let m = binary_metrics_plane(empty.view(), empty.view(), 0.5).unwrap();
        assert_eq!((m.iou, m.dice, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        let m = binary_metrics_plane(empty.view(), g.view(), 0.5).unwrap();
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        let m = binary_metrics_plane(g.view(), empty.view(), 0.5).unwrap();
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        assert!(binary_metrics_plane(g.view(), Array2::zeros((3, 4)).view(), 0.5).is_err());
    }

    #[test]
    fn precision_and_recall_equal_dice_when_errors_balance() {
        let g = plane(&[(0, 0), (0, 1), (1, 0)]);
        let p = plane(&[(0, 0), (0, 1), (2, 2)]);
        let m = binary_metrics_plane(p.view(), g.view(), 0.5).unwrap();
        assert_eq!(m.precision, m.dice);
        assert_eq!(m.recall, m.dice);
    }

    #[test]
    fn t_test_cases() {
        let a = [0.3, 0.5, 0.7];
        let t = paired_t_test(&a, &a).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        let t = paired_t_test(&[0.6, 0.7, 0.8, 0.9], &[0.5, 0.6, 0.7, 0.8]).unwrap();
        assert!(t.degenerate);
        assert!(t.t.is_infinite() && t.p == 0.0);
        // mean 0.1, sd sqrt(0.025), n 5: t = 0.1 / (0.158114/sqrt 5) = sqrt 2;
        // p from scipy.stats.ttest_rel
        let b = [0.0; 5];
        let t = paired_t_test(&[0.2, 0.0, 0.1, 0.3, -0.1], &b).unwrap();
        assert!((t.t - 2f64.sqrt()).abs() < 1e-12, "{}", t.t);
        assert!((t.p - 0.230_199_641).abs() < 1e-8, "{}", t.p);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    fn dataset_of(masks: &[Array2<f32>]) -> Dataset {
        let items = masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                crate::data::Item::new(format!("img{i}"), ndarray::Array3::from_elem((3, 4, 4), 0.5), m.clone(), crate::data::Domain::Target)
                    .unwrap()
            })
            .collect();
        Dataset::new(items, crate::data::Split::Test).unwrap()
    }

    #[test]
    fn report_oracles_and_recomputation() {
        let masks = vec![plane(&[(0, 0)]), plane(&[(1, 1), (2, 2)]), plane(&[(3, 3), (0, 3), (1, 3)])];
        let ds = dataset_of(&masks);
        let all = ds.all_masks().unwrap();
        let mut seen = 0;
        let perfect = evaluate_method(&ds, "d", "oracle", 2, |x| {
            let n = x.batch();
            let m = all.data().slice(ndarray::s![seen..seen + n, .., .., ..]).to_owned();
            seen += n;
            MaskTensor::probability(m)
        })
        .unwrap();
        for row in perfect.aggregate() {
            assert_eq!((row.mean, row.std, row.n), (1.0, 0.0, 3));
        }
        let zero = evaluate_method(&ds, "d", "zero", 3, |x| MaskTensor::probability(Array4::zeros((x.batch(), 1, 4, 4)))).unwrap();
        assert_eq!(zero.summary(Metric::Iou).mean, 0.0);

        let dir = tempfile::tempdir().unwrap();
        zero.write(dir.path()).unwrap();
        perfect.write(&dir.path().join("p")).unwrap();
        let back = EvalReport::read_per_image(&dir.path().join("per_image.csv"), "zero", "d").unwrap();
        assert_eq!(back, zero);
        let stored = read_aggregate(&dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(stored, back.aggregate());

        let cmp = ComparisonResult::compare(&perfect, &zero).unwrap();
        let path = dir.path().join("cmp.csv");
        cmp.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "metric,method_a,method_b,t,p,n");
        assert_eq!(text.lines().count(), 5);
    }
}
