//! Metrics and reports: accuracy at an IoU threshold, the proposal upper
//! bound, medians of IoU and IoU change, bucketed IoU distributions, and the
//! per-feature ablation table.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou_unchecked, BBox, ThresholdMode};
use crate::optibox::{FeatureMask, Refiner};
use crate::synthdata::{SampleRecord, Split};
use crate::train::{independent_pairs, refine_pairs, train_optibox_independent, TrainConfig};
use crate::{Error, Result};

/// Full-supervision grounding accuracy of the reference system (%).
pub const REFERENCE_ACCURACY_FULL: f64 = 67.04;
/// Reference accuracy at 3.12% annotation (%).
pub const REFERENCE_ACCURACY_P3_12: f64 = 58.55;
/// Reference accuracy at 50% annotation (%).
pub const REFERENCE_ACCURACY_P50: f64 = 65.85;
/// Reference proposal upper bound (%).
pub const REFERENCE_UPPER_BOUND: f64 = 84.00;
/// Reference median IoU before and after refinement.
pub const REFERENCE_MEDIAN_IOU: (f64, f64) = (0.6008, 0.6617);
/// Reference median IoU change per feature configuration.
pub const REFERENCE_ABLATION: [(&str, f64); 5] = [
    ("all", 0.200),
    ("-visual", 0.106),
    ("-box", 0.197),
    ("-query", 0.105),
    ("-global", 0.198),
];

/// Selection buckets of before-refinement IoU.
pub const SELECTION_BUCKETS: [(f64, f64); 3] = [(0.3, 0.5), (0.5, 0.7), (0.7, 1.0)];
pub const BIN_WIDTH: f64 = 0.05;

/// Two decimals, halves rounded away from zero.
pub fn round_percent(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Percentage of aligned pairs whose IoU passes `threshold`.
pub fn accuracy_at_iou(
    pred: &[BBox],
    gt: &[BBox],
    threshold: f64,
    mode: ThresholdMode,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| mode.passes(iou_unchecked(p, g), threshold))
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Percentage of queries with at least one proposal at `threshold` IoU or
/// more; a query without proposals is not covered.
pub fn proposal_upper_bound(records: &[SampleRecord], threshold: f64) -> f64 {
    let (covered, total) = crate::synthdata::coverage(records, threshold);
    if total == 0 {
        return 0.0;
    }
    100.0 * covered as f64 / total as f64
}

/// Median; an even count averages the middle two.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Median over pairs of `IoU(after, gt) - IoU(before, gt)`.
pub fn median_delta_iou(before: &[BBox], after: &[BBox], gt: &[BBox]) -> Result<f64> {
    if before.len() != after.len() || before.len() != gt.len() {
        return Err(Error::Shape("before, after and gt lengths differ".into()));
    }
    let deltas: Vec<f64> = before
        .iter()
        .zip(after)
        .zip(gt)
        .map(|((b, a), g)| iou_unchecked(a, g) - iou_unchecked(b, g))
        .collect();
    median(&deltas)
}

/// Counts for one IoU bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinCount {
    pub low: f64,
    pub high: f64,
    pub before: usize,
    pub after: usize,
}

fn bin_index(v: f64, width: f64, n: usize) -> usize {
    // 0.7 / 0.05 is 13.999..., which must land on the edge it names
    ((v / width + 1e-9).floor().max(0.0) as usize).min(n - 1)
}

/// Fixed-width bins over `[0, 1]`; the last bin also holds 1.0.
pub fn fine_bins(before: &[f64], after: &[f64], width: f64) -> Vec<BinCount> {
    let n = (1.0 / width).round() as usize;
    let mut bins: Vec<BinCount> = (0..n)
        .map(|i| BinCount {
            low: round_percent(i as f64 * width),
            high: round_percent((i + 1) as f64 * width),
            before: 0,
            after: 0,
        })
        .collect();
    for &v in before {
        bins[bin_index(v, width, n)].before += 1;
    }
    for &v in after {
        bins[bin_index(v, width, n)].after += 1;
    }
    bins
}

/// Pairs whose before-IoU falls in `[low, high)` (closed at 1.0) and the
/// before/after distribution of exactly those pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketDistribution {
    pub low: f64,
    pub high: f64,
    pub pairs: usize,
    pub bins: Vec<BinCount>,
}

fn in_bucket(v: f64, low: f64, high: f64) -> bool {
    v >= low && (v < high || (high >= 1.0 && v <= high))
}

/// Per-bucket IoU distributions before and after refinement.
pub fn iou_histogram(
    before: &[f64],
    after: &[f64],
    buckets: &[(f64, f64)],
) -> Result<Vec<BucketDistribution>> {
    if before.len() != after.len() {
        return Err(Error::Shape("before and after lengths differ".into()));
    }
    if buckets.iter().any(|(l, h)| l >= h) || buckets.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::InvalidArgument("bucket edges must be sorted".into()));
    }
    Ok(buckets
        .iter()
        .map(|&(low, high)| {
            let (b, a): (Vec<f64>, Vec<f64>) = before
                .iter()
                .zip(after)
                .filter(|(b, _)| in_bucket(**b, low, high))
                .map(|(b, a)| (*b, *a))
                .unzip();
            BucketDistribution {
                low,
                high,
                pairs: b.len(),
                bins: fine_bins(&b, &a, BIN_WIDTH),
            }
        })
        .collect())
}

pub fn bins_csv(bins: &[BinCount]) -> String {
    let mut s = String::from("bucket_low,bucket_high,count_before,count_after\n");
    for b in bins {
        let _ = writeln!(s, "{:.2},{:.2},{},{}", b.low, b.high, b.before, b.after);
    }
    s
}

/// One grounding decision, optionally refined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub selected: [f64; 4],
    #[serde(default)]
    pub refined: Option<[f64; 4]>,
    /// Normalized proposal scores.
    #[serde(default)]
    pub scores: Vec<f64>,
}

/// One refined box with its overlap before and after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub query_id: String,
    pub before: [f64; 4],
    pub after: [f64; 4],
    pub iou_before: f64,
    pub iou_after: f64,
}

pub fn write_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for it in items {
        serde_json::to_writer(&mut out, it)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

/// Everything one evaluation run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Accuracy of the selected boxes (%).
    pub accuracy: f64,
    /// Accuracy after refinement (%), when refined boxes exist.
    pub refined_accuracy: Option<f64>,
    pub upper_bound: f64,
    pub median_iou: f64,
    pub median_iou_refined: Option<f64>,
    pub median_delta_iou: Option<f64>,
    /// Fine bins of IoU before (selected) and after (refined, or selected
    /// again when unrefined).
    pub histogram: Vec<BinCount>,
    pub samples: usize,
    /// Refinement can move a box onto the object even when no proposal
    /// covered it, so refined accuracy may exceed the proposal bound.
    pub refined_above_bound: bool,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let opt =
            |v: Option<f64>, digits: usize| v.map_or(String::new(), |x| format!("{x:.digits$}"));
        let mut s = String::from(
            "accuracy,refined_accuracy,upper_bound,median_iou,median_iou_refined,median_delta_iou,samples\n",
        );
        let _ = writeln!(
            s,
            "{:.2},{},{:.2},{:.4},{},{},{}",
            round_percent(self.accuracy),
            opt(self.refined_accuracy.map(round_percent), 2),
            round_percent(self.upper_bound),
            self.median_iou,
            opt(self.median_iou_refined, 4),
            opt(self.median_delta_iou, 4),
            self.samples
        );
        s
    }

    /// `key value` lines.
    pub fn to_summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "accuracy {:.2}", round_percent(self.accuracy));
        if let Some(r) = self.refined_accuracy {
            let _ = writeln!(s, "refined_accuracy {:.2}", round_percent(r));
        }
        let _ = writeln!(s, "upper_bound {:.2}", round_percent(self.upper_bound));
        let _ = writeln!(s, "median_iou {:.4}", self.median_iou);
        if let Some(m) = self.median_iou_refined {
            let _ = writeln!(s, "median_iou_refined {m:.4}");
        }
        if let Some(d) = self.median_delta_iou {
            let _ = writeln!(s, "median_delta_iou {d:.4}");
        }
        let _ = writeln!(s, "refined_above_bound {}", self.refined_above_bound);
        s
    }
}

/// Scores `predictions` against the queries of `records` and checks that
/// selection accuracy stays within the proposal upper bound.
pub fn evaluate(
    records: &[SampleRecord],
    predictions: &[Prediction],
    threshold: f64,
) -> Result<MetricsReport> {
    let mut gt_by_id = std::collections::HashMap::new();
    for r in records {
        for q in &r.queries {
            gt_by_id.insert(q.id.as_str(), q.gt);
        }
    }
    if predictions.len() != gt_by_id.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} queries",
            predictions.len(),
            gt_by_id.len()
        )));
    }
    let mut gts = Vec::with_capacity(predictions.len());
    let mut selected = Vec::with_capacity(predictions.len());
    let mut refined = Vec::new();
    for p in predictions {
        let gt = gt_by_id
            .get(p.query_id.as_str())
            .ok_or_else(|| Error::MissingAsset(format!("ground truth for query {}", p.query_id)))?;
        gts.push(*gt);
        selected.push(BBox::from_array(p.selected)?);
        if let Some(r) = p.refined {
            refined.push(BBox::from_array(r)?);
        }
    }
    if !refined.is_empty() && refined.len() != selected.len() {
        return Err(Error::InvalidArgument(
            "either all or no predictions must be refined".into(),
        ));
    }
    let upper_bound = proposal_upper_bound(records, threshold);
    let accuracy = accuracy_at_iou(&selected, &gts, threshold, ThresholdMode::Inclusive)?;
    if accuracy > upper_bound + 1e-9 {
        return Err(Error::Invariant(format!(
            "accuracy {accuracy:.4}% exceeds proposal upper bound {upper_bound:.4}%"
        )));
    }
    let before: Vec<f64> = selected
        .iter()
        .zip(&gts)
        .map(|(b, g)| iou_unchecked(b, g))
        .collect();
    let median_iou = if before.is_empty() {
        0.0
    } else {
        median(&before)?
    };
    let (refined_accuracy, median_iou_refined, median_delta_iou, after) = if refined.is_empty() {
        (None, None, None, before.clone())
    } else {
        let after: Vec<f64> = refined
            .iter()
            .zip(&gts)
            .map(|(b, g)| iou_unchecked(b, g))
            .collect();
        (
            Some(accuracy_at_iou(
                &refined,
                &gts,
                threshold,
                ThresholdMode::Inclusive,
            )?),
            Some(median(&after)?),
            Some(median_delta_iou(&selected, &refined, &gts)?),
            after,
        )
    };
    Ok(MetricsReport {
        accuracy,
        refined_accuracy,
        upper_bound,
        median_iou,
        median_iou_refined,
        median_delta_iou,
        histogram: fine_bins(&before, &after, BIN_WIDTH),
        samples: predictions.len(),
        refined_above_bound: refined_accuracy.is_some_and(|r| r > upper_bound + 1e-9),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: String,
    pub median_delta_iou: f64,
    pub pairs: usize,
    /// Reference value for the same configuration, when there is one.
    pub reference: Option<f64>,
}

/// Trains one refiner per mask with the independent regression objective,
/// all starting from `base`, and reports the median IoU change on the test
/// pairs passing the pair threshold.
pub fn ablation_report(
    records: &[SampleRecord],
    base: &Refiner,
    cfg: &TrainConfig,
    masks: &[FeatureMask],
) -> Result<Vec<AblationRow>> {
    if masks.is_empty() {
        return Err(Error::Empty("feature masks".into()));
    }
    let pairs = independent_pairs(records, Split::Test, cfg.pair_threshold, cfg.pair_mode);
    if pairs.is_empty() {
        return Err(Error::Empty("no test regression pairs".into()));
    }
    let before: Vec<BBox> = pairs.iter().map(|p| *p.source(records)).collect();
    let gt: Vec<BBox> = pairs.iter().map(|p| *p.gt(records)).collect();
    let mut rows = Vec::with_capacity(masks.len());
    for &mask in masks {
        let init = Refiner {
            mask,
            ..base.clone()
        };
        let (model, _) = train_optibox_independent(init, records, cfg)?;
        let after = refine_pairs(&model, records, &pairs, 1)?;
        let features = mask.label();
        rows.push(AblationRow {
            reference: REFERENCE_ABLATION
                .iter()
                .find(|(k, _)| *k == features)
                .map(|(_, v)| *v),
            median_delta_iou: median_delta_iou(&before, &after, &gt)?,
            pairs: pairs.len(),
            features,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("features,median_delta_iou,pairs,reference\n");
    for r in rows {
        let reference = r.reference.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.features, r.median_delta_iou, r.pairs, reference
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, w: f64) -> BBox {
        BBox::new(cx, 0.0, w, 1.0).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let g = vec![b(0.0, 1.0); 3];
        assert_eq!(
            accuracy_at_iou(&g, &g, 0.5, ThresholdMode::Inclusive).unwrap(),
            100.0
        );
        let far = vec![b(10.0, 1.0); 3];
        assert_eq!(
            accuracy_at_iou(&far, &g, 0.5, ThresholdMode::Inclusive).unwrap(),
            0.0
        );
        // widths giving IoU = 1/w against a unit box sharing its center
        let pred = vec![b(0.0, 1.0 / 0.49), b(0.0, 2.0), b(0.0, 1.0 / 0.51)];
        let acc = accuracy_at_iou(&pred, &g, 0.5, ThresholdMode::Inclusive).unwrap();
        assert_eq!(round_percent(acc), 66.67);
        let strict = accuracy_at_iou(&pred, &g, 0.5, ThresholdMode::Strict).unwrap();
        assert_eq!(round_percent(strict), 33.33);
        assert!(accuracy_at_iou(&pred, &g[..2], 0.5, ThresholdMode::Inclusive).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_percent(12.345_000_000_1), 12.35);
        assert_eq!(round_percent(0.125), 0.13);
        assert_eq!(round_percent(-0.125), -0.13);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[-0.1, 0.0, 0.3]).unwrap(), 0.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
        let boxes = vec![b(0.0, 1.0), b(0.3, 2.0)];
        let gt = vec![b(0.1, 1.0), b(0.0, 1.0)];
        assert_eq!(median_delta_iou(&boxes, &boxes, &gt).unwrap(), 0.0);
        assert!(median_delta_iou(&[], &[], &[]).is_err());
    }

    #[test]
    fn histogram_boundaries() {
        let h = iou_histogram(&[], &[], &SELECTION_BUCKETS).unwrap();
        assert!(h
            .iter()
            .all(|d| d.pairs == 0 && d.bins.iter().all(|c| c.before == 0 && c.after == 0)));
        let h = iou_histogram(&[0.5, 1.0, 0.3], &[0.7, 1.0, 0.29], &SELECTION_BUCKETS).unwrap();
        assert_eq!(h.iter().map(|d| d.pairs).collect::<Vec<_>>(), vec![1, 1, 1]);
        assert_eq!(h[1].bins[10].before, 1);
        assert_eq!(h[1].bins[14].after, 1);
        assert_eq!(h[2].bins[19].after, 1);
        assert_eq!(h[0].bins[5].after, 1);
        assert!(iou_histogram(&[], &[], &[(0.5, 0.7), (0.3, 0.5)]).is_err());
        let csv = bins_csv(&h[0].bins);
        assert!(csv.starts_with("bucket_low,bucket_high,count_before,count_after\n0.00,0.05,0,0\n"));
        assert_eq!(csv.lines().count(), 21);
    }

    #[test]
    fn hundred_pairs_match_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let before: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..=1.0)).collect();
        let after: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..=1.0)).collect();
        let h = iou_histogram(&before, &after, &SELECTION_BUCKETS).unwrap();
        for d in &h {
            let idx: Vec<usize> = (0..100)
                .filter(|&i| {
                    before[i] >= d.low
                        && (before[i] < d.high || (d.high == 1.0 && before[i] == 1.0))
                })
                .collect();
            assert_eq!(d.pairs, idx.len());
            for bin in &d.bins {
                let last = bin.high >= 1.0;
                let inside =
                    |v: f64| v >= bin.low - 1e-12 && (v < bin.high - 1e-12 || (last && v <= 1.0));
                assert_eq!(
                    bin.before,
                    idx.iter().filter(|&&i| inside(before[i])).count()
                );
                assert_eq!(bin.after, idx.iter().filter(|&&i| inside(after[i])).count());
            }
        }
    }

    proptest! {
        #[test]
        fn median_agrees_with_sort(v in prop::collection::vec(-1e6f64..1e6, 1..2000)) {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let want = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
            prop_assert_eq!(median(&v).unwrap(), want);
        }

        #[test]
        fn histogram_is_permutation_invariant(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 0..200), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |p: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { p.iter().cloned().unzip() };
            let (b1, a1) = split(&pairs);
            let (b2, a2) = split(&shuffled);
            prop_assert_eq!(iou_histogram(&b1, &a1, &SELECTION_BUCKETS).unwrap(), iou_histogram(&b2, &a2, &SELECTION_BUCKETS).unwrap());
            let total: usize = fine_bins(&b1, &a1, BIN_WIDTH).iter().map(|c| c.before).sum();
            prop_assert_eq!(total, pairs.len());
        }

        #[test]
        fn self_accuracy_is_full(v in prop::collection::vec((-50.0f64..50.0, 0.1f64..20.0), 1..50)) {
            let boxes: Vec<BBox> = v.iter().map(|&(c, w)| b(c, w)).collect();
            prop_assert_eq!(accuracy_at_iou(&boxes, &boxes, 0.5, ThresholdMode::Inclusive).unwrap(), 100.0);
        }
    }

    #[test]
    fn upper_bound_counts_queries() {
        use crate::synthdata::{Proposal, Query, Split};
        let q = |id: &str, gt: BBox| Query {
            id: id.into(),
            text: String::new(),
            tokens: vec![],
            gt,
        };
        let rec = SampleRecord {
            image_id: "i".into(),
            split: Split::Test,
            labeled: true,
            width: 100.0,
            height: 100.0,
            proposals: vec![Proposal {
                bbox: b(10.0, 2.0),
                feature: vec![],
            }],
            queries: vec![
                q("a", b(10.0, 2.0)),
                q("b", b(10.2, 2.0)),
                q("c", b(50.0, 2.0)),
            ],
            global_map: None,
        };
        assert_eq!(
            round_percent(proposal_upper_bound(&[rec.clone()], 0.5)),
            66.67
        );
        let mut empty = rec.clone();
        empty.proposals.clear();
        assert_eq!(proposal_upper_bound(&[empty], 0.5), 0.0);

        let preds: Vec<Prediction> = ["a", "b", "c"]
            .iter()
            .map(|id| Prediction {
                query_id: id.to_string(),
                selected: b(10.0, 2.0).to_array(),
                refined: None,
                scores: vec![1.0],
            })
            .collect();
        let report = evaluate(&[rec.clone()], &preds, 0.5).unwrap();
        assert!(report.accuracy <= report.upper_bound);
        assert_eq!(report.histogram.iter().map(|c| c.before).sum::<usize>(), 3);

        // a selection no proposal supports breaks the bound and is rejected
        let mut cheat = preds.clone();
        cheat[2].selected = b(50.0, 2.0).to_array();
        assert!(matches!(
            evaluate(&[rec], &cheat, 0.5),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn ablation_rows_follow_masks() {
        use crate::optibox::RefinerDims;
        use crate::synthdata::{generate_dataset, SceneConfig, SplitSizes};
        let cfg = SceneConfig {
            feature_dim: 8,
            channels: 8,
            grid: 2,
            proposals: 8,
            jitter: 0.3,
            ..SceneConfig::default()
        };
        let (records, vocab) = generate_dataset(
            &cfg,
            SplitSizes {
                train: 8,
                val: 3,
                test: 3,
            },
            2,
        )
        .unwrap();
        let dims = RefinerDims {
            vocab: vocab.len(),
            embed: 4,
            query: 4,
            visual: 8,
            channels: 8,
            hidden: 8,
        };
        let base = Refiner::new(dims, FeatureMask::all(), 1);
        let tc = TrainConfig {
            epochs: 2,
            milestones: vec![],
            ..TrainConfig::desk_optibox_independent()
        };
        let one = ablation_report(&records, &base, &tc, &[FeatureMask::all()]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].reference, Some(0.200));
        let masks: Vec<FeatureMask> = ["all", "-visual", "-box", "-query", "-global"]
            .iter()
            .map(|m| FeatureMask::parse(m).unwrap())
            .collect();
        let rows = ablation_report(&records, &base, &tc, &masks).unwrap();
        assert_eq!(rows.len(), masks.len());
        assert_eq!(rows[0], one[0]);
        assert_eq!(rows[1].reference, Some(0.106));
        assert!(ablation_csv(&rows).starts_with("features,median_delta_iou,pairs,reference\nall,"));
        assert!(matches!(
            ablation_report(&records, &base, &tc, &[]),
            Err(Error::Empty(_))
        ));
    }
}
