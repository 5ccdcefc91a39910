//! COCO-style detection metrics and the forgetting report.
//!
//! AP is the mean interpolated precision at the 101 recall points
//! 0.00, 0.01, ..., 1.00. The mAP of a cell averages AP over the classes that
//! have at least one ground-truth box in the cell's area bucket, and, for the
//! 0.50:0.95 rows, over the ten IoU thresholds as well.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split, SMALL_AREA};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Lower bound of the large bucket in square pixels.
pub const LARGE_AREA: f64 = 1024.0;
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IouSpec {
    #[serde(rename = "0.50")]
    At50,
    #[serde(rename = "0.75")]
    At75,
    #[serde(rename = "0.50:0.95")]
    Range50To95,
}

impl IouSpec {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            IouSpec::At50 => vec![0.5],
            IouSpec::At75 => vec![0.75],
            IouSpec::Range50To95 => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IouSpec::At50 => "0.50",
            IouSpec::At75 => "0.75",
            IouSpec::Range50To95 => "0.50:0.95",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            AreaRange::Large => area >= LARGE_AREA,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AreaRange::All => "all",
            AreaRange::Small => "small",
            AreaRange::Medium => "medium",
            AreaRange::Large => "large",
        }
    }
}

/// Rows in reporting order; the last one is not part of the paper's tables.
pub const TABLE_ROWS: [(IouSpec, AreaRange, bool); 6] = [
    (IouSpec::At50, AreaRange::All, false),
    (IouSpec::At75, AreaRange::All, false),
    (IouSpec::Range50To95, AreaRange::Medium, false),
    (IouSpec::Range50To95, AreaRange::Large, false),
    (IouSpec::Range50To95, AreaRange::All, false),
    (IouSpec::Range50To95, AreaRange::Small, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGroundTruth {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
}

/// Outcome of greedy matching for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchResult {
    TruePositive(usize),
    FalsePositive,
    /// Matched only to a ground truth outside the area bucket.
    Ignored,
}

/// Greedy matching on one image and class. `dets` must already be sorted by
/// descending score. Each detection takes the unmatched in-bucket ground
/// truth of highest IoU (lowest index on ties) when that IoU reaches the
/// threshold, otherwise the best unmatched ignored one.
pub fn match_with_ignore(dets: &[BBox], gts: &[BBox], gt_ignored: &[bool], iou_threshold: f64) -> Vec<MatchResult> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: [Option<(f64, usize)>; 2] = [None, None];
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(d, gt);
                let slot = &mut best[gt_ignored[g] as usize];
                if v >= iou_threshold && slot.is_none_or(|(b, _)| v > b) {
                    *slot = Some((v, g));
                }
            }
            match best {
                [Some((_, g)), _] => {
                    taken[g] = true;
                    MatchResult::TruePositive(g)
                }
                [None, Some((_, g))] => {
                    taken[g] = true;
                    MatchResult::Ignored
                }
                [None, None] => MatchResult::FalsePositive,
            }
        })
        .collect()
}

/// TP/FP flags for detections sorted by descending score.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> Vec<bool> {
    match_with_ignore(dets, gts, &vec![false; gts.len()], iou_threshold)
        .into_iter()
        .map(|m| matches!(m, MatchResult::TruePositive(_)))
        .collect()
}

/// 101-point interpolated AP from `(score, is_tp)` pairs pooled across images.
/// Pairs are ranked by descending score; equal scores keep their input order.
/// Returns `None` when `n_gt` is zero.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.total_cmp(&flags[a].0));
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < target {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iou: IouSpec,
    pub area: AreaRange,
    /// Percentage; `None` when no ground truth falls in the bucket.
    pub map: Option<f64>,
    #[serde(default)]
    pub extension: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn get(&self, iou: IouSpec, area: AreaRange) -> Option<f64> {
        self.rows.iter().find(|r| r.iou == iou && r.area == area).and_then(|r| r.map)
    }

    /// mAP at IoU 0.5 over all areas, 0 when undefined.
    pub fn map50(&self) -> f64 {
        self.get(IouSpec::At50, AreaRange::All).unwrap_or(0.0)
    }
}

impl fmt::Display for EvalTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} | {:<6} | mAP(%)", "IoU", "Area")?;
        for r in &self.rows {
            let v = r.map.map_or_else(|| "-".to_string(), |m| format!("{m:.2}"));
            let note = if r.extension { "  (extension)" } else { "" };
            writeln!(f, "{:<9} | {:<6} | {v}{note}", r.iou.label(), r.area.label())?;
        }
        Ok(())
    }
}

/// Evaluates detections against ground truth for the given category ids.
pub fn coco_map(dets: &[EvalDetection], gts: &[EvalGroundTruth], categories: &[u32]) -> Result<EvalTable> {
    let known: BTreeSet<u32> = categories.iter().copied().collect();
    if let Some(d) = dets.iter().find(|d| !known.contains(&d.category_id)) {
        return Err(Error::UnknownCategory(d.category_id));
    }
    if let Some(g) = gts.iter().find(|g| !known.contains(&g.category_id)) {
        return Err(Error::UnknownCategory(g.category_id));
    }

    // (category, image) -> indices, detections sorted by score (stable)
    let mut det_groups: BTreeMap<(u32, u64), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        det_groups.entry((d.category_id, d.image_id)).or_default().push(i);
    }
    for idx in det_groups.values_mut() {
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    }
    let mut gt_groups: BTreeMap<(u32, u64), Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_groups.entry((g.category_id, g.image_id)).or_default().push(i);
    }
    let keys: BTreeSet<(u32, u64)> = det_groups.keys().chain(gt_groups.keys()).copied().collect();

    let cell = |spec: IouSpec, area: AreaRange| -> Option<f64> {
        let mut aps = Vec::new();
        for &cat in &known {
            let n_gt = gts
                .iter()
                .filter(|g| g.category_id == cat && area.contains(g.bbox.area()))
                .count();
            if n_gt == 0 {
                continue;
            }
            let mut sum = 0.0;
            let thresholds = spec.thresholds();
            for &t in &thresholds {
                // ordered by (score desc, image id, detection index)
                let mut pooled: Vec<(f64, u64, usize, bool)> = Vec::new();
                for &(c, img) in keys.iter().filter(|(c, _)| *c == cat) {
                    let empty = Vec::new();
                    let di = det_groups.get(&(c, img)).unwrap_or(&empty);
                    let gi = gt_groups.get(&(c, img)).unwrap_or(&empty);
                    let dboxes: Vec<BBox> = di.iter().map(|&i| dets[i].bbox).collect();
                    let gboxes: Vec<BBox> = gi.iter().map(|&i| gts[i].bbox).collect();
                    let ignored: Vec<bool> = gboxes.iter().map(|b| !area.contains(b.area())).collect();
                    for (k, m) in match_with_ignore(&dboxes, &gboxes, &ignored, t).into_iter().enumerate() {
                        let d = &dets[di[k]];
                        match m {
                            MatchResult::TruePositive(_) => pooled.push((d.score, img, di[k], true)),
                            MatchResult::FalsePositive => pooled.push((d.score, img, di[k], false)),
                            MatchResult::Ignored => {}
                        }
                    }
                }
                pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let flags: Vec<(f64, bool)> = pooled.iter().map(|p| (p.0, p.3)).collect();
                sum += average_precision(&flags, n_gt).expect("n_gt > 0");
            }
            aps.push(sum / thresholds.len() as f64);
        }
        if aps.is_empty() {
            None
        } else {
            Some(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
        }
    };

    Ok(EvalTable {
        rows: TABLE_ROWS
            .iter()
            .map(|&(iou, area, extension)| EvalRow {
                iou,
                area,
                map: cell(iou, area),
                extension,
            })
            .collect(),
    })
}

pub fn ground_truth_of(samples: &[&Sample]) -> Vec<EvalGroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| EvalGroundTruth {
                image_id: s.record.id,
                category_id: a.category_id,
                bbox: a.to_bbox(),
            })
        })
        .collect()
}

/// Runs `detector` with the head of `domain` over a dataset split.
pub fn evaluate_detector(
    detector: &Detector,
    dataset: &Dataset,
    split: Split,
    domain: &str,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<EvalTable> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::InvalidDataset("evaluation split is empty".into()));
    }
    let id = detector.domain(domain)?;
    let mut dets = Vec::new();
    for s in &samples {
        for d in detector.detect(&s.image.to_tensor(), &id, score_threshold, nms_threshold)? {
            dets.push(EvalDetection {
                image_id: s.record.id,
                category_id: d.class_id,
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    let categories: Vec<u32> = dataset.categories.iter().map(|c| c.id).collect();
    coco_map(&dets, &ground_truth_of(&samples), &categories)
}

/// Evaluation tables of every domain after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: usize,
    pub label: String,
    pub tables: BTreeMap<String, EvalTable>,
}

/// Per-stage tables; stage 0 is the baseline every delta refers to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub stages: Vec<StageEval>,
}

impl ForgettingReport {
    pub fn push(&mut self, stage: StageEval) {
        self.stages.push(stage);
    }

    /// `mAP@0.5(stage) - mAP@0.5(baseline)` for `domain`, when both exist.
    pub fn delta(&self, domain: &str, stage: usize) -> Option<f64> {
        let base = self.stages.first()?.tables.get(domain)?.map50();
        let after = self.stages.iter().find(|s| s.stage == stage)?.tables.get(domain)?.map50();
        Some(after - base)
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.stages.iter().flat_map(|s| s.tables.keys().cloned()).collect()
    }
}

impl fmt::Display for ForgettingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let domains = self.domains();
        let header = "Active components";
        let w = self.stages.iter().map(|s| s.label.len()).max().unwrap_or(0).max(header.len());
        write!(f, "{:<5} | {header:<w$}", "Stage")?;
        for d in &domains {
            write!(f, " | mAP@0.5 {d:<2} | delta_{d:<2}")?;
        }
        writeln!(f)?;
        for s in &self.stages {
            write!(f, "{:<5} | {:<w$}", s.stage, s.label)?;
            for d in &domains {
                match (s.tables.get(d), self.delta(d, s.stage)) {
                    (Some(t), Some(delta)) => write!(f, " | {:>10.2} | {:>+8.2}", t.map50(), delta)?,
                    (Some(t), None) => write!(f, " | {:>10.2} | {:>8}", t.map50(), "-")?,
                    _ => write!(f, " | {:>10} | {:>8}", "-", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_xywh(x, y, w, h).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true)], 1), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false)], 1), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn matching_examples() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let d = b(0.0, 0.0, 10.0, 6.0);
        assert!(iou(&d, &gt) >= 0.5);
        assert_eq!(match_detections(&[d], &[gt], 0.5), vec![true]);
        assert_eq!(match_detections(&[gt, d], &[gt], 0.5), vec![true, false]);
    }

    #[test]
    fn perfect_and_empty() {
        let gts: Vec<EvalGroundTruth> = (0..5)
            .map(|i| EvalGroundTruth { image_id: i, category_id: 1 + (i % 2) as u32, bbox: b(3.0, 3.0, 8.0 + 10.0 * i as f64, 9.0) })
            .collect();
        let dets: Vec<EvalDetection> = gts
            .iter()
            .map(|g| EvalDetection { image_id: g.image_id, category_id: g.category_id, bbox: g.bbox, score: 1.0 })
            .collect();
        let t = coco_map(&dets, &gts, &[1, 2]).unwrap();
        assert!(t.rows.iter().all(|r| r.map.is_none() || r.map == Some(100.0)), "{t}");
        let e = coco_map(&[], &gts, &[1, 2]).unwrap();
        assert!(e.rows.iter().all(|r| r.map.is_none() || r.map == Some(0.0)));
        assert!(coco_map(&dets, &gts, &[1]).is_err());
    }

    #[test]
    fn table_text_rows() {
        let gts = vec![EvalGroundTruth { image_id: 1, category_id: 1, bbox: b(0.0, 0.0, 20.0, 20.0) }];
        let text = coco_map(&[], &gts, &[1]).unwrap().to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "0.50      | all    | 0.00");
        assert_eq!(lines[3], "0.50:0.95 | medium | 0.00");
        assert!(lines[4].ends_with("| -"));
        assert!(lines[6].contains("small") && lines[6].contains("extension"));
    }

    #[test]
    fn report_deltas() {
        let table = |v: f64| EvalTable {
            rows: vec![EvalRow { iou: IouSpec::At50, area: AreaRange::All, map: Some(v), extension: false }],
        };
        let mut r = ForgettingReport::default();
        r.push(StageEval { stage: 0, label: "baseline".into(), tables: [("S".to_string(), table(50.0))].into() });
        assert_eq!(r.delta("S", 0), Some(0.0));
        r.push(StageEval {
            stage: 1,
            label: "head.T".into(),
            tables: [("S".to_string(), table(47.5)), ("T".to_string(), table(20.0))].into(),
        });
        assert_eq!(r.delta("S", 1), Some(-2.5));
        assert_eq!(r.delta("T", 1), None);
        let text = r.to_string();
        assert!(text.contains("-2.50"));
    }
}
