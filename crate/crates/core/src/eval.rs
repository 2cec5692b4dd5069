//! Greedy matching, 40-point interpolated AP, heading-weighted APH and
//! range/difficulty bucketing.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou3d;
use crate::model::{points_in_box, Box3D, Detection, GroundTruth, PointCloud};
use crate::scalar::{wrap_angle, Real};

pub const RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchEntry {
    /// Index into the detection list the match was computed from.
    pub det: usize,
    pub score: f64,
    pub gt: Option<usize>,
    /// Absolute wrapped yaw difference in `[0, pi]`; 0 for false positives.
    pub heading_error: f64,
}

impl MatchEntry {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }

    /// `max(0, 1 - |dyaw| / pi)` for true positives, 0 otherwise.
    pub fn heading_weight(&self) -> f64 {
        if self.is_tp() {
            (1.0 - self.heading_error / PI).max(0.0)
        } else {
            0.0
        }
    }
}

/// Entries sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub entries: Vec<MatchEntry>,
    pub num_gts: usize,
}

impl MatchResult {
    pub fn num_tp(&self) -> usize {
        self.entries.iter().filter(|e| e.is_tp()).count()
    }

    /// Pools several evaluation sets into one ranking. Equal scores keep
    /// the order of `parts`, then the order within each part.
    pub fn merge(parts: Vec<MatchResult>) -> MatchResult {
        let num_gts = parts.iter().map(|p| p.num_gts).sum();
        let mut entries: Vec<MatchEntry> = parts.into_iter().flat_map(|p| p.entries).collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        MatchResult { entries, num_gts }
    }
}

/// Descending score, lower index first on ties.
pub fn score_order<T: Real>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.as_f64().total_cmp(&dets[a].score.as_f64()).then(a.cmp(&b)));
    order
}

/// Each detection in score order takes the unmatched ground truth with the
/// highest 3D IoU if that IoU reaches `threshold`; otherwise it is a false
/// positive.
pub fn match_detections<T: Real>(dets: &[Detection<T>], gts: &[Box3D<T>], threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("IoU threshold must lie in (0, 1], got {threshold}")));
    }
    let mut taken = vec![false; gts.len()];
    let mut entries = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = iou3d(&d.bbox, g).as_f64();
            if best.is_none_or(|b| iou > b.0) {
                best = Some((iou, j));
            }
        }
        let gt = match best {
            Some((iou, j)) if iou >= threshold => {
                taken[j] = true;
                Some(j)
            }
            _ => None,
        };
        let heading_error = gt.map_or(0.0, |j| wrap_angle(d.bbox.yaw() - gts[j].yaw()).as_f64().abs());
        entries.push(MatchEntry {
            det: i,
            score: d.score.as_f64(),
            gt,
            heading_error,
        });
    }
    Ok(MatchResult {
        entries,
        num_gts: gts.len(),
    })
}

/// Mean over recall levels `k/40` of the best precision reached at any
/// recall at or above that level. `weights[i]` is the true-positive credit
/// of entry `i`; recall is `sum(weights)/num_gts` and precision divides by
/// the number of detections so far.
fn interpolated_ap(weights: &[f64], num_gts: usize) -> f64 {
    let n = num_gts as f64;
    let mut tp = 0.0;
    // (credited tp, precision) after each detection.
    let curve: Vec<(f64, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            tp += w;
            (tp, tp / (i + 1) as f64)
        })
        .collect();
    // Suffix maximum of precision, so that best[i] covers every point at or
    // after i; recall is non-decreasing along the ranking.
    let mut best = vec![0.0; curve.len()];
    let mut run: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        run = run.max(curve[i].1);
        best[i] = run;
    }
    let mut total = 0.0;
    let mut first = 0;
    for k in 1..=RECALL_POINTS {
        // recall >= k/40  <=>  40 * tp >= k * num_gts
        let need = k as f64 * n;
        while first < curve.len() && curve[first].0 * (RECALL_POINTS as f64) < need {
            first += 1;
        }
        if first == curve.len() {
            break;
        }
        total += best[first];
    }
    total / RECALL_POINTS as f64
}

/// `None` when the set has no ground truths.
pub fn average_precision_r40(m: &MatchResult) -> Option<f64> {
    if m.num_gts == 0 {
        return None;
    }
    let w: Vec<f64> = m.entries.iter().map(|e| if e.is_tp() { 1.0 } else { 0.0 }).collect();
    Some(interpolated_ap(&w, m.num_gts))
}

/// Same accumulation with heading-weighted true positives.
pub fn average_precision_heading(m: &MatchResult) -> Option<f64> {
    if m.num_gts == 0 {
        return None;
    }
    let w: Vec<f64> = m.entries.iter().map(MatchEntry::heading_weight).collect();
    Some(interpolated_ap(&w, m.num_gts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketScheme {
    Range,
    Difficulty,
}

pub const RANGE_EDGES: [f64; 2] = [30.0, 50.0];
pub const LEVEL_1_POINTS: usize = 5;
pub const LEVEL_2_POINTS: usize = 1;

/// Index of the half-open range bucket `[0,30)`, `[30,50)`, `[50,inf)`.
pub fn range_bucket(radius: f64) -> usize {
    RANGE_EDGES.iter().filter(|&&e| radius >= e).count()
}

pub fn range_bucket_name(i: usize) -> &'static str {
    ["0-30m", "30-50m", "50m+"][i]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub name: String,
    pub gts: Vec<usize>,
    pub dets: Vec<usize>,
}

/// Splits one scene's ground truths and detections. Range buckets place
/// both by their own center radius; difficulty levels filter ground truths
/// by contained point count and keep every detection.
pub fn bucketize<T: Real>(gts: &[Box3D<T>], cloud: &PointCloud<T>, dets: &[Detection<T>], scheme: BucketScheme) -> Vec<Bucket> {
    match scheme {
        BucketScheme::Range => (0..3)
            .map(|b| Bucket {
                name: range_bucket_name(b).into(),
                gts: (0..gts.len()).filter(|&i| range_bucket(gts[i].planar_range().as_f64()) == b).collect(),
                dets: (0..dets.len())
                    .filter(|&i| range_bucket(dets[i].bbox.planar_range().as_f64()) == b)
                    .collect(),
            })
            .collect(),
        BucketScheme::Difficulty => {
            let counts: Vec<usize> = gts.iter().map(|g| points_in_box(cloud, g).len()).collect();
            [("LEVEL_1", LEVEL_1_POINTS), ("LEVEL_2", LEVEL_2_POINTS)]
                .into_iter()
                .map(|(name, min)| Bucket {
                    name: name.into(),
                    gts: (0..gts.len()).filter(|&i| counts[i] >= min).collect(),
                    dets: (0..dets.len()).collect(),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub class: String,
    pub bucket: String,
    pub ap: Option<f64>,
    pub aph: Option<f64>,
    pub num_gts: usize,
    pub num_dets: usize,
}

/// One row per (class, bucket). Text form: a `#` header line, then
/// whitespace-separated `class bucket AP APH num_gts num_dets`, with `-`
/// for undefined AP/APH.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "# class bucket AP APH num_gts num_dets";

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                f,
                "{} {} {} {} {} {}",
                r.class,
                r.bucket,
                fmt_metric(r.ap),
                fmt_metric(r.aph),
                r.num_gts,
                r.num_dets
            )?;
        }
        Ok(())
    }
}

impl MetricReport {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: "<report>".into(),
                line: n + 1,
                msg: msg.into(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let metric = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| err("bad metric value"))
                }
            };
            rows.push(MetricRow {
                class: f[0].into(),
                bucket: f[1].into(),
                ap: metric(f[2])?,
                aph: metric(f[3])?,
                num_gts: f[4].parse().map_err(|_| err("bad gt count"))?,
                num_dets: f[5].parse().map_err(|_| err("bad detection count"))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn get(&self, class: &str, bucket: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.class == class && r.bucket == bucket)
    }
}

/// One scene's inputs to evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a, T> {
    pub gts: &'a [GroundTruth<T>],
    pub cloud: &'a PointCloud<T>,
    pub dets: &'a [Detection<T>],
}

/// Evaluates every class over the pooled scenes: an `all` bucket plus the
/// buckets of `scheme`.
pub fn evaluate<T: Real>(
    scenes: &[EvalScene<'_, T>],
    classes: &[(u32, String)],
    scheme: BucketScheme,
    iou_threshold: f64,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for (cid, cname) in classes {
        // bucket name -> per-scene match results and detection count
        let mut names: Vec<String> = vec!["all".into()];
        let mut per_bucket: Vec<(Vec<MatchResult>, usize)> = vec![(Vec::new(), 0)];
        for s in scenes {
            let gts: Vec<Box3D<T>> = s.gts.iter().filter(|g| g.class_id == *cid).map(|g| g.bbox).collect();
            let dets: Vec<Detection<T>> = s.dets.iter().filter(|d| d.class_id == *cid).cloned().collect();
            per_bucket[0].0.push(match_detections(&dets, &gts, iou_threshold)?);
            per_bucket[0].1 += dets.len();
            for (k, b) in bucketize(&gts, s.cloud, &dets, scheme).into_iter().enumerate() {
                if names.len() <= k + 1 {
                    names.push(b.name.clone());
                    per_bucket.push((Vec::new(), 0));
                }
                let bg: Vec<Box3D<T>> = b.gts.iter().map(|&i| gts[i]).collect();
                let bd: Vec<Detection<T>> = b.dets.iter().map(|&i| dets[i].clone()).collect();
                per_bucket[k + 1].0.push(match_detections(&bd, &bg, iou_threshold)?);
                per_bucket[k + 1].1 += bd.len();
            }
        }
        if scenes.is_empty() {
            let empty = PointCloud::<T>::empty(1);
            for b in bucketize::<T>(&[], &empty, &[], scheme) {
                names.push(b.name);
                per_bucket.push((Vec::new(), 0));
            }
        }
        for (name, (parts, num_dets)) in names.into_iter().zip(per_bucket) {
            let m = MatchResult::merge(parts);
            rows.push(MetricRow {
                class: cname.clone(),
                bucket: name,
                ap: average_precision_r40(&m),
                aph: average_precision_heading(&m),
                num_gts: m.num_gts,
                num_dets,
            });
        }
    }
    Ok(MetricReport { rows })
}
