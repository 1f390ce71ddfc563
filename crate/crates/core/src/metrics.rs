//! Unsupervised segmentation scoring.
//!
//! Predicted cluster ids are first mapped to ground-truth classes with one
//! Hungarian matching over the whole dataset. Clusters left without a match
//! are relabeled to ids that can never equal a ground-truth class, so their
//! frames are always wrong and their segments always false positives.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment-length histogram bin width in frames.
pub const LENGTH_BIN: usize = 20;

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Run-length encoding of a frame-label sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
    pub frames: usize,
}

impl SegmentList {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (t, &l) in labels.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.label == l => s.len += 1,
                _ => segments.push(Segment { label: l, start: t, len: 1 }),
            }
        }
        Self {
            segments,
            frames: labels.len(),
        }
    }

    pub fn to_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frames);
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.label, s.len));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len).collect()
    }

    pub fn label_string(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.label).collect()
    }
}

/// Broadcasts per-patch cluster ids to `frames` frames; padded frames of a
/// partial trailing patch are dropped.
pub fn labels_from_patch_indices(indices: &[usize], frames: usize, patch: usize) -> Vec<usize> {
    (0..frames).map(|t| indices[(t / patch.max(1)).min(indices.len() - 1)]).collect()
}

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

/// Predicted cluster -> ground-truth class, injective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub map: Vec<Option<usize>>,
    /// Frames on the matched diagonal.
    pub score: u64,
    pub gt_classes: usize,
}

impl ClusterMapping {
    /// Ground-truth class for a matched cluster, or an id `>= gt_classes`
    /// unique to the cluster otherwise.
    pub fn apply(&self, cluster: usize) -> usize {
        match self.map.get(cluster).copied().flatten() {
            Some(c) => c,
            None => self.gt_classes + cluster,
        }
    }

    pub fn apply_all(&self, clusters: &[usize]) -> Vec<usize> {
        clusters.iter().map(|&c| self.apply(c)).collect()
    }
}

/// Square min-cost assignment (shortest augmenting path with potentials).
/// Returns `assign[row] = column`.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Maximum-weight injective matching of `confusion[cluster][class]` frame
/// counts. The surplus side of a rectangular matrix stays unmatched.
pub fn hungarian_match(confusion: &[Vec<u64>]) -> Result<ClusterMapping> {
    let rows = confusion.len();
    let cols = confusion.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("confusion", "empty matrix"));
    }
    if confusion.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("confusion", "ragged matrix"));
    }
    let n = rows.max(cols);
    let max = confusion.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i < rows && j < cols { max - confusion[i][j] as i64 } else { max })
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let mut map = vec![None; rows];
    let mut score = 0;
    for (i, &j) in assign.iter().enumerate().take(rows) {
        if j < cols {
            map[i] = Some(j);
            score += confusion[i][j];
        }
    }
    Ok(ClusterMapping {
        map,
        score,
        gt_classes: cols,
    })
}

pub fn confusion_matrix(gt: &[&[usize]], pred: &[&[usize]], clusters: usize, classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; clusters];
    for (g, p) in gt.iter().zip(pred) {
        for (&gi, &pi) in g.iter().zip(p.iter()) {
            m[pi][gi] += 1;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Frame and segment metrics
// ---------------------------------------------------------------------------

/// Percentage of frames whose mapped prediction equals the ground truth.
pub fn mof(gt: &[&[usize]], mapped: &[&[usize]]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (g, p) in gt.iter().zip(mapped) {
        if g.len() != p.len() {
            return Err(Error::invalid("predictions", format!("{} predicted frames for {} ground-truth frames", p.len(), g.len())));
        }
        correct += g.iter().zip(p.iter()).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    if total == 0 {
        return Err(Error::invalid("predictions", "no frames to score"));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized segment-level Levenshtein similarity, in percent.
pub fn edit_score(gt: &SegmentList, pred: &SegmentList) -> Result<f64> {
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::invalid("segments", "edit score of an empty segmentation"));
    }
    let d = levenshtein(&gt.label_string(), &pred.label_string());
    Ok(100.0 * (1.0 - d as f64 / gt.len().max(pred.len()) as f64))
}

/// True/false positive and false negative segment counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SegmentCounts {
    pub fn add(&mut self, o: SegmentCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 100.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end().min(b.end()).saturating_sub(a.start.max(b.start));
    let union = a.end().max(b.end()) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy segment matching in temporal order: a prediction is a hit when the
/// best-overlapping still-unmatched ground-truth segment of its label reaches
/// `tau` IoU.
pub fn segment_counts(gt: &SegmentList, pred: &SegmentList, tau: f64) -> SegmentCounts {
    let mut used = vec![false; gt.len()];
    let mut counts = SegmentCounts::default();
    for p in &pred.segments {
        let best = gt
            .segments
            .iter()
            .enumerate()
            .filter(|(i, g)| !used[*i] && g.label == p.label)
            .map(|(i, g)| (i, iou(p, g)))
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((i, o)) if o >= tau => {
                used[i] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = gt.len() - counts.tp;
    counts
}

pub fn f1_at(gt: &SegmentList, pred: &SegmentList, tau: f64) -> f64 {
    segment_counts(gt, pred, tau).f1()
}

// ---------------------------------------------------------------------------
// Segment-length bias
// ---------------------------------------------------------------------------

/// Counts of segment lengths in `LENGTH_BIN`-frame bins; bin `b` covers
/// `[20 b, 20 (b + 1))`.
pub fn length_histogram(lengths: &[usize], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &l in lengths {
        h[l / LENGTH_BIN] += 1;
    }
    h
}

pub fn bins_needed(lengths: &[usize]) -> usize {
    lengths.iter().map(|&l| l / LENGTH_BIN + 1).max().unwrap_or(0)
}

/// Jensen-Shannon distance (square root of the base-2 divergence) between two
/// count histograms of equal length.
pub fn js_distance(p: &[u64], q: &[u64]) -> f64 {
    let (sp, sq) = (p.iter().sum::<u64>() as f64, q.iter().sum::<u64>() as f64);
    let kl_to_mid = |x: f64, m: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
    let mut div = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64 / sp, b as f64 / sq);
        let m = 0.5 * (a + b);
        div += 0.5 * kl_to_mid(a, m) + 0.5 * kl_to_mid(b, m);
    }
    div.clamp(0.0, 1.0).sqrt()
}

pub fn video_length_distance(gt: &SegmentList, pred: &SegmentList) -> Result<f64> {
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::invalid("segments", "length bias of a video without segments"));
    }
    let (gl, pl) = (gt.lengths(), pred.lengths());
    let bins = bins_needed(&gl).max(bins_needed(&pl));
    Ok(js_distance(&length_histogram(&gl, bins), &length_histogram(&pl, bins)))
}

/// One scored video.
pub struct VideoSegments<'a> {
    pub gt: &'a SegmentList,
    pub pred: &'a SegmentList,
    pub activity: Option<&'a str>,
}

/// Per-activity mean JS distance, frame-weighted across activities, x100.
pub fn jsd_bias(videos: &[VideoSegments<'_>]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::invalid("videos", "length bias needs at least one video"));
    }
    let mut groups: BTreeMap<Option<&str>, (f64, usize, usize)> = BTreeMap::new();
    for v in videos {
        let d = video_length_distance(v.gt, v.pred)?;
        let e = groups.entry(v.activity).or_default();
        e.0 += d;
        e.1 += 1;
        e.2 += v.gt.frames;
    }
    let total_frames: usize = groups.values().map(|g| g.2).sum();
    let weighted: f64 = groups
        .values()
        .map(|&(sum, n, frames)| sum / n as f64 * frames as f64)
        .sum();
    if total_frames == 0 {
        return Err(Error::invalid("videos", "no ground-truth frames"));
    }
    Ok(100.0 * weighted / total_frames as f64)
}

// ---------------------------------------------------------------------------
// Dataset report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub frames: usize,
    pub mof: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub jsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mof: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub jsd: f64,
    pub mapping: Vec<Option<usize>>,
    pub sequences: Vec<SequenceReport>,
}

/// Ground truth and predicted cluster ids for one sequence.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub gt: &'a [usize],
    pub pred: &'a [usize],
    pub activity: Option<&'a str>,
}

pub fn check_items(items: &[EvalItem<'_>]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid("predictions", "nothing to evaluate"));
    }
    for it in items {
        if it.gt.len() != it.pred.len() {
            return Err(Error::invalid(
                "predictions",
                format!("{}: {} predicted frames for {} ground-truth frames", it.id, it.pred.len(), it.gt.len()),
            ));
        }
        if it.gt.is_empty() {
            return Err(Error::invalid("predictions", format!("{} has no frames", it.id)));
        }
    }
    Ok(())
}

/// The single dataset-wide cluster-to-class mapping.
pub fn global_mapping(items: &[EvalItem<'_>], gt_classes: usize) -> Result<ClusterMapping> {
    let classes = gt_classes.max(items.iter().flat_map(|i| i.gt.iter()).max().map_or(0, |m| m + 1));
    let clusters = items.iter().flat_map(|i| i.pred.iter()).max().map_or(0, |m| m + 1);
    let gt: Vec<&[usize]> = items.iter().map(|i| i.gt).collect();
    let pred: Vec<&[usize]> = items.iter().map(|i| i.pred).collect();
    hungarian_match(&confusion_matrix(&gt, &pred, clusters, classes))
}

pub fn evaluate(items: &[EvalItem<'_>], gt_classes: usize) -> Result<EvalReport> {
    check_items(items)?;
    let mapping = global_mapping(items, gt_classes)?;
    let gt: Vec<&[usize]> = items.iter().map(|i| i.gt).collect();
    let mapped: Vec<Vec<usize>> = items.iter().map(|i| mapping.apply_all(i.pred)).collect();
    let mapped_refs: Vec<&[usize]> = mapped.iter().map(Vec::as_slice).collect();

    let mut sequences = Vec::with_capacity(items.len());
    let mut counts = [SegmentCounts::default(); 3];
    let mut edit_sum = 0.0;
    let gt_segs: Vec<SegmentList> = gt.iter().map(|g| SegmentList::from_labels(g)).collect();
    let pred_segs: Vec<SegmentList> = mapped.iter().map(|p| SegmentList::from_labels(p)).collect();
    for (i, it) in items.iter().enumerate() {
        let (gs, ps) = (&gt_segs[i], &pred_segs[i]);
        let edit = edit_score(gs, ps)?;
        edit_sum += edit;
        let per: Vec<SegmentCounts> = F1_THRESHOLDS.iter().map(|&t| segment_counts(gs, ps, t)).collect();
        for (acc, c) in counts.iter_mut().zip(&per) {
            acc.add(*c);
        }
        sequences.push(SequenceReport {
            id: it.id.to_string(),
            frames: it.gt.len(),
            mof: mof(&[it.gt], &[&mapped[i]])?,
            edit,
            f1_10: per[0].f1(),
            f1_25: per[1].f1(),
            f1_50: per[2].f1(),
            jsd: 100.0 * video_length_distance(gs, ps)?,
        });
    }
    let videos: Vec<VideoSegments<'_>> = items
        .iter()
        .enumerate()
        .map(|(i, it)| VideoSegments {
            gt: &gt_segs[i],
            pred: &pred_segs[i],
            activity: it.activity,
        })
        .collect();
    Ok(EvalReport {
        mof: mof(&gt, &mapped_refs)?,
        edit: edit_sum / items.len() as f64,
        f1_10: counts[0].f1(),
        f1_25: counts[1].f1(),
        f1_50: counts[2].f1(),
        jsd: jsd_bias(&videos)?,
        mapping: mapping.map,
        sequences,
    })
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{}.pred", id))
}

/// Text file with one cluster id per frame.
pub fn write_predictions(path: &Path, labels: &[usize]) -> Result<()> {
    crate::dataset::write_labels(path, labels)
}

pub fn read_predictions(dir: &Path, id: &str) -> Result<Vec<usize>> {
    let path = prediction_path(dir, id);
    if !path.is_file() {
        return Err(Error::MissingPrediction(id.to_string()));
    }
    crate::dataset::read_labels(&path)
}
