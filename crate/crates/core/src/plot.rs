//! Standalone SVG plots: segment-length histograms and segmentation
//! timelines, each with a CSV of the plotted numbers.

use std::fmt::Write as _;

use crate::error::Result;
use crate::metrics::{bins_needed, check_items, global_mapping, length_histogram, EvalItem, SegmentList, LENGTH_BIN};

pub const TIMELINE_WIDTH: f64 = 800.0;
const BAND_HEIGHT: f64 = 24.0;
const MARGIN: f64 = 10.0;
const LABEL_GUTTER: f64 = 50.0;

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#86bcb6",
    "#d37295", "#a0cbe8",
];
const UNMATCHED: &str = "#bab0ac";

/// Fill color for a mapped class; ids at or above `gt_classes` are
/// unmatched clusters and share a neutral gray.
pub fn class_color(label: usize, gt_classes: usize) -> &'static str {
    if label >= gt_classes {
        UNMATCHED
    } else {
        PALETTE[label % PALETTE.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramRow {
    pub bin_start: usize,
    pub gt: u64,
    pub pred: u64,
}

/// Histogram of all ground-truth and predicted segment lengths.
pub fn length_rows(gt: &[SegmentList], pred: &[SegmentList]) -> Vec<HistogramRow> {
    let gl: Vec<usize> = gt.iter().flat_map(SegmentList::lengths).collect();
    let pl: Vec<usize> = pred.iter().flat_map(SegmentList::lengths).collect();
    let bins = bins_needed(&gl).max(bins_needed(&pl));
    let (gh, ph) = (length_histogram(&gl, bins), length_histogram(&pl, bins));
    (0..bins)
        .map(|b| HistogramRow {
            bin_start: b * LENGTH_BIN,
            gt: gh[b],
            pred: ph[b],
        })
        .collect()
}

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut s = String::from("bin_start,bin_end,gt,pred\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.bin_start, r.bin_start + LENGTH_BIN, r.gt, r.pred);
    }
    s
}

pub fn histogram_svg(rows: &[HistogramRow]) -> String {
    let (bar, gap, plot_h) = (10.0, 6.0, 200.0);
    let top = 30.0;
    let max = rows.iter().map(|r| r.gt.max(r.pred)).max().unwrap_or(0).max(1) as f64;
    let width = LABEL_GUTTER + rows.len() as f64 * (2.0 * bar + gap) + 2.0 * MARGIN;
    let height = top + plot_h + 40.0;
    let mut s = svg_open(width, height);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-size="12">segment lengths ({}-frame bins)</text>"#,
        MARGIN, LENGTH_BIN
    );
    let _ = writeln!(s, r#"<rect x="{}" y="6" width="10" height="10" fill="{}"/>"#, width - 120.0, PALETTE[0]);
    let _ = writeln!(s, r#"<text x="{}" y="15" font-size="10">gt</text>"#, width - 106.0);
    let _ = writeln!(s, r#"<rect x="{}" y="6" width="10" height="10" fill="{}"/>"#, width - 70.0, PALETTE[1]);
    let _ = writeln!(s, r#"<text x="{}" y="15" font-size="10">pred</text>"#, width - 56.0);
    let base = top + plot_h;
    for (i, r) in rows.iter().enumerate() {
        let x = LABEL_GUTTER + i as f64 * (2.0 * bar + gap);
        for (j, (count, fill)) in [(r.gt, PALETTE[0]), (r.pred, PALETTE[1])].into_iter().enumerate() {
            let h = plot_h * count as f64 / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{:.2}" fill="{}"><title>{}</title></rect>"#,
                x + j as f64 * bar,
                base - h,
                bar,
                h,
                fill,
                count
            );
        }
        if i % 5 == 0 {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{}" font-size="9">{}</text>"#, x, base + 14.0, r.bin_start);
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{base}" x2="{:.2}" y2="{base}" stroke="black"/>"#,
        LABEL_GUTTER,
        width - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

/// Pixel span `[x0, x1)` of a segment on a timeline of `frames` frames;
/// edges are rounded so neighbouring segments tile without gaps.
pub fn span_px(start: usize, len: usize, frames: usize) -> (i64, i64) {
    let scale = TIMELINE_WIDTH / frames.max(1) as f64;
    let x0 = (start as f64 * scale).round() as i64;
    let x1 = ((start + len) as f64 * scale).round() as i64;
    (x0, x1)
}

pub fn timeline_svg(id: &str, gt: &SegmentList, pred: &SegmentList, gt_classes: usize) -> String {
    let width = LABEL_GUTTER + TIMELINE_WIDTH + 2.0 * MARGIN;
    let height = 2.0 * MARGIN + 20.0 + 2.0 * BAND_HEIGHT + 6.0;
    let mut s = svg_open(width, height);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, MARGIN, MARGIN + 10.0, escape(id));
    let bands = [("gt", gt, MARGIN + 20.0), ("pred", pred, MARGIN + 26.0 + BAND_HEIGHT)];
    for (name, segs, y) in bands {
        let _ = writeln!(
            s,
            r#"<g class="{name}"><text x="{}" y="{:.2}" font-size="10">{name}</text>"#,
            MARGIN,
            y + BAND_HEIGHT / 2.0 + 4.0
        );
        let frames = segs.frames.max(gt.frames);
        for seg in &segs.segments {
            let (x0, x1) = span_px(seg.start, seg.len, frames);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{:.2}" width="{}" height="{}" fill="{}" data-label="{}" data-start="{}" data-len="{}"/>"#,
                LABEL_GUTTER as i64 + MARGIN as i64 + x0,
                y,
                x1 - x0,
                BAND_HEIGHT,
                class_color(seg.label, gt_classes),
                seg.label,
                seg.start,
                seg.len
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        w = width,
        h = height
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Every file emitted for a dataset, as `(file name, contents)`.
pub struct PlotSet {
    pub files: Vec<(String, String)>,
}

pub fn render(items: &[EvalItem<'_>], gt_classes: usize) -> Result<PlotSet> {
    check_items(items)?;
    let mapping = global_mapping(items, gt_classes)?;
    let classes = mapping.gt_classes;
    let gt: Vec<SegmentList> = items.iter().map(|i| SegmentList::from_labels(i.gt)).collect();
    let pred: Vec<SegmentList> = items.iter().map(|i| SegmentList::from_labels(&mapping.apply_all(i.pred))).collect();

    let rows = length_rows(&gt, &pred);
    let mut files = vec![
        ("lengths.svg".to_string(), histogram_svg(&rows)),
        ("lengths.csv".to_string(), histogram_csv(&rows)),
    ];
    let mut csv = String::from("id,band,label,start,len\n");
    for (i, it) in items.iter().enumerate() {
        for (band, segs) in [("gt", &gt[i]), ("pred", &pred[i])] {
            for seg in &segs.segments {
                let _ = writeln!(csv, "{},{},{},{},{}", it.id, band, seg.label, seg.start, seg.len);
            }
        }
        files.push((format!("timeline_{}.svg", it.id), timeline_svg(it.id, &gt[i], &pred[i], classes)));
    }
    files.push(("timelines.csv".to_string(), csv));
    Ok(PlotSet { files })
}
