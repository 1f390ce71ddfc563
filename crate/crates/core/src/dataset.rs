//! Skeleton sequences on disk and in memory, plus a synthetic corpus generator.
//!
//! Sequence files are little-endian binary: the magic `SKL1`, four `u32`
//! header fields (C, T, V, fps) and then `C*T*V` `f32` values in `(c, t, v)`
//! row-major order. Label files hold one integer per line. A JSON manifest
//! ties sequences, labels and activity tags together; relative paths inside
//! it are resolved against the manifest's own directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"SKL1";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    /// `[C, T, V]`
    pub joints: Tensor,
    pub fps: u32,
    pub labels: Option<Vec<usize>>,
    pub activity: Option<String>,
}

impl SkeletonSequence {
    pub fn new(id: impl Into<String>, joints: Tensor, fps: u32) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            joints,
            fps,
            labels: None,
            activity: None,
        };
        seq.validate(None)?;
        Ok(seq)
    }

    pub fn channels(&self) -> usize {
        self.joints.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.joints.dim(1)
    }

    pub fn joint_count(&self) -> usize {
        self.joints.dim(2)
    }

    pub fn at(&self, c: usize, t: usize, v: usize) -> f64 {
        let (tt, vv) = (self.frames(), self.joint_count());
        self.joints.data()[(c * tt + t) * vv + v]
    }

    pub fn validate(&self, k_gt: Option<usize>) -> Result<()> {
        if self.joints.rank() != 3 {
            return Err(Error::invalid("joints", format!("expected [C, T, V], got {:?}", self.joints.shape())));
        }
        let (c, t, v) = (self.channels(), self.frames(), self.joint_count());
        if t < 1 {
            return Err(Error::invalid("T", "sequence has no frames"));
        }
        if v < 2 {
            return Err(Error::invalid("V", format!("need at least 2 joints, got {}", v)));
        }
        if ![2, 3, 6].contains(&c) {
            return Err(Error::invalid("C", format!("joint dimension must be 2, 3 or 6, got {}", c)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != t {
                return Err(Error::invalid(
                    "labels",
                    format!("label length mismatch: {} labels for {} frames", labels.len(), t),
                ));
            }
            if let Some(k) = k_gt {
                if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::invalid("labels", format!("label {} outside [0, {})", bad, k)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub seq: String,
    pub labels: Option<String>,
    pub activity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub k_gt: usize,
    pub fps: u32,
    pub v: usize,
    pub c: usize,
    pub items: Vec<ManifestItem>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn sequence_id(item: &ManifestItem) -> String {
        Path::new(&item.seq)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| item.seq.clone())
    }

    pub fn load_all(&self) -> Result<Vec<SkeletonSequence>> {
        self.items.iter().map(|item| load_sequence(self, item)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Parses a manifest and checks that every referenced file exists and agrees
/// with the declared joint count and dimension.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.items.is_empty() {
        return Err(Error::invalid("items", "manifest lists no sequences"));
    }
    for item in &manifest.items {
        let seq_path = manifest.resolve(&item.seq);
        let header = read_header(&seq_path)?;
        if header.c as usize != manifest.c {
            return Err(Error::invalid("c", format!("{} has C={}, manifest says {}", item.seq, header.c, manifest.c)));
        }
        if header.v as usize != manifest.v {
            return Err(Error::invalid("v", format!("{} has V={}, manifest says {}", item.seq, header.v, manifest.v)));
        }
        if let Some(labels) = &item.labels {
            let lp = manifest.resolve(labels);
            if !lp.is_file() {
                return Err(Error::invalid("labels", format!("label file {} does not exist", lp.display())));
            }
        }
    }
    Ok(manifest)
}

pub fn load_sequence(manifest: &DatasetManifest, item: &ManifestItem) -> Result<SkeletonSequence> {
    let mut seq = read_sequence(&manifest.resolve(&item.seq), DatasetManifest::sequence_id(item))?;
    if let Some(lp) = &item.labels {
        seq.labels = Some(read_labels(&manifest.resolve(lp))?);
    }
    seq.activity = item.activity.clone();
    seq.validate(Some(manifest.k_gt))?;
    Ok(seq)
}

struct Header {
    c: u32,
    t: u32,
    v: u32,
    fps: u32,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let perr = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        location: format!("byte offset {}", offset),
        msg: msg.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(perr(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != SEQUENCE_MAGIC {
        return Err(perr(0, "bad magic, expected SKL1"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    Ok(Header {
        c: word(0),
        t: word(1),
        v: word(2),
        fps: word(3),
    })
}

fn read_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut buf = [0u8; HEADER_LEN];
    let mut n = 0;
    while n < HEADER_LEN {
        let got = f.read(&mut buf[n..]).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if got == 0 {
            break;
        }
        n += got;
    }
    parse_header(path, &buf[..n])
}

pub fn read_sequence(path: &Path, id: impl Into<String>) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let h = parse_header(path, &bytes)?;
    let n = h.c as usize * h.t as usize * h.v as usize;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: format!("byte offset {}", bytes.len().min(expected)),
            msg: format!("expected {} bytes for C={} T={} V={}, found {}", expected, h.c, h.t, h.v, bytes.len()),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let joints = Tensor::new(vec![h.c as usize, h.t as usize, h.v as usize], data)?;
    SkeletonSequence::new(id, joints, h.fps)
}

/// Writes the binary sequence format. Values are stored as `f32`.
pub fn write_sequence(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.joints.len());
    out.extend_from_slice(SEQUENCE_MAGIC);
    for x in [seq.channels(), seq.frames(), seq.joint_count()] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    out.extend_from_slice(&seq.fps.to_le_bytes());
    for &x in seq.joints.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", i + 1),
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Subtracts the root joint from every joint, frame by frame.
pub fn center_at_root(seq: &SkeletonSequence, root_joint: usize) -> Result<SkeletonSequence> {
    let (c, t, v) = (seq.channels(), seq.frames(), seq.joint_count());
    if root_joint >= v {
        return Err(Error::invalid("root_joint", format!("{} out of {} joints", root_joint, v)));
    }
    if !(c == 2 || c == 3) {
        return Err(Error::invalid("C", format!("cannot center non-positional channels (C={})", c)));
    }
    let mut out = seq.clone();
    let data = out.joints.data_mut();
    for ch in 0..c {
        for f in 0..t {
            let row = &mut data[(ch * t + f) * v..(ch * t + f + 1) * v];
            let root = row[root_joint];
            row.iter_mut().for_each(|x| *x -= root);
        }
    }
    Ok(out)
}

/// Keeps every `fps / target_fps`-th frame starting at frame 0.
pub fn downsample(seq: &SkeletonSequence, target_fps: u32) -> Result<SkeletonSequence> {
    if target_fps == 0 || seq.fps % target_fps != 0 {
        return Err(Error::invalid(
            "target_fps",
            format!("{} does not divide the source rate {}", target_fps, seq.fps),
        ));
    }
    let stride = (seq.fps / target_fps) as usize;
    let (c, t, v) = (seq.channels(), seq.frames(), seq.joint_count());
    let kept: Vec<usize> = (0..t).step_by(stride).collect();
    let mut data = Vec::with_capacity(c * kept.len() * v);
    for ch in 0..c {
        for &f in &kept {
            data.extend_from_slice(&seq.joints.data()[(ch * t + f) * v..(ch * t + f + 1) * v]);
        }
    }
    Ok(SkeletonSequence {
        id: seq.id.clone(),
        joints: Tensor::new(vec![c, kept.len(), v], data)?,
        fps: target_fps,
        labels: seq.labels.as_ref().map(|l| kept.iter().map(|&f| l[f]).collect()),
        activity: seq.activity.clone(),
    })
}

/// Per-patch relative time targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Timestamps {
    pub values: Vec<f64>,
}

pub fn patch_count(frames: usize, patch: usize) -> usize {
    frames.div_ceil(patch).max(1)
}

pub fn make_timestamps(frames: usize, patch: usize) -> Timestamps {
    let m = patch_count(frames, patch.max(1));
    let values = if m == 1 {
        vec![0.0]
    } else {
        (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
    };
    Timestamps { values }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub sequences: usize,
    pub mean_segments: usize,
    pub seed: u64,
    pub patch: usize,
    pub joints: usize,
    pub fps: u32,
    pub noise: f64,
    /// Probability that a segment has length exactly `patch`.
    pub short_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            sequences: 20,
            mean_segments: 8,
            seed: 0,
            patch: 10,
            joints: 4,
            fps: 30,
            noise: 0.05,
            short_fraction: 0.15,
        }
    }
}

const SYNTH_CHANNELS: usize = 3;
const OFFSET_SCALE: f64 = 0.5;
const OSC_AMPLITUDE: f64 = 0.15;
// Spreads class phases so no two of the first dozen classes nearly coincide.
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Rest position of joint `v`: a chain along the x axis.
fn rest_pose(v: usize, c: usize) -> f64 {
    match c {
        0 => 0.3 * v as f64,
        1 => 0.1 * (v % 2) as f64,
        _ => 0.0,
    }
}

/// Class-specific displacement of joint `v`, channel `c`.
pub fn class_offset(k: usize, v: usize, c: usize) -> f64 {
    OFFSET_SCALE * (GOLDEN_ANGLE * k as f64 + 1.7 * v as f64 + 2.9 * c as f64 + 0.3).sin()
}

fn class_frequency_hz(k: usize) -> f64 {
    0.5 + 0.4 * k as f64
}

fn class_phase(k: usize) -> f64 {
    1.1 * k as f64
}

/// Noise-free pose of class `k` at frame `tau` of one of its segments.
pub fn motif_value(k: usize, tau: usize, v: usize, c: usize, fps: u32) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * class_frequency_hz(k) / fps as f64;
    rest_pose(v, c)
        + class_offset(k, v, c)
        + OSC_AMPLITUDE * (omega * tau as f64 + class_phase(k) + 0.7 * v as f64 + 1.3 * c as f64).sin()
}

/// Generates a labeled corpus into `out_dir` and writes `manifest.json`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.classes < 2 {
        return Err(Error::invalid("classes", "need at least 2 action classes"));
    }
    if cfg.joints < 2 || cfg.sequences == 0 || cfg.patch == 0 || cfg.mean_segments == 0 {
        return Err(Error::invalid("synth", "joints >= 2, sequences, patch and mean_segments >= 1"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let (k, p, v, c) = (cfg.classes, cfg.patch, cfg.joints, SYNTH_CHANNELS);

    // The first sequence opens with every class once so the corpus covers [0, K).
    let mut opening: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        opening.swap(i, rng.random_range(0..=i));
    }

    let mut items = Vec::with_capacity(cfg.sequences);
    for n in 0..cfg.sequences {
        let lo = cfg.mean_segments.saturating_sub(2).max(1);
        let mut count = rng.random_range(lo..=cfg.mean_segments + 2);
        if n == 0 {
            count = count.max(k);
        }
        let mut labels = Vec::new();
        let mut prev: Option<usize> = None;
        for s in 0..count {
            let class = if n == 0 && s < k {
                opening[s]
            } else {
                loop {
                    let c = rng.random_range(0..k);
                    if Some(c) != prev {
                        break c;
                    }
                }
            };
            let len = if rng.random_bool(cfg.short_fraction) {
                p
            } else {
                rng.random_range(2 * p..=8 * p)
            };
            labels.extend(std::iter::repeat_n(class, len));
            prev = Some(class);
        }
        let t = labels.len();
        let mut data = vec![0.0; c * t * v];
        let mut seg_start = 0;
        for f in 0..t {
            if f > 0 && labels[f] != labels[f - 1] {
                seg_start = f;
            }
            for ch in 0..c {
                for j in 0..v {
                    data[(ch * t + f) * v + j] = motif_value(labels[f], f - seg_start, j, ch, cfg.fps);
                }
            }
        }
        if cfg.noise > 0.0 {
            for x in data.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        let id = format!("seq_{:03}", n);
        let seq = SkeletonSequence {
            id: id.clone(),
            joints: Tensor::new(vec![c, t, v], data)?,
            fps: cfg.fps,
            labels: Some(labels),
            activity: None,
        };
        let seq_name = format!("{}.skl", id);
        let label_name = format!("{}.labels", id);
        write_sequence(&out_dir.join(&seq_name), &seq)?;
        write_labels(&out_dir.join(&label_name), seq.labels.as_deref().unwrap())?;
        items.push(ManifestItem {
            seq: seq_name,
            labels: Some(label_name),
            activity: None,
        });
    }

    let manifest = DatasetManifest {
        k_gt: k,
        fps: cfg.fps,
        v,
        c,
        items,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(c: usize, t: usize, v: usize, data: Vec<f64>) -> SkeletonSequence {
        SkeletonSequence::new("s", Tensor::new(vec![c, t, v], data).unwrap(), 30).unwrap()
    }

    #[test]
    fn hand_written_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"SKL1".to_vec();
        for x in [3u32, 2, 2, 30] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let path = dir.path().join("a.skl");
        fs::write(&path, bytes).unwrap();
        let seq = read_sequence(&path, "a").unwrap();
        assert_eq!(seq.joints.shape(), &[3, 2, 2]);
        assert_eq!(seq.at(2, 1, 1), 5.5);
    }

    #[test]
    fn truncated_sequence_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.skl");
        fs::write(&path, b"SKL1\x03\x00").unwrap();
        match read_sequence(&path, "a") {
            Err(Error::Parse { location, .. }) => assert!(location.contains("offset")),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn label_length_mismatch() {
        let mut seq = seq_from(3, 2, 2, vec![0.0; 12]);
        seq.labels = Some(vec![0, 1, 1]);
        let err = seq.validate(Some(2)).unwrap_err();
        assert!(err.to_string().contains("label length mismatch"));
    }

    #[test]
    fn bad_label_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.labels");
        fs::write(&path, "0\n1\nx\n").unwrap();
        match read_labels(&path) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn center_single_frame() {
        // [C=3, T=1, V=2]: joints (1,1,1) and (2,3,4)
        let seq = seq_from(3, 1, 2, vec![1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let out = center_at_root(&seq, 0).unwrap();
        assert_eq!(out.joints.data(), &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
    }

    #[test]
    fn center_rejects_inertial_channels() {
        let seq = seq_from(6, 1, 2, vec![0.0; 12]);
        assert!(center_at_root(&seq, 0).is_err());
        let seq = seq_from(3, 1, 2, vec![0.0; 6]);
        assert!(center_at_root(&seq, 2).is_err());
    }

    #[test]
    fn downsample_stride() {
        let t = 8;
        let data: Vec<f64> = (0..2 * t * 2).map(|i| i as f64).collect();
        let mut seq = seq_from(2, t, 2, data);
        seq.fps = 200;
        seq.labels = Some(vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let out = downsample(&seq, 50).unwrap();
        assert_eq!(out.frames(), 2);
        assert_eq!(out.labels.as_deref(), Some(&[0, 1][..]));
        assert_eq!(out.at(1, 1, 0), seq.at(1, 4, 0));
        assert_eq!(downsample(&seq, 200).unwrap(), seq);
        assert!(downsample(&seq, 30).is_err());
    }

    #[test]
    fn timestamps() {
        assert_eq!(make_timestamps(6, 3).values, vec![0.0, 1.0]);
        assert_eq!(make_timestamps(9, 3).values, vec![0.0, 0.5, 1.0]);
        assert_eq!(make_timestamps(4, 5).values, vec![0.0]);
        assert_eq!(make_timestamps(7, 3).values.len(), 3);
    }

    #[test]
    fn synth_rejects_single_class() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            classes: 1,
            ..Default::default()
        };
        assert!(synth_generate(&cfg, dir.path()).is_err());
    }
}
