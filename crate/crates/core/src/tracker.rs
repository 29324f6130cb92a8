//! Object-of-interaction and hand tracks built from per-frame detections.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{matching_total, max_weight_matching};
use crate::detections::{group_by_video, DetKind, FrameDetections, Side};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Hand boxes closer than this in time count as co-occurring with an object.
pub const HAND_LINK_WINDOW_S: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Object,
    Hand,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    #[serde(rename = "f")]
    pub frame_idx: u64,
    #[serde(rename = "t")]
    pub timestamp_s: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandLink {
    #[serde(rename = "f")]
    pub frame_idx: u64,
    #[serde(rename = "t")]
    pub timestamp_s: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: String,
    pub video_id: String,
    pub kind: TrackKind,
    pub entries: Vec<TrackEntry>,
    /// Parallel to `entries`; always empty for hand tracks.
    pub hand_links: Vec<Option<HandLink>>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hand_linked_count(&self) -> usize {
        self.hand_links.iter().filter(|h| h.is_some()).count()
    }

    pub fn duration_s(&self) -> f64 {
        match (self.entries.first(), self.entries.last()) {
            (Some(a), Some(b)) => b.timestamp_s - a.timestamp_s,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub iou_match_min: f32,
    pub det_score_min: f32,
    pub miss_buffer_frames: u32,
    pub subsample_fps: f64,
    pub max_track_seconds: f64,
    pub median_window: usize,
    pub min_hand_frames: usize,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            iou_match_min: 0.4,
            det_score_min: 0.2,
            miss_buffer_frames: 8,
            subsample_fps: 10.0,
            max_track_seconds: 25.6,
            median_window: 5,
            min_hand_frames: 4,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.iou_match_min > 0.0
            && self.det_score_min > 0.0
            && self.miss_buffer_frames > 0
            && self.subsample_fps > 0.0
            && self.max_track_seconds > 0.0
            && self.median_window > 0
            && self.min_hand_frames > 0;
        if !positive {
            return Err(Error::invalid("tracker parameters must be positive"));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::invalid("median_window must be odd"));
        }
        Ok(())
    }

    /// Longest allowed track, in entries at the subsampled rate.
    pub fn max_entries(&self) -> usize {
        ((self.max_track_seconds * self.subsample_fps) + 1e-9).floor().max(1.0) as usize
    }
}

/// Boxes produced by an external single-object tracker for one start patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalTrack {
    pub video_id: String,
    pub entries: Vec<TrackEntry>,
}

/// Starting-patch source and linking strategy.
#[derive(Clone, Debug, PartialEq)]
pub enum TrackingMode {
    /// Object-of-interaction detections linked frame to frame with hand context.
    HandContext,
    /// Detected starting patch, box copied unchanged to later frames.
    NoTracking,
    /// Boxes from an external tracker, validated and cut like the original
    /// single-object tracker pipeline.
    ExternalTrackerStub(Vec<ExternalTrack>),
    /// Random square crop held fixed over each track's extent.
    RandomPatch,
    /// Centered square crop of side equal to the image height.
    CenterPatch,
}

impl FromStr for TrackingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hand_context" => TrackingMode::HandContext,
            "no_tracking" => TrackingMode::NoTracking,
            "external_tracker_stub" => TrackingMode::ExternalTrackerStub(Vec::new()),
            "random_patch" => TrackingMode::RandomPatch,
            "center_patch" => TrackingMode::CenterPatch,
            other => return Err(Error::invalid(format!("unknown tracking mode {other:?}"))),
        })
    }
}

impl fmt::Display for TrackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackingMode::HandContext => "hand_context",
            TrackingMode::NoTracking => "no_tracking",
            TrackingMode::ExternalTrackerStub(_) => "external_tracker_stub",
            TrackingMode::RandomPatch => "random_patch",
            TrackingMode::CenterPatch => "center_patch",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkResult {
    /// `(track index, detection index)`, sorted by track index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
    /// Sum of matched IoUs in track order.
    pub total_iou: f64,
}

/// Optimal IoU assignment of open tracks (by their last box) to detections.
/// Pairs with IoU at or below `iou_match_min` are never matched.
pub fn link_frame(track_boxes: &[BBox], det_boxes: &[BBox], params: &TrackerParams) -> LinkResult {
    let weights: Vec<Vec<f64>> = track_boxes
        .iter()
        .map(|t| {
            det_boxes
                .iter()
                .map(|d| {
                    let v = iou(t, d);
                    if v > params.iou_match_min {
                        v as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let matching = max_weight_matching(&weights);
    let mut det_used = vec![false; det_boxes.len()];
    let mut result = LinkResult {
        total_iou: matching_total(&weights, &matching),
        ..Default::default()
    };
    for (t, m) in matching.iter().enumerate() {
        match m {
            Some(d) => {
                det_used[*d] = true;
                result.matches.push((t, *d));
            }
            None => result.unmatched_tracks.push(t),
        }
    }
    result.unmatched_detections = (0..det_boxes.len()).filter(|d| !det_used[*d]).collect();
    result
}

struct OpenTrack {
    entries: Vec<TrackEntry>,
    /// Detection index of each entry in its frame.
    det_indices: Vec<usize>,
    last_frame: u64,
}

/// Links detections of one kind across one video's frames. Returns raw
/// (unfiltered, un-subsampled) tracks in order of their first frame.
fn link_video(frames: &[FrameDetections], kind: DetKind, params: &TrackerParams) -> Vec<OpenTrack> {
    let mut open: Vec<OpenTrack> = Vec::new();
    let mut closed: Vec<OpenTrack> = Vec::new();
    for frame in frames {
        let gap_limit = params.miss_buffer_frames as u64 + 1;
        let (still_open, expired): (Vec<_>, Vec<_>) = open
            .into_iter()
            .partition(|t| frame.frame_idx - t.last_frame <= gap_limit);
        open = still_open;
        closed.extend(expired);

        let candidates: Vec<(usize, BBox, f32)> = frame
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.kind == kind && d.score > params.det_score_min)
            .map(|(i, d)| (i, d.bbox, d.score))
            .collect();
        let track_boxes: Vec<BBox> = open
            .iter()
            .map(|t| t.entries.last().expect("open track is non-empty").bbox)
            .collect();
        let det_boxes: Vec<BBox> = candidates.iter().map(|c| c.1).collect();
        let link = link_frame(&track_boxes, &det_boxes, params);
        for &(t, d) in &link.matches {
            let (idx, bbox, score) = candidates[d];
            let track = &mut open[t];
            track.entries.push(TrackEntry {
                frame_idx: frame.frame_idx,
                timestamp_s: frame.timestamp_s,
                bbox,
                score,
            });
            track.det_indices.push(idx);
            track.last_frame = frame.frame_idx;
        }
        for &d in &link.unmatched_detections {
            let (idx, bbox, score) = candidates[d];
            open.push(OpenTrack {
                entries: vec![TrackEntry {
                    frame_idx: frame.frame_idx,
                    timestamp_s: frame.timestamp_s,
                    bbox,
                    score,
                }],
                det_indices: vec![idx],
                last_frame: frame.frame_idx,
            });
        }
    }
    closed.extend(open);
    closed.sort_by_key(|t| t.entries[0].frame_idx);
    closed
}

fn center_distance(a: &BBox, b: &BBox) -> f32 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

fn hand_link_from(frame: &FrameDetections, det: usize) -> HandLink {
    let d = &frame.detections[det];
    HandLink {
        frame_idx: frame.frame_idx,
        timestamp_s: frame.timestamp_s,
        bbox: d.bbox,
        score: d.score,
        side: d.side,
    }
}

/// Picks the hand that holds the object at `frame_pos`: hands whose
/// `object_link` points at the object first, else the nearest-in-time
/// contact hand overlapping the object within [`HAND_LINK_WINDOW_S`].
fn find_hand(frames: &[FrameDetections], frame_pos: usize, obj_det: usize) -> Option<HandLink> {
    let frame = &frames[frame_pos];
    let obj_box = frame.detections[obj_det].bbox;
    let linked = frame
        .hands()
        .filter(|(_, h)| h.object_link == Some(obj_det))
        .min_by(|a, b| {
            center_distance(&a.1.bbox, &obj_box).total_cmp(&center_distance(&b.1.bbox, &obj_box))
        });
    if let Some((i, _)) = linked {
        return Some(hand_link_from(frame, i));
    }
    let t = frame.timestamp_s;
    let mut best: Option<(f64, f32, usize, usize)> = None;
    let lo = frames[..frame_pos]
        .iter()
        .rposition(|f| t - f.timestamp_s > HAND_LINK_WINDOW_S)
        .map_or(0, |p| p + 1);
    for (pos, f) in frames.iter().enumerate().skip(lo) {
        let dt = (f.timestamp_s - t).abs();
        if f.timestamp_s - t > HAND_LINK_WINDOW_S {
            break;
        }
        if dt > HAND_LINK_WINDOW_S {
            continue;
        }
        for (i, h) in f.hands() {
            if !h.in_contact() || h.bbox.intersection_area(&obj_box) <= 0.0 {
                continue;
            }
            let cand = (dt, center_distance(&h.bbox, &obj_box), pos, i);
            let better = match best {
                None => true,
                Some(b) => (cand.0, cand.1).partial_cmp(&(b.0, b.1)) == Some(std::cmp::Ordering::Less),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.map(|(_, _, pos, i)| hand_link_from(&frames[pos], i))
}

/// Replaces each entry's width and height by the running median over
/// `window` entries (edge-replicated). Centers are kept.
pub fn median_filter_boxes(track: &Track, window: usize) -> Track {
    let n = track.entries.len();
    let mut out = track.clone();
    if n == 0 {
        return out;
    }
    let mut window = window.max(1).min(n);
    if window % 2 == 0 {
        window -= 1;
    }
    let r = (window / 2) as isize;
    let widths: Vec<f32> = track.entries.iter().map(|e| e.bbox.width()).collect();
    let heights: Vec<f32> = track.entries.iter().map(|e| e.bbox.height()).collect();
    let median_at = |v: &[f32], i: usize| -> f32 {
        let mut w: Vec<f32> = (-r..=r)
            .map(|k| v[(i as isize + k).clamp(0, n as isize - 1) as usize])
            .collect();
        w.sort_by(f32::total_cmp);
        w[w.len() / 2]
    };
    for (i, e) in out.entries.iter_mut().enumerate() {
        let w = median_at(&widths, i);
        let h = median_at(&heights, i);
        let b = e.bbox;
        if w != b.width() {
            let cx = (b.x1 as f64 + b.x2 as f64) / 2.0;
            e.bbox.x1 = (cx - w as f64 / 2.0) as f32;
            e.bbox.x2 = (cx + w as f64 / 2.0) as f32;
        }
        if h != b.height() {
            let cy = (b.y1 as f64 + b.y2 as f64) / 2.0;
            e.bbox.y1 = (cy - h as f64 / 2.0) as f32;
            e.bbox.y2 = (cy + h as f64 / 2.0) as f32;
        }
    }
    out
}

/// Indices of the entries nearest each `1 / fps` tick, earliest on ties.
pub fn subsample_indices(timestamps: &[f64], fps: f64) -> Vec<usize> {
    let Some(&t0) = timestamps.first() else {
        return Vec::new();
    };
    let last = *timestamps.last().unwrap();
    let step = 1.0 / fps;
    let n_ticks = ((last - t0) / step + 1e-9).floor() as usize + 1;
    let mut out: Vec<usize> = Vec::with_capacity(n_ticks);
    let mut j = 0;
    for k in 0..n_ticks {
        let tick = t0 + k as f64 * step;
        while j + 1 < timestamps.len()
            && (timestamps[j + 1] - tick).abs() < (timestamps[j] - tick).abs() - 1e-12
        {
            j += 1;
        }
        if out.last() != Some(&j) {
            out.push(j);
        }
    }
    out
}

fn finalize(
    video_id: &str,
    kind: TrackKind,
    entries: Vec<TrackEntry>,
    hand_links: Vec<Option<HandLink>>,
    params: &TrackerParams,
    apply_median: bool,
    out: &mut Vec<Track>,
) {
    let mut track = Track {
        track_id: String::new(),
        video_id: video_id.to_string(),
        kind,
        entries,
        hand_links,
    };
    if apply_median {
        track = median_filter_boxes(&track, params.median_window);
    }
    let times: Vec<f64> = track.entries.iter().map(|e| e.timestamp_s).collect();
    let keep = subsample_indices(&times, params.subsample_fps);
    let entries: Vec<TrackEntry> = keep.iter().map(|&i| track.entries[i]).collect();
    let links: Vec<Option<HandLink>> = if track.hand_links.is_empty() {
        Vec::new()
    } else {
        keep.iter().map(|&i| track.hand_links[i]).collect()
    };
    let cap = params.max_entries();
    for (c, chunk) in entries.chunks(cap).enumerate() {
        let chunk_links = if links.is_empty() {
            Vec::new()
        } else {
            links[c * cap..c * cap + chunk.len()].to_vec()
        };
        out.push(Track {
            track_id: String::new(),
            video_id: video_id.to_string(),
            kind,
            entries: chunk.to_vec(),
            hand_links: chunk_links,
        });
    }
}

fn assign_ids(tracks: &mut [Track]) {
    let mut counter = 0usize;
    let mut current: Option<String> = None;
    for t in tracks.iter_mut() {
        if current.as_deref() != Some(&t.video_id) {
            current = Some(t.video_id.clone());
            counter = 0;
        }
        let prefix = match t.kind {
            TrackKind::Object => "o",
            TrackKind::Hand => "h",
        };
        t.track_id = format!("{}/{prefix}{counter:05}", t.video_id);
        counter += 1;
    }
}

fn hand_context_tracks(frames: &[FrameDetections], params: &TrackerParams) -> Vec<Track> {
    let mut out = Vec::new();
    for video in group_by_video(frames) {
        let video_id = &video[0].video_id;
        let pos_of = |frame_idx: u64| {
            video
                .binary_search_by_key(&frame_idx, |f| f.frame_idx)
                .expect("entry frame comes from this video")
        };
        for raw in link_video(video, DetKind::Object, params) {
            let links: Vec<Option<HandLink>> = raw
                .entries
                .iter()
                .zip(&raw.det_indices)
                .map(|(e, &det)| find_hand(video, pos_of(e.frame_idx), det))
                .collect();
            finalize(video_id, TrackKind::Object, raw.entries, links, params, true, &mut out);
        }
    }
    out
}

/// Builds object tracks for every video in `frames` (grouped by video,
/// sorted by frame index). `seed` only affects [`TrackingMode::RandomPatch`].
pub fn build_tracks(
    frames: &[FrameDetections],
    params: &TrackerParams,
    mode: &TrackingMode,
    seed: u64,
) -> Result<Vec<Track>> {
    params.validate()?;
    let mut tracks = match mode {
        TrackingMode::HandContext => hand_context_tracks(frames, params),
        TrackingMode::NoTracking => {
            let mut t = hand_context_tracks(frames, params);
            for track in &mut t {
                let first = track.entries[0].bbox;
                for e in &mut track.entries {
                    e.bbox = first;
                }
            }
            t
        }
        TrackingMode::RandomPatch | TrackingMode::CenterPatch => {
            let mut t = hand_context_tracks(frames, params);
            let sizes = image_sizes(frames);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for track in &mut t {
                let (w, h) = sizes
                    .iter()
                    .find(|(v, _)| *v == track.video_id)
                    .map(|(_, s)| (s.0 as f32, s.1 as f32))
                    .expect("video has frames");
                let bbox = if *mode == TrackingMode::CenterPatch {
                    let side = w.min(h);
                    BBox::from_center(w / 2.0, h / 2.0, side, side)?
                } else {
                    let side = rng.random_range(0.2..0.6) * w.min(h);
                    let x = rng.random_range(0.0..(w - side));
                    let y = rng.random_range(0.0..(h - side));
                    BBox::new(x, y, x + side, y + side)?
                };
                for e in &mut track.entries {
                    e.bbox = bbox;
                }
                track.hand_links.iter_mut().for_each(|l| *l = None);
            }
            t
        }
        TrackingMode::ExternalTrackerStub(external) => external_tracks(external, params),
    };
    tracks.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.entries[0].frame_idx.cmp(&b.entries[0].frame_idx))
    });
    assign_ids(&mut tracks);
    Ok(tracks)
}

fn image_sizes(frames: &[FrameDetections]) -> Vec<(String, (u32, u32))> {
    group_by_video(frames)
        .into_iter()
        .map(|v| (v[0].video_id.clone(), v[0].image_size))
        .collect()
}

/// Validity rules of the external single-object tracker.
const EXTERNAL_SCORE_MIN: f32 = 0.1;
const EXTERNAL_MAX_GAP: u64 = 2;
const EXTERNAL_MAX_FRAMES: usize = 256;

fn external_tracks(external: &[ExternalTrack], params: &TrackerParams) -> Vec<Track> {
    let mut out = Vec::new();
    for ext in external {
        let mut run: Vec<TrackEntry> = Vec::new();
        let flush = |run: &mut Vec<TrackEntry>, out: &mut Vec<Track>| {
            if !run.is_empty() {
                let entries = std::mem::take(run);
                finalize(&ext.video_id, TrackKind::Object, entries, Vec::new(), params, false, out);
            }
        };
        for e in ext.entries.iter().filter(|e| e.score > EXTERNAL_SCORE_MIN) {
            let gap_ok = run
                .last()
                .is_none_or(|l| e.frame_idx > l.frame_idx && e.frame_idx - l.frame_idx - 1 <= EXTERNAL_MAX_GAP);
            if !gap_ok || run.len() >= EXTERNAL_MAX_FRAMES {
                flush(&mut run, &mut out);
            }
            run.push(*e);
        }
        flush(&mut run, &mut out);
    }
    out
}

/// Hand tracks linked with the same assignment rule as object tracks.
pub fn build_hand_tracks(frames: &[FrameDetections], params: &TrackerParams) -> Result<Vec<Track>> {
    params.validate()?;
    let mut out = Vec::new();
    for video in group_by_video(frames) {
        for raw in link_video(video, DetKind::Hand, params) {
            finalize(&video[0].video_id, TrackKind::Hand, raw.entries, Vec::new(), params, true, &mut out);
        }
    }
    assign_ids(&mut out);
    Ok(out)
}

pub fn write_tracks_jsonl<W: Write>(mut out: W, tracks: &[Track]) -> Result<()> {
    for t in tracks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tracks_jsonl<R: BufRead>(reader: R) -> Result<Vec<Track>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::oracle::brute_force;
    use crate::detections::Detection;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn frame(idx: u64, dets: Vec<Detection>) -> FrameDetections {
        FrameDetections {
            video_id: "v".into(),
            frame_idx: idx,
            timestamp_s: idx as f64 / 10.0,
            image_size: (256, 144),
            detections: dets,
        }
    }

    fn obj(x: f32, score: f32) -> Detection {
        Detection::object(bx(x, 20.0, x + 40.0, 60.0), score)
    }

    #[test]
    fn link_single_pairs() {
        let p = TrackerParams::default();
        let t = bx(0.0, 0.0, 10.0, 10.0);
        let good = bx(0.0, 0.0, 10.0, 9.0); // IoU 0.9
        let r = link_frame(&[t], &[good], &p);
        assert_eq!(r.matches, vec![(0, 0)]);
        let poor = bx(0.0, 0.0, 10.0, 3.0); // IoU 0.3
        let r = link_frame(&[t], &[poor], &p);
        assert!(r.matches.is_empty());
        assert_eq!(r.unmatched_tracks, vec![0]);
        assert_eq!(r.unmatched_detections, vec![0]);
        assert_eq!(link_frame(&[], &[], &p), LinkResult::default());
    }

    #[test]
    fn link_beats_greedy_and_matches_permutations() {
        // Track 0 overlaps detection 0 best, but giving det 0 to track 1
        // frees det 1 for track 0.
        let tracks = [bx(0.0, 0.0, 10.0, 10.0), bx(1.5, 0.0, 11.5, 10.0), bx(50.0, 0.0, 60.0, 10.0)];
        let dets = [bx(0.5, 0.0, 10.5, 10.0), bx(-1.5, 0.0, 8.5, 10.0), bx(50.0, 0.0, 60.0, 10.5)];
        let p = TrackerParams::default();
        let r = link_frame(&tracks, &dets, &p);
        // all 3! permutations
        let mut best = f64::NEG_INFINITY;
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best_perm = None;
        for perm in perms {
            let total: f64 = (0..3)
                .map(|t| {
                    let v = iou(&tracks[t], &dets[perm[t]]) as f64;
                    if v > 0.4 {
                        v
                    } else {
                        0.0
                    }
                })
                .sum();
            if total > best {
                best = total;
                best_perm = Some(perm);
            }
        }
        let perm = best_perm.unwrap();
        assert_eq!(r.matches, vec![(0, perm[0]), (1, perm[1]), (2, perm[2])]);
        assert_eq!(r.matches[0], (0, 1));
        assert!((r.total_iou - best).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn link_equals_brute_force(
            tracks in prop::collection::vec((0f32..40.0, 0f32..40.0, 8f32..20.0), 0..6),
            dets in prop::collection::vec((0f32..40.0, 0f32..40.0, 8f32..20.0), 0..6),
        ) {
            let p = TrackerParams::default();
            let tb: Vec<BBox> = tracks.iter().map(|(x, y, s)| bx(*x, *y, x + s, y + s)).collect();
            let db: Vec<BBox> = dets.iter().map(|(x, y, s)| bx(*x, *y, x + s, y + s)).collect();
            let r = link_frame(&tb, &db, &p);
            let w: Vec<Vec<f64>> = tb.iter().map(|t| db.iter().map(|d| {
                let v = iou(t, d);
                if v > 0.4 { v as f64 } else { 0.0 }
            }).collect()).collect();
            if !tb.is_empty() {
                let (total, m) = brute_force(&w);
                let expected: Vec<(usize, usize)> = m.iter().enumerate().filter_map(|(t, d)| d.map(|d| (t, d))).collect();
                prop_assert_eq!(&r.matches, &expected);
                prop_assert_eq!(r.total_iou, total);
            }
        }
    }

    #[test]
    fn five_frame_single_track() {
        let frames: Vec<_> = (0..5).map(|i| frame(i, vec![obj(10.0 + i as f32 * 2.0, 0.9)])).collect();
        let t = build_tracks(&frames, &TrackerParams::default(), &TrackingMode::HandContext, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 5);
        assert_eq!(t[0].track_id, "v/o00000");
    }

    #[test]
    fn buffer_splits_after_nine_missing_frames() {
        let count = |gap: u64| {
            let mut frames: Vec<_> = (0..5).map(|i| frame(i, vec![obj(10.0, 0.9)])).collect();
            for i in 5..5 + gap {
                frames.push(frame(i, vec![]));
            }
            for i in 5 + gap..10 + gap {
                frames.push(frame(i, vec![obj(10.0, 0.9)]));
            }
            build_tracks(&frames, &TrackerParams::default(), &TrackingMode::HandContext, 0)
                .unwrap()
                .len()
        };
        assert_eq!(count(8), 1);
        assert_eq!(count(9), 2);
    }

    #[test]
    fn long_tracks_split_at_cap() {
        let frames: Vec<_> = (0..300).map(|i| frame(i, vec![obj(10.0, 0.9)])).collect();
        let t = build_tracks(&frames, &TrackerParams::default(), &TrackingMode::HandContext, 0).unwrap();
        assert_eq!(t.iter().map(Track::len).collect::<Vec<_>>(), vec![256, 44]);
    }

    #[test]
    fn score_gate_filters_weak_detections() {
        let frames: Vec<_> = (0..5).map(|i| frame(i, vec![obj(10.0, 0.2), obj(100.0, 0.21)])).collect();
        let t = build_tracks(&frames, &TrackerParams::default(), &TrackingMode::HandContext, 0).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t[0].entries.iter().all(|e| e.score > 0.2));
    }

    #[test]
    fn subsampling_to_ten_fps() {
        // 30 fps input for 1 s -> ticks every 0.1 s
        let times: Vec<f64> = (0..31).map(|i| i as f64 / 30.0).collect();
        let keep = subsample_indices(&times, 10.0);
        assert_eq!(keep, (0..=30).step_by(3).collect::<Vec<_>>());
        // tie between 0.05 and 0.15 for tick 0.1 -> earliest
        let keep = subsample_indices(&[0.0, 0.05, 0.15, 0.2], 10.0);
        assert_eq!(keep, vec![0, 1, 3]);
    }

    #[test]
    fn hand_links_via_obj_link_and_time_window() {
        let hand = |link: Option<usize>| {
            let mut h = Detection::hand(bx(30.0, 40.0, 50.0, 70.0), 0.9, true, Side::Right);
            h.object_link = link;
            h
        };
        let frames = vec![
            frame(0, vec![obj(10.0, 0.9), hand(Some(0))]),
            frame(1, vec![obj(10.0, 0.9)]),
            frame(2, vec![obj(10.0, 0.9)]),
            frame(3, vec![hand(None)]),
            frame(4, vec![obj(10.0, 0.9)]),
        ];
        let t = build_tracks(&frames, &TrackerParams::default(), &TrackingMode::HandContext, 0).unwrap();
        let links: Vec<Option<u64>> = t[0].hand_links.iter().map(|l| l.map(|l| l.frame_idx)).collect();
        // frame 1: 0.1 s from both frame 0 and frame 3 hands... frame 0 is
        // nearer (0.1 vs 0.2).
        assert_eq!(links, vec![Some(0), Some(0), Some(3), Some(3)]);
    }

    #[test]
    fn median_filter_cases() {
        let mk = |sizes: &[f32]| Track {
            track_id: "x".into(),
            video_id: "v".into(),
            kind: TrackKind::Object,
            entries: sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| TrackEntry {
                    frame_idx: i as u64,
                    timestamp_s: i as f64,
                    bbox: BBox::from_center(50.0, 50.0, s, s).unwrap(),
                    score: 1.0,
                })
                .collect(),
            hand_links: Vec::new(),
        };
        let constant = mk(&[7.0; 6]);
        assert_eq!(median_filter_boxes(&constant, 5), constant);
        let spiky = median_filter_boxes(&mk(&[10.0, 10.0, 100.0, 10.0, 10.0]), 3);
        assert!(spiky.entries.iter().all(|e| e.bbox.width() == 10.0));
        // window larger than the track clamps to the largest odd length
        let short = median_filter_boxes(&mk(&[1.0, 9.0]), 5);
        assert_eq!(short.entries[1].bbox.width(), 9.0);
    }

    #[test]
    fn median_filter_matches_naive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sizes: Vec<f32> = (0..40).map(|_| rng.random_range(5.0..60.0f32).round()).collect();
        let track = Track {
            track_id: "x".into(),
            video_id: "v".into(),
            kind: TrackKind::Object,
            entries: sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| TrackEntry {
                    frame_idx: i as u64,
                    timestamp_s: i as f64,
                    bbox: BBox::new(100.0, 100.0, 100.0 + s, 100.0 + s).unwrap(),
                    score: 1.0,
                })
                .collect(),
            hand_links: Vec::new(),
        };
        let filtered = median_filter_boxes(&track, 5);
        for i in 0..sizes.len() {
            let mut win: Vec<f32> = (0..5)
                .map(|k| sizes[(i as isize + k - 2).clamp(0, 39) as usize])
                .collect();
            win.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let e = filtered.entries[i].bbox;
            assert_eq!(e.width(), win[2]);
            let (cx, cy) = e.center();
            let (ox, oy) = track.entries[i].bbox.center();
            assert!((cx - ox).abs() < 1e-4 && (cy - oy).abs() < 1e-4);
        }
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("siamese".parse::<TrackingMode>().is_err());
        for m in ["hand_context", "no_tracking", "external_tracker_stub", "random_patch", "center_patch"] {
            assert_eq!(m.parse::<TrackingMode>().unwrap().to_string(), m);
        }
    }

    #[test]
    fn ablation_modes_keep_extents() {
        let frames: Vec<_> = (0..12).map(|i| frame(i, vec![obj(10.0 + i as f32, 0.9)])).collect();
        let p = TrackerParams::default();
        let base = build_tracks(&frames, &p, &TrackingMode::HandContext, 0).unwrap();
        for mode in [TrackingMode::NoTracking, TrackingMode::RandomPatch, TrackingMode::CenterPatch] {
            let t = build_tracks(&frames, &p, &mode, 3).unwrap();
            assert_eq!(t.len(), base.len());
            assert_eq!(t[0].len(), base[0].len());
            let first = t[0].entries[0].bbox;
            assert!(t[0].entries.iter().all(|e| e.bbox == first));
        }
        let center = build_tracks(&frames, &p, &TrackingMode::CenterPatch, 0).unwrap();
        assert_eq!(center[0].entries[0].bbox.to_array(), [56.0, 0.0, 200.0, 144.0]);
    }

    #[test]
    fn external_stub_rules() {
        let e = |f: u64, s: f32| TrackEntry {
            frame_idx: f,
            timestamp_s: f as f64 / 10.0,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
            score: s,
        };
        // frames 3 and 4 invalid (gap of 2 tolerated), then 3 missing frames
        let ext = ExternalTrack {
            video_id: "v".into(),
            entries: vec![e(0, 0.5), e(1, 0.5), e(2, 0.5), e(3, 0.05), e(4, 0.05), e(5, 0.5), e(9, 0.5)],
        };
        let t = build_tracks(&[], &TrackerParams::default(), &TrackingMode::ExternalTrackerStub(vec![ext]), 0).unwrap();
        assert_eq!(t.iter().map(Track::len).collect::<Vec<_>>(), vec![4, 1]);
    }

    #[test]
    fn deterministic_serialization() {
        let frames: Vec<_> = (0..20).map(|i| frame(i, vec![obj(10.0 + i as f32, 0.9), obj(150.0, 0.5)])).collect();
        let run = || {
            let t = build_tracks(&frames, &TrackerParams::default(), &TrackingMode::RandomPatch, 9).unwrap();
            let mut buf = Vec::new();
            write_tracks_jsonl(&mut buf, &t).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let back = read_tracks_jsonl(a.as_slice()).unwrap();
        let mut again = Vec::new();
        write_tracks_jsonl(&mut again, &back).unwrap();
        assert_eq!(a, again);
    }
}
