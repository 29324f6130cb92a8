//! Drawing contrastive training tuples from object tracks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::motion::{hand_motion, HandMotionDescriptor};
use crate::tracker::{Track, TrackKind};

/// A box in a specific frame of a video; crops are rendered lazily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRef {
    pub video_id: String,
    pub frame_idx: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandSample {
    /// Entry index `k` of the object track the hand is linked at.
    pub k: usize,
    pub crop: CropRef,
    pub motion: HandMotionDescriptor,
}

/// One `(o_i, o'_i, h^a_i, h^m_i)` tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    pub track: usize,
    pub i: usize,
    pub i_prime: usize,
    pub o: CropRef,
    pub o_prime: CropRef,
    pub hand: HandSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalPair {
    pub track: usize,
    pub i: usize,
    pub i_prime: usize,
    pub o: CropRef,
    pub o_prime: CropRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPair {
    pub track: usize,
    pub i: usize,
    pub o: CropRef,
    pub hand: HandSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub track: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub crops: [CropRef; 3],
}

/// An anchor crop and a within-track far negative.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorNegative {
    pub track: usize,
    pub anchor: usize,
    pub negative: usize,
    pub crops: [CropRef; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    /// Tracks shorter than this are not used for temporal pairs.
    pub min_track_len: usize,
    /// Tracks with fewer hand-linked entries are not used for `L_h`.
    pub min_hand_frames: usize,
    /// Maximum `|k − i|` between object and hand entry.
    pub hand_offset_max: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            min_track_len: 4,
            min_hand_frames: 4,
            hand_offset_max: 3,
        }
    }
}

/// Temporal positive window `⌊w/4⌋`.
pub fn temporal_window(w: usize) -> usize {
    w / 4
}

/// Minimum distance of a TCN negative from the positive, `⌈w/2⌉`.
pub fn negative_distance(w: usize) -> usize {
    w.div_ceil(2)
}

fn crop(track: &Track, idx: usize) -> CropRef {
    CropRef {
        video_id: track.video_id.clone(),
        frame_idx: track.entries[idx].frame_idx,
        bbox: track.entries[idx].bbox,
    }
}

/// Chooses `n` track indices among `eligible`, distinct while possible.
fn pick_tracks(eligible: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut pool = eligible.to_vec();
        pool.shuffle(rng);
        out.extend(pool.into_iter().take(n - out.len()));
    }
    out
}

fn eligible_by(tracks: &[Track], what: &str, pred: impl Fn(&Track) -> bool) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TrackKind::Object && pred(t))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleTrack(format!(
            "no object track satisfies {what} (out of {} tracks)",
            tracks.len()
        )));
    }
    Ok(eligible)
}

fn temporal_partner(w: usize, i: usize, rng: &mut ChaCha8Rng) -> usize {
    let win = temporal_window(w);
    if win == 0 {
        return i;
    }
    let lo = i.saturating_sub(win);
    let hi = (i + win).min(w - 1);
    // uniform over [lo, hi] without i
    let j = rng.random_range(lo..hi);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Pairs `(o_i, o'_i)` with `|i − i'| ≤ ⌊w/4⌋`, `i' ≠ i` when the window allows.
pub fn sample_temporal(tracks: &[Track], n: usize, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Result<Vec<TemporalPair>> {
    let min_len = params.min_track_len.max(1);
    let eligible = eligible_by(tracks, &format!("length >= {min_len}"), |t| t.len() >= min_len)?;
    Ok(pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| {
            let track = &tracks[t];
            let i = rng.random_range(0..track.len());
            let i_prime = temporal_partner(track.len(), i, rng);
            TemporalPair {
                track: t,
                i,
                i_prime,
                o: crop(track, i),
                o_prime: crop(track, i_prime),
            }
        })
        .collect())
}

fn hand_box_at(track: &Track, k: usize) -> Option<BBox> {
    track.hand_links.get(k).copied().flatten().map(|h| h.bbox)
}

/// Hand sample at linked entry `k`, with neighbours clamped to `k` when they
/// carry no hand.
fn hand_sample(track: &Track, i: usize, k: usize) -> Result<HandSample> {
    let link = track.hand_links[k].as_ref().expect("k is hand-linked");
    let center = link.bbox;
    let prev = k.checked_sub(1).and_then(|p| hand_box_at(track, p)).unwrap_or(center);
    let next = hand_box_at(track, k + 1).unwrap_or(center);
    let motion = hand_motion(&track.entries[i].bbox, &[prev, center, next])?;
    Ok(HandSample {
        k,
        crop: CropRef {
            video_id: track.video_id.clone(),
            frame_idx: link.frame_idx,
            bbox: link.bbox,
        },
        motion,
    })
}

fn linked_near(track: &Track, i: usize, radius: usize) -> Vec<usize> {
    let lo = i.saturating_sub(radius);
    let hi = (i + radius).min(track.len() - 1);
    (lo..=hi).filter(|&k| track.hand_links[k].is_some()).collect()
}

fn draw_hand_pair(track: &Track, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Result<(usize, HandSample)> {
    let anchors: Vec<usize> = (0..track.len())
        .filter(|&i| !linked_near(track, i, params.hand_offset_max).is_empty())
        .collect();
    let i = anchors[rng.random_range(0..anchors.len())];
    let ks = linked_near(track, i, params.hand_offset_max);
    let k = ks[rng.random_range(0..ks.len())];
    Ok((i, hand_sample(track, i, k)?))
}

fn hand_eligible(params: &SamplingParams) -> impl Fn(&Track) -> bool + '_ {
    move |t: &Track| t.hand_links.len() == t.len() && t.hand_linked_count() >= params.min_hand_frames.max(1)
}

/// Object crop `o_i` with a hand linked at `k`, `|k − i| ≤ hand_offset_max`.
pub fn sample_hand(tracks: &[Track], n: usize, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Result<Vec<HandPair>> {
    let what = format!(">= {} hand-linked entries", params.min_hand_frames);
    let eligible = eligible_by(tracks, &what, hand_eligible(params))?;
    pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| {
            let (i, hand) = draw_hand_pair(&tracks[t], params, rng)?;
            Ok(HandPair {
                track: t,
                i,
                o: crop(&tracks[t], i),
                hand,
            })
        })
        .collect()
}

/// Full quadruples drawn from tracks eligible for both losses.
pub fn sample_batch(tracks: &[Track], n: usize, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Result<Vec<Quadruple>> {
    let min_len = params.min_track_len.max(1);
    let hand_ok = hand_eligible(params);
    let what = format!("length >= {min_len} and >= {} hand-linked entries", params.min_hand_frames);
    let eligible = eligible_by(tracks, &what, |t| t.len() >= min_len && hand_ok(t))?;
    pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| {
            let track = &tracks[t];
            let (i, hand) = draw_hand_pair(track, params, rng)?;
            let i_prime = temporal_partner(track.len(), i, rng);
            Ok(Quadruple {
                track: t,
                i,
                i_prime,
                o: crop(track, i),
                o_prime: crop(track, i_prime),
                hand,
            })
        })
        .collect()
}

/// TCN triplets: positive within `⌊w/4⌋` of the anchor, negative at least
/// `⌈w/2⌉` from the positive.
pub fn sample_tcn(tracks: &[Track], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
    let eligible = eligible_by(tracks, "length >= 4 (TCN window and negative distance)", |t| t.len() >= 4)?;
    Ok(pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| {
            let track = &tracks[t];
            let w = track.len();
            let far = negative_distance(w);
            let (anchor, positive) = loop {
                let a = rng.random_range(0..w);
                let p = temporal_partner(w, a, rng);
                if p >= far || p + far < w {
                    break (a, p);
                }
            };
            let candidates: Vec<usize> = (0..w).filter(|&j| j.abs_diff(positive) >= far).collect();
            let negative = candidates[rng.random_range(0..candidates.len())];
            Triplet {
                track: t,
                anchor,
                positive,
                negative,
                crops: [crop(track, anchor), crop(track, positive), crop(track, negative)],
            }
        })
        .collect())
}

/// Single crops for SimCLR; the two views come from augmentation.
pub fn sample_simclr(tracks: &[Track], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CropRef>> {
    let eligible = eligible_by(tracks, "length >= 1", |t| !t.is_empty())?;
    Ok(pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| crop(&tracks[t], rng.random_range(0..tracks[t].len())))
        .collect())
}

/// Anchor plus a within-track negative at least `⌈w/2⌉` away.
pub fn sample_simclr_tcn(tracks: &[Track], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AnchorNegative>> {
    let eligible = eligible_by(tracks, "length >= 2 (within-track negative)", |t| t.len() >= 2)?;
    Ok(pick_tracks(&eligible, n, rng)
        .into_iter()
        .map(|t| {
            let track = &tracks[t];
            let w = track.len();
            let far = negative_distance(w);
            let anchors: Vec<usize> = (0..w).filter(|&a| a >= far || a + far < w).collect();
            let anchor = anchors[rng.random_range(0..anchors.len())];
            let candidates: Vec<usize> = (0..w).filter(|&j| j.abs_diff(anchor) >= far).collect();
            let negative = candidates[rng.random_range(0..candidates.len())];
            AnchorNegative {
                track: t,
                anchor,
                negative,
                crops: [crop(track, anchor), crop(track, negative)],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::{HandLink, TrackEntry};
    use rand::SeedableRng;

    fn track(len: usize, linked: impl Fn(usize) -> bool) -> Track {
        let entries: Vec<TrackEntry> = (0..len)
            .map(|i| TrackEntry {
                frame_idx: i as u64,
                timestamp_s: i as f64 / 10.0,
                bbox: BBox::new(10.0 + i as f32, 10.0, 40.0 + i as f32, 40.0).unwrap(),
                score: 0.9,
            })
            .collect();
        let hand_links = (0..len)
            .map(|i| {
                linked(i).then(|| HandLink {
                    frame_idx: i as u64,
                    timestamp_s: i as f64 / 10.0,
                    bbox: BBox::new(30.0, 30.0, 50.0, 50.0).unwrap(),
                    score: 0.9,
                    side: None,
                })
            })
            .collect();
        Track {
            track_id: format!("v/o{len}"),
            video_id: "v".into(),
            kind: TrackKind::Object,
            entries,
            hand_links,
        }
    }

    #[test]
    fn temporal_window_on_length_eight() {
        let tracks = vec![track(8, |_| true)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_temporal(&tracks, 500, &SamplingParams::default(), &mut rng).unwrap();
        assert!(pairs.iter().all(|p| p.i.abs_diff(p.i_prime) <= 2 && p.i != p.i_prime));
        assert!(pairs.iter().any(|p| p.i.abs_diff(p.i_prime) == 2));
    }

    #[test]
    fn tcn_negative_distance_on_length_eight() {
        let tracks = vec![track(8, |_| true)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in sample_tcn(&tracks, 500, &mut rng).unwrap() {
            assert!(t.anchor.abs_diff(t.positive) <= 2 && t.anchor != t.positive);
            assert!(t.negative.abs_diff(t.positive) >= 4);
        }
        let tracks = vec![track(5, |_| true)];
        for t in sample_tcn(&tracks, 200, &mut rng).unwrap() {
            assert!(t.negative.abs_diff(t.positive) >= 3);
        }
    }

    #[test]
    fn hand_offsets_and_clamping() {
        let tracks = vec![track(12, |i| i % 3 == 0)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&tracks, 300, &SamplingParams::default(), &mut rng).unwrap();
        for q in &batch {
            assert!(q.hand.k.abs_diff(q.i) <= 3);
            assert!(tracks[0].hand_links[q.hand.k].is_some());
            // neighbours of k are unlinked here, so all three frames clamp to k
            let m = q.hand.motion.0;
            assert_eq!(m[0..4], m[4..8]);
            assert_eq!(m[4..8], m[8..12]);
        }
        assert!(batch.iter().any(|q| q.i == q.hand.k));
    }

    #[test]
    fn seeded_batches_repeat() {
        let tracks = vec![track(8, |_| true), track(20, |i| i > 5), track(3, |_| false)];
        let p = SamplingParams::default();
        let a = sample_batch(&tracks, 16, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&tracks, 16, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|q| q.track != 2));
    }

    #[test]
    fn ineligible_tracks_name_the_constraint() {
        let tracks = vec![track(3, |_| false)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_hand(&tracks, 4, &SamplingParams::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("hand-linked"));
        let err = sample_temporal(&tracks, 4, &SamplingParams::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("length >= 4"));
    }

    #[test]
    fn distinct_tracks_while_possible() {
        let tracks: Vec<Track> = (0..10).map(|_| track(8, |_| true)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = sample_temporal(&tracks, 10, &SamplingParams::default(), &mut rng).unwrap();
        let mut ids: Vec<usize> = pairs.iter().map(|p| p.track).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }
}
