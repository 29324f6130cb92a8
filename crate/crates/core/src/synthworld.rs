//! Scripted synthetic egocentric videos with detector-style output and
//! ground truth for object states, interaction regions and grasps.
//!
//! Each video belongs to a participant (kitchen background and skin tone),
//! holds a handful of static objects, and plays a fixed sequence of
//! interactions: a hand approaches from below the frame, stays in contact
//! with one object for `dwell` frames (the object's state flips halfway
//! through), and retracts. Object-of-interaction detections exist only
//! while the hand is in contact.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array_file::write_array;
use crate::detections::{write_detections_jsonl, Detection, FrameDetections, Side};
use crate::error::{Error, Result};
use crate::frames::{frame_file_name, FrameSource};
use crate::geometry::{iou, BBox};
use crate::image_ops::Image;
use crate::tensor::Tensor;

/// Number of object classes with a renderer.
pub const MAX_OBJECT_CLASSES: usize = 6;

/// State vocabulary; each class uses one pair.
pub const STATE_NAMES: [&str; 6] = ["closed", "open", "empty", "full", "whole", "cut"];

/// `(state 0, state 1)` indices into `STATE_NAMES` for a class.
pub fn class_states(class: usize) -> [usize; 2] {
    match class {
        0 | 1 => [0, 1],
        2 | 4 => [2, 3],
        _ => [4, 5],
    }
}

/// Grasp classes a given object class affords.
pub fn affordances(class: usize, grasp_classes: usize) -> Vec<usize> {
    let mut a = vec![(class * 3) % grasp_classes, (class * 3 + 1) % grasp_classes];
    a.dedup();
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub box_sigma: f32,
    pub miss_rate: f32,
    pub false_positive_rate: f32,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            box_sigma: 2.0,
            miss_rate: 0.05,
            false_positive_rate: 0.02,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            box_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub n_videos: usize,
    pub n_participants: usize,
    pub interactions_per_video: usize,
    pub n_object_classes: usize,
    pub states_per_object: usize,
    pub grasp_classes: usize,
    pub objects_per_video: (usize, usize),
    pub object_size: (f32, f32),
    pub hand_size: (f32, f32),
    pub approach_frames: u64,
    pub dwell_frames: (u64, u64),
    pub retract_frames: u64,
    pub gap_frames: (u64, u64),
    /// Hand drift during contact, pixels per frame.
    pub hand_speed: f32,
    pub camera_jitter: f32,
    /// Per-video spread of the lighting gain around 1, per channel.
    pub lighting_spread: f32,
    /// Relative amplitude of slow per-frame lighting changes.
    pub lighting_flicker: f32,
    /// Upper bound on the contrast of per-object stripe textures.
    pub texture_contrast: f32,
    pub noise: NoiseModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            width: 256,
            height: 144,
            fps: 10.0,
            n_videos: 24,
            n_participants: 6,
            interactions_per_video: 10,
            n_object_classes: 6,
            states_per_object: 2,
            grasp_classes: 8,
            objects_per_video: (3, 5),
            object_size: (30.0, 46.0),
            hand_size: (24.0, 32.0),
            approach_frames: 8,
            dwell_frames: (14, 24),
            retract_frames: 8,
            gap_frames: (4, 10),
            hand_speed: 0.4,
            camera_jitter: 2.0,
            lighting_spread: 0.25,
            lighting_flicker: 0.15,
            texture_contrast: 0.4,
            noise: NoiseModel::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.width < 64 || self.height < 64 {
            return bad("image must be at least 64x64");
        }
        if self.n_videos == 0 || self.n_participants == 0 || self.interactions_per_video == 0 {
            return bad("need at least one video, participant and interaction");
        }
        if self.n_object_classes == 0 || self.n_object_classes > MAX_OBJECT_CLASSES {
            return bad("n_object_classes must be in 1..=6");
        }
        if self.states_per_object != 2 {
            return bad("only two states per object are rendered");
        }
        if self.grasp_classes < 2 {
            return bad("grasp_classes must be >= 2");
        }
        if self.objects_per_video.0 == 0 || self.objects_per_video.0 > self.objects_per_video.1 {
            return bad("objects_per_video range invalid");
        }
        if self.dwell_frames.0 < 2 || self.dwell_frames.0 > self.dwell_frames.1 {
            return bad("dwell_frames range invalid");
        }
        if self.approach_frames == 0 || self.retract_frames == 0 {
            return bad("approach and retract need at least one frame");
        }
        if !(self.object_size.0 > 4.0 && self.object_size.0 <= self.object_size.1)
            || !(self.hand_size.0 > 4.0 && self.hand_size.0 <= self.hand_size.1)
        {
            return bad("size ranges invalid");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub class: usize,
    pub color: [f32; 3],
    /// Box in reference (camera offset zero) coordinates.
    pub bbox: BBox,
    pub initial_state: u8,
    pub texture: Texture,
}

/// Stripe pattern modulating an object's body color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub cycles: f32,
    pub angle: f32,
    pub contrast: f32,
}

impl Texture {
    pub const FLAT: Texture = Texture {
        cycles: 1.0,
        angle: 0.0,
        contrast: 0.0,
    };

    fn factor(&self, u: f32, v: f32) -> f32 {
        let t = u * self.angle.cos() + v * self.angle.sin();
        1.0 - self.contrast * 0.5 * (1.0 + (std::f32::consts::TAU * self.cycles * t).sin())
    }
}

/// Multiplicative per-channel lighting that drifts slowly over a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub gain: [f32; 3],
    pub flicker: f32,
    pub period: f32,
    pub phase: [f32; 3],
}

impl Lighting {
    pub fn at(&self, f: u64) -> [f32; 3] {
        let t = std::f32::consts::TAU * f as f32 / self.period;
        std::array::from_fn(|c| self.gain[c] * (1.0 + self.flicker * (t + self.phase[c]).sin()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub object: usize,
    pub side: Side,
    pub grasp: usize,
    pub hand_size: (f32, f32),
    pub start: u64,
    pub contact_start: u64,
    /// Exclusive.
    pub contact_end: u64,
    /// Exclusive.
    pub end: u64,
    pub entry: (f32, f32),
    pub contact: (f32, f32),
    pub exit: (f32, f32),
    pub drift: (f32, f32),
}

impl InteractionSpec {
    pub fn dwell(&self) -> u64 {
        self.contact_end - self.contact_start
    }

    /// First frame showing the toggled state.
    pub fn flip_frame(&self) -> u64 {
        self.contact_start + self.dwell() / 2
    }

    fn contact_center(&self, f: u64) -> (f32, f32) {
        let k = (f.min(self.contact_end - 1) - self.contact_start) as f32;
        (self.contact.0 + self.drift.0 * k, self.contact.1 + self.drift.1 * k)
    }

    /// Hand box center in reference coordinates, if the hand is on screen
    /// in this interaction at frame `f`.
    pub fn hand_center(&self, f: u64) -> Option<(f32, f32)> {
        let lerp = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        if f < self.start || f >= self.end {
            None
        } else if f < self.contact_start {
            let t = (f - self.start) as f32 / (self.contact_start - self.start) as f32;
            Some(lerp(self.entry, self.contact, t))
        } else if f < self.contact_end {
            Some(self.contact_center(f))
        } else {
            let t = (f - self.contact_end + 1) as f32 / (self.end - self.contact_end) as f32;
            Some(lerp(self.contact_center(self.contact_end - 1), self.exit, t))
        }
    }

    pub fn in_contact(&self, f: u64) -> bool {
        f >= self.contact_start && f < self.contact_end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    pub tile: [f32; 3],
    pub period: f32,
    pub gradient: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScript {
    pub video_id: String,
    pub participant: usize,
    pub n_frames: u64,
    pub background: Background,
    pub skin: [f32; 3],
    pub objects: Vec<ObjectSpec>,
    pub interactions: Vec<InteractionSpec>,
    /// Camera offset per frame; image = reference + offset.
    pub camera: Vec<(f32, f32)>,
    pub lighting: Lighting,
}

impl VideoScript {
    pub fn object_state(&self, object: usize, f: u64) -> u8 {
        let flips = self
            .interactions
            .iter()
            .filter(|i| i.object == object && i.flip_frame() <= f)
            .count();
        self.objects[object].initial_state ^ (flips % 2) as u8
    }

    pub fn active_interaction(&self, f: u64) -> Option<&InteractionSpec> {
        self.interactions.iter().find(|i| f >= i.start && f < i.end)
    }

    pub fn offset(&self, f: u64) -> (f32, f32) {
        self.camera.get(f as usize).copied().unwrap_or((0.0, 0.0))
    }

    /// Object box in image coordinates at frame `f`.
    pub fn object_box(&self, object: usize, f: u64) -> BBox {
        let (ox, oy) = self.offset(f);
        self.objects[object].bbox.translate(ox, oy)
    }

    /// Hand box in reference coordinates.
    pub fn hand_box_ref(&self, inter: &InteractionSpec, f: u64) -> Option<BBox> {
        let (cx, cy) = inter.hand_center(f)?;
        BBox::from_center(cx, cy, inter.hand_size.0, inter.hand_size.1).ok()
    }
}

/// Ground-truth state of the object under a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLabel {
    pub object: usize,
    pub class: usize,
    pub state: u8,
    /// Index into `STATE_NAMES`.
    pub state_name: usize,
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub object: usize,
    pub class: usize,
    pub mask: Vec<bool>,
    pub grasps: Vec<usize>,
}

/// Static reference view of a video with interaction ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub video_id: String,
    pub participant: usize,
    pub image: Image,
    /// Union of contact-hand boxes over the video, row-major.
    pub roi_mask: Vec<bool>,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub videos: Vec<VideoScript>,
    index: HashMap<String, usize>,
}

fn video_rng(seed: u64, video: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (video as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

fn participant_rng(seed: u64, participant: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (participant as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.set_stream(7);
    rng
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Grasp point on an object box, as fractions of its width and height.
fn grasp_point(class: usize) -> (f32, f32) {
    match class {
        0 => (0.85, 0.6),
        1 => (0.5, 0.3),
        2 => (0.25, 0.65),
        3 => (0.7, 0.75),
        4 => (0.9, 0.5),
        _ => (0.5, 0.85),
    }
}

fn place_objects(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    let n = rng.random_range(cfg.objects_per_video.0..=cfg.objects_per_video.1);
    let (w, h) = (cfg.width as f32, cfg.height as f32);
    let margin = 6.0 + 2.0 * cfg.camera_jitter;
    let mut out: Vec<ObjectSpec> = Vec::new();
    let mut attempts = 0;
    while out.len() < n && attempts < 2000 {
        attempts += 1;
        let class = rng.random_range(0..cfg.n_object_classes);
        let size = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let aspect: f32 = rng.random_range(0.75..1.3);
        let (bw, bh) = (size * aspect.sqrt(), size / aspect.sqrt());
        let x1 = rng.random_range(margin..(w - margin - bw).max(margin + 1.0));
        let y_lo = h * 0.12;
        let y_hi = (h * 0.62 - bh).max(y_lo + 1.0);
        let y1 = rng.random_range(y_lo..y_hi);
        let Ok(bbox) = BBox::new(x1, y1, x1 + bw, y1 + bh) else {
            continue;
        };
        // keep a gap so hands reach each object unobstructed
        let grown = BBox::new(bbox.x1 - 10.0, bbox.y1 - 6.0, bbox.x2 + 10.0, bbox.y2 + 6.0).expect("valid");
        if out.iter().any(|o| o.bbox.intersection_area(&grown) > 0.0) {
            continue;
        }
        out.push(ObjectSpec {
            id: out.len(),
            class,
            color: hsv(rng.random(), rng.random_range(0.35..0.85), rng.random_range(0.45..0.9)),
            bbox,
            initial_state: rng.random_range(0..2),
            texture: Texture {
                cycles: rng.random_range(2.0..6.0),
                angle: rng.random_range(0.0..std::f32::consts::PI),
                contrast: rng.random_range(0.0..=cfg.texture_contrast.max(0.0)),
            },
        });
    }
    out
}

fn script_video(cfg: &WorldConfig, idx: usize) -> VideoScript {
    let mut rng = video_rng(cfg.seed, idx, 0);
    let participant = idx % cfg.n_participants;
    let mut prng = participant_rng(cfg.seed, participant);
    let background = Background {
        base: hsv(prng.random(), prng.random_range(0.05..0.3), prng.random_range(0.55..0.85)),
        tile: hsv(prng.random(), prng.random_range(0.0..0.2), prng.random_range(0.35..0.95)),
        period: prng.random_range(14.0..40.0),
        gradient: prng.random_range(-0.25..0.25),
    };
    let skin = hsv(prng.random_range(0.02..0.09), prng.random_range(0.25..0.6), prng.random_range(0.45..0.95));

    let objects = place_objects(cfg, &mut rng);
    let (w, h) = (cfg.width as f32, cfg.height as f32);
    let mut interactions = Vec::with_capacity(cfg.interactions_per_video);
    let mut t = rng.random_range(0..=cfg.gap_frames.1);
    for _ in 0..cfg.interactions_per_video {
        let object = rng.random_range(0..objects.len());
        let obj = &objects[object];
        let grasps = affordances(obj.class, cfg.grasp_classes);
        let grasp = grasps[rng.random_range(0..grasps.len())];
        let size = rng.random_range(cfg.hand_size.0..=cfg.hand_size.1);
        let aspect = 0.8 + 0.1 * (grasp % 4) as f32;
        let hand_size = (size * aspect.sqrt(), size / aspect.sqrt());
        let (gx, gy) = grasp_point(obj.class);
        let contact = (
            obj.bbox.x1 + gx * obj.bbox.width(),
            obj.bbox.y1 + gy * obj.bbox.height() + hand_size.1 * 0.25,
        );
        let side = if contact.0 < w / 2.0 { Side::Left } else { Side::Right };
        let below = h + hand_size.1 * 0.6;
        let entry = (contact.0 + rng.random_range(-25.0..25.0), below);
        let exit = (contact.0 + rng.random_range(-25.0..25.0), below);
        // lifting motion for the state-1 action, pressing motion otherwise
        let target_state = 1 - {
            let flips = interactions.iter().filter(|i: &&InteractionSpec| i.object == object).count();
            obj.initial_state ^ (flips % 2) as u8
        };
        let dir = if target_state == 1 { -1.0 } else { 1.0 };
        let drift = (rng.random_range(-0.3..0.3) * cfg.hand_speed, dir * cfg.hand_speed);
        let dwell = rng.random_range(cfg.dwell_frames.0..=cfg.dwell_frames.1);
        let start = t;
        let contact_start = start + cfg.approach_frames;
        let contact_end = contact_start + dwell;
        let end = contact_end + cfg.retract_frames;
        interactions.push(InteractionSpec {
            object,
            side,
            grasp,
            hand_size,
            start,
            contact_start,
            contact_end,
            end,
            entry,
            contact,
            exit,
            drift,
        });
        t = end + rng.random_range(cfg.gap_frames.0..=cfg.gap_frames.1);
    }
    let n_frames = t + 1;

    let phases: [f32; 4] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));
    let periods: [f32; 2] = std::array::from_fn(|_| rng.random_range(30.0..80.0));
    let a = cfg.camera_jitter;
    let camera = (0..n_frames)
        .map(|f| {
            let f = f as f32;
            let tau = std::f32::consts::TAU;
            (
                a * (tau * f / periods[0] + phases[0]).sin() * 0.7 + a * 0.3 * (tau * f / 7.0 + phases[2]).sin(),
                a * (tau * f / periods[1] + phases[1]).sin() * 0.7 + a * 0.3 * (tau * f / 9.0 + phases[3]).sin(),
            )
        })
        .collect();
    let spread = cfg.lighting_spread.max(0.0);
    let lighting = Lighting {
        gain: std::array::from_fn(|_| 1.0 + rng.random_range(-spread..=spread)),
        flicker: cfg.lighting_flicker.max(0.0),
        period: rng.random_range(40.0..120.0),
        phase: std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU)),
    };

    VideoScript {
        video_id: format!("P{participant:02}_{idx:03}"),
        participant,
        n_frames,
        background,
        skin,
        objects,
        interactions,
        camera,
        lighting,
    }
}

fn hash_noise(x: i32, y: i32, salt: u32) -> f32 {
    let mut h = (x as u32).wrapping_mul(0x27d4_eb2d) ^ (y as u32).wrapping_mul(0x1656_67b1) ^ salt;
    h ^= h >> 15;
    h = h.wrapping_mul(0x2c1b_3c6d);
    h ^= h >> 12;
    (h & 0xffff) as f32 / 65535.0 - 0.5
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

const DARK: [f32; 3] = [0.1, 0.08, 0.07];

/// Color of an object pixel at box-relative `(u, v)`, or `None` when the
/// shape does not cover it.
fn object_pixel(class: usize, state: u8, color: [f32; 3], tex: &Texture, u: f32, v: f32) -> Option<[f32; 3]> {
    let shade = |c: [f32; 3]| {
        let k = tex.factor(u, v);
        mix(c, [0.0; 3], 0.15 * u).map(|x| x * k)
    };
    match class {
        0 => {
            if v < 0.24 {
                if state == 0 {
                    if v > 0.2 {
                        Some(mix(color, DARK, 0.7))
                    } else {
                        Some(mix(color, [1.0; 3], 0.35))
                    }
                } else if (0.1..0.9).contains(&u) {
                    Some(mix(color, DARK, 0.6))
                } else {
                    Some(shade(color))
                }
            } else {
                Some(shade(color))
            }
        }
        1 => {
            let du = (u - 0.5).abs() / 0.5;
            let dv = (v - 0.5).abs() / 0.5;
            if du.powi(4) + dv.powi(4) > 1.0 {
                return None;
            }
            if v < 0.22 {
                if state == 0 {
                    Some(mix(color, [0.62, 0.62, 0.68], 0.5))
                } else if ((u - 0.5) / 0.36).powi(2) + ((v - 0.12) / 0.1).powi(2) <= 1.0 {
                    Some(mix(color, DARK, 0.6))
                } else {
                    Some(shade(color))
                }
            } else {
                Some(shade(color))
            }
        }
        2 => {
            let inside = if v < 0.3 { (0.38..0.62).contains(&u) } else { (0.15..0.85).contains(&u) };
            if !inside {
                return None;
            }
            if v >= 0.38 && v < 0.94 && (0.24..0.76).contains(&u) {
                if state == 1 && v >= 0.55 {
                    Some(mix(color, DARK, 0.45))
                } else {
                    Some(mix(color, [1.0; 3], 0.6))
                }
            } else {
                Some(shade(color))
            }
        }
        3 => {
            let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            if r2 > 0.25 {
                return None;
            }
            if state == 1 && u > 0.5 {
                let seeds = [(0.64, 0.38), (0.7, 0.6), (0.6, 0.55)];
                if seeds.iter().any(|&(a, b)| (u - a).powi(2) + (v - b).powi(2) < 0.0016) {
                    Some(mix(color, DARK, 0.6))
                } else {
                    Some(mix(color, [1.0; 3], 0.55))
                }
            } else if (u - 0.35).powi(2) + (v - 0.33).powi(2) < 0.006 {
                Some(mix(color, [1.0; 3], 0.5))
            } else {
                Some(shade(color))
            }
        }
        4 => {
            let body = (0.1..0.75).contains(&u);
            let ring = ((u - 0.78) / 0.17).powi(2) + ((v - 0.5) / 0.2).powi(2);
            let handle = u >= 0.75 && (0.45..=1.0).contains(&ring);
            if !body && !handle {
                return None;
            }
            if body && v < 0.26 && (0.16..0.69).contains(&u) {
                if state == 1 {
                    Some(mix(color, DARK, 0.5))
                } else {
                    Some(mix(color, [1.0; 3], 0.6))
                }
            } else {
                Some(shade(color))
            }
        }
        _ => {
            let du = (u - 0.5).abs() / 0.5;
            let dv = (v - 0.5).abs() / 0.5;
            if du.powi(6) + dv.powi(3) > 1.0 {
                return None;
            }
            if state == 1 && ((u - 0.33).abs() < 0.04 || (u - 0.66).abs() < 0.04) {
                return None;
            }
            if v < 0.16 {
                Some(mix(color, DARK, 0.35))
            } else {
                Some(shade(color))
            }
        }
    }
}

/// Hand pixel at box-relative `(u, v)`; finger layout depends on the grasp.
fn hand_pixel(grasp: usize, side: Side, skin: [f32; 3], u: f32, v: f32) -> Option<[f32; 3]> {
    let u = if side == Side::Left { 1.0 - u } else { u };
    let du = (u - 0.5).abs() / 0.5;
    let dv = (v - 0.5).abs() / 0.5;
    if du.powi(4) + dv.powi(4) > 1.0 {
        return None;
    }
    let fingers = 1 + grasp % 4;
    let along = if grasp / 4 % 2 == 0 { u } else { v };
    let across = if grasp / 4 % 2 == 0 { v } else { u };
    if across < 0.45 {
        let slot = (along * (2 * fingers + 1) as f32).floor() as usize;
        if slot % 2 == 1 {
            return Some(mix(skin, [0.0; 3], 0.35));
        }
    }
    if (u - 0.7).powi(2) + (v - 0.75).powi(2) < 0.01 {
        return Some(mix(skin, [1.0; 3], 0.3));
    }
    Some(skin)
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<World> {
        cfg.validate()?;
        let videos: Vec<VideoScript> = (0..cfg.n_videos).map(|i| script_video(cfg, i)).collect();
        let index = videos.iter().enumerate().map(|(i, v)| (v.video_id.clone(), i)).collect();
        Ok(World {
            cfg: cfg.clone(),
            videos,
            index,
        })
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoScript> {
        self.index.get(video_id).map(|&i| &self.videos[i])
    }

    pub fn interaction_count(&self) -> usize {
        self.videos.iter().map(|v| v.interactions.len()).sum()
    }

    fn render_into(&self, v: &VideoScript, f: u64, with_hands: bool, offset: (f32, f32)) -> Image {
        let cfg = &self.cfg;
        let (w, h) = (cfg.width, cfg.height);
        let mut img = Image::new(w, h);
        let bg = &v.background;
        let salt = v.participant as u32 * 7919 + 13;
        for y in 0..h {
            for x in 0..w {
                let wx = x as f32 + 0.5 - offset.0;
                let wy = y as f32 + 0.5 - offset.1;
                let grad = 1.0 + bg.gradient * (wy / h as f32 - 0.5);
                let on_line = wx.rem_euclid(bg.period) < 1.5 || wy.rem_euclid(bg.period) < 1.5;
                let base = if on_line { bg.tile } else { bg.base };
                let n = 0.05 * hash_noise(wx.floor() as i32, wy.floor() as i32, salt);
                img.put(x, y, base.map(|c| (c * grad + n).clamp(0.0, 1.0)));
            }
        }
        for (oi, obj) in v.objects.iter().enumerate() {
            let b = obj.bbox.translate(offset.0, offset.1);
            let state = v.object_state(oi, f);
            paint(&mut img, &b, |u, vv| object_pixel(obj.class, state, obj.color, &obj.texture, u, vv));
        }
        if with_hands {
            if let Some(inter) = v.active_interaction(f) {
                if let Some(hb) = v.hand_box_ref(inter, f) {
                    let hb = hb.translate(offset.0, offset.1);
                    paint(&mut img, &hb, |u, vv| hand_pixel(inter.grasp, inter.side, v.skin, u, vv));
                }
            }
        }
        let gain = v.lighting.at(f);
        let plane = w * h;
        for (i, p) in img.data.iter_mut().enumerate() {
            *p = (*p * gain[i / plane]).clamp(0.0, 1.0);
        }
        img
    }

    pub fn render_frame(&self, v: &VideoScript, f: u64) -> Image {
        self.render_into(v, f, true, v.offset(f))
    }

    /// Noise-free boxes and per-frame detections for one video.
    pub fn detections(&self, v: &VideoScript) -> Vec<FrameDetections> {
        let vi = self.index[&v.video_id];
        let cfg = &self.cfg;
        let mut score_rng = video_rng(cfg.seed, vi, 2);
        let mut noise_rng = video_rng(cfg.seed, vi, 1);
        let (w, h) = (cfg.width as f32, cfg.height as f32);
        let jitter = Normal::new(0.0f32, cfg.noise.box_sigma.max(0.0)).expect("sigma");
        let mut out = Vec::with_capacity(v.n_frames as usize);
        for f in 0..v.n_frames {
            let mut dets: Vec<Detection> = Vec::new();
            if let Some(inter) = v.active_interaction(f) {
                let hand_box = v
                    .hand_box_ref(inter, f)
                    .map(|b| {
                        let (ox, oy) = v.offset(f);
                        b.translate(ox, oy)
                    })
                    .and_then(|b| b.clamp_to(w, h));
                let contact = inter.in_contact(f);
                let hand_score = score_rng.random_range(0.85..0.99);
                let obj_score = score_rng.random_range(0.85..0.99);
                let grasps = affordances(v.objects[inter.object].class, cfg.grasp_classes);
                let grasp_scores: Vec<f32> = (0..cfg.grasp_classes)
                    .map(|g| {
                        if g == inter.grasp {
                            score_rng.random_range(0.6..0.95)
                        } else if grasps.contains(&g) {
                            score_rng.random_range(0.15..0.45)
                        } else {
                            score_rng.random_range(0.0..0.2)
                        }
                    })
                    .collect();
                if let Some(hb) = hand_box {
                    let mut hand = Detection::hand(hb, hand_score, contact, inter.side);
                    hand.grasp_scores = Some(grasp_scores);
                    if contact {
                        let ob = v.object_box(inter.object, f).clamp_to(w, h);
                        if let Some(ob) = ob {
                            dets.push(Detection::object(ob, obj_score));
                            hand.object_link = Some(0);
                        }
                    }
                    dets.push(hand);
                }
            }
            out.push(FrameDetections {
                video_id: v.video_id.clone(),
                frame_idx: f,
                timestamp_s: f as f64 / cfg.fps,
                image_size: (cfg.width as u32, cfg.height as u32),
                detections: dets,
            });
        }
        let noise = &cfg.noise;
        if noise.box_sigma > 0.0 || noise.miss_rate > 0.0 || noise.false_positive_rate > 0.0 {
            for frame in &mut out {
                apply_noise(frame, noise, &jitter, (w, h), &mut noise_rng);
            }
        }
        out
    }

    pub fn all_detections(&self) -> Vec<FrameDetections> {
        self.videos.iter().flat_map(|v| self.detections(v)).collect()
    }

    /// State of the object best overlapping `bbox` (IoU ≥ 0.3) at frame `f`.
    pub fn label_crop(&self, video_id: &str, f: u64, bbox: &BBox) -> Option<StateLabel> {
        let v = self.video(video_id)?;
        let (best, score) = (0..v.objects.len())
            .map(|o| (o, iou(&v.object_box(o, f), bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if score < 0.3 {
            return None;
        }
        let class = v.objects[best].class;
        let state = v.object_state(best, f);
        Some(StateLabel {
            object: best,
            class,
            state,
            state_name: class_states(class)[state as usize],
        })
    }

    /// Reference view without hands or camera motion, plus ground truth.
    pub fn scene(&self, v: &VideoScript) -> Scene {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let image = self.render_into(v, 0, false, (0.0, 0.0));
        let mut roi_mask = vec![false; w * h];
        for inter in &v.interactions {
            for f in inter.contact_start..inter.contact_end {
                if let Some(b) = v.hand_box_ref(inter, f) {
                    rasterize(&mut roi_mask, w, h, &b, |_, _| true);
                }
            }
        }
        let objects = v
            .objects
            .iter()
            .enumerate()
            .map(|(oi, obj)| {
                let mut mask = vec![false; w * h];
                let state = v.object_state(oi, 0);
                rasterize(&mut mask, w, h, &obj.bbox, |u, vv| {
                    object_pixel(obj.class, state, obj.color, &obj.texture, u, vv).is_some()
                });
                SceneObject {
                    object: oi,
                    class: obj.class,
                    mask,
                    grasps: affordances(obj.class, self.cfg.grasp_classes),
                }
            })
            .collect();
        Scene {
            video_id: v.video_id.clone(),
            participant: v.participant,
            image,
            roi_mask,
            objects,
        }
    }

    /// Writes frames, detections, ground truth and scenes under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        let cfg_path = dir.join("world.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&cfg_path, e))?;

        let det_path = dir.join("detections.jsonl");
        let file = fs::File::create(&det_path).map_err(|e| Error::io(&det_path, e))?;
        write_detections_jsonl(BufWriter::new(file), &self.all_detections())?;

        let gt_path = dir.join("gt.json");
        fs::write(&gt_path, serde_json::to_string(&self.videos)?).map_err(|e| Error::io(&gt_path, e))?;

        let scenes = dir.join("scenes");
        mkdir(&scenes)?;
        for v in &self.videos {
            let vdir = dir.join("frames").join(&v.video_id);
            mkdir(&vdir)?;
            for f in 0..v.n_frames {
                self.render_frame(v, f).save_png(&vdir.join(frame_file_name(f)))?;
            }
            let scene = self.scene(v);
            scene.image.save_png(&scenes.join(format!("{}.png", v.video_id)))?;
            let (w, h) = (self.cfg.width, self.cfg.height);
            let roi = Tensor::from_vec(&[h, w], scene.roi_mask.iter().map(|&b| b as u8 as f32).collect())?;
            write_array(scenes.join(format!("{}_roi.hpa", v.video_id)), &roi)?;
            let mut masks = Vec::with_capacity(scene.objects.len() * w * h);
            for o in &scene.objects {
                masks.extend(o.mask.iter().map(|&b| b as u8 as f32));
            }
            let masks = Tensor::from_vec(&[scene.objects.len(), h, w], masks)?;
            write_array(scenes.join(format!("{}_objects.hpa", v.video_id)), &masks)?;
        }
        Ok(())
    }
}

impl FrameSource for World {
    fn frame(&self, video_id: &str, frame_idx: u64) -> Result<Rc<Image>> {
        let v = self
            .video(video_id)
            .ok_or_else(|| Error::invalid(format!("unknown video {video_id}")))?;
        Ok(Rc::new(self.render_frame(v, frame_idx)))
    }
}

fn apply_noise(frame: &mut FrameDetections, noise: &NoiseModel, jitter: &Normal<f32>, size: (f32, f32), rng: &mut ChaCha8Rng) {
    let (w, h) = size;
    let n = frame.detections.len();
    let mut keep = vec![true; n];
    for k in keep.iter_mut() {
        *k = rng.random::<f32>() >= noise.miss_rate;
    }
    let mut remap = vec![None; n];
    let mut kept = Vec::new();
    for (i, det) in frame.detections.iter().enumerate() {
        let mut det = det.clone();
        if noise.box_sigma > 0.0 {
            let b = det.bbox;
            let moved = BBox::new(
                b.x1 + jitter.sample(rng),
                b.y1 + jitter.sample(rng),
                b.x2 + jitter.sample(rng),
                b.y2 + jitter.sample(rng),
            )
            .ok()
            .and_then(|m| m.clamp_to(w, h))
            .filter(|m| m.width() > 2.0 && m.height() > 2.0);
            if let Some(m) = moved {
                det.bbox = m;
            }
        }
        if keep[i] {
            remap[i] = Some(kept.len());
            kept.push(det);
        }
    }
    for det in &mut kept {
        det.object_link = det.object_link.and_then(|l| remap[l]);
    }
    if rng.random::<f32>() < noise.false_positive_rate {
        let bw = rng.random_range(16.0..40.0f32);
        let bh = rng.random_range(16.0..40.0f32);
        let x = rng.random_range(0.0..(w - bw));
        let y = rng.random_range(0.0..(h - bh));
        let score = rng.random_range(0.02..0.18);
        kept.push(Detection::object(BBox::new(x, y, x + bw, y + bh).expect("valid"), score));
    }
    frame.detections = kept;
}

fn paint(img: &mut Image, b: &BBox, mut f: impl FnMut(f32, f32) -> Option<[f32; 3]>) {
    let (w, h) = (img.width, img.height);
    let x0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.x2 - 0.5).ceil().max(0.0) as usize).min(w);
    let y1 = ((b.y2 - 0.5).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        let v = (y as f32 + 0.5 - b.y1) / b.height();
        for x in x0..x1 {
            let u = (x as f32 + 0.5 - b.x1) / b.width();
            if let Some(c) = f(u, v) {
                img.put(x, y, c);
            }
        }
    }
}

fn rasterize(mask: &mut [bool], w: usize, h: usize, b: &BBox, mut f: impl FnMut(f32, f32) -> bool) {
    let x0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.x2 - 0.5).ceil().max(0.0) as usize).min(w);
    let y1 = ((b.y2 - 0.5).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        let v = (y as f32 + 0.5 - b.y1) / b.height();
        for x in x0..x1 {
            let u = (x as f32 + 0.5 - b.x1) / b.width();
            if f(u, v) {
                mask[y * w + x] = true;
            }
        }
    }
}
