//! End-to-end glue over the synthetic world: probe datasets, participant
//! splits, and held-out scene evaluation of context prediction.

use serde::{Deserialize, Serialize};

use crate::acp::{infer_heatmaps, AcpConfig, ContextPredictor, HeatmapSet};
use crate::detections::FrameDetections;
use crate::error::{Error, Result};
use crate::eval::{gao_map, gao_scores, linear_probe, roi_ap, slack_for_width, GaoReport, ProbeConfig, ProbeReport, ProbeTask, SlackSide};
use crate::frames::FrameSource;
use crate::image_ops::Normalization;
use crate::models::ObjectModel;
use crate::sampling::CropRef;
use crate::synthworld::{class_states, Scene, StateLabel, World, STATE_NAMES};
use crate::tracker::{Track, TrackKind};
use crate::training::extract_features;

/// Participants with the highest ids are held out; at least one on each side.
pub fn held_out_participants(n_participants: usize, fraction: f64) -> Vec<usize> {
    let n = ((n_participants as f64 * fraction).round() as usize).clamp(1, n_participants.saturating_sub(1).max(1));
    (n_participants - n..n_participants).collect()
}

fn participant_of(world: &World, video_id: &str) -> Result<usize> {
    world
        .video(video_id)
        .map(|v| v.participant)
        .ok_or_else(|| Error::invalid(format!("unknown video {video_id}")))
}

#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub crops: Vec<CropRef>,
    pub labels: Vec<StateLabel>,
    pub participants: Vec<usize>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// One binary task per state, over crops whose class has that state.
    pub fn tasks(&self) -> Vec<ProbeTask> {
        STATE_NAMES
            .iter()
            .enumerate()
            .map(|(s, name)| ProbeTask {
                name: name.to_string(),
                labels: self
                    .labels
                    .iter()
                    .map(|l| class_states(l.class).contains(&s).then_some(l.state_name == s))
                    .collect(),
            })
            .collect()
    }

    pub fn train_mask(&self, held_out: &[usize]) -> Vec<bool> {
        self.participants.iter().map(|p| !held_out.contains(p)).collect()
    }
}

/// Labelled object crops taken every `stride` entries along object tracks.
pub fn probe_dataset(world: &World, tracks: &[Track], stride: usize) -> Result<ProbeDataset> {
    let stride = stride.max(1);
    let mut out = ProbeDataset {
        crops: Vec::new(),
        labels: Vec::new(),
        participants: Vec::new(),
    };
    for t in tracks.iter().filter(|t| t.kind == TrackKind::Object) {
        let participant = participant_of(world, &t.video_id)?;
        for e in t.entries.iter().step_by(stride) {
            if let Some(label) = world.label_crop(&t.video_id, e.frame_idx, &e.bbox) {
                out.crops.push(CropRef {
                    video_id: t.video_id.clone(),
                    frame_idx: e.frame_idx,
                    bbox: e.bbox,
                });
                out.labels.push(label);
                out.participants.push(participant);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate("no labelled crops on the given tracks".into()));
    }
    Ok(out)
}

/// Linear probe on frozen trunk features of `model`.
pub fn probe_model(
    model: &mut ObjectModel,
    frames: &dyn FrameSource,
    data: &ProbeDataset,
    held_out: &[usize],
    norm: &Normalization,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let features = extract_features(model, frames, &data.crops, norm, 64)?;
    linear_probe(&features, &data.tasks(), &data.train_mask(held_out), cfg)
}

/// Detections of the given participants only.
pub fn detections_for(world: &World, participants: &[usize]) -> Vec<FrameDetections> {
    world
        .all_detections()
        .into_iter()
        .filter(|f| world.video(&f.video_id).is_some_and(|v| participants.contains(&v.participant)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRoi {
    pub video_id: String,
    pub ap_slack0: f64,
    pub ap_slack1: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiReport {
    pub ap_slack0: f64,
    pub ap_slack1: f64,
    pub chance: f64,
    pub scenes: Vec<SceneRoi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceReport {
    pub roi: RoiReport,
    pub gao: GaoReport,
}

/// Held-out scenes of a world.
pub fn held_out_scenes(world: &World, held_out: &[usize]) -> Vec<Scene> {
    world
        .videos
        .iter()
        .filter(|v| held_out.contains(&v.participant))
        .map(|v| world.scene(v))
        .filter(|s| s.roi_mask.iter().any(|&m| m))
        .collect()
}

/// ROI AP per scene at 0% and 1% slack, averaged over scenes. Items are
/// `(video id, heatmap, mask)` of size `w × h`.
pub fn evaluate_roi(items: &[(&str, &[f32], &[bool])], w: usize, h: usize, side: SlackSide) -> Result<RoiReport> {
    if items.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let slack = slack_for_width(w, 0.01);
    let scenes = items
        .iter()
        .map(|&(id, heat, mask)| {
            let s0 = roi_ap(heat, mask, w, h, 0.0, side)?;
            let s1 = roi_ap(heat, mask, w, h, slack, side)?;
            Ok(SceneRoi {
                video_id: id.to_string(),
                ap_slack0: s0.ap,
                ap_slack1: s1.ap,
                chance: s0.chance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scenes.len() as f64;
    let mean = |f: fn(&SceneRoi) -> f64| scenes.iter().map(f).sum::<f64>() / n;
    Ok(RoiReport {
        ap_slack0: mean(|r| r.ap_slack0),
        ap_slack1: mean(|r| r.ap_slack1),
        chance: mean(|r| r.chance),
        scenes,
    })
}

/// Mask-averaged grasp scores and afforded-grasp labels for every object of
/// a scene; `planes` holds `grasp_classes` heatmaps back to back.
pub fn scene_grasp_scores(scene: &Scene, planes: &[f32], grasp_classes: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let mut scores = Vec::with_capacity(scene.objects.len());
    let mut labels = Vec::with_capacity(scene.objects.len());
    for obj in &scene.objects {
        scores.push(gao_scores(planes, &obj.mask)?);
        labels.push((0..grasp_classes).map(|g| obj.grasps.contains(&g)).collect());
    }
    Ok((scores, labels))
}

/// ROI and GAO evaluation of one heatmap set per scene.
pub fn evaluate_affordances(
    scenes: &[Scene],
    heatmaps: &[HeatmapSet],
    grasp_classes: usize,
    side: SlackSide,
) -> Result<AffordanceReport> {
    if scenes.is_empty() || scenes.len() != heatmaps.len() {
        return Err(Error::invalid("need one heatmap set per scene"));
    }
    let (w, h) = (scenes[0].image.width, scenes[0].image.height);
    let items: Vec<(&str, &[f32], &[bool])> = scenes
        .iter()
        .zip(heatmaps)
        .map(|(s, hm)| (s.video_id.as_str(), hm.roi.data.as_slice(), s.roi_mask.as_slice()))
        .collect();
    let roi = evaluate_roi(&items, w, h, side)?;
    let mut obj_scores = Vec::new();
    let mut obj_labels = Vec::new();
    for (scene, hm) in scenes.iter().zip(heatmaps) {
        let planes: Vec<f32> = hm.grasps.iter().flat_map(|g| g.data.iter().copied()).collect();
        let (s, l) = scene_grasp_scores(scene, &planes, grasp_classes)?;
        obj_scores.extend(s);
        obj_labels.extend(l);
    }
    Ok(AffordanceReport {
        roi,
        gao: gao_map(&obj_scores, &obj_labels)?,
    })
}

/// Runs inference on every scene and evaluates it.
pub fn evaluate_acp(
    model: &mut dyn ContextPredictor,
    scenes: &[Scene],
    norm: &Normalization,
    cfg: &AcpConfig,
) -> Result<(AffordanceReport, Vec<HeatmapSet>)> {
    let heatmaps = scenes
        .iter()
        .map(|s| infer_heatmaps(&s.image, model, norm, cfg))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_affordances(scenes, &heatmaps, model.grasp_classes(), SlackSide::Both)?;
    Ok((report, heatmaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acp::Heatmap;
    use crate::synthworld::{NoiseModel, WorldConfig};
    use crate::tracker::{build_tracks, TrackerParams, TrackingMode};

    fn world() -> World {
        World::generate(&WorldConfig {
            n_videos: 6,
            n_participants: 3,
            interactions_per_video: 4,
            noise: NoiseModel::none(),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn held_out_split() {
        assert_eq!(held_out_participants(6, 1.0 / 3.0), vec![4, 5]);
        assert_eq!(held_out_participants(2, 0.1), vec![1]);
        assert_eq!(held_out_participants(2, 0.9), vec![1]);
    }

    #[test]
    fn probe_dataset_labels_follow_classes() {
        let w = world();
        let tracks = build_tracks(&w.all_detections(), &TrackerParams::default(), &TrackingMode::HandContext, 0).unwrap();
        let data = probe_dataset(&w, &tracks, 2).unwrap();
        assert!(data.len() > 20);
        let tasks = data.tasks();
        assert_eq!(tasks.len(), 6);
        for (i, l) in data.labels.iter().enumerate() {
            let defined: Vec<usize> = (0..6).filter(|&s| tasks[s].labels[i].is_some()).collect();
            assert_eq!(defined, class_states(l.class).to_vec());
            assert_eq!(tasks[l.state_name].labels[i], Some(true));
        }
        let train = data.train_mask(&[2]);
        assert!(train.iter().any(|&t| t) && train.iter().any(|&t| !t));
    }

    #[test]
    fn oracle_heatmaps_score_perfectly() {
        let w = world();
        let scenes = held_out_scenes(&w, &[2]);
        assert!(!scenes.is_empty());
        let g = w.cfg.grasp_classes;
        let sets: Vec<HeatmapSet> = scenes
            .iter()
            .map(|s| {
                let (wd, ht) = (s.image.width, s.image.height);
                let mut roi = Heatmap::zeros(wd, ht);
                roi.data = s.roi_mask.iter().map(|&m| m as u8 as f32).collect();
                let grasps = (0..g)
                    .map(|k| {
                        let mut hm = Heatmap::zeros(wd, ht);
                        for o in &s.objects {
                            if o.grasps.contains(&k) {
                                for (d, &m) in hm.data.iter_mut().zip(&o.mask) {
                                    if m {
                                        *d = 1.0;
                                    }
                                }
                            }
                        }
                        hm
                    })
                    .collect();
                HeatmapSet { roi, grasps }
            })
            .collect();
        let r = evaluate_affordances(&scenes, &sets, g, SlackSide::Both).unwrap();
        assert!((r.roi.ap_slack0 - 1.0).abs() < 1e-12);
        assert!(r.roi.chance < 0.5);
        assert!(r.gao.map > 0.99, "{}", r.gao.map);
    }
}
