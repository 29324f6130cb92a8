//! Per-frame hand / object detections and their JSONL encoding.
//!
//! One JSON object per line:
//!
//! ```text
//! {"video_id": "v0", "frame_idx": 3, "t": 0.3, "w": 256, "h": 144,
//!  "dets": [{"kind": "hand", "box": [x1, y1, x2, y2], "score": 0.9,
//!            "contact": true, "side": "left", "grasp": [..], "obj_link": 1}]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetKind {
    Hand,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub kind: DetKind,
    pub score: f32,
    pub contact: Option<bool>,
    pub side: Option<Side>,
    pub grasp_scores: Option<Vec<f32>>,
    /// Index (within the same frame) of the object this hand holds.
    pub object_link: Option<usize>,
}

impl Detection {
    pub fn object(bbox: BBox, score: f32) -> Self {
        Detection {
            bbox,
            kind: DetKind::Object,
            score,
            contact: None,
            side: None,
            grasp_scores: None,
            object_link: None,
        }
    }

    pub fn hand(bbox: BBox, score: f32, contact: bool, side: Side) -> Self {
        Detection {
            bbox,
            kind: DetKind::Hand,
            score,
            contact: Some(contact),
            side: Some(side),
            grasp_scores: None,
            object_link: None,
        }
    }

    pub fn is_hand(&self) -> bool {
        self.kind == DetKind::Hand
    }

    pub fn in_contact(&self) -> bool {
        self.contact == Some(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub video_id: String,
    pub frame_idx: u64,
    pub timestamp_s: f64,
    pub image_size: (u32, u32),
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn hands(&self) -> impl Iterator<Item = (usize, &Detection)> {
        self.detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.kind == DetKind::Hand)
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, &Detection)> {
        self.detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.kind == DetKind::Object)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Expected grasp-score vector length; mismatching vectors are dropped.
    pub grasp_classes: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedDetections {
    /// Grouped by video id (lexicographic), sorted by frame index.
    pub frames: Vec<FrameDetections>,
    /// Optional fields or detections that were dropped as malformed.
    pub warnings: usize,
}

impl ParsedDetections {
    pub fn detection_count(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }

    /// Splits the flat frame list into per-video slices.
    pub fn by_video(&self) -> Vec<&[FrameDetections]> {
        group_by_video(&self.frames)
    }
}

pub fn group_by_video(frames: &[FrameDetections]) -> Vec<&[FrameDetections]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].video_id != frames[start].video_id {
            if i > start {
                out.push(&frames[start..i]);
            }
            start = i;
        }
    }
    out
}

pub fn parse_detections_jsonl<R: BufRead>(
    reader: R,
    opts: ParseOptions,
) -> Result<ParsedDetections> {
    let mut videos: BTreeMap<String, Vec<FrameDetections>> = BTreeMap::new();
    let mut warnings = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let frame = parse_frame(&value, line_no, opts, &mut warnings)?;
        let stream = videos.entry(frame.video_id.clone()).or_default();
        if let Some(prev) = stream.last() {
            if frame.frame_idx <= prev.frame_idx {
                return Err(Error::NonMonotoneFrames {
                    video_id: frame.video_id,
                    previous: prev.frame_idx,
                    frame_idx: frame.frame_idx,
                });
            }
        }
        stream.push(frame);
    }
    if warnings > 0 {
        log::warn!("dropped {warnings} malformed detection fields");
    }
    Ok(ParsedDetections {
        frames: videos.into_values().flatten().collect(),
        warnings,
    })
}

fn parse_frame(
    value: &Value,
    line: usize,
    opts: ParseOptions,
    warnings: &mut usize,
) -> Result<FrameDetections> {
    let err = |msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| err("expected an object"))?;
    let video_id = obj
        .get("video_id")
        .and_then(Value::as_str)
        .ok_or_else(|| err("missing string video_id"))?
        .to_string();
    let frame_idx = obj
        .get("frame_idx")
        .and_then(Value::as_u64)
        .ok_or_else(|| err("missing non-negative integer frame_idx"))?;
    let timestamp_s = obj
        .get("t")
        .and_then(Value::as_f64)
        .ok_or_else(|| err("missing number t"))?;
    let w = obj
        .get("w")
        .and_then(Value::as_u64)
        .ok_or_else(|| err("missing integer w"))?;
    let h = obj
        .get("h")
        .and_then(Value::as_u64)
        .ok_or_else(|| err("missing integer h"))?;
    let raw_dets = obj
        .get("dets")
        .and_then(Value::as_array)
        .ok_or_else(|| err("missing array dets"))?;

    // Raw index -> kept index, for remapping obj_link.
    let mut remap = vec![None; raw_dets.len()];
    let mut kept: Vec<(Detection, Option<u64>)> = Vec::new();
    for (raw_idx, d) in raw_dets.iter().enumerate() {
        match parse_detection(d, w as f32, h as f32, opts, warnings) {
            Some(det) => {
                remap[raw_idx] = Some(kept.len());
                kept.push(det);
            }
            None => *warnings += 1,
        }
    }
    let mut detections = Vec::with_capacity(kept.len());
    for (mut det, raw_link) in kept {
        if let Some(raw) = raw_link {
            let target = remap.get(raw as usize).copied().flatten();
            match target {
                Some(t) if raw_dets[raw as usize].get("kind").and_then(Value::as_str) == Some("object") => {
                    det.object_link = Some(t)
                }
                _ => *warnings += 1,
            }
        }
        detections.push(det);
    }
    Ok(FrameDetections {
        video_id,
        frame_idx,
        timestamp_s,
        image_size: (w as u32, h as u32),
        detections,
    })
}

/// Returns the detection and its raw (un-remapped) object link, or `None`
/// when a required field is malformed or the box lies fully outside.
fn parse_detection(
    d: &Value,
    width: f32,
    height: f32,
    opts: ParseOptions,
    warnings: &mut usize,
) -> Option<(Detection, Option<u64>)> {
    let kind = match d.get("kind")?.as_str()? {
        "hand" => DetKind::Hand,
        "object" => DetKind::Object,
        _ => return None,
    };
    let coords = d.get("box")?.as_array()?;
    if coords.len() != 4 {
        return None;
    }
    let mut c = [0f32; 4];
    for (slot, v) in c.iter_mut().zip(coords) {
        *slot = v.as_f64()? as f32;
    }
    let bbox = BBox::new(c[0], c[1], c[2], c[3])
        .ok()?
        .clamp_to(width, height)?;
    let score = d.get("score")?.as_f64()? as f32;
    if !(0.0..=1.0).contains(&score) {
        return None;
    }
    let is_hand = kind == DetKind::Hand;
    let mut opt_field = |key: &str| -> Option<&Value> {
        let v = d.get(key)?;
        if v.is_null() {
            return None;
        }
        if !is_hand {
            *warnings += 1;
            return None;
        }
        Some(v)
    };
    let contact_value = opt_field("contact");
    let side_value = opt_field("side");
    let grasp_value = opt_field("grasp");
    let link_value = opt_field("obj_link");

    let contact = contact_value.and_then(|v| match v.as_bool() {
        Some(c) => Some(c),
        None => {
            *warnings += 1;
            None
        }
    });
    let side = side_value.and_then(|v| match v.as_str() {
        Some("left") => Some(Side::Left),
        Some("right") => Some(Side::Right),
        _ => {
            *warnings += 1;
            None
        }
    });
    let grasp_scores = grasp_value.and_then(|v| {
        let parsed: Option<Vec<f32>> = v
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_f64().map(|f| f as f32)).collect());
        match parsed {
            Some(g)
                if g.iter().all(|x| x.is_finite())
                    && opts.grasp_classes.is_none_or(|n| n == g.len()) =>
            {
                Some(g)
            }
            _ => {
                *warnings += 1;
                None
            }
        }
    });
    let link = link_value.and_then(|v| match v.as_u64() {
        Some(l) => Some(l),
        None => {
            *warnings += 1;
            None
        }
    });
    Some((
        Detection {
            bbox,
            kind,
            score,
            contact,
            side,
            grasp_scores,
            object_link: None,
        },
        link,
    ))
}

pub fn frame_to_json(frame: &FrameDetections) -> Value {
    let dets: Vec<Value> = frame
        .detections
        .iter()
        .map(|d| {
            let mut m = Map::new();
            m.insert("kind".into(), json!(d.kind));
            m.insert("box".into(), json!(d.bbox.to_array()));
            m.insert("score".into(), json!(d.score));
            if let Some(c) = d.contact {
                m.insert("contact".into(), json!(c));
            }
            if let Some(s) = d.side {
                m.insert("side".into(), json!(s));
            }
            if let Some(g) = &d.grasp_scores {
                m.insert("grasp".into(), json!(g));
            }
            if let Some(l) = d.object_link {
                m.insert("obj_link".into(), json!(l));
            }
            Value::Object(m)
        })
        .collect();
    json!({
        "video_id": frame.video_id,
        "frame_idx": frame.frame_idx,
        "t": frame.timestamp_s,
        "w": frame.image_size.0,
        "h": frame.image_size.1,
        "dets": dets,
    })
}

pub fn write_detections_jsonl<W: Write>(mut out: W, frames: &[FrameDetections]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, &frame_to_json(f))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ParsedDetections> {
        parse_detections_jsonl(
            s.as_bytes(),
            ParseOptions {
                grasp_classes: Some(8),
            },
        )
    }

    #[test]
    fn empty_stream() {
        let p = parse("").unwrap();
        assert!(p.frames.is_empty());
        assert_eq!(p.warnings, 0);
    }

    #[test]
    fn single_hand_with_grasp() {
        let line = r#"{"video_id":"v","frame_idx":0,"t":0.0,"w":256,"h":144,"dets":[{"kind":"hand","box":[10,10,40,40],"score":0.9,"contact":true,"side":"left","grasp":[0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8]}]}"#;
        let p = parse(line).unwrap();
        assert_eq!(p.frames.len(), 1);
        let d = &p.frames[0].detections[0];
        assert_eq!(d.kind, DetKind::Hand);
        assert_eq!(d.contact, Some(true));
        assert_eq!(d.side, Some(Side::Left));
        assert_eq!(d.grasp_scores.as_ref().unwrap().len(), 8);
    }

    #[test]
    fn interleaved_videos_grouped_and_counted() {
        let mut lines = Vec::new();
        let mut naive_count = 0;
        for f in 0..5u64 {
            for v in ["b", "a"] {
                let n = (f as usize % 3) + 1;
                naive_count += n;
                let dets: Vec<String> = (0..n)
                    .map(|k| {
                        format!(
                            r#"{{"kind":"object","box":[{},{},{},{}],"score":0.5}}"#,
                            k * 10,
                            k * 10,
                            k * 10 + 5,
                            k * 10 + 5
                        )
                    })
                    .collect();
                lines.push(format!(
                    r#"{{"video_id":"{v}","frame_idx":{f},"t":{},"w":100,"h":100,"dets":[{}]}}"#,
                    f as f64 * 0.1,
                    dets.join(",")
                ));
            }
        }
        let p = parse(&lines.join("\n")).unwrap();
        assert_eq!(p.detection_count(), naive_count);
        let groups = p.by_video();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0][0].video_id, "a");
        for g in groups {
            assert!(g.windows(2).all(|w| w[0].frame_idx < w[1].frame_idx));
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let s = "{\"video_id\":\"v\",\"frame_idx\":0,\"t\":0,\"w\":10,\"h\":10,\"dets\":[]}\n{oops";
        match parse(s) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_frames_rejected() {
        let s = r#"{"video_id":"v","frame_idx":3,"t":0,"w":10,"h":10,"dets":[]}
{"video_id":"v","frame_idx":3,"t":0,"w":10,"h":10,"dets":[]}"#;
        assert!(matches!(parse(s), Err(Error::NonMonotoneFrames { .. })));
    }

    #[test]
    fn clamps_and_drops_boxes_and_bad_optionals() {
        let s = r#"{"video_id":"v","frame_idx":0,"t":0,"w":100,"h":100,"dets":[
            {"kind":"object","box":[-10,-10,-1,-1],"score":0.5},
            {"kind":"object","box":[90,90,120,130],"score":0.5},
            {"kind":"hand","box":[0,0,10,10],"score":0.5,"grasp":[1,2],"obj_link":1,"side":"middle"},
            {"kind":"object","box":[0,0,10,10],"score":0.5,"contact":true}
        ]}"#
        .replace('\n', " ");
        let p = parse(&s).unwrap();
        let dets = &p.frames[0].detections;
        assert_eq!(dets.len(), 3);
        assert_eq!(dets[0].bbox.to_array(), [90.0, 90.0, 100.0, 100.0]);
        // obj_link pointed at raw index 1, which is kept index 0
        assert_eq!(dets[1].object_link, Some(0));
        assert!(dets[1].grasp_scores.is_none());
        assert!(dets[1].side.is_none());
        assert!(dets[2].contact.is_none());
        // dropped box, bad grasp length, bad side, contact on an object
        assert_eq!(p.warnings, 4);
    }

    #[test]
    fn parse_serialize_is_a_fixed_point() {
        let s = r#"{"video_id":"v","frame_idx":0,"t":0.1,"w":100,"h":100,"dets":[{"kind":"object","box":[-5,3.3,20.7,40],"score":0.33333},{"kind":"hand","box":[1,2,3,4],"score":1.0,"contact":false,"side":"right","obj_link":0,"grasp":[0,0,0,0,0,0,0,0.123456789]}]}"#;
        let first = parse(s).unwrap();
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &first.frames).unwrap();
        let second = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(first.frames, second.frames);
        let mut buf2 = Vec::new();
        write_detections_jsonl(&mut buf2, &second.frames).unwrap();
        assert_eq!(buf, buf2);
    }
}
