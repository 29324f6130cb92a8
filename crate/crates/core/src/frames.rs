//! Access to video frames by `(video_id, frame_idx)`.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::error::Result;
use crate::image_ops::Image;

pub trait FrameSource {
    fn frame(&self, video_id: &str, frame_idx: u64) -> Result<Rc<Image>>;
}

pub fn frame_file_name(frame_idx: u64) -> String {
    format!("{frame_idx:06}.png")
}

/// Frames stored as `root/<video_id>/<frame_idx:06>.png`, with a small
/// most-recently-used cache.
#[derive(Debug)]
pub struct FrameDir {
    root: PathBuf,
    capacity: usize,
    cache: RefCell<(HashMap<(String, u64), Rc<Image>>, VecDeque<(String, u64)>)>,
}

impl FrameDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FrameDir {
            root: root.into(),
            capacity: 256,
            cache: RefCell::new((HashMap::new(), VecDeque::new())),
        }
    }

    pub fn path_of(&self, video_id: &str, frame_idx: u64) -> PathBuf {
        self.root.join(video_id).join(frame_file_name(frame_idx))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FrameSource for FrameDir {
    fn frame(&self, video_id: &str, frame_idx: u64) -> Result<Rc<Image>> {
        let key = (video_id.to_string(), frame_idx);
        let mut cache = self.cache.borrow_mut();
        if let Some(img) = cache.0.get(&key) {
            return Ok(img.clone());
        }
        let img = Rc::new(Image::load(&self.path_of(video_id, frame_idx))?);
        if cache.1.len() >= self.capacity {
            if let Some(old) = cache.1.pop_front() {
                cache.0.remove(&old);
            }
        }
        cache.0.insert(key.clone(), img.clone());
        cache.1.push_back(key);
        Ok(img)
    }
}
