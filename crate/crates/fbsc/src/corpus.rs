//! Dataset ingestion and object-centric clip windows.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   train/<video_id>/frames/%06d.png
//!   train/<video_id>/tracks.csv          frame_index,track_id,x1,y1,x2,y2
//!   test/<video_id>/frames/%06d.png
//!   test/<video_id>/labels.txt           one 0/1 per line (test split only)
//!   test/<video_id>/tracks.csv
//!   scenes/<scene_id>.png
//!   scene_map.csv                        video_id,scene_id
//! ```
//!
//! Training clips carry no labels; a `labels.txt` under `train/` is ignored
//! with a warning so the training path can never consume supervision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::raster::{crop_resize, CropRect, Raster, RgbFrame};
use crate::{fsaudit, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One object box on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackBox {
    pub frame_index: usize,
    pub track_id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// All object boxes of one video, indexed by frame and by track.
#[derive(Debug, Clone, Default)]
pub struct TrackTable {
    entries: Vec<TrackBox>,
    by_key: BTreeMap<(usize, u32), usize>,
    by_frame: BTreeMap<usize, Vec<usize>>,
}

impl TrackTable {
    pub fn from_entries(entries: Vec<TrackBox>) -> Result<TrackTable> {
        let mut table = TrackTable::default();
        for e in entries {
            table.push(e)?;
        }
        Ok(table)
    }

    fn push(&mut self, e: TrackBox) -> Result<()> {
        if e.x1 >= e.x2 || e.y1 >= e.y2 {
            return Err(Error::Dataset(format!(
                "degenerate box for track {} at frame {}",
                e.track_id, e.frame_index
            )));
        }
        let key = (e.frame_index, e.track_id);
        if self.by_key.contains_key(&key) {
            return Err(Error::Dataset(format!(
                "duplicate (frame {}, track {}) entry",
                e.frame_index, e.track_id
            )));
        }
        self.entries.push(e);
        self.by_key.insert(key, self.entries.len() - 1);
        self.by_frame
            .entry(e.frame_index)
            .or_default()
            .push(self.entries.len() - 1);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrackBox] {
        &self.entries
    }

    pub fn get(&self, frame_index: usize, track_id: u32) -> Option<&TrackBox> {
        self.by_key.get(&(frame_index, track_id)).map(|&i| &self.entries[i])
    }

    pub fn boxes_at(&self, frame_index: usize) -> impl Iterator<Item = &TrackBox> {
        self.by_frame
            .get(&frame_index)
            .into_iter()
            .flatten()
            .map(move |&i| &self.entries[i])
    }

    /// Sorted, de-duplicated track ids.
    pub fn track_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.by_key.keys().map(|&(_, t)| t).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-video metadata; frame pixels load separately via [`load_frames`].
#[derive(Debug, Clone)]
pub struct Clip {
    pub video_id: String,
    pub scene_id: String,
    pub frame_count: usize,
    /// Frame labels (1 = anomalous). Present only for the test split.
    pub labels: Option<Vec<u8>>,
    pub tracks: TrackTable,
    pub frames_dir: PathBuf,
}

/// A scene background image (objects absent).
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub scene_id: String,
    pub image: RgbFrame,
}

/// A loaded split: clips sorted by video id plus the scene images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    pub clips: Vec<Clip>,
    pub scenes: BTreeMap<String, SceneImage>,
    /// Per-channel mean over all scene images; used as the mask fill color.
    pub mean_color: [f64; 3],
}

impl Dataset {
    pub fn scene(&self, scene_id: &str) -> Result<&SceneImage> {
        self.scenes
            .get(scene_id)
            .ok_or_else(|| Error::UnknownScene(scene_id.to_string()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fsaudit::record(path);
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_scene_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == "video_id,scene_id" {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let (Some(v), Some(s)) = (parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!(
                "scene_map.csv line {}: expected `video_id,scene_id`",
                i + 1
            )));
        };
        map.insert(v.trim().to_string(), s.trim().to_string());
    }
    Ok(map)
}

fn parse_tracks(path: &Path) -> Result<TrackTable> {
    let text = read_text(path)?;
    let mut table = TrackTable::default();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if i == 0 {
            if line.trim() != "frame_index,track_id,x1,y1,x2,y2" {
                return Err(Error::TrackRow {
                    path: path.to_path_buf(),
                    row,
                    msg: "missing or malformed header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::TrackRow {
                path: path.to_path_buf(),
                row,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_u = |s: &str, what: &str| -> Result<u64> {
            s.trim().parse().map_err(|_| Error::TrackRow {
                path: path.to_path_buf(),
                row,
                msg: format!("bad {what}: `{s}`"),
            })
        };
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| Error::TrackRow {
                path: path.to_path_buf(),
                row,
                msg: format!("bad {what}: `{s}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::TrackRow {
                    path: path.to_path_buf(),
                    row,
                    msg: format!("non-finite {what}"),
                });
            }
            Ok(v)
        };
        let entry = TrackBox {
            frame_index: parse_u(fields[0], "frame_index")? as usize,
            track_id: parse_u(fields[1], "track_id")? as u32,
            x1: parse_f(fields[2], "x1")?,
            y1: parse_f(fields[3], "y1")?,
            x2: parse_f(fields[4], "x2")?,
            y2: parse_f(fields[5], "y2")?,
        };
        table.push(entry).map_err(|e| Error::TrackRow {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
    }
    Ok(table)
}

fn parse_labels(path: &Path, frame_count: usize) -> Result<Vec<u8>> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "0" => labels.push(0),
            "1" => labels.push(1),
            "" => continue,
            other => {
                return Err(Error::Dataset(format!(
                    "{} line {}: labels must be 0 or 1, got `{other}`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if labels.len() != frame_count {
        return Err(Error::Dataset(format!(
            "{}: {} labels for {} frames",
            path.display(),
            labels.len(),
            frame_count
        )));
    }
    Ok(labels)
}

/// Load one split of a dataset root. Test clips must have labels; labels in
/// the train split are ignored (with a warning), never read.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let scene_map = parse_scene_map(&root.join("scene_map.csv"))?;

    let mut scenes = BTreeMap::new();
    let scenes_dir = root.join("scenes");
    let mut scene_files: Vec<PathBuf> = fs::read_dir(&scenes_dir)
        .map_err(|e| Error::io(&scenes_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    scene_files.sort();
    for path in scene_files {
        let scene_id = path
            .file_stem()
            .expect("png file has a stem")
            .to_string_lossy()
            .to_string();
        let image = RgbFrame::load_png(&path)?;
        scenes.insert(scene_id.clone(), SceneImage { scene_id, image });
    }
    if scenes.is_empty() {
        return Err(Error::Dataset(format!(
            "no scene images under {}",
            scenes_dir.display()
        )));
    }
    let mut mean = [0.0f64; 3];
    for s in scenes.values() {
        let m = s.image.mean_color();
        for c in 0..3 {
            mean[c] += m[c];
        }
    }
    for c in mean.iter_mut() {
        *c /= scenes.len() as f64;
    }

    let split_dir = root.join(split.dir_name());
    let mut video_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
        .map_err(|e| Error::io(&split_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    video_dirs.sort();

    let mut clips = Vec::new();
    for vdir in video_dirs {
        let video_id = vdir
            .file_name()
            .expect("video dir has a name")
            .to_string_lossy()
            .to_string();
        let scene_id = scene_map
            .get(&video_id)
            .ok_or_else(|| Error::Dataset(format!("video `{video_id}` missing from scene_map.csv")))?
            .clone();
        if !scenes.contains_key(&scene_id) {
            return Err(Error::UnknownScene(scene_id));
        }
        let frames_dir = vdir.join("frames");
        let frame_count = fs::read_dir(&frames_dir)
            .map_err(|e| Error::io(&frames_dir, e))?
            .filter(|e| {
                e.as_ref()
                    .is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png"))
            })
            .count();
        if frame_count == 0 {
            return Err(Error::Dataset(format!(
                "video `{video_id}` has no frames"
            )));
        }
        let tracks = parse_tracks(&vdir.join("tracks.csv"))?;
        let labels_path = vdir.join("labels.txt");
        let labels = match split {
            Split::Test => {
                if !labels_path.exists() {
                    return Err(Error::Dataset(format!(
                        "test video `{video_id}` has no labels.txt"
                    )));
                }
                Some(parse_labels(&labels_path, frame_count)?)
            }
            Split::Train => {
                if labels_path.exists() {
                    warn!(
                        "ignoring {}: training clips are unlabeled by contract",
                        labels_path.display()
                    );
                }
                None
            }
        };
        clips.push(Clip {
            video_id,
            scene_id,
            frame_count,
            labels,
            tracks,
            frames_dir,
        });
    }
    clips.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        clips,
        scenes,
        mean_color: mean,
    })
}

/// All frames of one clip, decoded once and kept as 8-bit RGB.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub frames: Vec<RgbFrame>,
}

impl VideoFrames {
    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }
}

pub fn frame_path(frames_dir: &Path, index: usize) -> PathBuf {
    frames_dir.join(format!("{index:06}.png"))
}

pub fn load_frames(clip: &Clip) -> Result<VideoFrames> {
    let mut frames = Vec::with_capacity(clip.frame_count);
    for i in 0..clip.frame_count {
        let frame = RgbFrame::load_png(&frame_path(&clip.frames_dir, i))?;
        if let Some(first) = frames.first() {
            let first: &RgbFrame = first;
            if first.width != frame.width || first.height != frame.height {
                return Err(Error::Dataset(format!(
                    "video `{}` mixes frame resolutions",
                    clip.video_id
                )));
            }
        }
        frames.push(frame);
    }
    Ok(VideoFrames { frames })
}

/// Geometry of the windows served to the predictor.
#[derive(Debug, Clone, Copy)]
pub struct WindowParams {
    /// Observed crops per window.
    pub input_frames: usize,
    /// Predicted crops per window (training targets).
    pub horizon: usize,
    /// Frame step between consecutive crops.
    pub stride: usize,
    /// Output crop resolution.
    pub crop_size: usize,
    /// Square crop side = margin * max(box width, box height).
    pub margin: f64,
}

impl WindowParams {
    /// First frame index that can anchor a window (observation warm-up).
    pub fn warmup(&self) -> usize {
        self.input_frames * self.stride
    }
}

/// Why a window could not be extracted at a given (track, frame).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WindowSkip {
    /// The track has no box at this sampled frame index.
    MissingBox { frame_index: usize },
    /// The window would reach outside the video.
    OutOfRange,
}

/// One model sample: the observed crops, the target crops, and the
/// co-located scene crop. All crops are registered to the track's own box
/// at each sampled frame.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub track_id: u32,
    /// Anchor frame: the first predicted frame.
    pub t: usize,
    pub stride: usize,
    /// `input_frames` crops at t - n*stride .. t - stride.
    pub inputs: Vec<Raster>,
    /// Target crops at t, t + stride, ... (empty outside training).
    pub targets: Vec<Raster>,
    /// Background crop co-located with the box at the anchor frame,
    /// with all object boxes masked out.
    pub scene_crop: Raster,
    /// Crop rectangle at the anchor frame.
    pub anchor_rect: CropRect,
}

fn crop_at(
    frames: &VideoFrames,
    tracks: &TrackTable,
    track_id: u32,
    frame_index: usize,
    params: &WindowParams,
) -> std::result::Result<(Raster, CropRect), WindowSkip> {
    if frame_index >= frames.frames.len() {
        return Err(WindowSkip::OutOfRange);
    }
    let b = tracks
        .get(frame_index, track_id)
        .ok_or(WindowSkip::MissingBox { frame_index })?;
    let rect = CropRect::around_box(
        b.x1,
        b.y1,
        b.x2,
        b.y2,
        params.margin,
        frames.width(),
        frames.height(),
    );
    Ok((
        crop_resize(&frames.frames[frame_index], rect, params.crop_size),
        rect,
    ))
}

/// Training window anchored at `t`: inputs cover `[t - n*s, t - s]`, targets
/// cover `[t, t + (horizon-1)*s]`, all strided by `s`.
pub fn extract_window(
    clip: &Clip,
    frames: &VideoFrames,
    scene: &SceneImage,
    mean_color: [f64; 3],
    track_id: u32,
    t: usize,
    params: &WindowParams,
) -> std::result::Result<WindowSample, WindowSkip> {
    extract_window_impl(clip, frames, scene, mean_color, track_id, t, params, params.horizon)
}

/// Scoring window anchored at `t`: same inputs, but the only ground-truth
/// crop taken is the current frame `t` (future boxes are unknowable).
pub fn extract_scoring_window(
    clip: &Clip,
    frames: &VideoFrames,
    scene: &SceneImage,
    mean_color: [f64; 3],
    track_id: u32,
    t: usize,
    params: &WindowParams,
) -> std::result::Result<WindowSample, WindowSkip> {
    extract_window_impl(clip, frames, scene, mean_color, track_id, t, params, 1)
}

#[allow(clippy::too_many_arguments)]
fn extract_window_impl(
    clip: &Clip,
    frames: &VideoFrames,
    scene: &SceneImage,
    mean_color: [f64; 3],
    track_id: u32,
    t: usize,
    params: &WindowParams,
    n_targets: usize,
) -> std::result::Result<WindowSample, WindowSkip> {
    let n = params.input_frames;
    let s = params.stride;
    if t < n * s {
        return Err(WindowSkip::OutOfRange);
    }
    let mut inputs = Vec::with_capacity(n);
    for j in 0..n {
        let fi = t - (n - j) * s;
        let (crop, _) = crop_at(frames, &clip.tracks, track_id, fi, params)?;
        inputs.push(crop);
    }
    let mut targets = Vec::with_capacity(n_targets);
    let mut anchor_rect = None;
    for j in 0..n_targets {
        let fi = t + j * s;
        let (crop, rect) = crop_at(frames, &clip.tracks, track_id, fi, params)?;
        if j == 0 {
            anchor_rect = Some(rect);
        }
        targets.push(crop);
    }
    let anchor_rect = anchor_rect.expect("at least one target");
    let scene_crop = scene_crop(
        scene,
        clip.tracks.boxes_at(t),
        anchor_rect,
        mean_color,
        params.crop_size,
    );
    Ok(WindowSample {
        track_id,
        t,
        stride: s,
        inputs,
        targets,
        scene_crop,
        anchor_rect,
    })
}

/// Background crop co-located with an object crop. Every track box that
/// intersects the crop is filled with the dataset mean color first, so only
/// background pixels remain.
pub fn scene_crop<'a>(
    scene: &SceneImage,
    boxes: impl Iterator<Item = &'a TrackBox>,
    rect: CropRect,
    mean_color: [f64; 3],
    crop_size: usize,
) -> Raster {
    let fill = crate::raster::quantize_color(mean_color);
    let mut masked = scene.image.clone();
    for b in boxes {
        if rect.box_overlap(b.x1, b.y1, b.x2, b.y2) > 0.0 {
            masked.fill_box(b.x1, b.y1, b.x2, b.y2, fill);
        }
    }
    crop_resize(&masked, rect, crop_size)
}

/// Anchor frames for which a full training window exists for `track_id`.
pub fn trainable_anchors(clip: &Clip, track_id: u32, params: &WindowParams) -> Vec<usize> {
    let n = params.input_frames;
    let s = params.stride;
    let h = params.horizon;
    let mut out = Vec::new();
    if clip.frame_count < (n + h - 1) * s + 1 {
        return out;
    }
    for t in n * s..=clip.frame_count - 1 - (h - 1) * s {
        let covered = (0..n)
            .map(|j| t - (n - j) * s)
            .chain((0..h).map(|j| t + j * s))
            .all(|fi| clip.tracks.get(fi, track_id).is_some());
        if covered {
            out.push(t);
        }
    }
    out
}
