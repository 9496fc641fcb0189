//! Per-frame anomaly scores.
//!
//! Detection: the error between the first predicted frame and its observed
//! ground truth. Anticipation: backward re-predictions are compared against
//! observed past frames, and the maximum error over the anticipation window
//! is the score. Errors are "maximum local errors": the pixel error map is
//! averaged within overlapping patches and the largest patch mean wins, so
//! a small anomalous region is not washed out by a global average.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_scoring_window, Clip, SceneImage, VideoFrames, WindowParams};
use crate::model::{LatentMode, Model};
use crate::raster::Raster;
use crate::{Error, Result};

/// Per-frame scores for one video at one anticipation horizon (`alpha` is
/// in frames; 0 is detection). `values[k]` scores frame `start_offset + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    pub alpha: usize,
    pub start_offset: usize,
    pub values: Vec<f64>,
}

/// Which scorer produces anticipation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    /// Backward re-prediction errors on observed frames (the full method).
    ForwardBackward,
    /// Ablation: predicted future frames compared against the current frame.
    ForwardOnly,
}

impl ScoreMode {
    pub fn dir_name(self) -> &'static str {
        match self {
            ScoreMode::ForwardBackward => "fb",
            ScoreMode::ForwardOnly => "fonly",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Anticipation horizons, in strides ahead (1..=forward horizon).
    pub alpha_steps: Vec<usize>,
    /// Patch side for the maximum local error.
    pub patch: usize,
    /// Patch grid stride.
    pub patch_stride: usize,
    pub lambda_l1: f64,
    pub mode: ScoreMode,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            alpha_steps: (1..=6).collect(),
            patch: 16,
            patch_stride: 8,
            lambda_l1: 1.0,
            mode: ScoreMode::ForwardBackward,
        }
    }
}

/// Channel-averaged per-pixel error map: (f - f_hat)^2 + lambda * |f - f_hat|.
pub fn pixel_error_map(f: &Raster, f_hat: &Raster, lambda_l1: f64) -> Result<Array2<f64>> {
    if f.dim() != f_hat.dim() {
        return Err(Error::Shape(format!(
            "error map: {:?} vs {:?}",
            f.dim(),
            f_hat.dim()
        )));
    }
    let (c, h, w) = f.dim();
    let mut map = Array2::zeros((h, w));
    for ci in 0..c {
        let fa = f.index_axis(Axis(0), ci);
        let fb = f_hat.index_axis(Axis(0), ci);
        for y in 0..h {
            for x in 0..w {
                let d = fa[[y, x]] - fb[[y, x]];
                map[[y, x]] += d * d + lambda_l1 * d.abs();
            }
        }
    }
    map.mapv_inplace(|v| v / c as f64);
    Ok(map)
}

/// Maximum over a sliding patch grid of the mean patch error. The grid
/// always includes the last row/column so patches cover the whole crop.
pub fn local_error(
    f: &Raster,
    f_hat: &Raster,
    patch: usize,
    stride: usize,
    lambda_l1: f64,
) -> Result<f64> {
    let (_, h, w) = f.dim();
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Scoring(format!(
            "patch {patch} does not fit a {h}x{w} crop"
        )));
    }
    let stride = stride.max(1);
    let map = pixel_error_map(f, f_hat, lambda_l1)?;
    let positions = |limit: usize| {
        let mut v: Vec<usize> = (0..=limit).step_by(stride).collect();
        if *v.last().unwrap() != limit {
            v.push(limit);
        }
        v
    };
    let mut best = 0.0f64;
    let inv = 1.0 / (patch * patch) as f64;
    for &py in &positions(h - patch) {
        for &px in &positions(w - patch) {
            let mut acc = 0.0;
            for y in py..py + patch {
                for x in px..px + patch {
                    acc += map[[y, x]];
                }
            }
            best = best.max(acc * inv);
        }
    }
    Ok(best)
}

/// Frame score for detection: maximum over the per-object errors, zero when
/// no object is present.
pub fn vad_score(object_errors: &[f64]) -> f64 {
    object_errors.iter().copied().fold(0.0, f64::max)
}

/// Anticipation score at `alpha_steps` strides: per object, the maximum
/// backward error over steps 1..=alpha_steps; then the maximum over objects.
/// `horizon` is the number of predictable future steps.
pub fn vaa_score(
    backward_errors_per_object: &[Vec<f64>],
    alpha_steps: usize,
    horizon: usize,
) -> Result<f64> {
    if alpha_steps == 0 || alpha_steps > horizon {
        return Err(Error::Scoring(format!(
            "anticipation of {alpha_steps} steps exceeds the forward horizon {horizon}"
        )));
    }
    let mut best = 0.0f64;
    for errs in backward_errors_per_object {
        for &e in errs.iter().take(alpha_steps) {
            best = best.max(e);
        }
    }
    Ok(best)
}

/// Score one video with a trained model. Returns one series per horizon:
/// key 0 is detection, key `a * stride` is anticipation `a` strides ahead.
/// Frames before the observation warm-up are not scored; frames whose
/// anticipation window runs past the video end are dropped per horizon.
pub fn score_video(
    clip: &Clip,
    frames: &VideoFrames,
    scene: &SceneImage,
    mean_color: [f64; 3],
    model: &Model,
    wp: &WindowParams,
    sc: &ScoreConfig,
) -> Result<BTreeMap<usize, ScoreSeries>> {
    let horizon = model.cfg.forward_out - 1;
    let max_step = sc.alpha_steps.iter().copied().max().unwrap_or(0);
    if max_step > horizon {
        return Err(Error::Scoring(format!(
            "anticipation of {max_step} steps exceeds the forward horizon {horizon}"
        )));
    }
    let t_len = clip.frame_count;
    let warmup = wp.warmup();
    let series_for = |alpha_frames: usize, values: Vec<f64>, start: usize| ScoreSeries {
        video_id: clip.video_id.clone(),
        alpha: alpha_frames,
        start_offset: start,
        values,
    };
    let mut out = BTreeMap::new();
    if t_len <= warmup {
        log::warn!(
            "video `{}` is shorter than the observation warm-up ({t_len} <= {warmup}); no scores",
            clip.video_id
        );
        out.insert(0, series_for(0, Vec::new(), t_len));
        for &a in &sc.alpha_steps {
            out.insert(a * wp.stride, series_for(a * wp.stride, Vec::new(), t_len));
        }
        return Ok(out);
    }

    // Per frame: detection score and the per-step anticipation maxima.
    let per_frame: Vec<(f64, Vec<f64>)> = (warmup..t_len)
        .into_par_iter()
        .map(|t| frame_scores(clip, frames, scene, mean_color, model, wp, sc, max_step, t))
        .collect::<Result<Vec<_>>>()?;

    let vad: Vec<f64> = per_frame.iter().map(|(v, _)| *v).collect();
    out.insert(0, series_for(0, vad, warmup));
    for &a in &sc.alpha_steps {
        let alpha_frames = a * wp.stride;
        let last_anchor = t_len.saturating_sub(1 + alpha_frames);
        let values: Vec<f64> = if last_anchor < warmup {
            Vec::new()
        } else {
            per_frame[..=last_anchor - warmup]
                .iter()
                .map(|(_, steps)| steps[..a].iter().copied().fold(0.0, f64::max))
                .collect()
        };
        out.insert(alpha_frames, series_for(alpha_frames, values, warmup));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn frame_scores(
    clip: &Clip,
    frames: &VideoFrames,
    scene: &SceneImage,
    mean_color: [f64; 3],
    model: &Model,
    wp: &WindowParams,
    sc: &ScoreConfig,
    max_step: usize,
    t: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut object_vad = Vec::new();
    let mut object_steps: Vec<Vec<f64>> = Vec::new();
    let track_ids = clip.tracks.track_ids();
    for track_id in track_ids {
        let Ok(window) =
            extract_scoring_window(clip, frames, scene, mean_color, track_id, t, wp)
        else {
            // incomplete track over the observation window: not scoreable
            continue;
        };
        let emb = model.encode_scene(std::slice::from_ref(&window.scene_crop))?;
        let bundle = model.forward_predict(std::slice::from_ref(&window), &emb, LatentMode::Mean)?;
        let bundle = &bundle[0];
        let current = &window.targets[0];
        object_vad.push(local_error(
            current,
            &bundle.forward[0],
            sc.patch,
            sc.patch_stride,
            sc.lambda_l1,
        )?);
        if max_step == 0 {
            continue;
        }
        let step_errors = match sc.mode {
            ScoreMode::ForwardOnly => {
                let mut errs = Vec::with_capacity(max_step);
                for i in 1..=max_step {
                    errs.push(local_error(
                        current,
                        &bundle.forward[i],
                        sc.patch,
                        sc.patch_stride,
                        sc.lambda_l1,
                    )?);
                }
                errs
            }
            ScoreMode::ForwardBackward => {
                let mut errs = Vec::with_capacity(max_step);
                for i in 1..=max_step {
                    let mut future: Vec<Raster> = Vec::with_capacity(i);
                    for j in (1..=i).rev() {
                        future.push(bundle.forward[j].clone());
                    }
                    let mut observed: Vec<Raster> = Vec::with_capacity(wp.input_frames - i);
                    observed.push(current.clone());
                    for k in (i + 1..wp.input_frames).rev() {
                        observed.push(window.inputs[k].clone());
                    }
                    let (pred, _latents) =
                        model.backward_predict(&future, &observed, &emb, LatentMode::Mean)?;
                    errs.push(local_error(
                        &window.inputs[i],
                        &pred,
                        sc.patch,
                        sc.patch_stride,
                        sc.lambda_l1,
                    )?);
                }
                errs
            }
        };
        object_steps.push(step_errors);
    }
    let vad = vad_score(&object_vad);
    let steps: Vec<f64> = (1..=max_step)
        .map(|a| {
            if object_steps.is_empty() {
                0.0
            } else {
                vaa_score(&object_steps, a, max_step).unwrap_or(0.0)
            }
        })
        .collect();
    Ok((vad, steps))
}
