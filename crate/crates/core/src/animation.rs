//! Per-frame blend-weight tracks, keyframe interpolation, single-image ramps
//! and the animation export file.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterNet;
use crate::error::{check_len, Error, Result};
use crate::fitter::{fit_sequence, FitConfig, Pose};
use crate::hitl::PreferenceLedger;
use crate::io;
use crate::model::{ExpressionParams, IdentityParams, LandmarkSet2D, MorphableModel};
use crate::rig::{BlendWeights, CharacterRig};

pub const DEFAULT_KEYFRAME_INTERVAL: usize = 5;
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Adapter output for this frame.
    pub alpha_auto: BlendWeights,
    /// Value after interpolation, preferences and edits.
    pub alpha_current: BlendWeights,
    /// Absent on synthesised frames (ramp expansion).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<ExpressionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
}

impl Frame {
    pub fn from_alpha(alpha: BlendWeights) -> Self {
        Self {
            alpha_auto: alpha.clone(),
            alpha_current: alpha,
            gamma: None,
            pose: None,
        }
    }
}

/// Ordered frames with a keyframe set that always holds the first and last
/// frame, and the set of frames edited by hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrackData", into = "TrackData")]
pub struct FrameTrack {
    frames: Vec<Frame>,
    keyframes: BTreeSet<usize>,
    adjusted_frames: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct TrackData {
    frames: Vec<Frame>,
    keyframes: BTreeSet<usize>,
    #[serde(default)]
    adjusted_frames: BTreeSet<usize>,
}

impl TryFrom<TrackData> for FrameTrack {
    type Error = Error;
    fn try_from(d: TrackData) -> Result<Self> {
        let mut track = FrameTrack::new(d.frames)?;
        let n = track.len();
        for &i in d.keyframes.iter().chain(&d.adjusted_frames) {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "frame",
                    index: i,
                    len: n,
                });
            }
        }
        track.keyframes.extend(d.keyframes);
        track.adjusted_frames = d.adjusted_frames;
        Ok(track)
    }
}

impl From<FrameTrack> for TrackData {
    fn from(t: FrameTrack) -> Self {
        Self {
            frames: t.frames,
            keyframes: t.keyframes,
            adjusted_frames: t.adjusted_frames,
        }
    }
}

/// `{0, interval, 2·interval, …} ∪ {last}`.
pub fn sample_keyframes(frame_count: usize, interval: usize) -> Result<BTreeSet<usize>> {
    if interval == 0 {
        return Err(Error::Invalid(
            "keyframe interval must be at least 1".into(),
        ));
    }
    if frame_count == 0 {
        return Err(Error::InvalidSize("track has no frames".into()));
    }
    let mut set: BTreeSet<usize> = (0..frame_count).step_by(interval).collect();
    set.insert(frame_count - 1);
    Ok(set)
}

impl FrameTrack {
    /// Keyframes start as the first and last frame; no interpolation is run.
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidSize("track has no frames".into()));
        };
        let k = first.alpha_auto.len();
        for f in &frames {
            check_len("frame alpha_auto channels", k, f.alpha_auto.len())?;
            check_len("frame alpha_current channels", k, f.alpha_current.len())?;
        }
        let keyframes = BTreeSet::from([0, frames.len() - 1]);
        Ok(Self {
            frames,
            keyframes,
            adjusted_frames: BTreeSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn k(&self) -> usize {
        self.frames[0].alpha_auto.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Result<&Frame> {
        self.frames.get(index).ok_or(Error::IndexOutOfRange {
            what: "frame",
            index,
            len: self.frames.len(),
        })
    }

    pub fn keyframes(&self) -> &BTreeSet<usize> {
        &self.keyframes
    }

    pub fn adjusted_frames(&self) -> &BTreeSet<usize> {
        &self.adjusted_frames
    }

    pub(crate) fn check_frame(&self, index: usize) -> Result<()> {
        self.frame(index).map(|_| ())
    }

    pub(crate) fn check_channel(&self, channel: usize) -> Result<()> {
        if channel < self.k() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                what: "channel",
                index: channel,
                len: self.k(),
            })
        }
    }

    /// Replaces the keyframe set; the first and last frame are always kept.
    pub fn set_keyframes(&mut self, keyframes: BTreeSet<usize>) -> Result<()> {
        if let Some(&i) = keyframes.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                what: "keyframe",
                index: i,
                len: self.len(),
            });
        }
        self.keyframes = keyframes;
        self.keyframes.insert(0);
        self.keyframes.insert(self.len() - 1);
        Ok(())
    }

    /// Segmented linear interpolation between consecutive keyframes, using
    /// their current values. Keyframes themselves are left untouched.
    pub fn interpolate(&mut self) {
        let keys: Vec<usize> = self.keyframes.iter().copied().collect();
        for pair in keys.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a < 2 {
                continue;
            }
            let (head, tail) = self.frames.split_at_mut(b);
            let (left, inner) = head[a..].split_at_mut(1);
            let start = left[0].alpha_current.as_slice();
            let end = tail[0].alpha_current.as_slice();
            let span = (b - a) as f64;
            for (offset, frame) in inner.iter_mut().enumerate() {
                let t = (offset + 1) as f64 / span;
                let values = start
                    .iter()
                    .zip(end)
                    .map(|(&s, &e)| s + t * (e - s))
                    .collect();
                frame.alpha_current = BlendWeights::clamped(values);
            }
        }
    }

    /// Inserts a keyframe. A newly inserted frame snaps to its adapter output
    /// plus `offset` (the preference already applied to the track), then both
    /// neighbouring segments are re-interpolated. Returns whether the set
    /// changed.
    pub fn add_keyframe(&mut self, index: usize, offset: Option<&[f64]>) -> Result<bool> {
        self.check_frame(index)?;
        if self.keyframes.contains(&index) {
            return Ok(false);
        }
        if let Some(o) = offset {
            check_len("preference offset", self.k(), o.len())?;
        }
        let frame = &mut self.frames[index];
        let values = frame
            .alpha_auto
            .as_slice()
            .iter()
            .enumerate()
            .map(|(c, &v)| v + offset.map_or(0.0, |o| o[c]))
            .collect();
        frame.alpha_current = BlendWeights::clamped(values);
        self.keyframes.insert(index);
        self.interpolate();
        Ok(true)
    }

    /// Sets one cell, marks the frame adjusted and promotes it to a keyframe
    /// so later interpolation passes keep the edit. Returns the old value.
    pub(crate) fn edit(&mut self, frame: usize, channel: usize, value: f64) -> Result<f64> {
        self.check_frame(frame)?;
        self.check_channel(channel)?;
        let alpha = &mut self.frames[frame].alpha_current;
        let old = alpha.get(channel);
        alpha.set(channel, value)?;
        self.adjusted_frames.insert(frame);
        self.keyframes.insert(frame);
        self.interpolate();
        Ok(old)
    }

    /// Adds `delta[c]` to every frame of each touched channel, clamping.
    pub(crate) fn shift_channels(&mut self, delta: &[f64], touched: &[bool]) {
        for frame in &mut self.frames {
            let values = frame
                .alpha_current
                .as_slice()
                .iter()
                .enumerate()
                .map(|(c, &v)| if touched[c] { v + delta[c] } else { v })
                .collect();
            frame.alpha_current = BlendWeights::clamped(values);
        }
    }

    /// Expands a one-frame track into a zero → peak → zero ramp of
    /// `total_frames`, keeping the source pose on every frame and its γ on
    /// the peak frame.
    pub fn expand_ramp(&self, total_frames: usize) -> Result<Self> {
        if self.len() != 1 {
            return Err(Error::Invalid(format!(
                "ramp expansion needs a single-frame track, got {} frames",
                self.len()
            )));
        }
        let source = &self.frames[0];
        let mut ramp = single_image_ramp(&source.alpha_current, total_frames)?;
        let peak = total_frames / 2;
        for (i, f) in ramp.frames.iter_mut().enumerate() {
            f.pose = source.pose.clone();
            if i == peak {
                f.gamma = source.gamma.clone();
                f.alpha_auto = source.alpha_auto.clone();
            }
        }
        Ok(ramp)
    }
}

/// Fits every frame, runs the adapter and interpolates over the default
/// keyframe grid.
pub fn estimate_track(
    landmarks: &[LandmarkSet2D],
    model: &MorphableModel,
    beta: &IdentityParams,
    net: &AdapterNet,
    fit_config: &FitConfig,
) -> Result<FrameTrack> {
    if landmarks.is_empty() {
        return Err(Error::InvalidSize("landmark sequence has no frames".into()));
    }
    let fits = fit_sequence(model, beta, landmarks, fit_config)?;
    let frames = fits
        .into_iter()
        .map(|fit| {
            let alpha = BlendWeights::clamped(net.forward(&fit.gamma));
            Frame {
                alpha_auto: alpha.clone(),
                alpha_current: alpha,
                gamma: Some(fit.gamma),
                pose: Some(fit.pose),
            }
        })
        .collect();
    let mut track = FrameTrack::new(frames)?;
    let keys = sample_keyframes(track.len(), DEFAULT_KEYFRAME_INTERVAL)?;
    track.set_keyframes(keys)?;
    track.interpolate();
    Ok(track)
}

/// Zeros at both ends, `alpha_peak` at frame `total_frames / 2`, linear in
/// between.
pub fn single_image_ramp(alpha_peak: &BlendWeights, total_frames: usize) -> Result<FrameTrack> {
    if total_frames < 3 {
        return Err(Error::InvalidSize(format!(
            "a ramp needs at least 3 frames, got {total_frames}"
        )));
    }
    let k = alpha_peak.len();
    let peak = total_frames / 2;
    let frames = (0..total_frames)
        .map(|i| {
            Frame::from_alpha(if i == peak {
                alpha_peak.clone()
            } else {
                BlendWeights::zeros(k)
            })
        })
        .collect();
    let mut track = FrameTrack::new(frames)?;
    track.set_keyframes(BTreeSet::from([0, peak, total_frames - 1]))?;
    track.interpolate();
    for f in &mut track.frames {
        f.alpha_auto = f.alpha_current.clone();
    }
    Ok(track)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseExport {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 2],
    pub scale: f64,
}

impl From<&Pose> for PoseExport {
    fn from(p: &Pose) -> Self {
        let aa = p.axis_angle();
        let t = p.translation();
        Self {
            axis_angle: [aa.x, aa.y, aa.z],
            translation: [t.x, t.y],
            scale: p.scale(),
        }
    }
}

/// Export file. Channel `j` of every frame array is `channels[j]`, which
/// follows the rig's blendshape order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationExport {
    pub rig_name: String,
    pub fps: f64,
    pub channels: Vec<String>,
    pub frames: Vec<Vec<f64>>,
    pub poses: Vec<Option<PoseExport>>,
    pub keyframes: Vec<usize>,
    pub adjustments: PreferenceLedger,
}

pub fn export_track(
    track: &FrameTrack,
    rig: &CharacterRig,
    fps: f64,
    ledger: &PreferenceLedger,
) -> Result<AnimationExport> {
    check_len("rig channels", track.k(), rig.k())?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Invalid(format!("fps {fps} must be positive")));
    }
    Ok(AnimationExport {
        rig_name: rig.name.clone(),
        fps,
        channels: rig.channel_names(),
        frames: track
            .frames
            .iter()
            .map(|f| f.alpha_current.as_slice().to_vec())
            .collect(),
        poses: track
            .frames
            .iter()
            .map(|f| f.pose.as_ref().map(PoseExport::from))
            .collect(),
        keyframes: track.keyframes.iter().copied().collect(),
        adjustments: ledger.clone(),
    })
}

impl AnimationExport {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        io::to_json_bytes(self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }

    pub fn alpha_current(&self) -> Result<Vec<BlendWeights>> {
        self.frames
            .iter()
            .map(|f| BlendWeights::new(f.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track_of(values: &[f64]) -> FrameTrack {
        FrameTrack::new(
            values
                .iter()
                .map(|&v| Frame::from_alpha(BlendWeights::new(vec![v]).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    fn channel0(t: &FrameTrack) -> Vec<f64> {
        t.frames().iter().map(|f| f.alpha_current.get(0)).collect()
    }

    #[test]
    fn keyframe_grid() {
        assert_eq!(
            sample_keyframes(20, 5).unwrap(),
            BTreeSet::from([0, 5, 10, 15, 19])
        );
        assert_eq!(sample_keyframes(6, 5).unwrap(), BTreeSet::from([0, 5]));
        assert_eq!(
            sample_keyframes(4, 1).unwrap(),
            BTreeSet::from([0, 1, 2, 3])
        );
        assert_eq!(sample_keyframes(1, 5).unwrap(), BTreeSet::from([0]));
        assert!(sample_keyframes(4, 0).is_err());
    }

    #[test]
    fn midpoint_and_constant_segments() {
        let mut values = vec![0.0; 11];
        values[10] = 1.0;
        let mut t = track_of(&values);
        t.interpolate();
        assert_eq!(channel0(&t)[5], 0.5);

        let mut t = track_of(&[0.3, 0.9, 0.1, 0.3]);
        t.interpolate();
        assert_eq!(channel0(&t), vec![0.3; 4]);
    }

    #[test]
    fn interval_one_is_identity() {
        let vals = [0.1, 0.7, 0.2, 0.9, 0.4];
        let mut t = track_of(&vals);
        t.set_keyframes(sample_keyframes(5, 1).unwrap()).unwrap();
        t.interpolate();
        assert_eq!(channel0(&t), vals);
    }

    #[test]
    fn ramp_table() {
        let t = single_image_ramp(&BlendWeights::new(vec![1.0]).unwrap(), 5).unwrap();
        assert_eq!(channel0(&t), vec![0.0, 0.5, 1.0, 0.5, 0.0]);
        let t = single_image_ramp(&BlendWeights::new(vec![0.8]).unwrap(), 4).unwrap();
        assert_eq!(channel0(&t), vec![0.0, 0.4, 0.8, 0.0]);
        assert!(single_image_ramp(&BlendWeights::zeros(1), 2).is_err());
    }

    #[test]
    fn add_keyframe_is_idempotent_and_snaps() {
        let mut t = track_of(&[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        t.interpolate();
        assert!(!t.add_keyframe(0, None).unwrap());
        assert!(!t.add_keyframe(5, None).unwrap());
        // auto values were a straight line, so snapping is invisible
        assert!(t.add_keyframe(3, None).unwrap());
        assert_eq!(t.keyframes(), &BTreeSet::from([0, 3, 5]));
        assert!(t.add_keyframe(6, None).is_err());
    }

    #[test]
    fn ramp_expansion_keeps_source_data() {
        let mut src = track_of(&[0.6]);
        src.frames[0].pose = Some(Pose::identity());
        let r = src.expand_ramp(7).unwrap();
        assert_eq!(r.len(), 7);
        assert_eq!(r.frame(3).unwrap().alpha_current.get(0), 0.6);
        assert!(r.frames().iter().all(|f| f.pose.is_some()));
        assert!(track_of(&[0.1, 0.2]).expand_ramp(5).is_err());
    }

    #[test]
    fn track_serde_validates() {
        let t = track_of(&[0.1, 0.2, 0.3]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<FrameTrack>(&json).unwrap(), t);
        let bad = json.replace("\"keyframes\":[0,2]", "\"keyframes\":[0,9]");
        assert!(serde_json::from_str::<FrameTrack>(&bad).is_err());
    }
}
