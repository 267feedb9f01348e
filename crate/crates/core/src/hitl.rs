//! Human-in-the-loop editing: adjustment records, the averaged per-channel
//! preference, and finetuning data assembled from edited frames.

use serde::{Deserialize, Serialize};

use crate::adapter::{continue_training, evaluate_mae, AdapterNet, TrainConfig};
use crate::animation::FrameTrack;
use crate::datagen::SamplePair;
use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub frame_index: usize,
    pub channel_index: usize,
    /// Value of the cell just before this adjustment.
    pub auto_value: f64,
    pub adjusted_value: f64,
    /// Milliseconds since the Unix epoch, supplied by the caller.
    pub timestamp_ms: u64,
    /// Already folded into an applied preference.
    #[serde(default)]
    pub applied: bool,
}

impl PreferenceRecord {
    pub fn difference(&self) -> f64 {
        self.adjusted_value - self.auto_value
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLedger {
    pub records: Vec<PreferenceRecord>,
    /// True once every record has been applied.
    pub applied: bool,
    /// Sum of the preferences applied so far, per channel.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub active_offset: Vec<f64>,
}

impl PreferenceLedger {
    pub fn pending(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter().filter(|r| !r.applied)
    }

    /// Applied preference per channel, if any has been applied.
    pub fn offset(&self) -> Option<&[f64]> {
        (!self.active_offset.is_empty()).then_some(self.active_offset.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDelta {
    pub delta: Vec<f64>,
    pub touched: Vec<bool>,
}

impl PreferenceDelta {
    pub fn is_empty(&self) -> bool {
        !self.touched.iter().any(|&t| t)
    }
}

/// Sets one cell of the track and appends the matching record. The record's
/// `auto_value` is the cell's value at the moment of the edit.
pub fn record_adjustment(
    ledger: &mut PreferenceLedger,
    track: &mut FrameTrack,
    frame: usize,
    channel: usize,
    value: f64,
    timestamp_ms: u64,
) -> Result<PreferenceRecord> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::ValueOutOfRange {
            what: "value",
            value,
        });
    }
    let auto_value = track.edit(frame, channel, value)?;
    let record = PreferenceRecord {
        frame_index: frame,
        channel_index: channel,
        auto_value,
        adjusted_value: value,
        timestamp_ms,
        applied: false,
    };
    ledger.records.push(record.clone());
    ledger.applied = false;
    Ok(record)
}

/// Per-channel mean difference over the pending records.
pub fn compute_preference(ledger: &PreferenceLedger, k: usize) -> PreferenceDelta {
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for r in ledger.pending().filter(|r| r.channel_index < k) {
        sum[r.channel_index] += r.difference();
        count[r.channel_index] += 1;
    }
    PreferenceDelta {
        delta: sum
            .iter()
            .zip(&count)
            .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect(),
        touched: count.iter().map(|&n| n > 0).collect(),
    }
}

/// Shifts every frame of each touched channel by the pending preference and
/// clamps to [0, 1]; interpolation is not re-run. Pending records become
/// applied, so a second call without new records changes nothing.
pub fn apply_preference(
    ledger: &mut PreferenceLedger,
    track: &mut FrameTrack,
) -> Result<PreferenceDelta> {
    let k = track.k();
    let pref = compute_preference(ledger, k);
    check_len("preference channels", k, pref.delta.len())?;
    if !pref.is_empty() {
        track.shift_channels(&pref.delta, &pref.touched);
        if ledger.active_offset.len() != k {
            ledger.active_offset = vec![0.0; k];
        }
        for c in 0..k {
            if pref.touched[c] {
                ledger.active_offset[c] += pref.delta[c];
            }
        }
    }
    for r in &mut ledger.records {
        r.applied = true;
    }
    ledger.applied = true;
    Ok(pref)
}

/// Drops every record. Values already written to the track stay.
pub fn clear_preference(ledger: &mut PreferenceLedger) {
    ledger.records.clear();
    ledger.applied = false;
}

/// One pair per adjusted frame, `(γ, alpha_current)`, across all tracks in
/// order. Repeated edits of a frame yield a single pair with its final state.
pub fn assemble_finetune_set(tracks: &[&FrameTrack]) -> Result<Vec<SamplePair>> {
    let mut pairs = Vec::new();
    for (t, track) in tracks.iter().enumerate() {
        for &i in track.adjusted_frames() {
            let frame = track.frame(i)?;
            let gamma = frame.gamma.clone().ok_or_else(|| {
                Error::Invalid(format!(
                    "track {t}: adjusted frame {i} has no expression parameters"
                ))
            })?;
            pairs.push(SamplePair {
                gamma,
                alpha: frame.alpha_current.clone(),
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Multiplier on the base learning rate.
    pub lr_scale: f64,
    pub max_epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_scale: 0.1,
            max_epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pairs: usize,
    /// Epochs actually run; zero when the targets were already fitted.
    pub epochs: usize,
    pub learning_rate: f64,
    pub mae_before: f64,
    pub mae_after: f64,
}

/// Continues training from the current weights at a reduced learning rate.
pub fn finetune(
    net: &AdapterNet,
    pairs: &[SamplePair],
    tconfig: &TrainConfig,
    fconfig: &FinetuneConfig,
) -> Result<(AdapterNet, FinetuneReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidSize(
            "finetuning needs at least one adjusted frame".into(),
        ));
    }
    let epochs = tconfig.epochs.min(fconfig.max_epochs);
    let reduced = TrainConfig {
        learning_rate: tconfig.learning_rate * fconfig.lr_scale,
        ..tconfig.clone()
    };
    let mae_before = evaluate_mae(net, pairs)?;
    let (tuned, losses) = continue_training(net, pairs, &reduced, epochs)?;
    let mae_after = evaluate_mae(&tuned, pairs)?;
    Ok((
        tuned,
        FinetuneReport {
            pairs: pairs.len(),
            epochs: losses.len(),
            learning_rate: reduced.learning_rate,
            mae_before,
            mae_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::animation::Frame;
    use crate::rig::BlendWeights;

    fn flat_track(frames: usize, k: usize, v: f64) -> FrameTrack {
        let mut t = FrameTrack::new(
            (0..frames)
                .map(|_| Frame::from_alpha(BlendWeights::new(vec![v; k]).unwrap()))
                .collect(),
        )
        .unwrap();
        t.interpolate();
        t
    }

    #[test]
    fn single_adjustment() {
        let mut ledger = PreferenceLedger::default();
        let mut track = flat_track(20, 5, 0.2);
        let r = record_adjustment(&mut ledger, &mut track, 10, 3, 0.6, 1).unwrap();
        assert!((r.difference() - 0.4).abs() < 1e-15);
        assert_eq!(ledger.records.len(), 1);
        assert!(track.adjusted_frames().contains(&10));
        assert!(track.keyframes().contains(&10));
        assert_eq!(track.frame(10).unwrap().alpha_current.get(3), 0.6);
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let mut ledger = PreferenceLedger::default();
        let mut track = flat_track(3, 2, 0.2);
        let err = record_adjustment(&mut ledger, &mut track, 0, 0, 1.5, 0).unwrap_err();
        assert!(err.to_string().contains("[0, 1]"));
        assert!(record_adjustment(&mut ledger, &mut track, 3, 0, 0.5, 0).is_err());
        assert!(record_adjustment(&mut ledger, &mut track, 0, 2, 0.5, 0).is_err());
        assert!(ledger.records.is_empty());
    }

    #[test]
    fn empty_ledger_has_no_preference() {
        let p = compute_preference(&PreferenceLedger::default(), 4);
        assert_eq!(p.delta, vec![0.0; 4]);
        assert!(p.is_empty());
    }

    #[test]
    fn second_apply_is_a_no_op() {
        let mut ledger = PreferenceLedger::default();
        let mut track = flat_track(6, 2, 0.5);
        record_adjustment(&mut ledger, &mut track, 2, 0, 0.7, 0).unwrap();
        apply_preference(&mut ledger, &mut track).unwrap();
        let snapshot = track.clone();
        let second = apply_preference(&mut ledger, &mut track).unwrap();
        assert!(second.is_empty());
        assert_eq!(track, snapshot);
        assert!(ledger.applied);
    }

    #[test]
    fn finetune_rejects_empty_set() {
        use crate::adapter::{Activation, AdapterConfig};
        let net = AdapterNet::init(AdapterConfig::new(2, 4, Activation::Relu, true), 0).unwrap();
        let err = finetune(
            &net,
            &[],
            &TrainConfig::default(),
            &FinetuneConfig::default(),
        );
        assert!(err.is_err());
    }
}
