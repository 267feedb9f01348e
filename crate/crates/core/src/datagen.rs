//! Character-dependent training data: sample rule-constrained blend weights,
//! deform the rig, project its landmarks through a frontal camera and fit γ.

use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{project_weak_perspective, FitConfig, LandmarkBasis, Pose};
use crate::io;
use crate::model::{ExpressionParams, IdentityParams, LandmarkSet2D, MorphableModel};
use crate::rig::{BlendWeights, CharacterRig};

/// Slack for floating-point rounding in the rule check.
const RULE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleGroup {
    pub channel_indices: Vec<usize>,
    pub max_sum: f64,
}

/// Max-sum constraints over groups of channels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub groups: Vec<RuleGroup>,
}

impl RuleSet {
    pub fn validate(&self, k: usize) -> Result<()> {
        for (g, group) in self.groups.iter().enumerate() {
            let n = group.channel_indices.len();
            if n == 0 {
                return Err(Error::Invalid(format!("rule group {g} is empty")));
            }
            if !(group.max_sum > 0.0 && group.max_sum <= n as f64) {
                return Err(Error::Invalid(format!(
                    "rule group {g}: max_sum {} must be in (0, {n}]",
                    group.max_sum
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &c in &group.channel_indices {
                if c >= k {
                    return Err(Error::IndexOutOfRange {
                        what: "rule channel",
                        index: c,
                        len: k,
                    });
                }
                if !seen.insert(c) {
                    return Err(Error::Invalid(format!(
                        "rule group {g} lists channel {c} twice"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_satisfied(&self, alpha: &[f64]) -> bool {
        self.groups.iter().all(|g| {
            g.channel_indices.iter().map(|&c| alpha[c]).sum::<f64>() <= g.max_sum + RULE_TOL
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }
}

/// Rescales the members of every violated group so the group sums to its
/// limit. Scaling only shrinks values, so earlier groups stay satisfied.
pub fn repair_blendweights(mut values: Vec<f64>, rules: &RuleSet) -> BlendWeights {
    for g in &rules.groups {
        let sum: f64 = g.channel_indices.iter().map(|&c| values[c]).sum();
        if sum > g.max_sum {
            for &c in &g.channel_indices {
                values[c] = values[c] * g.max_sum / sum;
            }
        }
    }
    BlendWeights::clamped(values)
}

/// Uniform draw per channel followed by rule repair.
pub fn sample_blendweights<R: Rng + ?Sized>(
    k: usize,
    rules: &RuleSet,
    rng: &mut R,
) -> BlendWeights {
    let raw = (0..k).map(|_| rng.random::<f64>()).collect();
    repair_blendweights(raw, rules)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub gamma: ExpressionParams,
    pub alpha: BlendWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 8000,
            val: 1000,
            test: 1000,
        }
    }
}

impl Split {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    /// Parses `train,val,test`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("split {s:?}: {e}")))?;
        match parts[..] {
            [train, val, test] => Ok(Self { train, val, test }),
            _ => Err(Error::Invalid(format!("split {s:?} must have three parts"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub rig_name: String,
    pub seed: u64,
    #[serde(default)]
    pub rules: RuleSet,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    /// Samples redrawn because their fit failed.
    #[serde(default)]
    pub resampled: usize,
}

impl GeneratedDataset {
    /// Channel count, taken from the first sample.
    pub fn k(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map(|p| p.alpha.len())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }
}

/// Identity rotation, landmark width normalised to this many units, centred.
pub const CANONICAL_FACE_WIDTH: f64 = 200.0;
const MAX_ATTEMPTS: usize = 16;

/// Rig, model and camera bundled for repeated sample synthesis.
pub struct DatasetGenerator<'a> {
    rig: &'a CharacterRig,
    basis: LandmarkBasis,
    camera: Pose,
    fit_config: FitConfig,
}

impl<'a> DatasetGenerator<'a> {
    pub fn new(
        rig: &'a CharacterRig,
        model: &MorphableModel,
        fit_config: FitConfig,
    ) -> Result<Self> {
        fit_config.validate()?;
        let basis = LandmarkBasis::new(model, &IdentityParams::zeros(model.id_dim()))?;
        let neutral = rig.rig_landmarks(&BlendWeights::zeros(rig.k()))?;
        let pts = neutral.points();
        let (lo, hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
                (l.min(p.x), h.max(p.x))
            });
        if !(hi > lo) {
            return Err(Error::DegenerateGeometry(
                "rig landmarks have zero width".into(),
            ));
        }
        let scale = CANONICAL_FACE_WIDTH / (hi - lo);
        let centroid = pts.iter().sum::<nalgebra::Vector3<f64>>() / pts.len() as f64;
        let camera = Pose::new(
            Matrix3::identity(),
            -scale * Vector2::new(centroid.x, centroid.y),
            scale,
        )?;
        Ok(Self {
            rig,
            basis,
            camera,
            fit_config,
        })
    }

    pub fn camera(&self) -> &Pose {
        &self.camera
    }

    /// Frontal 2D landmarks of the rig posed with `alpha`.
    pub fn observe(&self, alpha: &BlendWeights) -> Result<LandmarkSet2D> {
        Ok(project_weak_perspective(
            &self.rig.rig_landmarks(alpha)?,
            &self.camera,
        ))
    }

    pub fn pair_for(&self, alpha: BlendWeights) -> Result<SamplePair> {
        let observed = self.observe(&alpha)?;
        let gamma = self.basis.fit(&observed, &self.fit_config)?.gamma;
        Ok(SamplePair { gamma, alpha })
    }

    /// RNG stream for sample `index`, independent of evaluation order.
    pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        rng
    }

    fn sample(&self, rules: &RuleSet, seed: u64, index: usize) -> Result<(SamplePair, usize)> {
        let mut rng = Self::sample_rng(seed, index);
        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            let alpha = sample_blendweights(self.rig.k(), rules, &mut rng);
            match self.pair_for(alpha) {
                Ok(pair) => return Ok((pair, attempt)),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt").at_frame(index))
    }

    pub fn generate(&self, rules: &RuleSet, split: Split, seed: u64) -> Result<GeneratedDataset> {
        rules.validate(self.rig.k())?;
        let count = split.total();
        let one = |i: usize| self.sample(rules, seed, i);
        #[cfg(feature = "parallel")]
        let samples: Vec<(SamplePair, usize)> = {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(one).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let samples: Vec<(SamplePair, usize)> = (0..count).map(one).collect::<Result<_>>()?;

        let resampled: usize = samples.iter().map(|(_, r)| r).sum();
        if resampled * 100 > count {
            return Err(Error::DatasetQuality { resampled, count });
        }
        let mut pairs = samples.into_iter().map(|(p, _)| p);
        let train = pairs.by_ref().take(split.train).collect();
        let val = pairs.by_ref().take(split.val).collect();
        let test = pairs.collect();
        Ok(GeneratedDataset {
            rig_name: self.rig.name.clone(),
            seed,
            rules: rules.clone(),
            train,
            val,
            test,
            resampled,
        })
    }
}

pub fn generate_dataset(
    rig: &CharacterRig,
    model: &MorphableModel,
    rules: &RuleSet,
    split: Split,
    fit_config: &FitConfig,
    seed: u64,
) -> Result<GeneratedDataset> {
    DatasetGenerator::new(rig, model, fit_config.clone())?.generate(rules, split, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(c: &[usize], max_sum: f64) -> RuleGroup {
        RuleGroup {
            channel_indices: c.to_vec(),
            max_sum,
        }
    }

    #[test]
    fn repair_rescales_violated_group() {
        let rules = RuleSet {
            groups: vec![group(&[0, 1], 1.0)],
        };
        let a = repair_blendweights(vec![0.9, 0.9, 0.7], &rules);
        assert_eq!(a.as_slice(), &[0.5, 0.5, 0.7]);
    }

    #[test]
    fn satisfied_group_is_untouched() {
        let rules = RuleSet {
            groups: vec![group(&[0, 1], 1.0)],
        };
        let a = repair_blendweights(vec![0.3, 0.6, 0.9], &rules);
        assert_eq!(a.as_slice(), &[0.3, 0.6, 0.9]);
    }

    #[test]
    fn sampling_is_reproducible_and_in_range() {
        let rules = RuleSet::default();
        let mut r1 = DatasetGenerator::sample_rng(3, 7);
        let mut r2 = DatasetGenerator::sample_rng(3, 7);
        let a = sample_blendweights(30, &rules, &mut r1);
        assert_eq!(a, sample_blendweights(30, &rules, &mut r2));
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rule_validation() {
        assert!(RuleSet {
            groups: vec![group(&[0, 5], 1.0)]
        }
        .validate(5)
        .is_err());
        assert!(RuleSet {
            groups: vec![group(&[0, 0], 1.0)]
        }
        .validate(5)
        .is_err());
        assert!(RuleSet {
            groups: vec![group(&[0, 1], 0.0)]
        }
        .validate(5)
        .is_err());
        assert!(RuleSet {
            groups: vec![group(&[0, 1], 2.5)]
        }
        .validate(5)
        .is_err());
        assert!(RuleSet {
            groups: vec![group(&[0, 1], 2.0)]
        }
        .validate(5)
        .is_ok());
    }

    #[test]
    fn split_parsing() {
        assert_eq!("8000,1000,1000".parse::<Split>().unwrap(), Split::default());
        assert!("1,2".parse::<Split>().is_err());
    }
}
