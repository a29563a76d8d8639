//! Frequency-coded synthetic CSI with known activity composition.
//!
//! Each sample is a baseline plus Gaussian noise plus one sinusoid per
//! assigned activity at that activity's signature frequency, spread over a
//! random subset of the 270 channels. Optionally each present user also adds
//! a fixed per-user channel profile, which makes user identity recoverable.
//!
//! Reproducibility: all draws come from ChaCha8 seeded with `seed`, and the
//! sinusoids use the pure-Rust `libm::sin`, so output does not depend on the
//! platform math library. Gaussian draws use `rand_distr`'s ziggurat sampler.

use std::path::PathBuf;

use ndarray::{Array2, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Band, CsiSample, DatasetManifest, Environment, ManifestEntry, CHANNELS, RX, SUBCARRIERS, TX};
use crate::labels::{Activity, SlotLabels, ACTIVITIES, USERS};
use crate::{Error, Result, Scalar};

/// Which slots receive the `k` drawn activities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotAssignment {
    /// Slots `1..=k`.
    FirstK,
    /// `k` distinct slots drawn uniformly.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub t_length: usize,
    /// Inclusive range of simultaneously active users.
    pub user_count_range: [usize; 2],
    /// One frequency (Hz) per activity, in vocabulary order.
    pub signature_frequencies: [f64; ACTIVITIES],
    pub noise_std: f64,
    pub seed: u64,
    /// Duration covered by `t_length` rows, in seconds.
    pub window_seconds: f64,
    pub baseline: f64,
    pub activity_amplitude: f64,
    /// Fraction of channels each activity's sinusoid occupies.
    pub channel_fraction: f64,
    /// Sinusoid phases are drawn from `[0, phase_jitter · 2π)`.
    pub phase_jitter: f64,
    pub slot_assignment: SlotAssignment,
    /// Scale of the per-user static channel profile; 0 disables it.
    pub user_signature_strength: f64,
    pub band: Band,
}

impl SyntheticSpec {
    /// Small, quickly learnable configuration used by tests and examples.
    pub fn desk(n_samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_samples,
            t_length: 256,
            user_count_range: [0, 5],
            signature_frequencies: [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0],
            noise_std: 0.2,
            seed,
            window_seconds: 3.0,
            baseline: 10.0,
            activity_amplitude: 1.0,
            channel_fraction: 0.3,
            phase_jitter: 0.25,
            slot_assignment: SlotAssignment::FirstK,
            user_signature_strength: 0.0,
            band: Band::GHz5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        let [lo, hi] = self.user_count_range;
        if self.n_samples == 0 || self.t_length == 0 {
            return bad("n_samples and t_length must be positive".into());
        }
        if lo > hi || hi > USERS {
            return bad(format!("user_count_range [{lo}, {hi}] must lie within [0, {USERS}]"));
        }
        if self.signature_frequencies.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("signature frequencies must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !(self.window_seconds > 0.0) || !(self.activity_amplitude >= 0.0) {
            return bad("noise_std, window_seconds and activity_amplitude must be non-negative".into());
        }
        if !(self.channel_fraction > 0.0 && self.channel_fraction <= 1.0) {
            return bad("channel_fraction must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.phase_jitter) {
            return bad("phase_jitter must lie in [0, 1]".into());
        }
        if !(self.user_signature_strength >= 0.0) || !self.baseline.is_finite() {
            return bad("user_signature_strength must be non-negative".into());
        }
        Ok(())
    }
}

/// Fixed per-user channel profiles, independent of the sample stream.
fn user_profiles(seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Array2::from_shape_simple_fn((USERS, CHANNELS), || rng.sample::<f64, _>(StandardNormal))
}

pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(DatasetManifest, Vec<CsiSample<T>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let profiles = user_profiles(spec.seed);
    let n_active = ((spec.channel_fraction * CHANNELS as f64).round() as usize).clamp(1, CHANNELS);
    let dt = spec.window_seconds / spec.t_length as f64;
    let [lo, hi] = spec.user_count_range;

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut entries = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let environment = Environment::ALL[rng.random_range(0..Environment::ALL.len())];
        let k = rng.random_range(lo..=hi);
        let slots: Vec<usize> = match spec.slot_assignment {
            SlotAssignment::FirstK => (0..k).collect(),
            SlotAssignment::Random => {
                let mut s = index::sample(&mut rng, USERS, k).into_vec();
                s.sort_unstable();
                s
            }
        };
        let mut labels = SlotLabels::empty();
        for &u in &slots {
            labels.0[u] = Some(Activity::ALL[rng.random_range(0..ACTIVITIES)]);
        }

        let mut x = Array2::<f64>::from_elem((spec.t_length, CHANNELS), spec.baseline);
        for &u in &slots {
            let activity = labels.0[u].expect("assigned slot");
            let freq = spec.signature_frequencies[activity.index()];
            let phase = spec.phase_jitter * rng.random_range(0.0..std::f64::consts::TAU);
            let channels = index::sample(&mut rng, CHANNELS, n_active);
            for ch in channels.iter() {
                let gain = spec.activity_amplitude * rng.random_range(0.5..1.0);
                for t in 0..spec.t_length {
                    x[[t, ch]] += gain * libm::sin(std::f64::consts::TAU * freq * t as f64 * dt + phase);
                }
            }
            if spec.user_signature_strength > 0.0 {
                let offset = profiles.row(u).mapv(|g| g * spec.user_signature_strength);
                x += &offset;
            }
        }
        if spec.noise_std > 0.0 {
            x.mapv_inplace(|v| v + spec.noise_std * rng.sample::<f64, _>(StandardNormal));
        }

        let amplitude = Array4::from_shape_vec(
            (spec.t_length, TX, RX, SUBCARRIERS),
            x.into_iter().map(|v| T::lit(v.max(0.0))).collect(),
        )
        .expect("T×270 reshapes to T×3×3×30");
        let sample_id = format!("syn_{i:05}");
        entries.push(ManifestEntry {
            sample_id: sample_id.clone(),
            band: spec.band,
            environment,
            locator: PathBuf::from("amplitude").join(format!("{sample_id}.npy")),
            labels,
        });
        samples.push(CsiSample {
            sample_id,
            band: spec.band,
            environment,
            amplitude,
            annotation: labels,
        });
    }
    Ok((DatasetManifest::new(PathBuf::new(), entries)?, samples))
}
