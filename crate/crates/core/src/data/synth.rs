//! Synthetic study generator.
//!
//! Each participant carries a latent two-state (calm/anxious) semi-Markov process.
//! Heart rate is sampled in duty-cycled probes during waking hours (08:00-24:00) and
//! EMA ratings are drawn from the latent state at the moment of the survey. The
//! `coupling_strength` knob sets how much the latent state moves the heart-rate signal:
//! the anxious state raises the mean and damps the respiratory oscillation that
//! dominates short-term variability. At zero coupling the labels carry no information
//! about heart rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::csvio::canonicalize_participant;
use super::{
    standard_reverse_items, standard_scales, Dataset, EmaResponse, HrSample, Participant, Probe,
    Provenance, ScaleId, TraitItemResponse,
};
use crate::error::{Error, Result};
use crate::preprocess::impute_and_score_traits;

const HOUR: f64 = 3600.0;
const DAY: f64 = 86_400.0;
const WAKE_START_S: f64 = 8.0 * HOUR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_participants: usize,
    pub n_days: usize,
    pub duty_cycle_period_s: f64,
    pub capture_s: f64,
    pub hr_sampling_hz: f64,
    /// Probe start times deviate from the nominal schedule by at most this much.
    pub probe_jitter_s: f64,
    pub emas_per_day: usize,
    /// Each EMA is placed uniformly inside its own block of this length.
    pub ema_block_s: f64,
    pub ema_scale: u32,
    /// 0 = heart rate independent of the latent state, 1 = full effect.
    pub coupling_strength: f64,
    /// Ties the anxious-state share to the SIAS latent score (0 = no relation).
    pub trait_coupling: f64,
    pub base_hr_bpm: f64,
    pub anxiety_hr_shift_bpm: f64,
    /// Fraction of the respiratory oscillation removed in the anxious state at full coupling.
    pub variability_reduction: f64,
    pub rsa_amplitude_bpm: f64,
    pub rsa_period_s: f64,
    pub noise_sd_bpm: f64,
    pub drift_sd_bpm: f64,
    pub drift_timescale_s: f64,
    pub participant_hr_sd_bpm: f64,
    pub dwell_min_h: f64,
    pub dwell_max_h: f64,
    pub probe_missing_rate: f64,
    pub sample_missing_rate: f64,
    pub ema_missing_rate: f64,
    pub item_missing_rate: f64,
    /// Share of samples replaced by implausible readings (exercises the filter).
    pub artifact_rate: f64,
    /// Probability that a reported label disagrees with the latent state.
    pub label_noise: f64,
    pub age_years: u32,
    pub start_epoch_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_participants: 12,
            n_days: 10,
            duty_cycle_period_s: 300.0,
            capture_s: 60.0,
            hr_sampling_hz: 1.0,
            probe_jitter_s: 5.0,
            emas_per_day: 7,
            ema_block_s: 2.0 * HOUR,
            ema_scale: 10,
            coupling_strength: 1.0,
            trait_coupling: 0.0,
            base_hr_bpm: 75.0,
            anxiety_hr_shift_bpm: 8.0,
            variability_reduction: 0.95,
            rsa_amplitude_bpm: 6.0,
            rsa_period_s: 5.3,
            noise_sd_bpm: 0.5,
            drift_sd_bpm: 3.0,
            drift_timescale_s: 1800.0,
            participant_hr_sd_bpm: 5.0,
            dwell_min_h: 2.0,
            dwell_max_h: 6.0,
            probe_missing_rate: 0.05,
            sample_missing_rate: 0.0,
            ema_missing_rate: 0.1,
            item_missing_rate: 0.0059,
            artifact_rate: 0.001,
            label_noise: 0.0,
            age_years: super::DEFAULT_AGE,
            start_epoch_s: 1_696_118_400.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(format!("synth: {msg}")));
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_participants == 0 || self.n_days == 0 {
            return fail("n_participants and n_days must be positive");
        }
        if !(self.duty_cycle_period_s > 0.0 && self.capture_s > 0.0 && self.hr_sampling_hz > 0.0) {
            return fail("duty cycle period, capture and sampling rate must be positive");
        }
        if self.capture_s + 2.0 * self.probe_jitter_s > self.duty_cycle_period_s {
            return fail("capture plus jitter must fit inside the duty cycle period");
        }
        if self.probe_jitter_s < 0.0 {
            return fail("probe_jitter_s must be non-negative");
        }
        if self.ema_block_s <= 0.0
            || WAKE_START_S + 2.0 * HOUR + self.emas_per_day as f64 * self.ema_block_s > DAY
        {
            return fail("EMA blocks must fit between 10:00 and midnight");
        }
        if self.ema_scale < 2 {
            return fail("ema_scale must be at least 2");
        }
        if !rate(self.coupling_strength) || !rate(self.variability_reduction) {
            return fail("coupling_strength and variability_reduction must lie in [0, 1]");
        }
        if !(rate(self.probe_missing_rate)
            && rate(self.sample_missing_rate)
            && rate(self.ema_missing_rate)
            && rate(self.item_missing_rate)
            && rate(self.artifact_rate)
            && (0.0..=0.5).contains(&self.label_noise))
        {
            return fail("missingness/artifact rates must lie in [0, 1] and label_noise in [0, 0.5]");
        }
        if !(self.dwell_min_h > 0.0 && self.dwell_max_h >= self.dwell_min_h) {
            return fail("dwell range must satisfy 0 < min <= max");
        }
        if self.base_hr_bpm <= 40.0 || self.rsa_period_s <= 0.0 || self.drift_timescale_s <= 0.0 {
            return fail("heart-rate model parameters out of range");
        }
        if self.age_years == 0 || self.age_years >= 180 {
            return fail("age_years must lie in (0, 180)");
        }
        Ok(())
    }

    fn samples_per_probe(&self) -> usize {
        ((self.capture_s * self.hr_sampling_hz).floor() as usize).max(1)
    }
}

/// Alternating calm/anxious spells; `bounds[i]` is the end of spell `i`.
struct LatentProcess {
    bounds: Vec<f64>,
    first_anxious: bool,
}

impl LatentProcess {
    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng, start: f64, end: f64, propensity: f64) -> Self {
        let (lo, hi) = (cfg.dwell_min_h * HOUR, cfg.dwell_max_h * HOUR);
        let anxious_scale = propensity.exp();
        let calm_scale = (-propensity).exp();
        let stationary = anxious_scale / (anxious_scale + calm_scale);
        let first_anxious = rng.random::<f64>() < stationary;
        let mut anxious = first_anxious;
        // start partway into the first spell
        let mut t = start - rng.random::<f64>() * hi;
        let mut bounds = Vec::new();
        while t < end {
            let scale = if anxious { anxious_scale } else { calm_scale };
            t += rng.random_range(lo..=hi) * scale;
            bounds.push(t);
            anxious = !anxious;
        }
        LatentProcess { bounds, first_anxious }
    }

    fn anxious_at(&self, t: f64) -> bool {
        let spell = self.bounds.partition_point(|&b| b <= t);
        (spell % 2 == 0) == self.first_anxious
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Builds a deterministic synthetic dataset from `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scales = standard_scales();
    let mut participants = Vec::with_capacity(cfg.n_participants);
    for idx in 0..cfg.n_participants {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64 + 1);
        participants.push(generate_participant(cfg, idx, &scales, &mut rng)?);
    }
    Ok(Dataset {
        participants,
        scales,
        provenance: Provenance::Synthetic { seed: cfg.seed },
        diagnostics: Vec::new(),
    })
}

fn generate_participant(
    cfg: &SynthConfig,
    idx: usize,
    scales: &[super::ScaleDeclaration],
    rng: &mut ChaCha8Rng,
) -> Result<Participant> {
    let id = format!("P{:03}", idx + 1);

    // Latent trait levels, one per scale.
    let trait_z: Vec<(ScaleId, f64)> = ScaleId::ALL.iter().map(|&s| (s, normal(rng))).collect();
    let sias_z = trait_z[0].1;
    let items = generate_items(cfg, &id, scales, &trait_z, rng);

    let study_start = cfg.start_epoch_s;
    let study_end = study_start + cfg.n_days as f64 * DAY;
    let latent = LatentProcess::generate(cfg, rng, study_start, study_end, cfg.trait_coupling * sias_z);
    let hr_offset = cfg.participant_hr_sd_bpm * normal(rng);
    let evening_schedule = rng.random::<bool>();

    let c = cfg.coupling_strength;
    let per_probe = cfg.samples_per_probe();
    let probes_per_day = ((DAY - WAKE_START_S - cfg.capture_s - 2.0 * cfg.probe_jitter_s)
        / cfg.duty_cycle_period_s)
        .floor() as usize
        + 1;
    let mut probes = Vec::new();
    let mut emas = Vec::new();

    for day in 0..cfg.n_days {
        let day_start = study_start + day as f64 * DAY;
        let mut drift = cfg.drift_sd_bpm * normal(rng);
        let mut last_start: Option<f64> = None;
        for k in 0..probes_per_day {
            let jitter = if cfg.probe_jitter_s > 0.0 {
                rng.random_range(-cfg.probe_jitter_s..=cfg.probe_jitter_s).round()
            } else {
                0.0
            };
            let start =
                day_start + WAKE_START_S + cfg.probe_jitter_s + k as f64 * cfg.duty_cycle_period_s + jitter;
            if let Some(prev) = last_start {
                let rho = (-(start - prev) / cfg.drift_timescale_s).exp();
                drift = rho * drift + cfg.drift_sd_bpm * (1.0 - rho * rho).sqrt() * normal(rng);
            }
            last_start = Some(start);
            let dropped = rng.random::<f64>() < cfg.probe_missing_rate;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let mut samples = Vec::with_capacity(per_probe);
            for j in 0..per_probe {
                let t = start + j as f64 / cfg.hr_sampling_hz;
                let anxious = if latent.anxious_at(t) { 1.0 } else { 0.0 };
                let rsa_amp = cfg.rsa_amplitude_bpm * (1.0 - c * cfg.variability_reduction * anxious);
                let mut hr = cfg.base_hr_bpm
                    + hr_offset
                    + c * cfg.anxiety_hr_shift_bpm * anxious
                    + drift
                    + rsa_amp * (std::f64::consts::TAU * t / cfg.rsa_period_s + phase).sin()
                    + cfg.noise_sd_bpm * normal(rng);
                hr = hr.clamp(45.0, 180.0);
                let missing = rng.random::<f64>() < cfg.sample_missing_rate;
                if rng.random::<f64>() < cfg.artifact_rate {
                    hr = if rng.random::<bool>() { 30.0 } else { 230.0 };
                }
                if !dropped && !missing {
                    samples.push(HrSample {
                        timestamp: t,
                        hr: round_to(hr, 0.1),
                    });
                }
            }
            if !samples.is_empty() {
                probes.push(Probe {
                    probe_id: format!("{id}-d{day:02}-{k:03}"),
                    participant_id: id.clone(),
                    samples,
                });
            }
        }

        let first_block = day_start + WAKE_START_S + if evening_schedule { 2.0 * HOUR } else { 0.0 };
        for slot in 0..cfg.emas_per_day {
            let offset = rng.random::<f64>() * cfg.ema_block_s;
            let t = (first_block + slot as f64 * cfg.ema_block_s + offset).floor();
            let skipped = rng.random::<f64>() < cfg.ema_missing_rate;
            let mut label = latent.anxious_at(t);
            if rng.random::<f64>() < cfg.label_noise {
                label = !label;
            }
            let rating = if label { rng.random_range(2..=cfg.ema_scale) } else { 1 };
            if !skipped {
                emas.push(EmaResponse::new(id.clone(), t, rating, cfg.ema_scale)?);
            }
        }
    }

    let traits = impute_and_score_traits(&id, &items, scales)?;
    let mut p = Participant {
        id,
        age: cfg.age_years,
        age_defaulted: false,
        traits,
        items,
        probes,
        emas,
    };
    canonicalize_participant(&mut p);
    Ok(p)
}

fn generate_items(
    cfg: &SynthConfig,
    id: &str,
    scales: &[super::ScaleDeclaration],
    trait_z: &[(ScaleId, f64)],
    rng: &mut ChaCha8Rng,
) -> Vec<TraitItemResponse> {
    let mut items = Vec::new();
    for decl in scales {
        let z = trait_z
            .iter()
            .find(|(s, _)| *s == decl.scale)
            .map_or(0.0, |(_, z)| *z);
        let reversed = standard_reverse_items(decl.scale);
        let (lo, hi) = (f64::from(decl.item_min), f64::from(decl.item_max));
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        let start = items.len();
        for item_index in 1..=decl.item_count {
            let latent = mid + half * 0.5 * (0.7 * z + 0.7 * normal(rng));
            let keyed = latent.round().clamp(lo, hi) as i32;
            let reverse_scored = reversed.contains(&item_index);
            let stored = if reverse_scored {
                decl.item_min + decl.item_max - keyed
            } else {
                keyed
            };
            let missing = rng.random::<f64>() < cfg.item_missing_rate;
            items.push(TraitItemResponse {
                participant_id: id.to_string(),
                scale: decl.scale,
                item_index,
                value: (!missing).then_some(stored),
                reverse_scored,
            });
        }
        if items[start..].iter().all(|i| i.value.is_none()) {
            // keep at least one answered item so the scale can be imputed
            let first = &mut items[start];
            let mid_value = mid.round() as i32;
            first.value = Some(mid_value);
        }
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_participants: 3,
            n_days: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn probes_respect_duty_cycle() {
        let cfg = small();
        let ds = generate_synthetic(&cfg).unwrap();
        for p in &ds.participants {
            for probe in &p.probes {
                probe.validate(cfg.capture_s).unwrap();
                let hour = ((probe.start() - cfg.start_epoch_s).rem_euclid(DAY)) / HOUR;
                assert!(hour >= 8.0 - 1e-9 || probe.start() < cfg.start_epoch_s, "probe at {hour}h");
            }
            for w in p.probes.windows(2) {
                let gap = w[1].start() - w[0].start();
                if gap < 3.0 * HOUR {
                    // consecutive probes within a day, allowing for dropped ones
                    let cycles = (gap / cfg.duty_cycle_period_s).round();
                    assert!(cycles >= 1.0);
                    assert!((gap - cycles * cfg.duty_cycle_period_s).abs() <= 2.0 * cfg.probe_jitter_s);
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate_synthetic(&SynthConfig { n_participants: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { coupling_strength: 1.5, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { capture_s: 400.0, ..small() }).is_err());
    }

    #[test]
    fn ema_ratings_follow_scale() {
        let ds = generate_synthetic(&SynthConfig { ema_scale: 5, ..small() }).unwrap();
        for e in ds.participants.iter().flat_map(|p| &p.emas) {
            assert!((1..=5).contains(&e.rating));
            assert_eq!(e.scale_max, 5);
        }
    }
}
