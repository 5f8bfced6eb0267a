//! Synthetic multi-subject, multi-session EMG corpus.
//!
//! The clinical dataset behind this pipeline is not released, so experiments
//! run on a generated stand-in that is structurally identical: five-ish
//! subjects, 14 recordings each (8 on day 1, 6 on day 2), four orthosis
//! conditions, and the scripted cue protocol of three open-relax-close
//! motions with 5-second cues.
//!
//! Signal model, per sample: the (reaction-delayed) intent selects a
//! per-subject mean activation row; condition effects and muscle tone are
//! added; involuntary spasticity bursts arrive as a Poisson process; the
//! physical signal is then seen through the electrode array, which a
//! session-dependent [`SessionShift`] rotates (fractional cyclic channel
//! mixing, the armband being circular), gain-scales, and offsets; Gaussian
//! sensor noise is added and the result clipped to the raw count range.
//! Magnitudes are configuration defaults and make no claim of clinical
//! fidelity; they exist to give adaptation methods a measurable drift to
//! overcome.
//!
//! Every stochastic draw flows from a stream keyed by (seed, subject,
//! recording), so corpus generation is deterministic regardless of
//! evaluation order.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataio::{self, Condition, Intent, RawRecording, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::seeds;

/// Cue script: three open-relax-close motions, a relax between every active
/// cue, and a trailing relax.
pub const CUE_SCRIPT: [Intent; 13] = [
    Intent::Relax,
    Intent::Open,
    Intent::Relax,
    Intent::Close,
    Intent::Relax,
    Intent::Open,
    Intent::Relax,
    Intent::Close,
    Intent::Relax,
    Intent::Open,
    Intent::Relax,
    Intent::Close,
    Intent::Relax,
];

/// Recordings per subject on each day.
pub const DAY1_RECORDINGS: usize = 8;
pub const DAY2_RECORDINGS: usize = 6;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Per-subject EMG signature in raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub subject_id: String,
    /// `[3 intents x 8 channels]` mean activation, rows indexed by
    /// [`Intent::index`].
    pub mean_activation: Array2<f64>,
    /// Per-channel baseline (elevated muscle tone).
    pub tonic_level: [f64; NUM_CHANNELS],
    /// Per-channel sensor noise standard deviation.
    pub noise_std: [f64; NUM_CHANNELS],
    /// Involuntary activation bursts per second.
    pub spasticity_burst_rate: f64,
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<()> {
        if self.mean_activation.dim() != (3, NUM_CHANNELS) {
            return Err(Error::Shape("mean_activation must be [3 x 8]".into()));
        }
        if self.mean_activation.iter().any(|&v| !(0.0..=1000.0).contains(&v)) {
            return Err(Error::Precondition("mean activations must lie in [0, 1000]".into()));
        }
        if self.noise_std.iter().any(|&v| v < 0.0) || self.spasticity_burst_rate < 0.0 {
            return Err(Error::Precondition("noise and burst rate must be nonnegative".into()));
        }
        // Open and close must be separable in principle: at least one channel
        // where the rows differ by at least that channel's noise level.
        let open = self.mean_activation.row(Intent::Open.index());
        let close = self.mean_activation.row(Intent::Close.index());
        let separable = open
            .iter()
            .zip(close.iter())
            .zip(&self.noise_std)
            .any(|((&o, &c), &ns)| (o - c).abs() >= ns);
        if !separable {
            return Err(Error::Precondition(
                "open and close activations are indistinguishable under the noise level".into(),
            ));
        }
        Ok(())
    }
}

/// How one session's electrode view differs from the subject baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionShift {
    /// Armband rotation in channels; fractional values mix adjacent
    /// channels cyclically.
    pub rotation_channels: f64,
    /// Per-channel multiplicative gain, near 1.
    pub gain_drift: [f64; NUM_CHANNELS],
    /// Additive per-channel baseline change in raw counts.
    pub tone_drift: [f64; NUM_CHANNELS],
}

impl SessionShift {
    pub fn identity() -> SessionShift {
        SessionShift { rotation_channels: 0.0, gain_drift: [1.0; NUM_CHANNELS], tone_drift: [0.0; NUM_CHANNELS] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain_drift.iter().any(|&g| g <= 0.0) {
            return Err(Error::Precondition("gain factors must be positive".into()));
        }
        Ok(())
    }

    /// Apply `other` on top of `self`: rotations add, gains multiply, tones add.
    pub fn compose(&self, other: &SessionShift) -> SessionShift {
        let mut out = self.clone();
        out.rotation_channels += other.rotation_channels;
        for c in 0..NUM_CHANNELS {
            out.gain_drift[c] *= other.gain_drift[c];
            out.tone_drift[c] += other.tone_drift[c];
        }
        out
    }
}

/// Cyclic fractional channel shift: `out[c]` interpolates between
/// `x[(c+k) mod 8]` and `x[(c+k+1) mod 8]` where `angle = k + f`.
fn rotate_channels(x: &[f64; NUM_CHANNELS], angle: f64) -> [f64; NUM_CHANNELS] {
    let k = angle.floor();
    let f = angle - k;
    let k = k as i64;
    let mut out = [0.0; NUM_CHANNELS];
    for (c, o) in out.iter_mut().enumerate() {
        let i = (c as i64 + k).rem_euclid(NUM_CHANNELS as i64) as usize;
        let j = (c as i64 + k + 1).rem_euclid(NUM_CHANNELS as i64) as usize;
        *o = (1.0 - f) * x[i] + f * x[j];
    }
    out
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Inclusive uniform range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Range {
        Range { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            Uniform::new_inclusive(self.lo, self.hi).sample(rng)
        } else {
            self.lo
        }
    }
}

/// Deterministic signal-synthesis knobs shared by every recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub cue_seconds: f64,
    pub sample_rate_hz: u32,
    /// Activation lags cue onsets by this much, so windows straddling cue
    /// transitions are genuinely ambiguous.
    pub reaction_latency_s: f64,
    /// Channels treated as flexor-dominant (active during close).
    pub flexor_channels: Vec<usize>,
    /// With the motor engaged, flexor activation during open scales by this
    /// factor (the device assists extension).
    pub motor_open_flexor_scale: f64,
    /// With the arm off the table, every channel's tonic level rises by
    /// this many counts.
    pub arm_off_tonic_add: f64,
    /// Spasticity burst shape.
    pub burst_amplitude: Range,
    pub burst_duration_s: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            cue_seconds: 5.0,
            sample_rate_hz: 100,
            reaction_latency_s: 0.6,
            flexor_channels: vec![0, 1, 2, 3],
            motor_open_flexor_scale: 0.6,
            arm_off_tonic_add: 40.0,
            burst_amplitude: Range::new(200.0, 600.0),
            burst_duration_s: 0.4,
        }
    }
}

impl SignalConfig {
    fn run_len(&self) -> Result<usize> {
        let r = self.cue_seconds * f64::from(self.sample_rate_hz);
        let rounded = r.round();
        if (r - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "cue of {} s at {} Hz is not a positive whole number of samples",
                self.cue_seconds, self.sample_rate_hz
            )));
        }
        Ok(rounded as usize)
    }
}

/// Priors for sampling subject signatures.
///
/// Open and close signatures come from fixed channel templates, rotated by
/// a per-subject armband orientation and jittered per channel, so subjects
/// share no common channel-to-intent mapping; that is what makes pooled
/// training across subjects genuinely hard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilePrior {
    pub tonic: Range,
    pub noise_std: Range,
    /// Overall activation amplitude multiplying the intent templates.
    pub amplitude: Range,
    /// Per-channel multiplicative jitter on the templates.
    pub channel_jitter: Range,
    /// Relax-intent activation on every channel.
    pub relax: Range,
    pub burst_rate: Range,
}

impl Default for ProfilePrior {
    fn default() -> Self {
        ProfilePrior {
            tonic: Range::new(120.0, 280.0),
            noise_std: Range::new(50.0, 95.0),
            amplitude: Range::new(160.0, 360.0),
            channel_jitter: Range::new(0.7, 1.3),
            relax: Range::new(0.0, 120.0),
            burst_rate: Range::new(1.0, 2.2),
        }
    }
}

/// Relative open/close activation per channel before subject rotation.
/// Deliberately overlapping so intents are separable but not trivially so.
const OPEN_TEMPLATE: [f64; NUM_CHANNELS] = [0.0, 0.05, 0.25, 0.1, 1.0, 0.9, 1.0, 0.4];
const CLOSE_TEMPLATE: [f64; NUM_CHANNELS] = [1.0, 0.95, 0.7, 0.35, 0.0, 0.15, 0.05, 0.2];

/// Priors for sampling a [`SessionShift`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPrior {
    pub rotation: Range,
    pub gain: Range,
    pub tone: Range,
}

impl ShiftPrior {
    fn sample<R: Rng>(&self, rng: &mut R) -> SessionShift {
        let rotation_channels = self.rotation.sample(rng);
        let mut gain_drift = [1.0; NUM_CHANNELS];
        let mut tone_drift = [0.0; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            gain_drift[c] = self.gain.sample(rng);
        }
        for c in 0..NUM_CHANNELS {
            tone_drift[c] = self.tone.sample(rng);
        }
        SessionShift { rotation_channels, gain_drift, tone_drift }
    }
}

/// Full corpus-generation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub signal: SignalConfig,
    pub profile_prior: ProfilePrior,
    /// Drift between day 1 and day 2 (a week apart clinically).
    pub day2_shift_prior: ShiftPrior,
    /// Small per-recording electrode jitter within a day.
    pub recording_jitter_prior: ShiftPrior,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            signal: SignalConfig::default(),
            profile_prior: ProfilePrior::default(),
            day2_shift_prior: ShiftPrior {
                rotation: Range::new(0.15, 0.55),
                gain: Range::new(0.85, 1.18),
                tone: Range::new(-15.0, 45.0),
            },
            recording_jitter_prior: ShiftPrior {
                rotation: Range::new(0.0, 0.35),
                gain: Range::new(0.92, 1.09),
                tone: Range::new(-12.0, 12.0),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Recording generation
// ---------------------------------------------------------------------------

/// Generate one scripted recording. Deterministic given `seed`.
pub fn generate_recording(
    profile: &SubjectProfile,
    shift: &SessionShift,
    condition: Condition,
    day: u8,
    cfg: &SignalConfig,
    seed: u64,
) -> Result<RawRecording> {
    profile.validate()?;
    shift.validate()?;
    let run_len = cfg.run_len()?;
    let n = run_len * CUE_SCRIPT.len();
    let latency = (cfg.reaction_latency_s * f64::from(cfg.sample_rate_hz)).round() as usize;

    let cues: Vec<Intent> = (0..n).map(|t| CUE_SCRIPT[t / run_len]).collect();

    // Spasticity bursts: Poisson arrivals on the physical channels.
    let mut burst_add = vec![[0.0f64; NUM_CHANNELS]; n];
    if profile.spasticity_burst_rate > 0.0 {
        let mut rng = seeds::rng(seed, "synth/bursts", &[]);
        let exp = Exp::new(profile.spasticity_burst_rate).expect("positive rate");
        let dur = (cfg.burst_duration_s * f64::from(cfg.sample_rate_hz)).round() as usize;
        let mut t_s = exp.sample(&mut rng);
        let total_s = n as f64 / f64::from(cfg.sample_rate_hz);
        while t_s < total_s {
            let channel = rng.gen_range(0..NUM_CHANNELS);
            let amp = cfg.burst_amplitude.sample(&mut rng);
            let start = (t_s * f64::from(cfg.sample_rate_hz)) as usize;
            for row in burst_add.iter_mut().skip(start).take(dur.max(1)) {
                row[channel] += amp;
            }
            t_s += exp.sample(&mut rng);
        }
    }

    let mut noise_rng = seeds::rng(seed, "synth/noise", &[]);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let arm_off = condition.arm_off_table();
    let motor_on = condition.motor_on();

    let mut channels = Array2::zeros((n, NUM_CHANNELS));
    for t in 0..n {
        let intent = cues[t.saturating_sub(latency)];
        let mut physical = [0.0f64; NUM_CHANNELS];
        let mean_row = profile.mean_activation.row(intent.index());
        for c in 0..NUM_CHANNELS {
            let mut activation = mean_row[c];
            if motor_on && intent == Intent::Open && cfg.flexor_channels.contains(&c) {
                activation *= cfg.motor_open_flexor_scale;
            }
            let mut tonic = profile.tonic_level[c];
            if arm_off {
                tonic += cfg.arm_off_tonic_add;
            }
            physical[c] = activation + tonic + burst_add[t][c];
        }
        let viewed = rotate_channels(&physical, shift.rotation_channels);
        for c in 0..NUM_CHANNELS {
            let mut v = shift.gain_drift[c] * viewed[c] + shift.tone_drift[c];
            if profile.noise_std[c] > 0.0 {
                v += profile.noise_std[c] * normal.sample(&mut noise_rng);
            }
            channels[[t, c]] = v.clamp(0.0, 1000.0);
        }
    }

    let rec = RawRecording {
        subject_id: profile.subject_id.clone(),
        day,
        condition,
        sample_rate_hz: cfg.sample_rate_hz,
        channels,
        cues,
    };
    rec.validate()?;
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// One generated recording plus its provenance.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub recording: RawRecording,
    /// Repetition index among same-(subject, day, condition) recordings.
    pub repetition: usize,
    /// The derived per-recording seed, recorded for the manifest.
    pub seed: u64,
}

/// A full generated corpus with the profiles and shifts that produced it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub profiles: Vec<SubjectProfile>,
    pub day2_shifts: Vec<SessionShift>,
    pub entries: Vec<CorpusEntry>,
}

fn sample_profile(prior: &ProfilePrior, subject_id: String, rng: &mut impl Rng) -> SubjectProfile {
    // Per-subject armband orientation: the channel-to-muscle mapping is
    // arbitrary across subjects.
    let orientation = Uniform::new(0.0, NUM_CHANNELS as f64).sample(rng);
    let amplitude = prior.amplitude.sample(rng);
    let open = rotate_channels(&OPEN_TEMPLATE, orientation);
    let close = rotate_channels(&CLOSE_TEMPLATE, orientation);

    let mut mean = Array2::zeros((3, NUM_CHANNELS));
    for c in 0..NUM_CHANNELS {
        mean[[Intent::Relax.index(), c]] = prior.relax.sample(rng);
    }
    for c in 0..NUM_CHANNELS {
        let jitter = prior.channel_jitter.sample(rng);
        mean[[Intent::Open.index(), c]] = (amplitude * open[c] * jitter).clamp(0.0, 1000.0);
    }
    for c in 0..NUM_CHANNELS {
        let jitter = prior.channel_jitter.sample(rng);
        mean[[Intent::Close.index(), c]] = (amplitude * close[c] * jitter).clamp(0.0, 1000.0);
    }
    let mut tonic = [0.0; NUM_CHANNELS];
    let mut noise = [0.0; NUM_CHANNELS];
    for c in 0..NUM_CHANNELS {
        tonic[c] = prior.tonic.sample(rng);
    }
    for c in 0..NUM_CHANNELS {
        noise[c] = prior.noise_std.sample(rng);
    }
    SubjectProfile {
        subject_id,
        mean_activation: mean,
        tonic_level: tonic,
        noise_std: noise,
        spasticity_burst_rate: prior.burst_rate.sample(rng),
    }
}

/// Condition sequence for one subject-day; day 1 holds 8 recordings
/// (4 conditions x 2 repetitions), day 2 cycles the conditions for 6.
fn day_plan(day: u8) -> Vec<(Condition, usize)> {
    let count = if day == 1 { DAY1_RECORDINGS } else { DAY2_RECORDINGS };
    (0..count).map(|i| (Condition::ALL[i % 4], i / 4)).collect()
}

/// Generate the full corpus: per subject, 8 day-1 and 6 day-2 recordings,
/// with a freshly sampled session shift on day 2. Deterministic given `seed`.
pub fn generate_corpus(n_subjects: usize, seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    if n_subjects == 0 {
        return Err(Error::Config("corpus needs at least one subject".into()));
    }
    let mut profiles = Vec::with_capacity(n_subjects);
    let mut day2_shifts = Vec::with_capacity(n_subjects);
    let mut entries = Vec::new();
    for s in 0..n_subjects {
        let subject_id = format!("S{}", s + 1);
        let mut prof_rng = seeds::rng(seed, "synth/profile", &[s as u64]);
        let profile = sample_profile(&config.profile_prior, subject_id, &mut prof_rng);
        profile.validate()?;
        let mut shift_rng = seeds::rng(seed, "synth/shift", &[s as u64, 2]);
        let day2_shift = config.day2_shift_prior.sample(&mut shift_rng);

        for day in [1u8, 2] {
            let base = if day == 1 { SessionShift::identity() } else { day2_shift.clone() };
            for (idx, (condition, repetition)) in day_plan(day).into_iter().enumerate() {
                let mut jitter_rng = seeds::rng(seed, "synth/jitter", &[s as u64, u64::from(day), idx as u64]);
                let jitter = config.recording_jitter_prior.sample(&mut jitter_rng);
                let shift = base.compose(&jitter);
                let rec_seed = seeds::derive(seed, "synth/rec", &[s as u64, u64::from(day), idx as u64]);
                let recording =
                    generate_recording(&profile, &shift, condition, day, &config.signal, rec_seed)?;
                entries.push(CorpusEntry { recording, repetition, seed: rec_seed });
            }
        }
        profiles.push(profile);
        day2_shifts.push(day2_shift);
    }
    Ok(Corpus { seed, config: config.clone(), profiles, day2_shifts, entries })
}

// ---------------------------------------------------------------------------
// Corpus on disk
// ---------------------------------------------------------------------------

/// One manifest row per recording file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub day: u8,
    pub condition: Condition,
    pub repetition: usize,
    pub seed: u64,
    pub path: String,
    pub n_samples: usize,
}

/// Corpus manifest written next to the recording files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_subjects: usize,
    pub config: CorpusConfig,
    pub recordings: Vec<ManifestEntry>,
}

/// Write every recording as a CSV file plus `manifest.json` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut recordings = Vec::with_capacity(corpus.entries.len());
    for entry in &corpus.entries {
        let rec = &entry.recording;
        let name = format!(
            "{}_d{}_{}_r{}.csv",
            rec.subject_id,
            rec.day,
            rec.condition.token(),
            entry.repetition
        );
        dataio::write_recording_to_path(&dir.join(&name), rec)?;
        recordings.push(ManifestEntry {
            subject_id: rec.subject_id.clone(),
            day: rec.day,
            condition: rec.condition,
            repetition: entry.repetition,
            seed: entry.seed,
            path: name,
            n_samples: rec.n_samples(),
        });
    }
    let manifest = CorpusManifest {
        seed: corpus.seed,
        n_subjects: corpus.profiles.len(),
        config: corpus.config.clone(),
        recordings,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(dir.join("manifest.json"), bytes)?;
    Ok(manifest)
}

/// Load a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<(RawRecording, usize)>> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes)?;
    let mut out = Vec::with_capacity(manifest.recordings.len());
    for entry in &manifest.recordings {
        let rec = dataio::parse_recording(&dir.join(&entry.path))?;
        out.push((rec, entry.repetition));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_signal() -> SignalConfig {
        SignalConfig { reaction_latency_s: 0.0, ..SignalConfig::default() }
    }

    #[test]
    fn recording_is_deterministic() {
        let profile = flat_profile(20.0, 0.2);
        let shift = SessionShift::identity();
        let cfg = SignalConfig::default();
        let a = generate_recording(&profile, &shift, Condition::ArmOnMotorOn, 1, &cfg, 7).unwrap();
        let b = generate_recording(&profile, &shift, Condition::ArmOnMotorOn, 1, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_recording(&profile, &shift, Condition::ArmOnMotorOn, 1, &cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recording_length_and_run_structure() {
        let profile = flat_profile(20.0, 0.1);
        let rec = generate_recording(
            &profile,
            &SessionShift::identity(),
            Condition::ArmOnMotorOff,
            1,
            &SignalConfig::default(),
            3,
        )
        .unwrap();
        // 13 cues x 5 s x 100 Hz, verified by run-length enumeration.
        assert_eq!(rec.n_samples(), 6500);
        let runs = rec.cue_runs();
        assert_eq!(runs.len(), CUE_SCRIPT.len());
        for (run, expected) in runs.iter().zip(CUE_SCRIPT) {
            assert_eq!(run.0, expected);
            assert_eq!(run.2 - run.1 + 1, 500);
        }
        rec.validate().unwrap();
    }

    #[test]
    fn noiseless_identity_recording_is_exact() {
        let profile = flat_profile(0.0, 0.0);
        let rec = generate_recording(
            &profile,
            &SessionShift::identity(),
            Condition::ArmOnMotorOff,
            1,
            &quiet_signal(),
            11,
        )
        .unwrap();
        for t in 0..rec.n_samples() {
            let intent = rec.cues[t];
            for c in 0..NUM_CHANNELS {
                let expected =
                    (profile.mean_activation[[intent.index(), c]] + profile.tonic_level[c]).clamp(0.0, 1000.0);
                assert_eq!(rec.channels[[t, c]], expected, "sample {t} channel {c}");
            }
        }
    }

    #[test]
    fn condition_effects_shift_the_signal() {
        let profile = flat_profile(0.0, 0.0);
        let cfg = quiet_signal();
        let base = generate_recording(&profile, &SessionShift::identity(), Condition::ArmOnMotorOff, 1, &cfg, 1).unwrap();
        let arm_off =
            generate_recording(&profile, &SessionShift::identity(), Condition::ArmOffMotorOff, 1, &cfg, 1).unwrap();
        assert_abs_diff_eq!(arm_off.channels[[0, 0]] - base.channels[[0, 0]], cfg.arm_off_tonic_add, epsilon = 1e-12);

        let motor_on =
            generate_recording(&profile, &SessionShift::identity(), Condition::ArmOnMotorOn, 1, &cfg, 1).unwrap();
        // During an open run, flexor channels drop under motor assistance.
        let open_t = 750; // middle of the first open run
        assert!(motor_on.channels[[open_t, 0]] < base.channels[[open_t, 0]]);
        assert_eq!(motor_on.channels[[open_t, 6]], base.channels[[open_t, 6]]);
    }

    #[test]
    fn rotation_mixes_adjacent_channels() {
        let x = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
        let whole = rotate_channels(&x, 2.0);
        assert_eq!(whole, [30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 10.0, 20.0]);
        let frac = rotate_channels(&x, 0.5);
        assert_abs_diff_eq!(frac[0], 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frac[7], 45.0, epsilon = 1e-12);
        let neg = rotate_channels(&x, -1.0);
        assert_eq!(neg[0], 80.0);
    }

    #[test]
    fn reaction_latency_delays_activation() {
        let profile = flat_profile(0.0, 0.0);
        let cfg = SignalConfig::default();
        let lag = (cfg.reaction_latency_s * f64::from(cfg.sample_rate_hz)).round() as usize;
        assert!(lag > 0);
        let rec = generate_recording(&profile, &SessionShift::identity(), Condition::ArmOnMotorOff, 1, &cfg, 5).unwrap();
        // First open cue starts at sample 500; activation holds the relax
        // level for `lag` more samples.
        let relax_level = profile.mean_activation[[Intent::Relax.index(), 6]] + profile.tonic_level[6];
        let open_level = profile.mean_activation[[Intent::Open.index(), 6]] + profile.tonic_level[6];
        assert_eq!(rec.channels[[500 + lag - 1, 6]], relax_level);
        assert_eq!(rec.channels[[500 + lag, 6]], open_level);
        // Labels still follow the cue, not the delayed activation.
        assert_eq!(rec.cues[500], Intent::Open);
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let cfg = CorpusConfig::default();
        let corpus = generate_corpus(5, 1, &cfg).unwrap();
        assert_eq!(corpus.entries.len(), 70);
        let one = generate_corpus(1, 1, &cfg).unwrap();
        assert_eq!(one.entries.len(), 14);
        assert_eq!(one.entries.iter().filter(|e| e.recording.day == 1).count(), 8);
        assert_eq!(one.entries.iter().filter(|e| e.recording.day == 2).count(), 6);
        for entry in &one.entries {
            entry.recording.validate().unwrap();
        }

        let again = generate_corpus(5, 1, &cfg).unwrap();
        for (a, b) in corpus.entries.iter().zip(&again.entries) {
            assert_eq!(a.recording, b.recording);
        }
        let other = generate_corpus(5, 2, &cfg).unwrap();
        assert!(corpus.entries.iter().zip(&other.entries).any(|(a, b)| a.recording != b.recording));
    }

    #[test]
    fn day2_channel_means_shift_by_tone_drift() {
        // Isolate tone drift: no rotation, unit gain, fixed +40 counts, and
        // a tonic floor high enough that clipping at zero never bites.
        let mut cfg = CorpusConfig {
            signal: SignalConfig { arm_off_tonic_add: 0.0, motor_open_flexor_scale: 1.0, ..quiet_signal() },
            ..CorpusConfig::default()
        };
        cfg.profile_prior.tonic = Range::new(180.0, 220.0);
        cfg.profile_prior.noise_std = Range::new(20.0, 25.0);
        cfg.profile_prior.burst_rate = Range::new(0.0, 0.0);
        cfg.day2_shift_prior = ShiftPrior {
            rotation: Range::new(0.0, 0.0),
            gain: Range::new(1.0, 1.0),
            tone: Range::new(40.0, 40.0),
        };
        cfg.recording_jitter_prior = ShiftPrior {
            rotation: Range::new(0.0, 0.0),
            gain: Range::new(1.0, 1.0),
            tone: Range::new(0.0, 0.0),
        };
        let corpus = generate_corpus(1, 9, &cfg).unwrap();
        for c in 0..NUM_CHANNELS {
            let mut day = [(0.0f64, 0usize); 2];
            for e in &corpus.entries {
                let d = (e.recording.day - 1) as usize;
                day[d].0 += e.recording.channels.column(c).sum();
                day[d].1 += e.recording.n_samples();
            }
            let mean1 = day[0].0 / day[0].1 as f64;
            let mean2 = day[1].0 / day[1].1 as f64;
            // noise_std <= 25, over >= 39_000 samples per day: 3 standard
            // errors of the difference is well under 1 count.
            let se = 25.0 * ((1.0 / day[0].1 as f64) + (1.0 / day[1].1 as f64)).sqrt();
            assert!(
                ((mean2 - mean1) - 40.0).abs() <= 3.0 * se,
                "channel {c}: day shift {} not within 3 SE of 40",
                mean2 - mean1
            );
        }
    }

    #[test]
    fn noiseless_corpus_is_linearly_separable_on_pure_windows() {
        use crate::dataio::{preprocess, window, RescaleMode, WindowConfig};
        let cfg = CorpusConfig {
            signal: quiet_signal(),
            profile_prior: ProfilePrior {
                noise_std: Range::new(0.0, 0.0),
                burst_rate: Range::new(0.0, 0.0),
                ..ProfilePrior::default()
            },
            day2_shift_prior: ShiftPrior {
                rotation: Range::new(0.0, 0.0),
                gain: Range::new(1.0, 1.0),
                tone: Range::new(0.0, 0.0),
            },
            recording_jitter_prior: ShiftPrior {
                rotation: Range::new(0.0, 0.0),
                gain: Range::new(1.0, 1.0),
                tone: Range::new(0.0, 0.0),
            },
        };
        let corpus = generate_corpus(1, 13, &cfg).unwrap();
        let entry = &corpus.entries[0];
        let rec = preprocess(entry.recording.clone(), RescaleMode::FixedAffine).unwrap();
        let runs = rec.cue_runs();
        let w = 200usize;
        let windows = window(&rec, &WindowConfig::with_stride_ms(100.0)).unwrap();

        // Per-window channel means, restricted to windows lying inside one
        // cue run (boundary-straddling windows are genuinely ambiguous).
        let pure: Vec<_> = windows
            .iter()
            .filter(|win| {
                let start = win.t_end + 1 - w;
                runs.iter().any(|&(_, s, e)| start >= s && win.t_end <= e)
            })
            .collect();
        assert!(pure.len() > 20);

        let feat = |win: &crate::dataio::WindowedSample| -> [f64; NUM_CHANNELS] {
            let mut f = [0.0; NUM_CHANNELS];
            for c in 0..NUM_CHANNELS {
                f[c] = win.x.row(c).mean().unwrap();
            }
            f
        };
        // Nearest-centroid classifier: centroids from one window per class.
        let mut centroids: Vec<(Intent, [f64; NUM_CHANNELS])> = Vec::new();
        for intent in Intent::ALL {
            let win = pure.iter().find(|w| w.label == intent).unwrap();
            centroids.push((intent, feat(win)));
        }
        let correct = pure
            .iter()
            .filter(|win| {
                let f = feat(win);
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&f).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = b.1.iter().zip(&f).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best.0 == win.label
            })
            .count();
        assert_eq!(correct, pure.len(), "noiseless pure windows must classify perfectly");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        let corpus = generate_corpus(1, 3, &cfg).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(manifest.recordings.len(), 14);
        let loaded = read_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 14);
        for ((rec, rep), entry) in loaded.iter().zip(&corpus.entries) {
            assert_eq!(rec, &entry.recording);
            assert_eq!(*rep, entry.repetition);
        }
    }
}
