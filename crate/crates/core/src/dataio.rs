//! Recording files and the preprocessing chain.
//!
//! A recording is an uninterrupted 8-channel EMG time series at 100 Hz with
//! one cue label per sample. Preprocessing follows a fixed chain: raw counts
//! are clipped to `[0, 1000]`, rescaled to `[-1, 1]` by the fixed affine map
//! `c -> c/500 - 1`, then cut into 2-second sliding windows (10 ms stride by
//! default). A window is labeled by the cue at its final sample, so
//! inference is causal: predict the intent *now* from the preceding 2 s.
//!
//! The rescale map is intentionally not per-recording min-max: using the
//! clip range keeps the scaling identical across sessions and subjects, so
//! a model transferred across sessions sees commensurable inputs. A
//! min-max variant exists behind [`RescaleMode`] for sensitivity studies.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of EMG electrode channels on the armband.
pub const NUM_CHANNELS: usize = 8;

/// Upper clip bound for raw sensor counts.
pub const CLIP_MAX: f64 = 1000.0;

/// Lower clip bound for raw sensor counts.
pub const CLIP_MIN: f64 = 0.0;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Three-class hand intent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Relax,
    Open,
    Close,
}

impl Intent {
    pub const ALL: [Intent; 3] = [Intent::Relax, Intent::Open, Intent::Close];

    /// Class index used for one-hot targets and confusion counting.
    pub fn index(self) -> usize {
        match self {
            Intent::Relax => 0,
            Intent::Open => 1,
            Intent::Close => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Intent> {
        Intent::ALL.get(i).copied()
    }

    fn token(self) -> &'static str {
        match self {
            Intent::Relax => "relax",
            Intent::Open => "open",
            Intent::Close => "close",
        }
    }

    fn from_token(tok: &str) -> Option<Intent> {
        match tok {
            "relax" => Some(Intent::Relax),
            "open" => Some(Intent::Open),
            "close" => Some(Intent::Close),
            _ => None,
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Recording condition: arm position crossed with orthosis motor state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Arm on table, motor off (`on_off`).
    #[serde(rename = "on_off")]
    ArmOnMotorOff,
    /// Arm on table, motor on (`on_on`).
    #[serde(rename = "on_on")]
    ArmOnMotorOn,
    /// Arm off table, motor off (`off_off`).
    #[serde(rename = "off_off")]
    ArmOffMotorOff,
    /// Arm off table, motor on (`off_on`).
    #[serde(rename = "off_on")]
    ArmOffMotorOn,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::ArmOnMotorOff,
        Condition::ArmOnMotorOn,
        Condition::ArmOffMotorOff,
        Condition::ArmOffMotorOn,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Condition::ArmOnMotorOff => "on_off",
            Condition::ArmOnMotorOn => "on_on",
            Condition::ArmOffMotorOff => "off_off",
            Condition::ArmOffMotorOn => "off_on",
        }
    }

    pub fn from_token(tok: &str) -> Option<Condition> {
        Condition::ALL.iter().copied().find(|c| c.token() == tok)
    }

    /// True when the orthosis motor is engaged.
    pub fn motor_on(self) -> bool {
        matches!(self, Condition::ArmOnMotorOn | Condition::ArmOffMotorOn)
    }

    /// True when the arm is held off the table.
    pub fn arm_off_table(self) -> bool {
        matches!(self, Condition::ArmOffMotorOff | Condition::ArmOffMotorOn)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One uninterrupted 8-channel recording with per-sample cue labels.
///
/// `channels` is `[n_samples x 8]` in raw sensor counts (or in `[-1, 1]`
/// after preprocessing); `cues` has one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub day: u8,
    pub condition: Condition,
    pub sample_rate_hz: u32,
    pub channels: Array2<f64>,
    pub cues: Vec<Intent>,
}

/// A maximal run of identical cues: `(intent, first_index, last_index)`.
pub type CueRun = (Intent, usize, usize);

impl RawRecording {
    pub fn n_samples(&self) -> usize {
        self.channels.nrows()
    }

    /// Maximal runs of identical consecutive cues, in order.
    pub fn cue_runs(&self) -> Vec<CueRun> {
        let mut runs = Vec::new();
        let mut iter = self.cues.iter().enumerate();
        let Some((_, &first)) = iter.next() else {
            return runs;
        };
        let mut cur = (first, 0usize, 0usize);
        for (i, &cue) in iter {
            if cue == cur.0 {
                cur.2 = i;
            } else {
                runs.push(cur);
                cur = (cue, i, i);
            }
        }
        runs.push(cur);
        runs
    }

    /// Check the type invariants: label/sample alignment, channel count,
    /// and the three-motion cue structure (exactly three `open` runs and
    /// three `close` runs).
    pub fn validate(&self) -> Result<()> {
        if self.channels.nrows() != self.cues.len() {
            return Err(Error::Structure(format!(
                "channel rows ({}) != cue count ({})",
                self.channels.nrows(),
                self.cues.len()
            )));
        }
        if self.channels.ncols() != NUM_CHANNELS {
            return Err(Error::Structure(format!(
                "expected {} channels, found {}",
                NUM_CHANNELS,
                self.channels.ncols()
            )));
        }
        let runs = self.cue_runs();
        let opens = runs.iter().filter(|r| r.0 == Intent::Open).count();
        let closes = runs.iter().filter(|r| r.0 == Intent::Close).count();
        if opens != 3 || closes != 3 {
            return Err(Error::Structure(format!(
                "expected three open runs and three close runs, found {opens} open and {closes} close"
            )));
        }
        Ok(())
    }
}

/// One 2-second window `x` (shape `[8 x W]`, entries in `[-1, 1]`) with the
/// cue at its final sample as label.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub x: Array2<f64>,
    pub label: Intent,
    /// Sample index of the window's final sample in the source recording.
    pub t_end: usize,
}

impl WindowedSample {
    /// Flatten channel-major: channel 0's W samples, then channel 1's, ...
    ///
    /// This is the order the classifier input and all checkpoints use.
    pub fn flatten(&self) -> Vec<f64> {
        self.x.iter().copied().collect()
    }
}

/// Probabilities over the three intents; sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub p_relax: f64,
    pub p_open: f64,
    pub p_close: f64,
}

impl IntentDistribution {
    pub fn from_probs(p: [f64; 3]) -> IntentDistribution {
        IntentDistribution { p_relax: p[0], p_open: p[1], p_close: p[2] }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_relax, self.p_open, self.p_close]
    }

    /// Intent with the highest probability (lowest index wins ties).
    pub fn argmax(&self) -> Intent {
        let p = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if p[i] > p[best] {
                best = i;
            }
        }
        Intent::from_index(best).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.as_array();
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Precondition("probabilities must lie in [0,1]".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Windowing configuration
// ---------------------------------------------------------------------------

/// Sliding-window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window length in seconds (2 s by default).
    pub window_seconds: f64,
    /// Stride between window end points in milliseconds (10 ms by default).
    pub stride_ms: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_seconds: 2.0, stride_ms: 10.0 }
    }
}

impl WindowConfig {
    pub fn with_stride_ms(stride_ms: f64) -> WindowConfig {
        WindowConfig { stride_ms, ..WindowConfig::default() }
    }

    /// Window length in samples; must come out integral and positive.
    pub fn window_len(&self, sample_rate_hz: u32) -> Result<usize> {
        let w = self.window_seconds * f64::from(sample_rate_hz);
        let rounded = w.round();
        if (w - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "window of {} s at {} Hz is not a positive whole number of samples",
                self.window_seconds, sample_rate_hz
            )));
        }
        Ok(rounded as usize)
    }

    /// Stride in samples; must come out integral and positive.
    pub fn stride_samples(&self, sample_rate_hz: u32) -> Result<usize> {
        let s = self.stride_ms * f64::from(sample_rate_hz) / 1000.0;
        let rounded = s.round();
        if (s - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "stride of {} ms at {} Hz is not a positive whole number of samples",
                self.stride_ms, sample_rate_hz
            )));
        }
        Ok(rounded as usize)
    }
}

/// End indices of all windows: `w-1, w-1+s, w-1+2s, ...` while they fit.
pub fn window_ends(n_samples: usize, window_len: usize, stride: usize) -> Vec<usize> {
    if n_samples < window_len {
        return Vec::new();
    }
    ((window_len - 1)..n_samples).step_by(stride).collect()
}

// ---------------------------------------------------------------------------
// Preprocessing operations
// ---------------------------------------------------------------------------

/// Clip every channel entry to `[0, 1000]`. Labels and metadata unchanged.
pub fn clip_channels(mut rec: RawRecording) -> RawRecording {
    rec.channels.mapv_inplace(|c| c.clamp(CLIP_MIN, CLIP_MAX));
    rec
}

/// How channel values are mapped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Fixed affine map from the clip range: `c -> c/500 - 1`.
    #[default]
    FixedAffine,
    /// Per-recording, per-channel min-max; not comparable across sessions.
    PerRecordingMinMax,
}

/// Rescale clipped counts to `[-1, 1]` by the fixed map `c -> c/500 - 1`.
///
/// Requires every entry to already lie in the clip range.
pub fn rescale_channels(mut rec: RawRecording) -> Result<RawRecording> {
    if let Some(bad) = rec.channels.iter().find(|&&c| !(CLIP_MIN..=CLIP_MAX).contains(&c)) {
        return Err(Error::Precondition(format!(
            "rescale requires entries in [{CLIP_MIN}, {CLIP_MAX}]; found {bad}"
        )));
    }
    rec.channels.mapv_inplace(|c| c / 500.0 - 1.0);
    Ok(rec)
}

/// Per-recording min-max rescale variant ([`RescaleMode::PerRecordingMinMax`]).
///
/// A constant channel maps to all zeros.
pub fn rescale_channels_minmax(mut rec: RawRecording) -> RawRecording {
    for mut col in rec.channels.columns_mut() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let mid = (hi + lo) / 2.0;
            let half = (hi - lo) / 2.0;
            col.mapv_inplace(|c| (c - mid) / half);
        } else {
            col.fill(0.0);
        }
    }
    rec
}

/// Full preprocessing chain on a raw recording: clip then rescale.
pub fn preprocess(rec: RawRecording, mode: RescaleMode) -> Result<RawRecording> {
    let clipped = clip_channels(rec);
    match mode {
        RescaleMode::FixedAffine => rescale_channels(clipped),
        RescaleMode::PerRecordingMinMax => Ok(rescale_channels_minmax(clipped)),
    }
}

/// Cut a preprocessed recording into labeled sliding windows.
///
/// Windows end at samples `W-1, W-1+s, W-1+2s, ...`; each is labeled by the
/// cue at its final sample. There is no zero padding, so the recording must
/// contain at least one full window.
pub fn window(rec: &RawRecording, cfg: &WindowConfig) -> Result<Vec<WindowedSample>> {
    let w = cfg.window_len(rec.sample_rate_hz)?;
    let s = cfg.stride_samples(rec.sample_rate_hz)?;
    if rec.channels.iter().any(|&c| !(-1.0..=1.0).contains(&c)) {
        return Err(Error::Precondition(
            "window expects a preprocessed recording with entries in [-1, 1]".into(),
        ));
    }
    let n = rec.n_samples();
    if n < w {
        return Err(Error::Empty(format!(
            "recording has {n} samples, shorter than one {w}-sample window"
        )));
    }
    let ends = window_ends(n, w, s);
    let mut out = Vec::with_capacity(ends.len());
    for t_end in ends {
        out.push(extract_window(rec, t_end, w));
    }
    Ok(out)
}

/// Materialize the single window ending at `t_end` (inclusive).
pub fn extract_window(rec: &RawRecording, t_end: usize, window_len: usize) -> WindowedSample {
    let start = t_end + 1 - window_len;
    let slab = rec.channels.slice(ndarray::s![start..=t_end, ..]);
    // [W x 8] -> [8 x W]
    let x = slab.t().to_owned();
    WindowedSample { x, label: rec.cues[t_end], t_end }
}

// ---------------------------------------------------------------------------
// Recording file format
// ---------------------------------------------------------------------------

const META_HEADER: &str = "subject,day,condition,rate_hz";
const DATA_HEADER: &str = "e1,e2,e3,e4,e5,e6,e7,e8,cue";

/// Parse a recording file. See the crate README for the schema.
pub fn parse_recording(path: &Path) -> Result<RawRecording> {
    let file = std::fs::File::open(path)?;
    parse_recording_from(BufReader::new(file))
}

/// Parse a recording from any reader; errors carry 1-based line numbers.
pub fn parse_recording_from<R: BufRead>(reader: R) -> Result<RawRecording> {
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = reader.lines().enumerate();

    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l.trim_end_matches('\r').to_string())),
            Some((i, Err(e))) => Err(parse_err(i + 1, e.to_string())),
            None => Err(parse_err(0, format!("unexpected end of file, expected {expect}"))),
        }
    };

    let (ln, header) = next_line("metadata header")?;
    if header != META_HEADER {
        return Err(parse_err(ln, format!("malformed header: expected `{META_HEADER}`, found `{header}`")));
    }

    let (ln, meta) = next_line("metadata row")?;
    let fields: Vec<&str> = meta.split(',').collect();
    if fields.len() != 4 {
        return Err(parse_err(ln, format!("metadata row must have 4 fields, found {}", fields.len())));
    }
    let subject_id = fields[0].to_string();
    if subject_id.is_empty() {
        return Err(parse_err(ln, "empty subject id".into()));
    }
    let day: u8 = fields[1]
        .parse()
        .ok()
        .filter(|d| *d == 1 || *d == 2)
        .ok_or_else(|| parse_err(ln, format!("day must be 1 or 2, found `{}`", fields[1])))?;
    let condition = Condition::from_token(fields[2])
        .ok_or_else(|| parse_err(ln, format!("unknown condition token `{}`", fields[2])))?;
    let sample_rate_hz: u32 = fields[3]
        .parse()
        .ok()
        .filter(|r| *r > 0)
        .ok_or_else(|| parse_err(ln, format!("rate_hz must be a positive integer, found `{}`", fields[3])))?;

    let (ln, header) = next_line("channel header")?;
    if header != DATA_HEADER {
        return Err(parse_err(ln, format!("malformed header: expected `{DATA_HEADER}`, found `{header}`")));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut cues: Vec<Intent> = Vec::new();
    let mut last_line = ln;
    for (i, line) in lines {
        let ln = i + 1;
        last_line = ln;
        let line = match line {
            Ok(l) => l.trim_end_matches('\r').to_string(),
            Err(e) => return Err(parse_err(ln, e.to_string())),
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != NUM_CHANNELS + 1 {
            return Err(parse_err(
                ln,
                format!("expected 8 channels plus cue ({} fields), found {}", NUM_CHANNELS + 1, fields.len()),
            ));
        }
        for f in &fields[..NUM_CHANNELS] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(ln, format!("invalid channel value `{f}`")))?;
            rows.push(v);
        }
        let cue = Intent::from_token(fields[NUM_CHANNELS])
            .ok_or_else(|| parse_err(ln, format!("unknown cue token `{}`", fields[NUM_CHANNELS])))?;
        cues.push(cue);
    }

    let n = cues.len();
    let channels = Array2::from_shape_vec((n, NUM_CHANNELS), rows)
        .map_err(|e| parse_err(last_line, e.to_string()))?;
    let rec = RawRecording { subject_id, day, condition, sample_rate_hz, channels, cues };
    rec.validate().map_err(|e| parse_err(last_line, e.to_string()))?;
    Ok(rec)
}

/// Write a recording in the exact file schema; floats keep full round-trip
/// precision (shortest representation that parses back identically).
pub fn write_recording<W: Write>(mut out: W, rec: &RawRecording) -> Result<()> {
    writeln!(out, "{META_HEADER}")?;
    writeln!(out, "{},{},{},{}", rec.subject_id, rec.day, rec.condition.token(), rec.sample_rate_hz)?;
    writeln!(out, "{DATA_HEADER}")?;
    let mut line = String::new();
    for (row, cue) in rec.channels.rows().into_iter().zip(&rec.cues) {
        line.clear();
        for v in row.iter() {
            line.push_str(&format!("{v}"));
            line.push(',');
        }
        line.push_str(cue.token());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Write a recording to a file path.
pub fn write_recording_to_path(path: &Path, rec: &RawRecording) -> Result<()> {
    let mut buf = Vec::new();
    write_recording(&mut buf, rec)?;
    std::fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
