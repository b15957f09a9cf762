//! Datasets and a synthetic generator with anomaly precursors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use crate::error::Error;
use crate::metrics::{extract_events, EventLabels};
use crate::rng::{self, Prng};
use crate::Result;

/// Train and test splits, each `C x T` row-major by channel. Only the test
/// split is labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channel_names: Vec<String>,
    pub train: Vec<f64>,
    pub train_len: usize,
    pub test: Vec<f64>,
    pub test_len: usize,
    pub test_labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: String, channel_names: Vec<String>, train: Vec<f64>, test: Vec<f64>, test_labels: Vec<u8>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(Error::InvalidData("dataset has no channels".into()));
        }
        for (split, v) in [("train", &train), ("test", &test)] {
            if v.len() % c != 0 {
                return Err(Error::InvalidData(format!("{split} split is not a whole number of {c}-channel rows")));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{split} value at channel {}, step {}", i / (v.len() / c), i % (v.len() / c))));
            }
        }
        let (train_len, test_len) = (train.len() / c, test.len() / c);
        if test_labels.len() != test_len {
            return Err(Error::InvalidData(format!("{} labels for {test_len} test steps", test_labels.len())));
        }
        extract_events(&test_labels)?;
        Ok(Self { name, channel_names, train, train_len, test, test_len, test_labels })
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn truth(&self) -> EventLabels {
        extract_events(&self.test_labels).expect("labels validated on construction")
    }

    /// Timestep-major rows of a split, as written to CSV.
    pub fn rows(series: &[f64], channels: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
        let total = series.len() / channels.max(1);
        (0..total).map(move |t| (0..channels).map(|c| series[c * total + t]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Short additive burst.
    Spike,
    /// Sustained additive offset.
    LevelShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecursorShape {
    /// Linear rise to the full precursor amplitude.
    Ramp,
    /// Small oscillation at the full precursor amplitude.
    Oscillation,
}

macro_rules! names {
    ($t:ty { $($v:ident = $s:literal),* }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s { $($s => Ok(Self::$v),)* _ => Err(Error::InvalidData(format!("unknown {} `{s}`", stringify!($t)))) }
            }
        }
    };
}

names!(AnomalyKind { Spike = "spike", LevelShift = "level_shift" });
names!(PrecursorShape { Ramp = "ramp", Oscillation = "oscillation" });

/// One injected event; `start` indexes the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub kind: AnomalyKind,
    pub start: usize,
    pub duration: usize,
    /// Signed, in data units.
    pub magnitude: f64,
    pub channels: Vec<usize>,
    pub precursor: PrecursorShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub channels: usize,
    pub train_len: usize,
    pub test_len: usize,
    /// Base period of each channel; a second component runs at 2.5x the frequency.
    pub periods: Vec<f64>,
    pub noise_sigma: f64,
    pub events: Vec<SynthEvent>,
    /// Steps before each event that carry the precursor.
    pub lead: usize,
    /// Precursor amplitude as a fraction of the event magnitude.
    pub alpha: f64,
    pub seed: u64,
}

/// Oscillation period of the precursor, in steps.
const PRECURSOR_PERIOD: f64 = 8.0;

impl SynthSpec {
    /// Four channels, 10 000 train and 10 000 test steps, 20 events
    /// alternating spike / level shift and ramp / oscillation precursors,
    /// 32-step lead, precursor at 30% of the event magnitude.
    pub fn standard(seed: u64) -> Self {
        Self::with_events(4, 10_000, 10_000, 20, 32, 0.3, seed)
    }

    /// Evenly slotted random events over the test split.
    pub fn with_events(channels: usize, train_len: usize, test_len: usize, count: usize, lead: usize, alpha: f64, seed: u64) -> Self {
        let base = [24.0, 40.0, 60.0, 96.0, 30.0, 72.0, 50.0, 120.0];
        let periods = (0..channels).map(|c| base[c % base.len()] * (1.0 + (c / base.len()) as f64 * 0.1)).collect();
        let mut r = rng::seeded(rng::mix(seed, 0xE7E7));
        let margin = 256.min(test_len / 4);
        let slot = if count == 0 { 0 } else { (test_len - margin) / count };
        let events = (0..count)
            .map(|i| {
                let kind = if i % 2 == 0 { AnomalyKind::Spike } else { AnomalyKind::LevelShift };
                let duration = match kind {
                    AnomalyKind::Spike => 2 + rng::below(&mut r, 5),
                    AnomalyKind::LevelShift => 16 + rng::below(&mut r, 33),
                };
                let room = slot.saturating_sub(lead + duration + 1).max(1);
                let start = margin + i * slot + lead + rng::below(&mut r, room);
                let sign = if rng::below(&mut r, 2) == 0 { 1.0 } else { -1.0 };
                let magnitude = sign * rng::uniform(&mut r, 2.5, 3.5);
                let width = 1 + rng::below(&mut r, channels.div_ceil(2).max(1));
                let mut chans: Vec<usize> = (0..channels).collect();
                rng::shuffle(&mut r, &mut chans);
                chans.truncate(width);
                chans.sort_unstable();
                let precursor = if (i / 2) % 2 == 0 { PrecursorShape::Ramp } else { PrecursorShape::Oscillation };
                SynthEvent { kind, start, duration, magnitude, channels: chans, precursor }
            })
            .collect();
        Self { channels, train_len, test_len, periods, noise_sigma: 0.1, events, lead, alpha, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.train_len == 0 || self.test_len == 0 {
            return bad("channels and split lengths must be positive".into());
        }
        if self.periods.len() != self.channels || self.periods.iter().any(|p| !(*p > 0.0)) {
            return bad(format!("need {} positive periods", self.channels));
        }
        if self.lead == 0 {
            return bad("precursor lead must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.noise_sigma >= 0.0) {
            return bad("alpha must lie in [0, 1] and noise_sigma be non-negative".into());
        }
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(self.events.len());
        for e in &self.events {
            if e.duration == 0 || e.start + e.duration > self.test_len || e.start < self.lead {
                return bad(format!("event at {} (duration {}) does not fit with its precursor", e.start, e.duration));
            }
            if e.channels.is_empty() || e.channels.iter().any(|&c| c >= self.channels) || !e.magnitude.is_finite() {
                return bad(format!("event at {} has invalid channels or magnitude", e.start));
            }
            spans.push((e.start - self.lead, e.start + e.duration));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return bad("events (with precursors) overlap".into());
        }
        Ok(())
    }
}

fn base_signal(spec: &SynthSpec, r: &mut Prng, offset: usize, len: usize, phases: &[(f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; spec.channels * len];
    for t in 0..len {
        let time = (offset + t) as f64;
        for c in 0..spec.channels {
            let (p1, p2) = phases[c];
            let w = 2.0 * PI / spec.periods[c];
            let v = libm::sin(w * time + p1) + 0.5 * libm::sin(2.5 * w * time + p2);
            out[c * len + t] = v + spec.noise_sigma * rng::normal(r);
        }
    }
    out
}

/// Build the dataset described by `spec`. The train split is the
/// anomaly-free base process; the test split continues it in time and adds
/// precursors and events. Only event intervals are labelled.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::seeded(rng::mix(spec.seed, 1));
    let phases: Vec<(f64, f64)> = (0..spec.channels).map(|_| (rng::uniform(&mut r, 0.0, 2.0 * PI), rng::uniform(&mut r, 0.0, 2.0 * PI))).collect();
    let train = base_signal(spec, &mut r, 0, spec.train_len, &phases);
    let mut test = base_signal(spec, &mut r, spec.train_len, spec.test_len, &phases);
    let mut labels = vec![0u8; spec.test_len];
    let n = spec.test_len;
    for e in &spec.events {
        let amp = spec.alpha * e.magnitude;
        for &c in &e.channels {
            let row = &mut test[c * n..(c + 1) * n];
            for i in 0..spec.lead {
                let t = e.start - spec.lead + i;
                row[t] += match e.precursor {
                    PrecursorShape::Ramp => amp * (i + 1) as f64 / spec.lead as f64,
                    PrecursorShape::Oscillation => amp * libm::sin(2.0 * PI * i as f64 / PRECURSOR_PERIOD),
                };
            }
            for v in &mut row[e.start..e.start + e.duration] {
                *v += e.magnitude;
            }
        }
        labels[e.start..e.start + e.duration].iter_mut().for_each(|v| *v = 1);
    }
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    Dataset::new(format!("synthetic-{}", spec.seed), names, train, test, labels)
}
