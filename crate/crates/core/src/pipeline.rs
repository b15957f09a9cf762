//! Sample generation, joint training, scoring and thresholding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::model::{pointwise_contrast, LossParts, RedF};
use crate::nn::Mode;
use crate::norm::{instance_normalize, TimeWindow};
use crate::optim::{clip_global_norm, Adam};
use crate::params::Grads;
use crate::rng;
use crate::{Config, Result};

/// Observation windows `X_0..X_n` and their horizons `Y_0..Y_n`; window `k`
/// starts `k*H` steps after window 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MspSampleSet {
    pub start: usize,
    pub inputs: Vec<TimeWindow>,
    /// `C x H`, row-major by channel.
    pub targets: Vec<Vec<f64>>,
}

/// Smallest series length that fits a sample set starting at 0.
pub fn min_series_len(lookback: usize, horizon: usize, msp: usize) -> usize {
    msp * horizon + lookback + horizon
}

/// Cut one sample set out of a `C x T` series (row-major by channel).
pub fn generate_samples(series: &[f64], channels: usize, total: usize, start: usize, lookback: usize, horizon: usize, msp: usize) -> Result<MspSampleSet> {
    if series.len() != channels * total {
        return Err(crate::error::shape_err(&[channels, total], &[series.len()]));
    }
    let needed = start + min_series_len(lookback, horizon, msp);
    if needed > total {
        return Err(Error::OutOfBounds { needed, available: total });
    }
    let mut inputs = Vec::with_capacity(msp + 1);
    let mut targets = Vec::with_capacity(msp + 1);
    for k in 0..=msp {
        let t = start + k * horizon;
        inputs.push(TimeWindow::slice(series, channels, total, t, lookback)?);
        targets.push(TimeWindow::slice(series, channels, total, t + lookback, horizon)?.into_values());
    }
    Ok(MspSampleSet { start, inputs, targets })
}

/// Training portion of a train split; the last `val_fraction` is held out.
pub fn split_validation(total: usize, val_fraction: f64) -> (usize, usize) {
    let val = libm::floor(total as f64 * val_fraction) as usize;
    (total - val, val)
}

/// Copy columns `[from, to)` of a `C x T` series.
pub fn columns(series: &[f64], channels: usize, total: usize, from: usize, to: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * (to - from));
    for c in 0..channels {
        out.extend_from_slice(&series[c * total + from..c * total + to]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossParts,
    pub grad_norm: f64,
}

/// Streams of the deterministic training RNG.
mod stream {
    pub const SHUFFLE: u64 = 1 << 32;
    pub const SAMPLE: u64 = 2 << 32;
}

/// Joint training over one train split (`C x T`, row-major by channel).
pub struct Trainer {
    pub model: RedF,
    optimizer: Adam,
    starts: Vec<usize>,
    series: Vec<f64>,
    total: usize,
    epoch: usize,
    samples_seen: u64,
}

impl Trainer {
    /// `series` must already exclude the validation tail.
    pub fn new(config: Config, series: Vec<f64>, total: usize) -> Result<Self> {
        let model = RedF::new(config)?;
        Self::resume(model, series, total)
    }

    pub fn resume(model: RedF, series: Vec<f64>, total: usize) -> Result<Self> {
        let cfg = &model.config;
        if series.len() != cfg.num_channels * total {
            return Err(crate::error::shape_err(&[cfg.num_channels, total], &[series.len()]));
        }
        let span = min_series_len(cfg.lookback, cfg.horizon, cfg.msp_count);
        if total < span {
            return Err(Error::OutOfBounds { needed: span, available: total });
        }
        let starts: Vec<usize> = (0..=total - span).step_by(cfg.train_stride.max(1)).collect();
        let optimizer = Adam::new(&model.store, cfg.learning_rate);
        Ok(Self { model, optimizer, starts, series, total, epoch: 0, samples_seen: 0 })
    }

    pub fn sample_count(&self) -> usize {
        self.starts.len()
    }

    /// One pass over all samples in a seeded shuffled order.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = self.model.config.clone();
        let mut order = self.starts.clone();
        rng::shuffle(&mut rng::seeded(rng::mix(cfg.seed, stream::SHUFFLE + self.epoch as u64)), &mut order);
        let mut sum = LossParts::default();
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = Grads::zeros_like(&self.model.store);
            for &start in batch {
                let sample = generate_samples(&self.series, cfg.num_channels, self.total, start, cfg.lookback, cfg.horizon, cfg.msp_count)?;
                let mut mode = Mode::train(rng::mix(cfg.seed, stream::SAMPLE + self.samples_seen), cfg.dropout);
                self.samples_seen += 1;
                let (parts, g) = self.model.sample_gradients(&mut mode, &sample)?;
                if !parts.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {} sample start {start}: rem {} pred {} contra {}",
                        self.epoch + 1,
                        parts.rem,
                        parts.pred,
                        parts.contra
                    )));
                }
                sum.add(&parts);
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {}", self.epoch + 1)));
            }
            norm_sum += clip_global_norm(&mut grads, cfg.grad_clip);
            batches += 1;
            self.optimizer.step(&mut self.model.store, &grads);
        }
        sum.scale(1.0 / order.len() as f64);
        self.epoch += 1;
        Ok(EpochLog { epoch: self.epoch, losses: sum, grad_norm: norm_sum / batches.max(1) as f64 })
    }

    /// Run the configured number of epochs, reporting each to `on_epoch`.
    pub fn fit<F: FnMut(&EpochLog)>(mut self, mut on_epoch: F) -> Result<(RedF, Vec<EpochLog>)> {
        let mut logs = Vec::new();
        for _ in 0..self.model.config.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok((self.model, logs))
    }
}

/// Train on a full train split: the last `val_fraction` is held out.
pub fn train(config: Config, train: &[f64], total: usize) -> Result<(RedF, Vec<EpochLog>)> {
    let (fit_len, _) = split_validation(total, config.val_fraction);
    let series = columns(train, config.num_channels, total, 0, fit_len);
    Trainer::new(config, series, fit_len)?.fit(|_| {})
}

/// Per-timestep anomaly scores aligned to absolute timesteps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnomalyScoreSeries {
    pub timesteps: Vec<usize>,
    pub scores: Vec<f64>,
}

impl AnomalyScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Dense array over `[0, total)` with `fill` where no score exists.
    pub fn dense(&self, total: usize, fill: f64) -> Vec<f64> {
        let mut out = vec![fill; total];
        for (&t, &s) in self.timesteps.iter().zip(&self.scores) {
            if t < total {
                out[t] = s;
            }
        }
        out
    }
}

/// Averages per-timestep contributions from overlapping windows.
struct Accumulator {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    fn new(total: usize) -> Self {
        Self { sum: vec![0.0; total], count: vec![0; total] }
    }

    fn add(&mut self, start: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.sum[start + i] += v;
            self.count[start + i] += 1;
        }
    }

    fn finish(self, offset: usize) -> AnomalyScoreSeries {
        let mut out = AnomalyScoreSeries::default();
        for (t, (s, n)) in self.sum.into_iter().zip(self.count).enumerate() {
            if n > 0 {
                out.timesteps.push(offset + t);
                out.scores.push(s / n as f64);
            }
        }
        out
    }
}

/// Window starts `0, stride, ...` that leave room for `span` steps, plus one
/// start aligned to the end so the tail is covered.
fn window_starts(total: usize, span: usize, stride: usize) -> Vec<usize> {
    if total < span {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=total - span).step_by(stride.max(1)).collect();
    if starts.last() != Some(&(total - span)) {
        starts.push(total - span);
    }
    starts
}

/// Contrastive anomaly scores with a caller-supplied purifier; `score` uses
/// the model's REM. `offset` shifts the reported timesteps.
pub fn score_with<P>(model: &RedF, series: &[f64], total: usize, offset: usize, mut purify: P) -> Result<AnomalyScoreSeries>
where
    P: FnMut(&TimeWindow) -> Result<TimeWindow>,
{
    let cfg = &model.config;
    let (c, l, h) = (cfg.num_channels, cfg.lookback, cfg.horizon);
    if series.len() != c * total {
        return Err(crate::error::shape_err(&[c, total], &[series.len()]));
    }
    if total < l + h {
        return Err(Error::OutOfBounds { needed: l + h, available: total });
    }
    let mut acc = Accumulator::new(total);
    for start in window_starts(total, l + h, cfg.effective_score_stride()) {
        let x0 = TimeWindow::slice(series, c, total, start, l)?;
        let purified = purify(&x0)?;
        let pair = model.dfm.dual_stream_forward(&model.store, &x0, &purified)?;
        let s = pointwise_contrast(&pair);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score for window at {}", offset + start)));
        }
        acc.add(start + l, &s);
    }
    Ok(acc.finish(offset))
}

pub fn score(model: &RedF, series: &[f64], total: usize, offset: usize) -> Result<AnomalyScoreSeries> {
    score_with(model, series, total, offset, |w| model.purify(w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub delta: f64,
    pub r_pct: f64,
}

/// Nearest-rank cut of the pooled scores: `δ` is the sorted value at index
/// `⌈q·N⌉` (clamped) with `q = 1 - r/100`; points with `score > δ` are flagged.
pub fn threshold(val: &[f64], test: &[f64], r_pct: f64) -> Result<Threshold> {
    if !(r_pct > 0.0 && r_pct < 100.0) {
        return Err(Error::InvalidConfig(format!("anomaly_ratio must lie in (0, 100), got {r_pct}")));
    }
    let mut pooled: Vec<f64> = val.iter().chain(test).copied().collect();
    if pooled.is_empty() {
        return Err(Error::Empty("score pool"));
    }
    if pooled.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("score pool contains NaN".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let q = (100.0 - r_pct) / 100.0;
    let rank = libm::ceil(q * pooled.len() as f64 - 1e-9) as usize;
    Ok(Threshold { delta: pooled[rank.min(pooled.len() - 1)], r_pct })
}

pub fn apply_threshold(scores: &[f64], t: &Threshold) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > t.delta)).collect()
}

/// REM-only detection: mean squared reconstruction error across channels
/// in normalised space, per timestep. Windows of the model's lookback tile
/// the series; a final window is aligned to the end when it does not divide.
pub fn rem_ad_score(model: &RedF, series: &[f64], total: usize, offset: usize) -> Result<AnomalyScoreSeries> {
    let cfg = &model.config;
    let (c, l) = (cfg.num_channels, cfg.lookback);
    if series.len() != c * total {
        return Err(crate::error::shape_err(&[c, total], &[series.len()]));
    }
    if total < l {
        return Err(Error::OutOfBounds { needed: l, available: total });
    }
    let mut acc = Accumulator::new(total);
    for start in window_starts(total, l, l) {
        let x = TimeWindow::slice(series, c, total, start, l)?;
        let (recon, _, _) = model.rem.reconstruct(&model.store, &x)?;
        let (xn, stats) = instance_normalize(&x, cfg.epsilon);
        let err: Vec<f64> = (0..l)
            .map(|t| {
                (0..c)
                    .map(|ch| {
                        let r = (recon.channel(ch)[t] - stats.mean[ch]) / stats.std[ch];
                        let d = xn.channel(ch)[t] - r;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64
            })
            .collect();
        acc.add(start, &err);
    }
    Ok(acc.finish(offset))
}

/// Main-stream forecasts for every window start (stride as for scoring).
#[derive(Debug, Clone, PartialEq)]
pub struct Forecasts {
    pub channels: usize,
    pub horizon: usize,
    /// First forecast timestep of each window.
    pub origins: Vec<usize>,
    /// One `C x H` block per origin.
    pub values: Vec<Vec<f64>>,
    pub mse: f64,
    pub mae: f64,
}

pub fn forecast_only(model: &RedF, series: &[f64], total: usize, offset: usize) -> Result<Forecasts> {
    let cfg = &model.config;
    let (c, l, h) = (cfg.num_channels, cfg.lookback, cfg.horizon);
    if series.len() != c * total {
        return Err(crate::error::shape_err(&[c, total], &[series.len()]));
    }
    if total < l + h {
        return Err(Error::OutOfBounds { needed: l + h, available: total });
    }
    let mut out = Forecasts { channels: c, horizon: h, origins: Vec::new(), values: Vec::new(), mse: 0.0, mae: 0.0 };
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for start in window_starts(total, l + h, cfg.effective_score_stride()) {
        let x0 = TimeWindow::slice(series, c, total, start, l)?;
        let truth = TimeWindow::slice(series, c, total, start + l, h)?;
        let y = model.dfm.forecast(&model.store, &x0)?;
        for (p, t) in y.iter().zip(truth.values()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        n += y.len();
        out.origins.push(offset + start + l);
        out.values.push(y);
    }
    out.mse = se / n as f64;
    out.mae = ae / n as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Config {
        Config {
            num_channels: 2,
            lookback: 16,
            horizon: 4,
            patch_size: 4,
            patch_stride: 2,
            hidden_dim: 8,
            encoder_layers: 1,
            msp_count: 1,
            heads: 2,
            batch_size: 4,
            epochs: 2,
            train_stride: 3,
            learning_rate: 1e-3,
            ..Config::default()
        }
    }

    fn wave(c: usize, t: usize) -> Vec<f64> {
        (0..c * t).map(|i| libm::sin((i % t) as f64 * 0.4 + (i / t) as f64)).collect()
    }

    #[test]
    fn algorithm_trace_example() {
        let series: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let s = generate_samples(&series, 1, 8, 0, 4, 2, 1).unwrap();
        assert_eq!(s.inputs[0].values(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.targets[0], vec![4.0, 5.0]);
        assert_eq!(s.inputs[1].values(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.targets[1], vec![6.0, 7.0]);
        assert_eq!(s.inputs[1].origin, 2);
        assert!(generate_samples(&series, 1, 8, 1, 4, 2, 1).is_err());
        let single = generate_samples(&series, 1, 8, 0, 4, 2, 0).unwrap();
        assert_eq!((single.inputs.len(), single.targets.len()), (1, 1));
        assert_eq!(min_series_len(192, 32, 2), 288);
    }

    proptest! {
        #[test]
        fn samples_match_direct_slicing(c in 1usize..3, l in 1usize..12, h in 1usize..6, n in 0usize..4, extra in 0usize..10, t in 0usize..8) {
            let total = t + n * h + l + h + extra;
            let series: Vec<f64> = (0..c * total).map(|i| i as f64).collect();
            let s = generate_samples(&series, c, total, t, l, h, n).unwrap();
            for k in 0..=n {
                for ch in 0..c {
                    let x: Vec<f64> = (0..l).map(|j| series[ch * total + t + k * h + j]).collect();
                    let y: Vec<f64> = (0..h).map(|j| series[ch * total + t + k * h + l + j]).collect();
                    prop_assert_eq!(s.inputs[k].channel(ch), &x[..]);
                    prop_assert_eq!(&s.targets[k][ch * h..(ch + 1) * h], &y[..]);
                }
            }
        }

        #[test]
        fn threshold_is_monotone_in_ratio(scores in proptest::collection::vec(0.0f64..10.0, 1..60), a in 0.1f64..99.0, b in 0.1f64..99.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let tl = threshold(&scores, &[], lo).unwrap();
            let th = threshold(&scores, &[], hi).unwrap();
            prop_assert!(th.delta <= tl.delta);
            prop_assert!(scores.contains(&tl.delta));
        }
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (0..100).map(|v| v as f64).collect();
        assert_eq!(threshold(&scores[..50], &scores[50..], 2.0).unwrap().delta, 98.0);
        let flat = vec![3.0; 10];
        let t = threshold(&flat, &[], 1.0).unwrap();
        assert_eq!(t.delta, 3.0);
        assert!(apply_threshold(&flat, &t).iter().all(|&v| v == 0));
        let uniform: Vec<f64> = (0..10_000).map(|v| v as f64 / 10_000.0).collect();
        let t = threshold(&uniform, &[], 1.0).unwrap();
        let flagged = apply_threshold(&uniform, &t).iter().filter(|&&v| v == 1).count();
        assert!((95..=100).contains(&flagged), "{flagged}");
        assert!(threshold(&[], &[], 1.0).is_err());
        assert!(threshold(&scores, &[], 0.0).is_err());
    }

    #[test]
    fn null_purifier_scores_zero() {
        let model = RedF::new(small()).unwrap();
        let s = wave(2, 60);
        let out = score_with(&model, &s, 60, 100, |w| Ok(w.clone())).unwrap();
        assert!(!out.is_empty());
        assert!(out.scores.iter().all(|&v| v == 0.0));
        assert_eq!(out.timesteps[0], 116);
        let real = score(&model, &s, 60, 0).unwrap();
        assert!(real.scores.iter().all(|&v| v >= 0.0));
        assert!(score(&model, &wave(2, 19), 19, 0).is_err());
    }

    #[test]
    fn overlapping_windows_average() {
        let mut cfg = small();
        cfg.score_stride = 1;
        let model = RedF::new(cfg).unwrap();
        let s = wave(2, 24);
        let out = score(&model, &s, 24, 0).unwrap();
        assert_eq!(out.timesteps, (16..24).collect::<Vec<_>>());
        // timestep 19 is covered by windows starting at 0..=3
        let mut expected = 0.0;
        for start in 0..4 {
            let x = TimeWindow::slice(&s, 2, 24, start, 16).unwrap();
            let pair = model.forecast_pair(&x).unwrap();
            expected += pointwise_contrast(&pair)[19 - 16 - start];
        }
        assert!((out.scores[3] - expected / 4.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let cfg = small();
        let s = wave(2, 80);
        let (a, la) = train(cfg.clone(), &s, 80).unwrap();
        let (b, lb) = train(cfg.clone(), &s, 80).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
        assert!(la.iter().all(|l| l.losses.is_finite()));
        let mut other = cfg;
        other.seed = 1;
        let (c, _) = train(other, &s, 80).unwrap();
        assert_ne!(a.store, c.store);
        assert!(train(small(), &wave(2, 20), 20).is_err());
    }

    #[test]
    fn rem_scores_cover_every_timestep() {
        let model = RedF::new(small()).unwrap();
        let s = wave(2, 40);
        let out = rem_ad_score(&model, &s, 40, 0).unwrap();
        assert_eq!(out.timesteps, (0..40).collect::<Vec<_>>());
        assert!(out.scores.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn forecast_only_matches_the_main_stream() {
        let model = RedF::new(small()).unwrap();
        let s = wave(2, 40);
        let f = forecast_only(&model, &s, 40, 0).unwrap();
        assert_eq!(f.origins, vec![16, 20, 24, 28, 32, 36]);
        let x = TimeWindow::slice(&s, 2, 40, 4, 16).unwrap();
        assert_eq!(f.values[1], model.forecast_pair(&x).unwrap().y_orig);
        assert!(f.mse >= 0.0 && f.mae >= 0.0);
    }

    #[test]
    fn window_starts_cover_the_tail() {
        assert_eq!(window_starts(20, 8, 4), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(22, 8, 4), vec![0, 4, 8, 12, 14]);
        assert_eq!(window_starts(8, 8, 4), vec![0]);
        assert!(window_starts(7, 8, 4).is_empty());
    }
}
