//! The joint model: REM and DFM over one parameter store.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::dfm::{dfm_loss, Dfm, DfmLoss, ForecastPair};
use crate::error::Error;
use crate::nn::Mode;
use crate::norm::TimeWindow;
use crate::params::{Grads, ParamStore};
use crate::pipeline::MspSampleSet;
use crate::rem::{Rem, RemLoss, RemTrace};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Config, Result};

#[derive(Debug, Clone)]
pub struct RedF {
    pub config: Config,
    pub store: ParamStore,
    pub rem: Rem,
    pub dfm: Dfm,
}

/// Scalar loss components of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rem: f64,
    pub pred: f64,
    pub contra: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.rem += o.rem;
        self.pred += o.pred;
        self.contra += o.contra;
        self.total += o.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.rem *= k;
        self.pred *= k;
        self.contra *= k;
        self.total *= k;
    }

    pub fn is_finite(&self) -> bool {
        self.rem.is_finite() && self.pred.is_finite() && self.contra.is_finite() && self.total.is_finite()
    }
}

/// Tape handles of a full training-objective evaluation.
pub struct JointTrace {
    pub rem: RemTrace,
    pub rem_loss: RemLoss,
    pub dfm_loss: DfmLoss,
    pub preds: Vec<Var>,
    pub pure: Var,
    pub total: Var,
}

impl RedF {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(rng::mix(config.seed, 0));
        let rem = Rem::new(&mut store, &config, &mut r)?;
        let dfm = Dfm::new(&mut store, &config, &mut r)?;
        Ok(Self { config, store, rem, dfm })
    }

    /// Rebuild the architecture for `config` and take every parameter from
    /// `params`, which must name exactly the same tensors.
    pub fn from_params<'a, I>(config: Config, params: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Tensor)>,
    {
        let mut model = Self::new(config)?;
        let mut seen = 0;
        for (name, t) in params {
            model.store.assign(name, t)?;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::InvalidData(alloc::format!(
                "expected {} parameter tensors, found {seen}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// The training objective `L_rem + L_dfm` for one sample set.
    pub fn objective(&self, tape: &mut Tape<'_>, mode: &mut Mode, sample: &MspSampleSet) -> Result<JointTrace> {
        let cfg = &self.config;
        let (c, h) = (cfg.num_channels, cfg.horizon);
        let x0 = sample.inputs.first().ok_or(Error::Empty("sample inputs"))?;
        let rem = self.rem.forward(tape, mode, x0)?;
        let rem_loss = self.rem.loss(tape, &rem, cfg.lambda_time, cfg.lambda_freq);
        let purified = if cfg.detach_purified { tape.detach(rem.recon) } else { rem.recon };

        let used = sample.inputs.len().min(self.dfm.msp.len() + 1);
        let mut inputs = Vec::with_capacity(used);
        for w in &sample.inputs[..used] {
            inputs.push(self.dfm.input(tape, w)?);
        }
        let preds = self.dfm.chain_forward(tape, mode, &inputs)?;
        let (_, pure) = self.dfm.main_forward(tape, mode, purified)?;
        let mut targets = Vec::with_capacity(preds.len());
        for y in &sample.targets[..preds.len()] {
            targets.push(tape.constant(Tensor::new(&[c, h], y.clone())?));
        }
        let dfm_loss = dfm_loss(tape, &preds, &targets, pure, cfg.lambda_main, cfg.lambda_msp, cfg.lambda_contra)?;
        let total = tape.add(rem_loss.total, dfm_loss.total);
        Ok(JointTrace { rem, rem_loss, dfm_loss, preds, pure, total })
    }

    /// Loss parts and parameter gradients of one sample.
    pub fn sample_gradients(&self, mode: &mut Mode, sample: &MspSampleSet) -> Result<(LossParts, Grads)> {
        let mut tape = Tape::new(&self.store);
        let trace = self.objective(&mut tape, mode, sample)?;
        let parts = self.parts(&tape, &trace);
        let grads = tape.backward(trace.total).param_grads(&tape);
        Ok((parts, grads))
    }

    /// Loss parts without gradients.
    pub fn sample_loss(&self, mode: &mut Mode, sample: &MspSampleSet) -> Result<LossParts> {
        let mut tape = Tape::new(&self.store);
        let trace = self.objective(&mut tape, mode, sample)?;
        Ok(self.parts(&tape, &trace))
    }

    fn parts(&self, tape: &Tape<'_>, t: &JointTrace) -> LossParts {
        let v = |x: Var| tape.value(x).data()[0];
        LossParts { rem: v(t.rem_loss.total), pred: v(t.dfm_loss.pred), contra: v(t.dfm_loss.contra), total: v(t.total) }
    }

    /// Purified reconstruction of a window (evaluation mode, data units).
    pub fn purify(&self, window: &TimeWindow) -> Result<TimeWindow> {
        Ok(self.rem.reconstruct(&self.store, window)?.0)
    }

    /// Both forecast streams for a window (evaluation mode).
    pub fn forecast_pair(&self, window: &TimeWindow) -> Result<ForecastPair> {
        let purified = self.purify(window)?;
        self.dfm.dual_stream_forward(&self.store, window, &purified)
    }

    /// Per-timestep contrastive score over the horizon: channel mean of the
    /// squared stream difference.
    pub fn horizon_scores(&self, pair: &ForecastPair) -> Vec<f64> {
        pointwise_contrast(pair)
    }
}

/// Mean over channels of `(Ŷ_0 - Ŷ_0^rec)^2` at each horizon step.
pub fn pointwise_contrast(pair: &ForecastPair) -> Vec<f64> {
    let (c, h) = (pair.channels, pair.horizon);
    (0..h)
        .map(|t| {
            (0..c)
                .map(|ch| {
                    let d = pair.y_orig[ch * h + t] - pair.y_pure[ch * h + t];
                    d * d
                })
                .sum::<f64>()
                / c as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::generate_samples;
    use alloc::vec;

    fn cfg() -> Config {
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
            ..Config::default()
        }
    }

    fn series(t: usize) -> Vec<f64> {
        (0..2 * t).map(|i| libm::sin(i as f64 * 0.37) + 0.1 * (i % 7) as f64).collect()
    }

    #[test]
    fn contrast_example() {
        let pair = ForecastPair { channels: 2, horizon: 3, y_orig: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0], y_pure: vec![0.0; 6] };
        assert_eq!(pointwise_contrast(&pair), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let model = RedF::new(cfg()).unwrap();
        let s = series(40);
        let sample = generate_samples(&s, 2, 40, 0, 16, 4, 1).unwrap();
        let (parts, grads) = model.sample_gradients(&mut Mode::train(1, 0.1), &sample).unwrap();
        assert!(parts.is_finite());
        assert!((parts.total - parts.rem - parts.pred - parts.contra).abs() < 1e-9);
        for (i, t) in grads.tensors.iter().enumerate() {
            let name = model.store.name(crate::params::ParamId(i));
            assert!(t.data().iter().any(|&g| g != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn detached_purification_blocks_contrast_into_rem() {
        let mut c = cfg();
        c.lambda_time = 0.0;
        c.lambda_freq = 0.0;
        c.detach_purified = true;
        let model = RedF::new(c).unwrap();
        let s = series(40);
        let sample = generate_samples(&s, 2, 40, 0, 16, 4, 1).unwrap();
        let (_, grads) = model.sample_gradients(&mut Mode::eval(), &sample).unwrap();
        let w = model.rem.proj_real.weight;
        assert!(grads.get(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rebuild_from_params() {
        let model = RedF::new(cfg()).unwrap();
        let params: Vec<(&str, Tensor)> = model.store.iter().map(|(n, t)| (n, t.clone())).collect();
        let mut other = cfg();
        other.seed = 99;
        let copy = RedF::from_params(other, params.clone()).unwrap();
        assert_eq!(copy.store, model.store);
        assert!(RedF::from_params(cfg(), params.into_iter().skip(1)).is_err());
    }
}
