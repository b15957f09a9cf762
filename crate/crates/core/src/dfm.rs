//! Dual-stream patch forecaster with auxiliary multi-series heads.
//!
//! One parameter set forecasts from both the original window and REM's
//! purified reconstruction; the divergence between the two forecasts is the
//! anomaly signal. During training, a chain of auxiliary modules predicts
//! progressively later horizons, reusing the shared embedding and head.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::{patch_count, Config};
use crate::error::{shape_err, Error};
use crate::nn::{EncoderLayer, LayerNorm, Linear, Mode, Residual};
use crate::norm::TimeWindow;
use crate::params::{ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::Result;

/// Per-channel statistics of one window, kept on the tape as `[C, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Revin {
    pub mean: Var,
    pub std: Var,
}

/// Normalised, patched and embedded window.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    pub tokens: Var,
    pub revin: Revin,
}

/// The two forecast streams, each `[C, H]` in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPair {
    pub channels: usize,
    pub horizon: usize,
    pub y_orig: Vec<f64>,
    pub y_pure: Vec<f64>,
}

/// One auxiliary module: normalise both inputs, fuse, refine.
#[derive(Debug, Clone, Copy)]
pub struct MspModule {
    pub norm_input: LayerNorm,
    pub norm_hidden: LayerNorm,
    pub fusion: Linear,
    pub layer: EncoderLayer,
}

#[derive(Debug, Clone)]
pub struct Dfm {
    pub channels: usize,
    pub len: usize,
    pub horizon: usize,
    pub patch: usize,
    pub stride: usize,
    pub patches: usize,
    pub dim: usize,
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
    pub msp: Vec<MspModule>,
    pub epsilon: f64,
}

pub struct DfmLoss {
    pub total: Var,
    pub main: Var,
    /// Sum of auxiliary losses; `None` without auxiliary predictions.
    pub msp: Option<Var>,
    pub pred: Var,
    pub contra: Var,
}

impl Dfm {
    pub fn new(store: &mut ParamStore, cfg: &Config, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let (p, s, d) = (cfg.patch_size, cfg.patch_stride, cfg.hidden_dim);
        let n = patch_count(cfg.lookback, p, s)?;
        let embed = Linear::new(store, "dfm.embed", p, d, rng);
        let layers = (0..cfg.encoder_layers)
            .map(|m| EncoderLayer::new(store, &format!("dfm.encoder.{m}"), d, cfg.heads, Residual::PreNorm, rng))
            .collect();
        let head = Linear::new(store, "dfm.head", n * d, cfg.horizon, rng);
        let msp = (1..=cfg.msp_count)
            .map(|k| MspModule {
                norm_input: LayerNorm::new(store, &format!("dfm.msp.{k}.norm_input"), d),
                norm_hidden: LayerNorm::new(store, &format!("dfm.msp.{k}.norm_hidden"), d),
                fusion: Linear::new(store, &format!("dfm.msp.{k}.fusion"), 2 * d, d, rng),
                layer: EncoderLayer::new(store, &format!("dfm.msp.{k}.layer"), d, cfg.heads, Residual::PreNorm, rng),
            })
            .collect();
        Ok(Self {
            channels: cfg.num_channels,
            len: cfg.lookback,
            horizon: cfg.horizon,
            patch: p,
            stride: s,
            patches: n,
            dim: d,
            embed,
            layers,
            head,
            msp,
            epsilon: cfg.epsilon,
        })
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        let want = [self.channels, self.len];
        if tape.shape(x) != want {
            return Err(shape_err(&want, tape.shape(x)));
        }
        Ok(())
    }

    /// Place a window on the tape as a `[C, L]` constant.
    pub fn input(&self, tape: &mut Tape<'_>, w: &TimeWindow) -> Result<Var> {
        if w.channels() != self.channels || w.len() != self.len {
            return Err(shape_err(&[self.channels, self.len], &[w.channels(), w.len()]));
        }
        Ok(tape.constant(Tensor::new(&[self.channels, self.len], w.values().to_vec())?))
    }

    /// Instance normalisation on the tape; returns the normalised window.
    pub fn revin(&self, tape: &mut Tape<'_>, x: Var) -> (Var, Revin) {
        let mean = tape.mean_last(x);
        let centred = tape.sub_col(x, mean);
        let sq = tape.mul(centred, centred);
        let var = tape.mean_last(sq);
        let std = tape.clamped_sqrt(var, self.epsilon);
        (tape.div_col(centred, std), Revin { mean, std })
    }

    /// Revin, time-domain patching and the shared embedding: `[C, L] -> [C, N, D]`.
    pub fn dfm_embed(&self, tape: &mut Tape<'_>, x: Var) -> Result<Embedded> {
        self.check_input(tape, x)?;
        let (normed, revin) = self.revin(tape, x);
        let (c, l, p, s, n) = (self.channels, self.len, self.patch, self.stride, self.patches);
        let mut idx = Vec::with_capacity(c * n * p);
        for ch in 0..c {
            for i in 0..n {
                idx.extend((0..p).map(|j| ch * l + i * s + j));
            }
        }
        let patches = tape.gather(normed, Rc::from(idx), &[c, n, p]);
        Ok(Embedded { tokens: self.embed.forward(tape, patches), revin })
    }

    /// The main encoder stack; attention runs over the patch tokens of each channel.
    pub fn dfm_encode(&self, tape: &mut Tape<'_>, mode: &mut Mode, tokens: Var) -> Var {
        self.layers.iter().fold(tokens, |h, layer| layer.forward(tape, mode, h, None).output)
    }

    /// Shared head: flatten `[C, N, D]` per channel, map to `H`, denormalise.
    pub fn dfm_head(&self, tape: &mut Tape<'_>, hidden: Var, revin: Revin) -> Var {
        let flat = tape.reshape(hidden, &[self.channels, self.patches * self.dim]);
        let y = self.head.forward(tape, flat);
        let scaled = tape.mul_col(y, revin.std);
        tape.add_col(scaled, revin.mean)
    }

    /// Main path: returns the final hidden state and the forecast.
    pub fn main_forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, x: Var) -> Result<(Var, Var)> {
        let e = self.dfm_embed(tape, x)?;
        let hidden = self.dfm_encode(tape, mode, e.tokens);
        let y = self.dfm_head(tape, hidden, e.revin);
        Ok((hidden, y))
    }

    /// Auxiliary module `k` (1-based) on window `X_k` given the previous hidden state.
    pub fn msp_step(&self, tape: &mut Tape<'_>, mode: &mut Mode, k: usize, x: Var, h_prev: Var) -> Result<(Var, Var)> {
        if k == 0 || k > self.msp.len() {
            return Err(Error::InvalidConfig(format!("auxiliary module {k} outside 1..={}", self.msp.len())));
        }
        let module = &self.msp[k - 1];
        let e = self.dfm_embed(tape, x)?;
        let a = module.norm_input.forward(tape, e.tokens);
        let b = module.norm_hidden.forward(tape, h_prev);
        let cat = tape.concat_last(a, b);
        let fused = module.fusion.forward(tape, cat);
        let h = module.layer.forward(tape, mode, fused, None).output;
        let y = self.dfm_head(tape, h, e.revin);
        Ok((h, y))
    }

    /// Main forecast followed by the auxiliary chain; `inputs[k]` is `X_k`.
    /// Returns `Ŷ_0..Ŷ_n` where `n = min(inputs.len() - 1, modules)`.
    pub fn chain_forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, inputs: &[Var]) -> Result<Vec<Var>> {
        let (&x0, rest) = inputs.split_first().ok_or(Error::Empty("forecast inputs"))?;
        let (mut h, y0) = self.main_forward(tape, mode, x0)?;
        let mut out = alloc::vec![y0];
        for (k, &x) in rest.iter().take(self.msp.len()).enumerate() {
            let (hk, yk) = self.msp_step(tape, mode, k + 1, x, h)?;
            h = hk;
            out.push(yk);
        }
        Ok(out)
    }

    /// Both streams through the main path with shared parameters.
    pub fn dual_stream(&self, tape: &mut Tape<'_>, mode: &mut Mode, x0: Var, x0_rec: Var) -> Result<(Var, Var)> {
        let (_, orig) = self.main_forward(tape, mode, x0)?;
        let (_, pure) = self.main_forward(tape, mode, x0_rec)?;
        Ok((orig, pure))
    }

    /// Evaluation-mode dual-stream forecast with plain outputs.
    pub fn dual_stream_forward(&self, store: &ParamStore, x0: &TimeWindow, x0_rec: &TimeWindow) -> Result<ForecastPair> {
        let mut tape = Tape::new(store);
        let a = self.input(&mut tape, x0)?;
        let b = self.input(&mut tape, x0_rec)?;
        let (orig, pure) = self.dual_stream(&mut tape, &mut Mode::eval(), a, b)?;
        Ok(ForecastPair {
            channels: self.channels,
            horizon: self.horizon,
            y_orig: tape.value(orig).data().to_vec(),
            y_pure: tape.value(pure).data().to_vec(),
        })
    }

    /// Evaluation-mode single-stream forecast `[C, H]`.
    pub fn forecast(&self, store: &ParamStore, x0: &TimeWindow) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let a = self.input(&mut tape, x0)?;
        let (_, y) = self.main_forward(&mut tape, &mut Mode::eval(), a)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head.weight, self.head.bias]
    }
}

/// `λ_main·MSE(Y_0, Ŷ_0) + λ_msp·Σ_k MSE(Y_k, Ŷ_k) + λ_contra·MSE(Ŷ_0, Ŷ_0^rec)`.
/// `preds[0]` and `targets[0]` belong to the main path.
pub fn dfm_loss(
    tape: &mut Tape<'_>,
    preds: &[Var],
    targets: &[Var],
    pure: Var,
    lambda_main: f64,
    lambda_msp: f64,
    lambda_contra: f64,
) -> Result<DfmLoss> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(shape_err(&[preds.len()], &[targets.len()]));
    }
    let main = tape.mse(targets[0], preds[0]);
    let msp = preds[1..].iter().zip(&targets[1..]).fold(None, |acc, (&p, &t)| {
        let l = tape.mse(t, p);
        Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        })
    });
    let mut pred = tape.scale(main, lambda_main);
    if let Some(m) = msp {
        let weighted = tape.scale(m, lambda_msp);
        pred = tape.add(pred, weighted);
    }
    let contra = tape.mse(preds[0], pure);
    let weighted = tape.scale(contra, lambda_contra);
    let total = tape.add(pred, weighted);
    Ok(DfmLoss { total, main, msp, pred, contra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    fn cfg() -> Config {
        Config {
            num_channels: 2,
            lookback: 16,
            horizon: 4,
            patch_size: 4,
            patch_stride: 2,
            hidden_dim: 8,
            encoder_layers: 2,
            msp_count: 2,
            heads: 2,
            ..Config::default()
        }
    }

    fn window(seed: u64) -> TimeWindow {
        let mut r = rng::seeded(seed);
        TimeWindow::new(2, 16, (0..32).map(|_| 3.0 + 2.0 * rng::normal(&mut r)).collect()).unwrap()
    }

    fn model(seed: u64) -> (ParamStore, Dfm) {
        let mut store = ParamStore::new();
        let dfm = Dfm::new(&mut store, &cfg(), &mut rng::seeded(seed)).unwrap();
        (store, dfm)
    }

    #[test]
    fn embed_shape_and_constant_window() {
        let mut c = cfg();
        c.lookback = 192;
        c.patch_size = 16;
        c.patch_stride = 8;
        let mut store = ParamStore::new();
        let dfm = Dfm::new(&mut store, &c, &mut rng::seeded(0)).unwrap();
        assert_eq!(dfm.patches, 23);
        let mut tape = Tape::new(&store);
        let x = dfm.input(&mut tape, &TimeWindow::new(2, 192, vec![4.0; 384]).unwrap()).unwrap();
        let e = dfm.dfm_embed(&mut tape, x).unwrap();
        assert_eq!(tape.shape(e.tokens), &[2, 23, 8]);
        let bias = store.get(dfm.embed.bias).data();
        for tok in tape.value(e.tokens).data().chunks(8) {
            assert_eq!(tok, bias);
        }
    }

    #[test]
    fn embedding_is_affine_invariant_per_channel() {
        let (store, dfm) = model(1);
        let w = window(2);
        let mut scaled = w.values().to_vec();
        for (i, v) in scaled.iter_mut().enumerate() {
            *v = if i < 16 { 5.0 * *v - 7.0 } else { 0.5 * *v + 100.0 };
        }
        let w2 = TimeWindow::new(2, 16, scaled).unwrap();
        let mut tape = Tape::new(&store);
        let (a, b) = (dfm.input(&mut tape, &w).unwrap(), dfm.input(&mut tape, &w2).unwrap());
        let ea = dfm.dfm_embed(&mut tape, a).unwrap();
        let eb = dfm.dfm_embed(&mut tape, b).unwrap();
        for (x, y) in tape.value(ea.tokens).data().iter().zip(tape.value(eb.tokens).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_moves_forecast_by_the_same_constant() {
        let (store, dfm) = model(3);
        let w = window(4);
        let shifted = TimeWindow::new(2, 16, w.values().iter().enumerate().map(|(i, v)| v + if i < 16 { 10.0 } else { -3.0 }).collect()).unwrap();
        let a = dfm.forecast(&store, &w).unwrap();
        let b = dfm.forecast(&store, &shifted).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            let k = if i < 4 { 10.0 } else { -3.0 };
            assert!((y - x - k).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_encoder_is_identity_and_zero_layers_too() {
        let (mut store, dfm) = model(5);
        for layer in &dfm.layers {
            for id in [layer.attn.out.weight, layer.attn.out.bias, layer.ffn.down.weight, layer.ffn.down.bias] {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new(&store);
        let x = dfm.input(&mut tape, &window(6)).unwrap();
        let e = dfm.dfm_embed(&mut tape, x).unwrap();
        let p = dfm.dfm_encode(&mut tape, &mut Mode::eval(), e.tokens);
        assert_eq!(tape.value(p), tape.value(e.tokens));

        let mut c = cfg();
        c.encoder_layers = 0;
        let mut s0 = ParamStore::new();
        let d0 = Dfm::new(&mut s0, &c, &mut rng::seeded(0)).unwrap();
        let mut tape = Tape::new(&s0);
        let x = d0.input(&mut tape, &window(6)).unwrap();
        let e = d0.dfm_embed(&mut tape, x).unwrap();
        let p = d0.dfm_encode(&mut tape, &mut Mode::eval(), e.tokens);
        assert_eq!(p, e.tokens);
    }

    #[test]
    fn zero_head_forecasts_the_mean() {
        let (mut store, dfm) = model(7);
        for id in dfm.head_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let w = window(8);
        let y = dfm.forecast(&store, &w).unwrap();
        assert_eq!(y.len(), 8);
        for c in 0..2 {
            let m = w.channel(c).iter().sum::<f64>() / 16.0;
            assert!(y[c * 4..(c + 1) * 4].iter().all(|v| (v - m).abs() < 1e-12));
        }
    }

    #[test]
    fn head_is_shared_between_main_and_auxiliary_paths() {
        let (mut store, dfm) = model(9);
        let run = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let xs: Vec<Var> = (0..3).map(|k| dfm.input(&mut tape, &window(10 + k)).unwrap()).collect();
            let ys = dfm.chain_forward(&mut tape, &mut Mode::eval(), &xs).unwrap();
            ys.iter().map(|&y| tape.value(y).clone()).collect::<Vec<_>>()
        };
        let before = run(&store);
        store.get_mut(dfm.head.bias).data_mut()[0] += 1.0;
        let after = run(&store);
        for (b, a) in before.iter().zip(&after) {
            assert_ne!(b, a);
        }
    }

    #[test]
    fn dual_stream_identity_and_difference() {
        let (store, dfm) = model(11);
        let w = window(12);
        let same = dfm.dual_stream_forward(&store, &w, &w).unwrap();
        assert_eq!(same.y_orig, same.y_pure);
        let diff = dfm.dual_stream_forward(&store, &w, &window(13)).unwrap();
        assert_ne!(diff.y_orig, diff.y_pure);
        assert_eq!(diff.y_orig, dfm.forecast(&store, &w).unwrap());
    }

    #[test]
    fn chain_is_causal_and_fusion_can_cut_history() {
        let (mut store, dfm) = model(14);
        let run = |s: &ParamStore, seeds: [u64; 3]| {
            let mut tape = Tape::new(s);
            let xs: Vec<Var> = seeds.iter().map(|&k| dfm.input(&mut tape, &window(k)).unwrap()).collect();
            let ys = dfm.chain_forward(&mut tape, &mut Mode::eval(), &xs).unwrap();
            assert_eq!(tape.shape(ys[1]), &[2, 4]);
            ys.iter().map(|&y| tape.value(y).clone()).collect::<Vec<_>>()
        };
        let a = run(&store, [1, 2, 3]);
        let b = run(&store, [1, 2, 30]);
        assert_eq!((&a[0], &a[1]), (&b[0], &b[1]));
        assert_ne!(a[2], b[2]);
        let c = run(&store, [1, 20, 3]);
        assert_eq!(a[0], c[0]);
        assert_ne!(a[1], c[1]);
        assert_ne!(a[2], c[2]);

        // zero the rows of the fusion map that read the hidden half
        let d = dfm.dim;
        for m in &dfm.msp {
            let w = store.get_mut(m.fusion.weight).data_mut();
            w[d * d..].iter_mut().for_each(|v| *v = 0.0);
        }
        let e = run(&store, [1, 2, 3]);
        let f = run(&store, [40, 2, 3]);
        assert_ne!(e[0], f[0]);
        assert_eq!(e[1], f[1]);
    }

    #[test]
    fn msp_step_rejects_bad_index() {
        let (store, dfm) = model(15);
        let mut tape = Tape::new(&store);
        let x = dfm.input(&mut tape, &window(1)).unwrap();
        let (h, _) = dfm.main_forward(&mut tape, &mut Mode::eval(), x).unwrap();
        assert!(dfm.msp_step(&mut tape, &mut Mode::eval(), 0, x, h).is_err());
        assert!(dfm.msp_step(&mut tape, &mut Mode::eval(), 3, x, h).is_err());
        assert!(dfm.msp_step(&mut tape, &mut Mode::eval(), 2, x, h).is_ok());
    }

    #[test]
    fn loss_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let y = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let z = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let l = dfm_loss(&mut tape, &[y, y, y], &[y, y, y], y, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(tape.value(l.total).data()[0], 0.0);
        // n = 0: main MSE 2.5, contra MSE 2.5
        let l = dfm_loss(&mut tape, &[z], &[y], y, 0.5, 0.5, 1.0).unwrap();
        assert!(l.msp.is_none());
        assert_eq!(tape.value(l.total).data()[0], 0.5 * 2.5 + 2.5);
        let l = dfm_loss(&mut tape, &[y, z, z], &[y, y, y], y, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(tape.value(l.total).data()[0], 0.5 * 5.0);
        assert!(dfm_loss(&mut tape, &[y], &[y, y], y, 1.0, 1.0, 1.0).is_err());
    }
}
