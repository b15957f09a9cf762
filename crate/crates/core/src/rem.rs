//! Reconstruction-elimination model.
//!
//! A window is normalised, moved to the frequency domain and cut into
//! overlapping frequency patches. Two views of the patches are modelled:
//! across channels within a patch (attention constrained by a sampled
//! channel-similarity graph) and across patches within a channel. The fused
//! features are projected back to a full spectrum and inverted, giving a
//! reconstruction that follows the normal patterns seen in training.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::config::{patch_count, Config, MaskMode};
use crate::error::shape_err;
use crate::fft::SpectralPair;
use crate::nn::{EncoderLayer, Linear, Mode, Residual};
use crate::norm::{instance_normalize, InstanceStats, TimeWindow};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;
use crate::Result;

/// Patched spectrum, real bins then imaginary bins along the last axis.
/// `values` is `[N, C, 2p]` for the inter view and `[C, N, 2p]` for the intra view.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn at(&self, a: usize, b: usize) -> &[f64] {
        let w = self.shape[2];
        let start = (a * self.shape[1] + b) * w;
        &self.values[start..start + w]
    }
}

/// Per-patch channel graph. All arrays are `[N, C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub patches: usize,
    pub channels: usize,
    pub distance: Vec<f64>,
    pub similarity: Vec<f64>,
    /// Edge probabilities: similarity divided by its row maximum.
    pub probability: Vec<f64>,
    /// Mask actually applied to attention; `None` when the graph is disabled.
    pub mask: Option<Vec<f64>>,
}

impl SimilarityGraph {
    pub fn index(&self, patch: usize, m: usize, n: usize) -> usize {
        (patch * self.channels + m) * self.channels + n
    }
}

/// Gather indices cutting `[C, 2L]` spectra into the two patch views.
fn patch_indices(channels: usize, len: usize, patch: usize, stride: usize) -> Result<(Rc<[usize]>, Rc<[usize]>, usize)> {
    let n = patch_count(len, patch, stride)?;
    let at = |c: usize, i: usize, j: usize| -> usize {
        if j < patch {
            c * 2 * len + i * stride + j
        } else {
            c * 2 * len + len + i * stride + (j - patch)
        }
    };
    let mut inter = Vec::with_capacity(n * channels * 2 * patch);
    for i in 0..n {
        for c in 0..channels {
            inter.extend((0..2 * patch).map(|j| at(c, i, j)));
        }
    }
    let mut intra = Vec::with_capacity(n * channels * 2 * patch);
    for c in 0..channels {
        for i in 0..n {
            intra.extend((0..2 * patch).map(|j| at(c, i, j)));
        }
    }
    Ok((inter.into(), intra.into(), n))
}

/// Both patch views of a spectrum. Patch `j` covers bins `[j*s, j*s + p)`.
pub fn patch_frequency(sp: &SpectralPair, patch: usize, stride: usize) -> Result<(PatchGrid, PatchGrid)> {
    let (c, l) = (sp.channels, sp.len);
    let (inter_idx, intra_idx, n) = patch_indices(c, l, patch, stride)?;
    let mut flat = Vec::with_capacity(2 * c * l);
    for ch in 0..c {
        flat.extend_from_slice(&sp.real[ch * l..(ch + 1) * l]);
        flat.extend_from_slice(&sp.imag[ch * l..(ch + 1) * l]);
    }
    let inter = PatchGrid { shape: [n, c, 2 * patch], values: inter_idx.iter().map(|&i| flat[i]).collect() };
    let intra = PatchGrid { shape: [c, n, 2 * patch], values: intra_idx.iter().map(|&i| flat[i]).collect() };
    Ok((inter, intra))
}

/// Graph construction settings.
#[derive(Debug, Clone, Copy)]
pub struct GraphSettings {
    pub epsilon: f64,
    pub temperature: f64,
    pub mask_mode: MaskMode,
    pub enabled: bool,
}

impl GraphSettings {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            epsilon: cfg.epsilon,
            temperature: cfg.gumbel_temperature,
            mask_mode: cfg.mask_mode,
            enabled: cfg.use_graph,
        }
    }
}

/// Tape handles for one graph.
pub struct GraphVars {
    pub distance: Var,
    pub similarity: Var,
    pub probability: Var,
    /// Relaxed sample before straight-through hardening (training, binary mode).
    pub relaxed: Option<Var>,
    pub mask: Option<Var>,
}

/// Learnable parts of the model; ids point into the shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Rem {
    pub channels: usize,
    pub len: usize,
    pub patch: usize,
    pub stride: usize,
    pub patches: usize,
    pub dim: usize,
    pub embed_inter: Linear,
    pub embed_intra: Linear,
    /// Raw distance weights; the effective weights are `softplus(raw)`.
    pub distance_weight: ParamId,
    pub inter: EncoderLayer,
    pub intra: EncoderLayer,
    pub proj_real: Linear,
    pub proj_imag: Linear,
    pub graph: GraphSettings,
    pub epsilon: f64,
}

/// Everything a REM forward pass leaves on the tape.
pub struct RemTrace {
    pub stats: InstanceStats,
    pub input_norm: Var,
    pub spectrum_in: Var,
    pub inter_embedding: Var,
    pub intra_embedding: Var,
    pub graph: GraphVars,
    pub inter_out: Var,
    pub intra_out: Var,
    pub inter_attention: Var,
    pub fused: Var,
    pub real_rec: Var,
    pub imag_rec: Var,
    pub recon_norm: Var,
    pub recon: Var,
}

pub struct RemLoss {
    pub total: Var,
    pub time: Var,
    pub freq: Var,
}

/// `softplus(raw) = 1`
pub const UNIT_SOFTPLUS: f64 = 0.541_324_854_612_918_1;

impl Rem {
    pub fn new(store: &mut ParamStore, cfg: &Config, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let (c, l, p, s, d) = (cfg.num_channels, cfg.lookback, cfg.patch_size, cfg.patch_stride, cfg.hidden_dim);
        let n = patch_count(l, p, s)?;
        let embed_inter = Linear::new(store, "rem.embed_inter", 2 * p, d, rng);
        let embed_intra = Linear::new(store, "rem.embed_intra", 2 * p, d, rng);
        let distance_weight = store.add("rem.distance_weight", Tensor::full(&[d], UNIT_SOFTPLUS));
        let inter = EncoderLayer::new(store, "rem.inter", d, cfg.heads, Residual::FromNormalized, rng);
        let intra = EncoderLayer::new(store, "rem.intra", d, cfg.heads, Residual::FromNormalized, rng);
        let proj_real = Linear::new(store, "rem.proj_real", n * d, l, rng);
        let proj_imag = Linear::new(store, "rem.proj_imag", n * d, l, rng);
        Ok(Self {
            channels: c,
            len: l,
            patch: p,
            stride: s,
            patches: n,
            dim: d,
            embed_inter,
            embed_intra,
            distance_weight,
            inter,
            intra,
            proj_real,
            proj_imag,
            graph: GraphSettings::from_config(cfg),
            epsilon: cfg.epsilon,
        })
    }

    fn check_window(&self, w: &TimeWindow) -> Result<()> {
        if w.channels() != self.channels || w.len() != self.len {
            return Err(shape_err(&[self.channels, self.len], &[w.channels(), w.len()]));
        }
        Ok(())
    }

    /// `[C, 2L]` spectrum -> inter `[N, C, 2p]` and intra `[C, N, 2p]` views.
    pub fn patch(&self, tape: &mut Tape<'_>, spectrum: Var) -> Result<(Var, Var)> {
        let (inter_idx, intra_idx, n) = patch_indices(self.channels, self.len, self.patch, self.stride)?;
        let (c, w) = (self.channels, 2 * self.patch);
        let inter = tape.gather(spectrum, inter_idx, &[n, c, w]);
        let intra = tape.gather(spectrum, intra_idx, &[c, n, w]);
        Ok((inter, intra))
    }

    /// Separate affine maps `2p -> D` for the two views.
    pub fn embed(&self, tape: &mut Tape<'_>, inter: Var, intra: Var) -> (Var, Var) {
        (self.embed_inter.forward(tape, inter), self.embed_intra.forward(tape, intra))
    }

    /// Weighted L1 distances between channel magnitude vectors in each patch,
    /// their inverse similarities, edge probabilities and the attention mask.
    pub fn build_graph(&self, tape: &mut Tape<'_>, mode: &mut Mode, inter: Var) -> GraphVars {
        let g = self.graph;
        let magnitude = tape.abs(inter);
        let raw = tape.param(self.distance_weight);
        let weights = tape.softplus(raw);
        let distance = tape.pairwise_l1(magnitude, weights);
        let similarity = tape.recip_eps(distance, g.epsilon);
        let probability = tape.row_max_normalize(similarity);
        let mut relaxed = None;
        let mask = if !g.enabled {
            None
        } else {
            match g.mask_mode {
                MaskMode::Soft => Some(probability),
                MaskMode::Binary if mode.is_training() => {
                    let count = tape.value(probability).len();
                    let noise: Vec<f64> = (0..count).map(|_| rng::logistic(mode.rng())).collect();
                    let soft = tape.gumbel_sigmoid(probability, &noise, g.temperature);
                    let hard = self.harden(tape.value(soft), 0.5);
                    relaxed = Some(soft);
                    Some(tape.straight_through(soft, hard))
                }
                MaskMode::Binary => {
                    let hard = self.harden(tape.value(probability), 0.5);
                    Some(tape.constant(hard))
                }
            }
        };
        GraphVars { distance, similarity, probability, relaxed, mask }
    }

    /// `1` where `value >= threshold` or on the diagonal, else `0`.
    fn harden(&self, values: &Tensor, threshold: f64) -> Tensor {
        let c = self.channels;
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (m, n) = ((i / c) % c, i % c);
            *v = if m == n || *v >= threshold { 1.0 } else { 0.0 };
        }
        out
    }

    /// Masked encoder layer over the channel tokens of each frequency patch.
    pub fn inter_attention(&self, tape: &mut Tape<'_>, mode: &mut Mode, inter: Var, mask: Option<Var>) -> (Var, Var) {
        let out = self.inter.forward(tape, mode, inter, mask);
        (out.output, out.attention)
    }

    /// Unmasked encoder layer over the frequency-patch tokens of each channel.
    pub fn intra_attention(&self, tape: &mut Tape<'_>, mode: &mut Mode, intra: Var) -> Var {
        self.intra.forward(tape, mode, intra, None).output
    }

    /// Align the inter view to `[C, N, D]`, average with the intra view and
    /// project each channel's flattened features to real and imaginary spectra.
    pub fn fuse_and_project(&self, tape: &mut Tape<'_>, inter_out: Var, intra_out: Var) -> (Var, Var, Var) {
        let (c, n, d) = (self.channels, self.patches, self.dim);
        let aligned = tape.permute(inter_out, &[1, 0, 2]);
        let sum = tape.add(aligned, intra_out);
        let fused = tape.scale(sum, 0.5);
        let flat = tape.reshape(fused, &[c, n * d]);
        let real = self.proj_real.forward(tape, flat);
        let imag = self.proj_imag.forward(tape, flat);
        (fused, real, imag)
    }

    /// Full pass: normalise, transform, model, project, invert, denormalise.
    pub fn forward(&self, tape: &mut Tape<'_>, mode: &mut Mode, window: &TimeWindow) -> Result<RemTrace> {
        self.check_window(window)?;
        let (c, l) = (self.channels, self.len);
        let (normed, stats) = instance_normalize(window, self.epsilon);
        let input_norm = tape.constant(Tensor::new(&[c, l], normed.into_values())?);
        let spectrum_in = tape.dft(input_norm);
        let (inter_p, intra_p) = self.patch(tape, spectrum_in)?;
        let (inter_e, intra_e) = self.embed(tape, inter_p, intra_p);
        let graph = self.build_graph(tape, mode, inter_e);
        let (inter_out, inter_attention) = self.inter_attention(tape, mode, inter_e, graph.mask);
        let intra_out = self.intra_attention(tape, mode, intra_e);
        let (fused, real_rec, imag_rec) = self.fuse_and_project(tape, inter_out, intra_out);
        let spectrum_rec = tape.concat_last(real_rec, imag_rec);
        let recon_norm = tape.idft(spectrum_rec);
        let std = tape.constant(Tensor::new(&[c, 1], stats.std.clone())?);
        let mean = tape.constant(Tensor::new(&[c, 1], stats.mean.clone())?);
        let scaled = tape.mul_col(recon_norm, std);
        let recon = tape.add_col(scaled, mean);
        Ok(RemTrace {
            stats,
            input_norm,
            spectrum_in,
            inter_embedding: inter_e,
            intra_embedding: intra_e,
            graph,
            inter_out,
            intra_out,
            inter_attention,
            fused,
            real_rec,
            imag_rec,
            recon_norm,
            recon,
        })
    }

    /// `lambda_time * MSE(x, x_rec) + lambda_freq * (MSE(Re) + MSE(Im))`, in
    /// normalised space.
    pub fn loss(&self, tape: &mut Tape<'_>, trace: &RemTrace, lambda_time: f64, lambda_freq: f64) -> RemLoss {
        let (c, l) = (self.channels, self.len);
        let mut re_idx = Vec::with_capacity(c * l);
        let mut im_idx = Vec::with_capacity(c * l);
        for ch in 0..c {
            re_idx.extend(ch * 2 * l..ch * 2 * l + l);
            im_idx.extend(ch * 2 * l + l..(ch + 1) * 2 * l);
        }
        let real_in = tape.gather(trace.spectrum_in, re_idx.into(), &[c, l]);
        let imag_in = tape.gather(trace.spectrum_in, im_idx.into(), &[c, l]);
        rem_loss(tape, trace.input_norm, trace.recon_norm, (real_in, imag_in), (trace.real_rec, trace.imag_rec), lambda_time, lambda_freq)
    }

    /// Evaluation-mode reconstruction with plain outputs: the denormalised
    /// window, the reconstructed spectrum and the input spectrum (both in
    /// normalised space).
    pub fn reconstruct(&self, store: &ParamStore, window: &TimeWindow) -> Result<(TimeWindow, SpectralPair, SpectralPair)> {
        let mut tape = Tape::new(store);
        let trace = self.forward(&mut tape, &mut Mode::eval(), window)?;
        let (c, l) = (self.channels, self.len);
        let recon = TimeWindow::from_parts(c, l, tape.value(trace.recon).data().to_vec(), window.origin);
        let rec = SpectralPair::new(c, l, tape.value(trace.real_rec).data().to_vec(), tape.value(trace.imag_rec).data().to_vec())?;
        let spec = tape.value(trace.spectrum_in).data();
        let mut real = Vec::with_capacity(c * l);
        let mut imag = Vec::with_capacity(c * l);
        for ch in 0..c {
            real.extend_from_slice(&spec[ch * 2 * l..ch * 2 * l + l]);
            imag.extend_from_slice(&spec[ch * 2 * l + l..(ch + 1) * 2 * l]);
        }
        Ok((recon, rec, SpectralPair::new(c, l, real, imag)?))
    }

    /// Evaluation-mode graph for a window, as plain arrays.
    pub fn graph_for(&self, store: &ParamStore, window: &TimeWindow, mode: &mut Mode) -> Result<SimilarityGraph> {
        let mut tape = Tape::new(store);
        let trace = self.forward(&mut tape, mode, window)?;
        Ok(self.graph_values(&tape, &trace.graph))
    }

    pub fn graph_values(&self, tape: &Tape<'_>, g: &GraphVars) -> SimilarityGraph {
        SimilarityGraph {
            patches: self.patches,
            channels: self.channels,
            distance: tape.value(g.distance).data().to_vec(),
            similarity: tape.value(g.similarity).data().to_vec(),
            probability: tape.value(g.probability).data().to_vec(),
            mask: g.mask.map(|m| tape.value(m).data().to_vec()),
        }
    }

    /// Parameter ids of the inter-view encoder followed by the intra-view one.
    pub fn encoder_param_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (self.inter.param_ids().to_vec(), self.intra.param_ids().to_vec())
    }

    pub fn describe(&self) -> alloc::string::String {
        format!("rem C={} L={} p={} s={} N={} D={}", self.channels, self.len, self.patch, self.stride, self.patches, self.dim)
    }
}

/// Reconstruction objective on tape values already in normalised space.
pub fn rem_loss(
    tape: &mut Tape<'_>,
    input: Var,
    recon: Var,
    spectrum_in: (Var, Var),
    spectrum_rec: (Var, Var),
    lambda_time: f64,
    lambda_freq: f64,
) -> RemLoss {
    let time = tape.mse(input, recon);
    let re = tape.mse(spectrum_in.0, spectrum_rec.0);
    let im = tape.mse(spectrum_in.1, spectrum_rec.1);
    let freq = tape.add(re, im);
    let a = tape.scale(time, lambda_time);
    let b = tape.scale(freq, lambda_freq);
    let total = tape.add(a, b);
    RemLoss { total, time, freq }
}
