//! Full complex discrete Fourier transform of real windows.
//!
//! Mixed-radix Cooley-Tukey over the prime factorisation of the length, so
//! any length works (a prime length degrades to the direct sum). Both the
//! forward and inverse transforms keep all `L` bins; the inverse returns
//! the real part because learned spectra are generally not Hermitian.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::error::shape_err;
use crate::norm::TimeWindow;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct C64 {
    re: f64,
    im: f64,
}

impl C64 {
    #[inline]
    fn mul(self, o: C64) -> C64 {
        C64 { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }
}

/// Precomputed twiddles `exp(-2*pi*i*j/n)` for one transform length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<C64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        let twiddles = (0..n)
            .map(|j| {
                let a = TAU * j as f64 / n as f64;
                C64 { re: libm::cos(a), im: -libm::sin(a) }
            })
            .collect();
        Self { n, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn twiddle(&self, j: usize, inverse: bool) -> C64 {
        let t = self.twiddles[j % self.n];
        if inverse {
            C64 { re: t.re, im: -t.im }
        } else {
            t
        }
    }

    /// Unnormalised transform; `inverse` flips the exponent sign.
    fn transform(&self, input: &[C64], inverse: bool) -> Vec<C64> {
        debug_assert_eq!(input.len(), self.n);
        let mut out = vec![C64::default(); self.n];
        self.recurse(input, 1, &mut out, inverse);
        out
    }

    /// Transform of `input[0], input[stride], ...` (length `out.len()`).
    fn recurse(&self, input: &[C64], stride: usize, out: &mut [C64], inverse: bool) {
        let n = out.len();
        if n == 1 {
            out[0] = input[0];
            return;
        }
        let p = smallest_factor(n);
        let m = n / p;
        // sub-transforms of the p decimated sequences
        let mut subs = vec![C64::default(); n];
        for r in 0..p {
            self.recurse(&input[r * stride..], stride * p, &mut subs[r * m..(r + 1) * m], inverse);
        }
        // twiddle step: index into the top-level table scaled to length n
        let scale = self.n / n;
        for k in 0..m {
            for q in 0..p {
                let idx = k + m * q;
                let mut acc = C64::default();
                for r in 0..p {
                    let w = self.twiddle((r * idx % n) * scale, inverse);
                    let v = subs[r * m + k].mul(w);
                    acc.re += v.re;
                    acc.im += v.im;
                }
                out[idx] = acc;
            }
        }
    }
}

fn smallest_factor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        return 2;
    }
    let mut f = 3;
    while f * f <= n {
        if n.is_multiple_of(f) {
            return f;
        }
        f += 2;
    }
    n
}

/// Real and imaginary DFT components of a window, each `C x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    pub channels: usize,
    pub len: usize,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl SpectralPair {
    pub fn new(channels: usize, len: usize, real: Vec<f64>, imag: Vec<f64>) -> Result<Self> {
        if real.len() != channels * len || imag.len() != channels * len {
            return Err(shape_err(&[channels, len], &[real.len().max(imag.len())]));
        }
        Ok(Self { channels, len, real, imag })
    }
}

/// Forward DFT of each row of a `rows x len` buffer.
pub fn dft_rows(x: &[f64], rows: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let plan = FftPlan::new(len);
    let mut re = Vec::with_capacity(rows * len);
    let mut im = Vec::with_capacity(rows * len);
    let mut buf = vec![C64::default(); len];
    for r in 0..rows {
        for (b, &v) in buf.iter_mut().zip(&x[r * len..(r + 1) * len]) {
            *b = C64 { re: v, im: 0.0 };
        }
        for c in plan.transform(&buf, false) {
            re.push(c.re);
            im.push(c.im);
        }
    }
    (re, im)
}

/// Real part of the normalised inverse DFT of each row.
pub fn idft_rows_real(re: &[f64], im: &[f64], rows: usize, len: usize) -> Vec<f64> {
    let plan = FftPlan::new(len);
    let scale = 1.0 / len as f64;
    let mut out = Vec::with_capacity(rows * len);
    let mut buf = vec![C64::default(); len];
    for r in 0..rows {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = C64 { re: re[r * len + k], im: im[r * len + k] };
        }
        out.extend(plan.transform(&buf, true).into_iter().map(|c| c.re * scale));
    }
    out
}

/// `Re(sum_k g_k * exp(+2*pi*i*k*n/L))` for complex `g = gr + i*gi`, unnormalised.
/// This is the adjoint of [`dft_rows`] and is used by the tape.
pub(crate) fn dft_adjoint_rows(gr: &[f64], gi: &[f64], rows: usize, len: usize) -> Vec<f64> {
    let mut out = idft_rows_real(gr, gi, rows, len);
    let l = len as f64;
    out.iter_mut().for_each(|v| *v *= l);
    out
}

pub fn dft(w: &TimeWindow) -> SpectralPair {
    let (real, imag) = dft_rows(w.values(), w.channels(), w.len());
    SpectralPair { channels: w.channels(), len: w.len(), real, imag }
}

pub fn idft(sp: &SpectralPair) -> TimeWindow {
    let values = idft_rows_real(&sp.real, &sp.imag, sp.channels, sp.len);
    TimeWindow::from_parts(sp.channels, sp.len, values, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn direct_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = x.len();
        let mut re = vec![0.0; l];
        let mut im = vec![0.0; l];
        for k in 0..l {
            for (n, &v) in x.iter().enumerate() {
                let a = TAU * ((k * n) % l) as f64 / l as f64;
                re[k] += v * libm::cos(a);
                im[k] -= v * libm::sin(a);
            }
        }
        (re, im)
    }

    fn window(values: &[f64]) -> TimeWindow {
        TimeWindow::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn constant_signal_has_only_dc() {
        let sp = dft(&window(&[1.0, 1.0, 1.0, 1.0]));
        let expect = [4.0, 0.0, 0.0, 0.0];
        for k in 0..4 {
            assert!((sp.real[k] - expect[k]).abs() < 1e-12);
            assert!(sp.imag[k].abs() < 1e-12);
        }
    }

    #[test]
    fn alternating_signal() {
        let sp = dft(&window(&[1.0, 0.0, -1.0, 0.0]));
        let expect = [0.0, 2.0, 0.0, 2.0];
        for k in 0..4 {
            assert!((sp.real[k] - expect[k]).abs() < 1e-12);
            assert!(sp.imag[k].abs() < 1e-12);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let sp = SpectralPair::new(1, 4, vec![4.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        let w = idft(&sp);
        for &v in w.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_sum_for_many_lengths() {
        let mut r = rng::seeded(7);
        for len in [1usize, 2, 3, 5, 7, 12, 16, 30, 97, 192] {
            let x: Vec<f64> = (0..len).map(|_| rng::normal(&mut r)).collect();
            let (re, im) = dft_rows(&x, 1, len);
            let (dre, dim) = direct_dft(&x);
            let scale = dre.iter().chain(&dim).fold(1.0f64, |a, v| a.max(v.abs()));
            for k in 0..len {
                assert!((re[k] - dre[k]).abs() <= 1e-9 * scale, "len {len} bin {k}");
                assert!((im[k] - dim[k]).abs() <= 1e-9 * scale, "len {len} bin {k}");
            }
        }
    }

    #[test]
    fn non_hermitian_inverse_is_real_part_of_direct_sum() {
        let mut r = rng::seeded(3);
        let len = 12;
        let re: Vec<f64> = (0..len).map(|_| rng::normal(&mut r)).collect();
        let im: Vec<f64> = (0..len).map(|_| rng::normal(&mut r)).collect();
        let got = idft_rows_real(&re, &im, 1, len);
        for n in 0..len {
            let mut acc = 0.0;
            for k in 0..len {
                let a = TAU * ((k * n) % len) as f64 / len as f64;
                acc += re[k] * libm::cos(a) - im[k] * libm::sin(a);
            }
            assert!((got[n] - acc / len as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut r = rng::seeded(11);
        let (c, l) = (3, 64);
        let x: Vec<f64> = (0..c * l).map(|_| rng::normal(&mut r)).collect();
        let w = TimeWindow::new(c, l, x.clone()).unwrap();
        let sp = dft(&w);
        let back = idft(&sp);
        for (a, b) in back.values().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        for ch in 0..c {
            let energy: f64 = x[ch * l..(ch + 1) * l].iter().map(|v| v * v).sum();
            let spec: f64 = (ch * l..(ch + 1) * l)
                .map(|k| sp.real[k] * sp.real[k] + sp.imag[k] * sp.imag[k])
                .sum::<f64>()
                / l as f64;
            assert!((energy - spec).abs() < 1e-9 * energy.max(1.0));
        }
    }
}
