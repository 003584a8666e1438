//! Streaming STFT analysis/synthesis and power-law spectrum compression.
//!
//! Frames are left-aligned (no center padding) so the analysis/synthesis pair
//! adds exactly one window of algorithmic latency. Both sides use a
//! square-root Hann taper at 75% overlap, which satisfies constant
//! overlap-add after normalization.

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }
}

/// Complex time-frequency frames stored as [T, F, 2] real planes (re, im).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    /// Row-major [T, F, 2].
    pub data: Vec<f64>,
    pub window_len: usize,
    pub hop_len: usize,
}

impl Spectrum {
    pub fn zeros(frames: usize, bins: usize, window_len: usize, hop_len: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![0.0; frames * bins * 2],
            window_len,
            hop_len,
        }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> (f64, f64) {
        let i = (t * self.bins + f) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, re: f64, im: f64) {
        let i = (t * self.bins + f) * 2;
        self.data[i] = re;
        self.data[i + 1] = im;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 320,
            hop_len: 80,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop_len == 0 || self.window_len != 4 * self.hop_len {
            return Err(Error::Config(format!(
                "window_len must be 4x hop_len, got window {} hop {}",
                self.window_len, self.hop_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames_for(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.window_len {
            return Err(Error::InsufficientSamples {
                need: self.window_len,
                got: n_samples,
            });
        }
        Ok(1 + (n_samples - self.window_len) / self.hop_len)
    }
}

/// Precomputed taper and DFT twiddles for one window size.
pub struct StftKernel {
    pub cfg: StftConfig,
    /// Square-root Hann (periodic), length window_len.
    pub window: Vec<f64>,
    /// cos(2*pi*k*n/W) laid out [k][n], k in 0..bins.
    cos: Vec<f64>,
    /// sin(2*pi*k*n/W) laid out [k][n].
    sin: Vec<f64>,
}

impl StftKernel {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window_len;
        let bins = cfg.bins();
        let window: Vec<f64> = (0..w)
            .map(|n| {
                let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos());
                hann.sqrt()
            })
            .collect();
        let mut cos = vec![0.0; bins * w];
        let mut sin = vec![0.0; bins * w];
        for k in 0..bins {
            for n in 0..w {
                let ph = 2.0 * std::f64::consts::PI * (k * n % w) as f64 / w as f64;
                cos[k * w + n] = ph.cos();
                sin[k * w + n] = ph.sin();
            }
        }
        Ok(Self {
            cfg,
            window,
            cos,
            sin,
        })
    }

    /// Analysis+synthesis window product summed across overlapping frames at
    /// interior samples. With sqrt-Hann at 75% overlap this is exactly 2.
    pub fn cola_constant(&self) -> f64 {
        let hops = self.cfg.window_len / self.cfg.hop_len;
        (0..hops)
            .map(|h| {
                let w = self.window[h * self.cfg.hop_len];
                w * w
            })
            .sum()
    }

    /// Per-sample sum of squared taper for a T-frame overlap-add, length
    /// (T-1)*hop + window.
    pub fn window_sq_sum(&self, frames: usize) -> Vec<f64> {
        let w = self.cfg.window_len;
        let hop = self.cfg.hop_len;
        let mut s = vec![0.0; (frames - 1) * hop + w];
        for t in 0..frames {
            for n in 0..w {
                s[t * hop + n] += self.window[n] * self.window[n];
            }
        }
        s
    }

    /// DFT of one tapered frame. `frame` has window_len samples (untapered);
    /// writes bins() (re, im) pairs into `out`.
    pub fn analyze_frame(&self, frame: &[f64], out: &mut [f64]) {
        let w = self.cfg.window_len;
        let bins = self.cfg.bins();
        debug_assert_eq!(frame.len(), w);
        debug_assert_eq!(out.len(), bins * 2);
        let mut tapered = vec![0.0; w];
        for n in 0..w {
            tapered[n] = frame[n] * self.window[n];
        }
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            let c = &self.cos[k * w..(k + 1) * w];
            let s = &self.sin[k * w..(k + 1) * w];
            for n in 0..w {
                re += tapered[n] * c[n];
                im -= tapered[n] * s[n];
            }
            out[k * 2] = re;
            out[k * 2 + 1] = im;
        }
    }

    /// Inverse DFT of one frame (conjugate-symmetric spectrum assumed),
    /// tapered with the synthesis window. `spec` holds bins() (re, im) pairs.
    pub fn synthesize_frame(&self, spec: &[f64], out: &mut [f64]) {
        let w = self.cfg.window_len;
        let bins = self.cfg.bins();
        debug_assert_eq!(spec.len(), bins * 2);
        debug_assert_eq!(out.len(), w);
        let inv_w = 1.0 / w as f64;
        for n in 0..w {
            let mut acc = spec[0]; // DC, weight 1
            for k in 1..bins - 1 {
                let c = self.cos[k * w + n];
                let s = self.sin[k * w + n];
                acc += 2.0 * (spec[k * 2] * c - spec[k * 2 + 1] * s);
            }
            // Nyquist bin: cos(pi*n), weight 1
            let k = bins - 1;
            acc += spec[k * 2] * self.cos[k * w + n];
            out[n] = acc * inv_w * self.window[n];
        }
    }

    /// Adjoint of `analyze_frame` with respect to the input samples: maps a
    /// gradient on the (re, im) bins back to a gradient on the frame samples.
    pub fn analyze_frame_adjoint(&self, grad_spec: &[f64], grad_frame: &mut [f64]) {
        let w = self.cfg.window_len;
        let bins = self.cfg.bins();
        for n in 0..w {
            let mut acc = 0.0;
            for k in 0..bins {
                acc += grad_spec[k * 2] * self.cos[k * w + n]
                    - grad_spec[k * 2 + 1] * self.sin[k * w + n];
            }
            grad_frame[n] += acc * self.window[n];
        }
    }

    /// Adjoint of `synthesize_frame`: maps a gradient on the tapered time
    /// frame back to a gradient on the (re, im) bins.
    pub fn synthesize_frame_adjoint(&self, grad_out: &[f64], grad_spec: &mut [f64]) {
        let w = self.cfg.window_len;
        let bins = self.cfg.bins();
        let inv_w = 1.0 / w as f64;
        for k in 0..bins {
            let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            let (mut gre, mut gim) = (0.0, 0.0);
            for n in 0..w {
                let g = grad_out[n] * inv_w * self.window[n];
                gre += g * weight * self.cos[k * w + n];
                if k != 0 && k != bins - 1 {
                    gim -= g * 2.0 * self.sin[k * w + n];
                }
            }
            grad_spec[k * 2] += gre;
            grad_spec[k * 2 + 1] += gim;
        }
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrum> {
    let kernel = StftKernel::new(*cfg)?;
    stft_with(&kernel, &w.samples)
}

pub fn stft_with(kernel: &StftKernel, samples: &[f64]) -> Result<Spectrum> {
    let cfg = kernel.cfg;
    let frames = cfg.frames_for(samples.len())?;
    let bins = cfg.bins();
    let mut spec = Spectrum::zeros(frames, bins, cfg.window_len, cfg.hop_len);
    for t in 0..frames {
        let start = t * cfg.hop_len;
        kernel.analyze_frame(
            &samples[start..start + cfg.window_len],
            &mut spec.data[t * bins * 2..(t + 1) * bins * 2],
        );
    }
    Ok(spec)
}

pub fn istft(s: &Spectrum, cfg: &StftConfig) -> Result<Waveform> {
    let kernel = StftKernel::new(*cfg)?;
    istft_with(&kernel, s).map(|samples| Waveform::new(samples, SAMPLE_RATE))
}

/// Weighted overlap-add synthesis. Output length (T-1)*hop + window. Edge
/// samples are normalized by the actual taper sum so istft(stft(w)) = w
/// wherever the taper sum is nonzero.
pub fn istft_with(kernel: &StftKernel, s: &Spectrum) -> Result<Vec<f64>> {
    let cfg = kernel.cfg;
    if s.bins != cfg.bins() || s.window_len != cfg.window_len || s.hop_len != cfg.hop_len {
        return Err(Error::Shape(format!(
            "spectrum ({} bins, win {}, hop {}) does not match config (win {}, hop {})",
            s.bins, s.window_len, s.hop_len, cfg.window_len, cfg.hop_len
        )));
    }
    if s.frames == 0 {
        return Ok(Vec::new());
    }
    let w = cfg.window_len;
    let hop = cfg.hop_len;
    let mut out = vec![0.0; (s.frames - 1) * hop + w];
    let mut frame = vec![0.0; w];
    for t in 0..s.frames {
        kernel.synthesize_frame(&s.data[t * s.bins * 2..(t + 1) * s.bins * 2], &mut frame);
        for n in 0..w {
            out[t * hop + n] += frame[n];
        }
    }
    let wss = kernel.window_sq_sum(s.frames);
    for (o, d) in out.iter_mut().zip(wss.iter()) {
        if *d > 1e-12 {
            *o /= d;
        } else {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// z -> |z|^p * z/|z| elementwise; zero maps to zero, phase is untouched.
pub fn power_law_compress(s: &Spectrum, p: f64) -> Result<Spectrum> {
    power_law(s, p)
}

/// Exact inverse of `power_law_compress`.
pub fn power_law_expand(s: &Spectrum, p: f64) -> Result<Spectrum> {
    check_exponent(p)?;
    power_law(s, 1.0 / p)
}

pub fn check_exponent(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "power-law exponent must be in (0, 1], got {p}"
        )));
    }
    Ok(())
}

fn power_law(s: &Spectrum, exponent: f64) -> Result<Spectrum> {
    if exponent <= 0.0 {
        return Err(Error::Config(format!(
            "power-law exponent must be positive, got {exponent}"
        )));
    }
    let mut out = s.clone();
    power_law_inplace(&mut out.data, exponent);
    Ok(out)
}

/// Shared scalar kernel: scales each (re, im) pair by |z|^(e-1).
pub fn power_law_inplace(data: &mut [f64], exponent: f64) {
    for z in data.chunks_exact_mut(2) {
        let mag = (z[0] * z[0] + z[1] * z[1]).sqrt();
        if mag > 0.0 {
            let scale = mag.powf(exponent - 1.0);
            z[0] *= scale;
            z[1] *= scale;
        } else {
            z[0] = 0.0;
            z[1] = 0.0;
        }
    }
}
