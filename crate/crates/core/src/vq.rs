//! Group vector quantization with EMA-learned codebooks.
//!
//! Each latent frame of C' channels splits into N contiguous K-vectors, and
//! each sub-vector snaps to the nearest codeword of its group's codebook.
//! Codebooks learn by exponential moving averages of assignment counts and
//! code sums; gradients never touch the codewords.

use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqConfig {
    /// N: number of groups.
    pub n_groups: usize,
    /// S: codewords per group.
    pub codewords: usize,
    /// K: dimension of each codeword; C' = n_groups * dim.
    pub dim: usize,
}

impl VqConfig {
    pub fn latent_channels(&self) -> usize {
        self.n_groups * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.codewords == 0 || self.dim == 0 {
            return Err(Error::Config("vq: all dimensions must be positive".into()));
        }
        if !self.codewords.is_power_of_two() {
            return Err(Error::Config(format!(
                "vq: fixed-length coding needs a power-of-two codebook, got {}",
                self.codewords
            )));
        }
        Ok(())
    }

    pub fn bits_per_group(&self) -> u32 {
        self.codewords.trailing_zeros()
    }
}

/// Indices of one quantized frame, one per group, each in [0, S).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFrame {
    pub indices: Vec<u32>,
}

/// Bitrate of the fixed-length code: N * log2(S) / hop_ms kbps.
pub fn bitrate_kbps(n_groups: usize, codewords: usize, hop_ms: f64) -> Result<f64> {
    if !codewords.is_power_of_two() {
        return Err(Error::Config(format!(
            "fixed-length coding needs a power-of-two codebook, got {codewords}"
        )));
    }
    Ok(n_groups as f64 * (codewords as f64).log2() / hop_ms)
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub cfg: VqConfig,
    /// [N, S, K]
    codewords: Vec<f64>,
    /// EMA assignment counts, [N, S].
    ema_size: Vec<f64>,
    /// EMA code sums, [N, S, K].
    ema_sum: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    initialized: bool,
}

impl Codebook {
    pub fn new(cfg: VqConfig, decay: f64, epsilon: f64) -> Result<Self> {
        cfg.validate()?;
        let (n, s, k) = (cfg.n_groups, cfg.codewords, cfg.dim);
        Ok(Self {
            cfg,
            codewords: vec![0.0; n * s * k],
            ema_size: vec![0.0; n * s],
            ema_sum: vec![0.0; n * s * k],
            decay,
            epsilon,
            initialized: false,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn codeword(&self, group: usize, index: usize) -> &[f64] {
        let k = self.cfg.dim;
        &self.codewords[(group * self.cfg.codewords + index) * k..][..k]
    }

    pub fn set_codeword(&mut self, group: usize, index: usize, values: &[f64]) {
        let k = self.cfg.dim;
        let base = (group * self.cfg.codewords + index) * k;
        self.codewords[base..base + k].copy_from_slice(values);
        // keep the EMA state consistent with the forced value
        self.ema_size[group * self.cfg.codewords + index] = 1.0;
        self.ema_sum[base..base + k].copy_from_slice(values);
        self.initialized = true;
    }

    /// Seed codewords by sampling sub-vectors from a data batch (rows of C'
    /// channels), avoiding dead codes at init.
    pub fn init_from_batch<R: Rng>(&mut self, data: &[f64], rows: usize, rng: &mut R) {
        let (n, s, k) = (self.cfg.n_groups, self.cfg.codewords, self.cfg.dim);
        let cp = n * k;
        assert!(rows > 0 && data.len() == rows * cp);
        for g in 0..n {
            for si in 0..s {
                let row = rng.gen_range(0..rows);
                let src = &data[row * cp + g * k..][..k];
                let base = (g * s + si) * k;
                // tiny jitter so duplicate draws don't create identical codes
                for (d, v) in self.codewords[base..base + k].iter_mut().zip(src) {
                    *d = v + rng.gen_range(-1e-4..1e-4);
                }
                self.ema_sum[base..base + k].copy_from_slice(&self.codewords[base..base + k]);
                self.ema_size[g * s + si] = 1.0;
            }
        }
        self.initialized = true;
    }

    /// Nearest codeword by squared Euclidean distance; ties break toward the
    /// lowest index.
    pub fn nearest(&self, group: usize, v: &[f64]) -> u32 {
        let k = self.cfg.dim;
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for si in 0..self.cfg.codewords {
            let cw = &self.codewords[(group * self.cfg.codewords + si) * k..][..k];
            let mut d = 0.0;
            for i in 0..k {
                let diff = v[i] - cw[i];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = si as u32;
            }
        }
        best
    }

    /// Quantize `rows` frames of C' channels. Returns the codeword-replaced
    /// values and the per-frame indices.
    pub fn quantize_rows(&self, data: &[f64], rows: usize) -> (Vec<f64>, Vec<QuantizedFrame>) {
        let (n, k) = (self.cfg.n_groups, self.cfg.dim);
        let cp = n * k;
        assert_eq!(data.len(), rows * cp);
        let mut out = vec![0.0; data.len()];
        let mut frames = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut indices = Vec::with_capacity(n);
            for g in 0..n {
                let v = &data[r * cp + g * k..][..k];
                let idx = self.nearest(g, v);
                indices.push(idx);
                out[r * cp + g * k..][..k].copy_from_slice(self.codeword(g, idx as usize));
            }
            frames.push(QuantizedFrame { indices });
        }
        (out, frames)
    }

    /// Quantize a [.., C'] tensor (rows = everything but the channel axis).
    pub fn quantize(&self, x: &Tensor) -> Result<(Tensor, Vec<QuantizedFrame>)> {
        let cp = self.cfg.latent_channels();
        if x.shape().last() != Some(&cp) {
            return Err(Error::Shape(format!(
                "quantize: expected {cp} channels, got shape {:?}",
                x.shape()
            )));
        }
        let rows = x.len() / cp;
        let (data, frames) = self.quantize_rows(x.data(), rows);
        Ok((Tensor::new(x.shape().to_vec(), data)?, frames))
    }

    /// Reconstruct codeword values from indices: [rows, C'].
    pub fn dequantize_rows(&self, frames: &[QuantizedFrame]) -> Vec<f64> {
        let (n, k) = (self.cfg.n_groups, self.cfg.dim);
        let mut out = vec![0.0; frames.len() * n * k];
        for (r, fr) in frames.iter().enumerate() {
            for g in 0..n {
                out[r * n * k + g * k..][..k]
                    .copy_from_slice(self.codeword(g, fr.indices[g] as usize));
            }
        }
        out
    }

    /// EMA codebook update from a batch of assignments. `data` holds the
    /// pre-quantization vectors ([rows, C']) that produced `frames`.
    pub fn ema_update(&mut self, data: &[f64], frames: &[QuantizedFrame]) {
        let (n, s, k) = (self.cfg.n_groups, self.cfg.codewords, self.cfg.dim);
        let cp = n * k;
        assert_eq!(data.len(), frames.len() * cp);
        let g_decay = self.decay;
        for g in 0..n {
            let mut count = vec![0.0; s];
            let mut sum = vec![0.0; s * k];
            for (r, fr) in frames.iter().enumerate() {
                let idx = fr.indices[g] as usize;
                count[idx] += 1.0;
                let v = &data[r * cp + g * k..][..k];
                for i in 0..k {
                    sum[idx * k + i] += v[i];
                }
            }
            let mut total = 0.0;
            for si in 0..s {
                let e = &mut self.ema_size[g * s + si];
                *e = g_decay * *e + (1.0 - g_decay) * count[si];
                total += *e;
                let base = (g * s + si) * k;
                for i in 0..k {
                    let sm = &mut self.ema_sum[base + i];
                    *sm = g_decay * *sm + (1.0 - g_decay) * sum[si * k + i];
                }
            }
            // Laplace smoothing over the group total keeps empty clusters
            // bounded instead of dividing by zero.
            for si in 0..s {
                let smoothed =
                    (self.ema_size[g * s + si] + self.epsilon) / (total + s as f64 * self.epsilon)
                        * total;
                let base = (g * s + si) * k;
                for i in 0..k {
                    self.codewords[base + i] = self.ema_sum[base + i] / smoothed.max(1e-300);
                }
            }
        }
        self.initialized = true;
    }

    /// Codewords whose EMA usage has decayed below `threshold`.
    pub fn dead_codes(&self, threshold: f64) -> usize {
        self.ema_size.iter().filter(|v| **v < threshold).count()
    }

    /// Empirical assignment entropy in bits, per group averaged.
    pub fn usage_entropy(frames: &[QuantizedFrame], cfg: &VqConfig) -> f64 {
        if frames.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for g in 0..cfg.n_groups {
            let mut hist = vec![0usize; cfg.codewords];
            for fr in frames {
                hist[fr.indices[g] as usize] += 1;
            }
            let n = frames.len() as f64;
            let h: f64 = hist
                .iter()
                .filter(|c| **c > 0)
                .map(|c| {
                    let p = *c as f64 / n;
                    -p * p.log2()
                })
                .sum();
            total += h;
        }
        total / cfg.n_groups as f64
    }

    pub(crate) fn raw_state(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.codewords, &self.ema_size, &self.ema_sum)
    }

    pub(crate) fn raw_state_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        self.initialized = true;
        (&mut self.codewords, &mut self.ema_size, &mut self.ema_sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_code_book() -> Codebook {
        let cfg = VqConfig {
            n_groups: 1,
            codewords: 2,
            dim: 2,
        };
        let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
        cb.set_codeword(0, 0, &[0.0, 0.0]);
        cb.set_codeword(0, 1, &[1.0, 1.0]);
        cb
    }

    #[test]
    fn nearest_by_inspection() {
        let cb = two_code_book();
        let (out, frames) = cb.quantize_rows(&[0.9, 0.8], 1);
        assert_eq!(frames[0].indices, vec![1]);
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let cb = two_code_book();
        let (_, frames) = cb.quantize_rows(&[0.5, 0.5], 1);
        assert_eq!(frames[0].indices, vec![0]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = VqConfig {
            n_groups: 3,
            codewords: 64,
            dim: 5,
        };
        let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
        let init: Vec<f64> = (0..40 * 15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cb.init_from_batch(&init, 40, &mut rng);

        let rows = 200;
        let data: Vec<f64> = (0..rows * 15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, frames) = cb.quantize_rows(&data, rows);
        for (r, fr) in frames.iter().enumerate() {
            for g in 0..3 {
                let v = &data[r * 15 + g * 5..][..5];
                // independent exhaustive scan
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for si in 0..64 {
                    let cw = cb.codeword(g, si);
                    let d: f64 = v.iter().zip(cw).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = si;
                    }
                }
                assert_eq!(fr.indices[g] as usize, best);
            }
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = VqConfig {
            n_groups: 2,
            codewords: 16,
            dim: 3,
        };
        let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
        let init: Vec<f64> = (0..20 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cb.init_from_batch(&init, 20, &mut rng);
        let data: Vec<f64> = (0..50 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (q1, _) = cb.quantize_rows(&data, 50);
        let (q2, _) = cb.quantize_rows(&q1, 50);
        assert_eq!(q1, q2);
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        // fixed assignment set: codewords converge to the cluster means
        // within 1e-4 after ~10/(1-gamma) steps
        let cfg = VqConfig {
            n_groups: 1,
            codewords: 2,
            dim: 1,
        };
        let gamma = 0.9;
        let mut cb = Codebook::new(cfg, gamma, 1e-9).unwrap();
        cb.set_codeword(0, 0, &[-5.0]);
        cb.set_codeword(0, 1, &[5.0]);
        let data = [-1.0, -1.2, 1.1, 0.9];
        let frames: Vec<QuantizedFrame> = [0u32, 0, 1, 1]
            .iter()
            .map(|i| QuantizedFrame { indices: vec![*i] })
            .collect();
        let steps = (10.0 / (1.0 - gamma)) as usize;
        for _ in 0..steps {
            cb.ema_update(&data, &frames);
        }
        assert!((cb.codeword(0, 0)[0] - (-1.1)).abs() < 1e-4);
        assert!((cb.codeword(0, 1)[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn empty_cluster_drift_is_bounded() {
        let cfg = VqConfig {
            n_groups: 1,
            codewords: 2,
            dim: 1,
        };
        let mut cb = Codebook::new(cfg, 0.9, 1e-5).unwrap();
        cb.set_codeword(0, 0, &[3.0]);
        cb.set_codeword(0, 1, &[10.0]);
        // all data assigned to code 0; code 1 never updated
        let data = [3.0, 3.0];
        let frames: Vec<QuantizedFrame> = (0..2)
            .map(|_| QuantizedFrame { indices: vec![0] })
            .collect();
        let before = cb.codeword(0, 1)[0];
        for _ in 0..10 {
            cb.ema_update(&data, &frames);
            let after = cb.codeword(0, 1)[0];
            // smoothing pulls the dead code gently toward zero, never blows up
            assert!(after.is_finite());
            assert!(after >= 0.0 && after <= before + 1e-9);
        }
        // usage EMA decays as 0.9^10 ~ 0.35
        assert_eq!(cb.dead_codes(0.5), 1);
    }

    #[test]
    fn gamma_zero_jumps_to_batch_mean() {
        let cfg = VqConfig {
            n_groups: 1,
            codewords: 2,
            dim: 1,
        };
        let mut cb = Codebook::new(cfg, 0.0, 1e-9).unwrap();
        cb.set_codeword(0, 0, &[100.0]);
        cb.set_codeword(0, 1, &[-100.0]);
        let data = [2.0, 4.0, -3.0];
        let frames: Vec<QuantizedFrame> = [0u32, 0, 1]
            .iter()
            .map(|i| QuantizedFrame { indices: vec![*i] })
            .collect();
        cb.ema_update(&data, &frames);
        assert!((cb.codeword(0, 0)[0] - 3.0).abs() < 1e-3);
        assert!((cb.codeword(0, 1)[0] - (-3.0)).abs() < 1e-2);
    }

    #[test]
    fn ema_recovers_gaussian_mixture_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = VqConfig {
            n_groups: 1,
            codewords: 4,
            dim: 2,
        };
        let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
        let means = [[-4.0, -4.0], [-4.0, 4.0], [4.0, -4.0], [4.0, 4.0]];
        cb.set_codeword(0, 0, &means[0]);
        cb.set_codeword(0, 1, &means[1]);
        cb.set_codeword(0, 2, &means[2]);
        cb.set_codeword(0, 3, &means[3]);
        let sigma = 0.5;
        let per_step = 256;
        let steps = 400;
        let mut counts = [0usize; 4];
        for _ in 0..steps {
            let mut data = Vec::with_capacity(per_step * 2);
            for _ in 0..per_step {
                let c = rng.gen_range(0..4);
                counts[c] += 1;
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let r = (-2.0 * u1.ln()).sqrt();
                let th = 2.0 * std::f64::consts::PI * u2;
                data.push(means[c][0] + sigma * r * th.cos());
                data.push(means[c][1] + sigma * r * th.sin());
            }
            let (_, frames) = cb.quantize_rows(&data, per_step);
            cb.ema_update(&data, &frames);
        }
        // effective sample size of the EMA is ~1/(1-gamma) batches
        let n_eff = per_step as f64 / (1.0 - 0.99f64);
        let tol = 3.0 * sigma / n_eff.sqrt() * 4.0; // 4 clusters share the draw
        for c in 0..4 {
            let cw = cb.codeword(0, c);
            assert!(
                (cw[0] - means[c][0]).abs() < tol && (cw[1] - means[c][1]).abs() < tol,
                "cluster {c}: {cw:?} vs {:?} (tol {tol})",
                means[c]
            );
        }
    }

    #[test]
    fn bitrate_values() {
        assert!((bitrate_kbps(3, 1024, 5.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((bitrate_kbps(1, 2, 5.0).unwrap() - 0.2).abs() < 1e-12);
        assert!((bitrate_kbps(3, 32, 5.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(bitrate_kbps(3, 1000, 5.0).is_err());
    }

    #[test]
    fn commitment_scalar_example() {
        // x = 0.5, codeword 1 -> MSE 0.25; and zero when x equals its code
        let mut tape = crate::nn::Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let loss = tape
            .mse_const(x, Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert!((tape.value(loss).item() - 0.25).abs() < 1e-12);
        let loss0 = tape
            .mse_const(x, Tensor::new(vec![1, 1], vec![0.5]).unwrap())
            .unwrap();
        assert_eq!(tape.value(loss0).item(), 0.0);
    }
}
