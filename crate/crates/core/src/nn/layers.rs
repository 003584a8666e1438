//! Layer wrappers pairing parameter registration with two execution paths:
//! a tape forward for training and a stateful frame-wise path for streaming
//! inference. The frame-wise math mirrors the tape ops term by term so a
//! stream started from fresh state reproduces the batch forward exactly.

use super::params::{init_uniform, ParamId, ParamStore, Session};
use super::{sigmoid, NodeId, BN_EPS, LN_EPS};
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;
use std::collections::VecDeque;

/// Running-stat update rate for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// 1x1 convolution (per-position channel remap)

#[derive(Debug, Clone)]
pub struct Conv1x1Layer {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1Layer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            init_uniform(rng, vec![cin, cout], cin),
            true,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![cout]), true)?;
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = sess.param(store, self.w);
        let b = sess.param(store, self.b);
        sess.tape.conv1x1(x, w, b)
    }

    /// Apply to a flat buffer of positions, each `cin` wide.
    pub fn eval_rows(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let wd = store.get(self.w).value.data();
        let bd = store.get(self.b).value.data();
        let rows = x.len() / self.cin;
        let mut out = vec![0.0; rows * self.cout];
        for i in 0..rows {
            let xrow = &x[i * self.cin..(i + 1) * self.cin];
            let orow = &mut out[i * self.cout..(i + 1) * self.cout];
            orow.copy_from_slice(bd);
            for ci in 0..self.cin {
                let xv = xrow[ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[ci * self.cout..(ci + 1) * self.cout];
                for co in 0..self.cout {
                    orow[co] += xv * wrow[co];
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + self.cout
    }
}

// ---------------------------------------------------------------------------
// PReLU

#[derive(Debug, Clone)]
pub struct PReluLayer {
    pub slopes: ParamId,
    pub c: usize,
}

impl PReluLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let slopes = store.add(
            &format!("{name}.slopes"),
            Tensor::new(vec![c], vec![0.25; c])?,
            true,
        )?;
        Ok(Self { slopes, c })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let s = sess.param(store, self.slopes);
        sess.tape.prelu(x, s)
    }

    pub fn eval_rows(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let sd = store.get(self.slopes).value.data();
        x.iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { sd[i % self.c] * v })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.c
    }
}

// ---------------------------------------------------------------------------
// Layer norm (per position, over channels -- causal by construction)

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.add(
            &format!("{name}.gamma"),
            Tensor::new(vec![c], vec![1.0; c])?,
            true,
        )?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(vec![c]), true)?;
        Ok(Self { gamma, beta, c })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let g = sess.param(store, self.gamma);
        let b = sess.param(store, self.beta);
        sess.tape.layer_norm(x, g, b)
    }

    pub fn eval_rows(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let gd = store.get(self.gamma).value.data();
        let bd = store.get(self.beta).value.data();
        let c = self.c;
        let rows = x.len() / c;
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            let is = 1.0 / (v + LN_EPS).sqrt();
            for ci in 0..c {
                out[i * c + ci] = gd[ci] * (row[ci] - m) * is + bd[ci];
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }
}

// ---------------------------------------------------------------------------
// Batch norm (batch statistics in training, running stats at inference)

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub c: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = store.add(
            &format!("{name}.gamma"),
            Tensor::new(vec![c], vec![1.0; c])?,
            true,
        )?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(vec![c]), true)?;
        let run_mean = store.add(&format!("{name}.run_mean"), Tensor::zeros(vec![c]), false)?;
        let run_var = store.add(
            &format!("{name}.run_var"),
            Tensor::new(vec![c], vec![1.0; c])?,
            false,
        )?;
        Ok(Self {
            gamma,
            beta,
            run_mean,
            run_var,
            c,
        })
    }

    /// Training mode also folds the batch statistics into the running stats.
    pub fn forward(
        &self,
        sess: &mut Session,
        store: &mut ParamStore,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let g = sess.param(store, self.gamma);
        let b = sess.param(store, self.beta);
        if train {
            let (y, stats) = sess.tape.batch_norm(x, g, b, None)?;
            let (mean, var) = stats.expect("train-mode batch norm returns stats");
            for (acc, m) in store
                .get_mut(self.run_mean)
                .value
                .data_mut()
                .iter_mut()
                .zip(&mean)
            {
                *acc = (1.0 - BN_MOMENTUM) * *acc + BN_MOMENTUM * m;
            }
            for (acc, v) in store
                .get_mut(self.run_var)
                .value
                .data_mut()
                .iter_mut()
                .zip(&var)
            {
                *acc = (1.0 - BN_MOMENTUM) * *acc + BN_MOMENTUM * v;
            }
            Ok(y)
        } else {
            let m = store.get(self.run_mean).value.data().to_vec();
            let v = store.get(self.run_var).value.data().to_vec();
            let (y, _) = sess.tape.batch_norm(x, g, b, Some((&m, &v)))?;
            Ok(y)
        }
    }

    pub fn eval_rows(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let gd = store.get(self.gamma).value.data();
        let bd = store.get(self.beta).value.data();
        let md = store.get(self.run_mean).value.data();
        let vd = store.get(self.run_var).value.data();
        let c = self.c;
        let inv_std: Vec<f64> = vd.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = i % c;
                gd[ci] * (v - md[ci]) * inv_std[ci] + bd[ci]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.c
    }
}

// ---------------------------------------------------------------------------
// Causal dilated depthwise 1-D convolution

#[derive(Debug, Clone)]
pub struct DepthwiseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kt: usize,
    pub c: usize,
    pub dilation: usize,
}

/// Streaming history: the previous (kt-1)*dilation input frames, oldest first.
#[derive(Debug, Clone)]
pub struct DepthwiseState {
    hist: VecDeque<Vec<f64>>,
}

impl DepthwiseLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kt: usize,
        c: usize,
        dilation: usize,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            init_uniform(rng, vec![kt, c], kt),
            true,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![c]), true)?;
        Ok(Self {
            w,
            b,
            kt,
            c,
            dilation,
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = sess.param(store, self.w);
        let b = sess.param(store, self.b);
        sess.tape.depthwise_conv1d(x, w, b, self.dilation)
    }

    pub fn state(&self) -> DepthwiseState {
        let depth = (self.kt - 1) * self.dilation;
        DepthwiseState {
            hist: (0..depth).map(|_| vec![0.0; self.c]).collect(),
        }
    }

    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut DepthwiseState) -> Vec<f64> {
        let wd = store.get(self.w).value.data();
        let bd = store.get(self.b).value.data();
        let mut out = bd.to_vec();
        for dt in 0..self.kt {
            let row: &[f64] = if dt == 0 {
                x
            } else {
                &st.hist[st.hist.len() - dt * self.dilation]
            };
            for ci in 0..self.c {
                out[ci] += row[ci] * wd[dt * self.c + ci];
            }
        }
        let depth = (self.kt - 1) * self.dilation;
        if depth > 0 {
            st.hist.push_back(x.to_vec());
            if st.hist.len() > depth {
                st.hist.pop_front();
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.kt * self.c + self.c
    }
}

// ---------------------------------------------------------------------------
// GRU (fused sequence on the tape, single cell for streaming)

#[derive(Debug, Clone)]
pub struct GruLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub h: usize,
}

#[derive(Debug, Clone)]
pub struct GruState {
    pub h: Vec<f64>,
}

impl GruLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        h: usize,
    ) -> Result<Self> {
        let wx = store.add(
            &format!("{name}.wx"),
            init_uniform(rng, vec![cin, 3 * h], cin),
            true,
        )?;
        let wh = store.add(
            &format!("{name}.wh"),
            init_uniform(rng, vec![h, 3 * h], h),
            true,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![3 * h]), true)?;
        Ok(Self { wx, wh, b, cin, h })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let wx = sess.param(store, self.wx);
        let wh = sess.param(store, self.wh);
        let b = sess.param(store, self.b);
        sess.tape.gru_seq(x, wx, wh, b)
    }

    pub fn state(&self) -> GruState {
        GruState {
            h: vec![0.0; self.h],
        }
    }

    /// One recurrence step; same arithmetic as the fused sequence op.
    pub fn eval_step(&self, store: &ParamStore, x: &[f64], st: &mut GruState) -> Vec<f64> {
        let wxd = store.get(self.wx).value.data();
        let whd = store.get(self.wh).value.data();
        let bd = store.get(self.b).value.data();
        let h = self.h;
        let mut a = bd.to_vec();
        for ci in 0..self.cin {
            let xv = x[ci];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wxd[ci * 3 * h..(ci + 1) * 3 * h];
            for j in 0..3 * h {
                a[j] += xv * wrow[j];
            }
        }
        let mut hh = vec![0.0; h];
        for hi in 0..h {
            let hv = st.h[hi];
            if hv == 0.0 {
                continue;
            }
            let wrow = &whd[hi * 3 * h..(hi + 1) * 3 * h];
            for j in 0..2 * h {
                a[j] += hv * wrow[j];
            }
            for j in 0..h {
                hh[j] += hv * wrow[2 * h + j];
            }
        }
        let mut out = vec![0.0; h];
        for hi in 0..h {
            let z = sigmoid(a[hi]);
            let r = sigmoid(a[h + hi]);
            let n = (a[2 * h + hi] + r * hh[hi]).tanh();
            out[hi] = z * st.h[hi] + (1.0 - z) * n;
        }
        st.h.copy_from_slice(&out);
        out
    }

    pub fn param_count(&self) -> usize {
        3 * (self.cin * self.h + self.h * self.h + self.h)
    }
}

// ---------------------------------------------------------------------------
// Causal 2-D convolution over [T, F] with frequency stride

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kt: usize,
    pub kf: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride_f: usize,
    pub dil_t: usize,
}

/// Streaming history: previous (kt-1)*dil_t input frames of F*cin values.
#[derive(Debug, Clone)]
pub struct Conv2dState {
    hist: VecDeque<Vec<f64>>,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kt: usize,
        kf: usize,
        cin: usize,
        cout: usize,
        stride_f: usize,
        dil_t: usize,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            init_uniform(rng, vec![kt, kf, cin, cout], kt * kf * cin),
            true,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![cout]), true)?;
        Ok(Self {
            w,
            b,
            kt,
            kf,
            cin,
            cout,
            stride_f,
            dil_t,
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = sess.param(store, self.w);
        let b = sess.param(store, self.b);
        sess.tape.conv2d(x, w, b, self.stride_f, self.dil_t)
    }

    pub fn state(&self, f_in: usize) -> Conv2dState {
        let depth = (self.kt - 1) * self.dil_t;
        Conv2dState {
            hist: (0..depth).map(|_| vec![0.0; f_in * self.cin]).collect(),
        }
    }

    /// One time step: x is [F, Cin] flat, output [ceil(F/stride), Cout] flat.
    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut Conv2dState) -> Vec<f64> {
        let f = x.len() / self.cin;
        let f_out = f.div_ceil(self.stride_f);
        let wd = store.get(self.w).value.data();
        let bd = store.get(self.b).value.data();
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; f_out * cout];
        for fo in 0..f_out {
            out[fo * cout..(fo + 1) * cout].copy_from_slice(bd);
        }
        for dt in 0..self.kt {
            let frame: &[f64] = if dt == 0 {
                x
            } else {
                &st.hist[st.hist.len() - dt * self.dil_t]
            };
            for fo in 0..f_out {
                let obase = fo * cout;
                for df in 0..self.kf {
                    let fi = fo * self.stride_f + df;
                    if fi >= f {
                        continue;
                    }
                    let xrow = &frame[fi * cin..(fi + 1) * cin];
                    let wbase = (dt * self.kf + df) * cin * cout;
                    for ci in 0..cin {
                        let xv = xrow[ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[wbase + ci * cout..][..cout];
                        let orow = &mut out[obase..obase + cout];
                        for co in 0..cout {
                            orow[co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
        let depth = (self.kt - 1) * self.dil_t;
        if depth > 0 {
            st.hist.push_back(x.to_vec());
            if st.hist.len() > depth {
                st.hist.pop_front();
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.kt * self.kf * self.cin * self.cout + self.cout
    }
}

// ---------------------------------------------------------------------------
// Causal transposed convolution along frequency

#[derive(Debug, Clone)]
pub struct Deconv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kt: usize,
    pub kf: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride_f: usize,
}

#[derive(Debug, Clone)]
pub struct Deconv2dState {
    hist: VecDeque<Vec<f64>>,
}

impl Deconv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kt: usize,
        kf: usize,
        cin: usize,
        cout: usize,
        stride_f: usize,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            init_uniform(rng, vec![kt, kf, cin, cout], kt * kf * cin),
            true,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![cout]), true)?;
        Ok(Self {
            w,
            b,
            kt,
            kf,
            cin,
            cout,
            stride_f,
        })
    }

    pub fn forward(&self, sess: &mut Session, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = sess.param(store, self.w);
        let b = sess.param(store, self.b);
        sess.tape.deconv2d(x, w, b, self.stride_f)
    }

    pub fn state(&self, f_in: usize) -> Deconv2dState {
        Deconv2dState {
            hist: (0..self.kt - 1).map(|_| vec![0.0; f_in * self.cin]).collect(),
        }
    }

    /// One time step: x is [F, Cin] flat, output [F*stride, Cout] flat.
    pub fn eval_frame(&self, store: &ParamStore, x: &[f64], st: &mut Deconv2dState) -> Vec<f64> {
        let f = x.len() / self.cin;
        let f_out = f * self.stride_f;
        let wd = store.get(self.w).value.data();
        let bd = store.get(self.b).value.data();
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; f_out * cout];
        for fo in 0..f_out {
            out[fo * cout..(fo + 1) * cout].copy_from_slice(bd);
        }
        for dt in 0..self.kt {
            let frame: &[f64] = if dt == 0 {
                x
            } else {
                &st.hist[st.hist.len() - dt]
            };
            for fi in 0..f {
                let xrow = &frame[fi * cin..(fi + 1) * cin];
                for df in 0..self.kf {
                    let fo = fi * self.stride_f + df;
                    if fo >= f_out {
                        continue;
                    }
                    let obase = fo * cout;
                    let wbase = (dt * self.kf + df) * cin * cout;
                    for ci in 0..cin {
                        let xv = xrow[ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[wbase + ci * cout..][..cout];
                        let orow = &mut out[obase..obase + cout];
                        for co in 0..cout {
                            orow[co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
        if self.kt > 1 {
            st.hist.push_back(x.to_vec());
            if st.hist.len() > self.kt - 1 {
                st.hist.pop_front();
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.kt * self.kf * self.cin * self.cout + self.cout
    }
}
