//! The codec itself: a strided convolutional encoder over compressed
//! spectra, temporal filtering on the latent sequence, group vector
//! quantization, and a mirrored transposed-convolution decoder. Two
//! execution paths share one parameter store: a tape forward for training
//! and a streaming frame-by-frame path for inference.

use crate::dsp::{power_law_inplace, StftConfig, StftKernel};
use crate::nn::layers::{
    BatchNormLayer, Conv1x1Layer, Conv2dLayer, Conv2dState, Deconv2dLayer, Deconv2dState,
    PReluLayer,
};
use crate::nn::params::{ParamStore, Session};
use crate::nn::NodeId;
use crate::temporal::{BlockSpec, TemporalBlock, TemporalBlockState, TemporalStack,
    TemporalStackState};
use crate::tensor::Tensor;
use crate::vq::{self, Codebook, QuantizedFrame, VqConfig};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const EMA_DECAY: f64 = 0.99;
pub const EMA_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub stft: StftConfig,
    /// Spectrum compression exponent.
    pub power_exponent: f64,
    /// Output channels of each encoder conv stage; the last is the latent
    /// width C.
    pub enc_channels: Vec<usize>,
    /// Frequency stride of each stage; the product must equal bins - 1 so
    /// the (Nyquist-dropped) frequency axis folds down to 1.
    pub strides: Vec<usize>,
    /// Temporal taps of the conv stages (current + kt-1 past frames).
    pub conv_kt: usize,
    pub encode_stack: Vec<BlockSpec>,
    pub decode_stack: Vec<BlockSpec>,
    pub vq: VqConfig,
    pub frames_per_packet: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            power_exponent: 0.3,
            enc_channels: vec![16, 32, 48, 192],
            strides: vec![2, 2, 4, 10],
            conv_kt: 2,
            encode_stack: vec![BlockSpec::tcm_default(), BlockSpec::ggru_default()],
            decode_stack: vec![
                BlockSpec::tcm_default(),
                BlockSpec::ggru_default(),
                BlockSpec::tcm_default(),
                BlockSpec::ggru_default(),
            ],
            vq: VqConfig {
                n_groups: 3,
                codewords: 1024,
                dim: 40,
            },
            frames_per_packet: 4,
        }
    }
}

impl CodecConfig {
    /// Latent width C after the conv stages.
    pub fn latent_channels(&self) -> usize {
        *self.enc_channels.last().unwrap()
    }

    /// Frequency bins the network sees (Nyquist dropped).
    pub fn feature_bins(&self) -> usize {
        self.stft.bins() - 1
    }

    pub fn hop_ms(&self) -> f64 {
        self.stft.hop_len as f64 * 1000.0 / crate::dsp::SAMPLE_RATE as f64
    }

    pub fn bitrate_kbps(&self) -> Result<f64> {
        vq::bitrate_kbps(self.vq.n_groups, self.vq.codewords, self.hop_ms())
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        crate::dsp::check_exponent(self.power_exponent)?;
        self.vq.validate()?;
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.strides.len() {
            return Err(Error::Config(
                "enc_channels and strides must be non-empty and equal length".into(),
            ));
        }
        let fold: usize = self.strides.iter().product();
        if fold != self.feature_bins() {
            return Err(Error::Config(format!(
                "strides fold {fold} bins but the network sees {}",
                self.feature_bins()
            )));
        }
        if self.conv_kt == 0 {
            return Err(Error::Config("conv_kt must be positive".into()));
        }
        if self.frames_per_packet == 0 {
            return Err(Error::Config("frames_per_packet must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoder

struct ConvStage {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
    prelu: PReluLayer,
}

pub struct Encoder {
    stages: Vec<ConvStage>,
    stack: TemporalStack,
    /// C -> C' projection into the quantizer.
    proj: Conv1x1Layer,
    feature_bins: usize,
}

pub struct EncoderState {
    stages: Vec<Conv2dState>,
    stack: TemporalStackState,
}

impl Encoder {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &CodecConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 2;
        for (i, (&cout, &stride)) in cfg.enc_channels.iter().zip(&cfg.strides).enumerate() {
            stages.push(ConvStage {
                conv: Conv2dLayer::new(
                    store,
                    rng,
                    &format!("enc.c{i}.conv"),
                    cfg.conv_kt,
                    stride,
                    cin,
                    cout,
                    stride,
                    1,
                )?,
                bn: BatchNormLayer::new(store, &format!("enc.c{i}.bn"), cout)?,
                prelu: PReluLayer::new(store, &format!("enc.c{i}.prelu"), cout)?,
            });
            cin = cout;
        }
        let c = cfg.latent_channels();
        let stack = TemporalStack::new(store, rng, "enc.stack", c, &cfg.encode_stack)?;
        let proj = Conv1x1Layer::new(store, rng, "enc.proj", c, cfg.vq.latent_channels())?;
        Ok(Self {
            stages,
            stack,
            proj,
            feature_bins: cfg.feature_bins(),
        })
    }

    /// x: [B, T, F, 2] compressed spectrum (Nyquist dropped); returns the
    /// pre-quantization latent [B, T, C'].
    fn forward(
        &self,
        sess: &mut Session,
        store: &mut ParamStore,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let mut h = x;
        for s in &self.stages {
            h = s.conv.forward(sess, store, h)?;
            h = s.bn.forward(sess, store, h, train)?;
            h = s.prelu.forward(sess, store, h)?;
        }
        let shape = sess.tape.value(h).shape().to_vec();
        let [b, t, f, c] = [shape[0], shape[1], shape[2], shape[3]];
        if f != 1 {
            return Err(Error::Shape(format!(
                "encoder stages left {f} frequency rows, expected 1"
            )));
        }
        h = sess.tape.reshape(h, vec![b, t, c])?;
        h = self.stack.forward(sess, store, h)?;
        self.proj.forward(sess, store, h)
    }

    fn state(&self) -> EncoderState {
        let mut f = self.feature_bins;
        let mut stages = Vec::new();
        for s in &self.stages {
            stages.push(s.conv.state(f));
            f = f.div_ceil(s.conv.stride_f);
        }
        EncoderState {
            stages,
            stack: self.stack.state(),
        }
    }

    /// One hop: `frame` is [F, 2] flat; returns the latent row [C'].
    fn eval_frame(&self, store: &ParamStore, frame: &[f64], st: &mut EncoderState) -> Vec<f64> {
        let mut h = frame.to_vec();
        for (s, cs) in self.stages.iter().zip(&mut st.stages) {
            h = s.conv.eval_frame(store, &h, cs);
            h = s.bn.eval_rows(store, &h);
            h = s.prelu.eval_rows(store, &h);
        }
        h = self.stack.eval_frame(store, &h, &mut st.stack);
        self.proj.eval_rows(store, &h)
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.conv.param_count() + s.bn.param_count() + s.prelu.param_count())
            .sum::<usize>()
            + self.stack.param_count()
            + self.proj.param_count()
    }
}

// ---------------------------------------------------------------------------
// Decoder

struct DecoderBlock {
    /// All-in-one only: folds the loss mask back in before each block.
    adapter: Option<Conv1x1Layer>,
    block: TemporalBlock,
}

struct DeconvStage {
    deconv: Deconv2dLayer,
    /// None on the final (linear) stage.
    post: Option<(BatchNormLayer, PReluLayer)>,
}

pub struct Decoder {
    /// C' (+1 with mask) -> C projection out of the quantizer.
    proj: Conv1x1Layer,
    masked: bool,
    blocks: Vec<DecoderBlock>,
    stages: Vec<DeconvStage>,
}

pub struct DecoderState {
    blocks: Vec<TemporalBlockState>,
    stages: Vec<Deconv2dState>,
}

/// Zero one input row of a 1x1 kernel so the channel is inert at init.
fn zero_input_row(store: &mut ParamStore, layer: &Conv1x1Layer, row: usize) {
    let cout = layer.cout;
    let w = store.get_mut(layer.w).value.data_mut();
    w[row * cout..(row + 1) * cout].iter_mut().for_each(|v| *v = 0.0);
}

impl Decoder {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &CodecConfig,
        masked: bool,
    ) -> Result<Self> {
        let c = cfg.latent_channels();
        let cp = cfg.vq.latent_channels();
        let proj = Conv1x1Layer::new(
            store,
            rng,
            &format!("{prefix}.proj"),
            cp + masked as usize,
            c,
        )?;
        if masked {
            // the mask channel starts inert so an untrained model ignores it
            zero_input_row(store, &proj, cp);
        }
        let mut blocks = Vec::new();
        for (i, spec) in cfg.decode_stack.iter().enumerate() {
            let adapter = if masked {
                let a = Conv1x1Layer::new(store, rng, &format!("{prefix}.a{i}"), c + 1, c)?;
                zero_input_row(store, &a, c);
                Some(a)
            } else {
                None
            };
            blocks.push(DecoderBlock {
                adapter,
                block: TemporalBlock::new(store, rng, &format!("{prefix}.t{i}"), c, spec)?,
            });
        }
        let mut stages = Vec::new();
        let n = cfg.enc_channels.len();
        for i in 0..n {
            let cin = cfg.enc_channels[n - 1 - i];
            let cout = if i + 1 < n { cfg.enc_channels[n - 2 - i] } else { 2 };
            let stride = cfg.strides[n - 1 - i];
            let deconv = Deconv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.d{i}.deconv"),
                cfg.conv_kt,
                stride,
                cin,
                cout,
                stride,
            )?;
            let post = if i + 1 < n {
                Some((
                    BatchNormLayer::new(store, &format!("{prefix}.d{i}.bn"), cout)?,
                    PReluLayer::new(store, &format!("{prefix}.d{i}.prelu"), cout)?,
                ))
            } else {
                None
            };
            stages.push(DeconvStage { deconv, post });
        }
        Ok(Self {
            proj,
            masked,
            blocks,
            stages,
        })
    }

    /// q: [B, T, C'] quantized latent, mask: [B, T, 1] of {0, 1} frame
    /// receive flags (required iff the decoder was built with mask support).
    /// Returns the compressed-spectrum estimate [B, T, F, 2].
    fn forward(
        &self,
        sess: &mut Session,
        store: &mut ParamStore,
        q: NodeId,
        mask: Option<NodeId>,
        train: bool,
    ) -> Result<NodeId> {
        if self.masked != mask.is_some() {
            return Err(Error::Config(format!(
                "decoder built with masked={} but mask given: {}",
                self.masked,
                mask.is_some()
            )));
        }
        let mut h = q;
        if let Some(m) = mask {
            h = sess.tape.concat_last(h, m)?;
        }
        h = self.proj.forward(sess, store, h)?;
        for db in &self.blocks {
            if let Some(m) = mask {
                h = sess.tape.concat_last(h, m)?;
                h = db.adapter.as_ref().unwrap().forward(sess, store, h)?;
            }
            h = db.block.forward(sess, store, h)?;
        }
        let shape = sess.tape.value(h).shape().to_vec();
        let [b, t, c] = [shape[0], shape[1], shape[2]];
        h = sess.tape.reshape(h, vec![b, t, 1, c])?;
        for s in &self.stages {
            h = s.deconv.forward(sess, store, h)?;
            if let Some((bn, prelu)) = &s.post {
                h = bn.forward(sess, store, h, train)?;
                h = prelu.forward(sess, store, h)?;
            }
        }
        Ok(h)
    }

    fn state(&self) -> DecoderState {
        let mut f = 1;
        let mut stages = Vec::new();
        for s in &self.stages {
            stages.push(s.deconv.state(f));
            f *= s.deconv.stride_f;
        }
        DecoderState {
            blocks: self.blocks.iter().map(|b| b.block.state()).collect(),
            stages,
        }
    }

    /// One hop: latent row [C'] (zeros when lost) to a compressed-spectrum
    /// frame [F, 2] flat.
    fn eval_frame(
        &self,
        store: &ParamStore,
        latent: &[f64],
        mask: Option<f64>,
        st: &mut DecoderState,
    ) -> Result<Vec<f64>> {
        if self.masked != mask.is_some() {
            return Err(Error::Config(format!(
                "decoder built with masked={} but mask given: {}",
                self.masked,
                mask.is_some()
            )));
        }
        let mut h = latent.to_vec();
        if let Some(m) = mask {
            h.push(m);
        }
        h = self.proj.eval_rows(store, &h);
        for (db, bst) in self.blocks.iter().zip(&mut st.blocks) {
            if let Some(m) = mask {
                h.push(m);
                h = db.adapter.as_ref().unwrap().eval_rows(store, &h);
            }
            h = db.block.eval_frame(store, &h, bst);
        }
        for (s, ds) in self.stages.iter().zip(&mut st.stages) {
            h = s.deconv.eval_frame(store, &h, ds);
            if let Some((bn, prelu)) = &s.post {
                h = bn.eval_rows(store, &h);
                h = prelu.eval_rows(store, &h);
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.block.param_count()
                        + b.adapter.as_ref().map_or(0, |a| a.param_count())
                })
                .sum::<usize>()
            + self
                .stages
                .iter()
                .map(|s| {
                    s.deconv.param_count()
                        + s.post
                            .as_ref()
                            .map_or(0, |(bn, p)| bn.param_count() + p.param_count())
                })
                .sum::<usize>()
    }
}

// ---------------------------------------------------------------------------
// Model

pub struct Model {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Training-only clean-path decoder (all-in-one mode); never used at
    /// inference.
    pub aux: Option<Decoder>,
    pub codebook: Codebook,
    pub kernel: Arc<StftKernel>,
}

/// Everything the training loop needs from one tape forward.
pub struct TrainForward {
    pub sess: Session,
    /// Pre-quantization latent [B, T, C'] (commitment-loss anchor).
    pub latent: NodeId,
    /// Straight-through quantized latent.
    pub quantized: NodeId,
    pub frames: Vec<QuantizedFrame>,
    /// Compressed-spectrum estimate [B, T, F, 2] from the main decoder.
    pub output: NodeId,
    /// Same from the auxiliary clean decoder, when present.
    pub aux_output: Option<NodeId>,
}

impl Model {
    /// `all_in_one` adds the loss-mask pathway and the auxiliary decoder.
    pub fn new(cfg: CodecConfig, all_in_one: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &cfg)?;
        let decoder = Decoder::new(&mut store, &mut rng, "dec", &cfg, all_in_one)?;
        let aux = if all_in_one {
            Some(Decoder::new(&mut store, &mut rng, "aux", &cfg, false)?)
        } else {
            None
        };
        let codebook = Codebook::new(cfg.vq, EMA_DECAY, EMA_EPSILON)?;
        let kernel = Arc::new(StftKernel::new(cfg.stft)?);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            aux,
            codebook,
            kernel,
        })
    }

    pub fn is_all_in_one(&self) -> bool {
        self.aux.is_some()
    }

    /// Full training graph: encode, quantize (straight-through), decode.
    /// `x` is a compressed spectrum [B, T, F, 2] with the Nyquist bin
    /// dropped; `mask` is required iff the model is all-in-one.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        mask: Option<&Tensor>,
        train: bool,
    ) -> Result<TrainForward> {
        let mut sess = Session::new();
        let xn = sess.tape.leaf(x.clone());
        let latent = self
            .encoder
            .forward(&mut sess, &mut self.store, xn, train)?;
        if !self.codebook.is_initialized() {
            return Err(Error::Config(
                "codebook is not initialized; seed it from data first".into(),
            ));
        }
        let (q, frames) = self.codebook.quantize(sess.tape.value(latent))?;
        let quantized = sess.tape.straight_through(latent, q)?;
        let maskn = mask.map(|m| sess.tape.leaf(m.clone()));
        // mimic inference: lost frames reach the decoder as zeroed latents
        // (and pass no gradient), alongside the explicit mask channel
        let dec_in = match mask {
            Some(m) => sess.tape.scale_rows(quantized, m.data())?,
            None => quantized,
        };
        let output = self
            .decoder
            .forward(&mut sess, &mut self.store, dec_in, maskn, train)?;
        let aux_output = match &self.aux {
            Some(a) => Some(a.forward(&mut sess, &mut self.store, quantized, None, train)?),
            None => None,
        };
        Ok(TrainForward {
            sess,
            latent,
            quantized,
            frames,
            output,
            aux_output,
        })
    }

    /// Encoder-only tape forward (e.g. to seed codebooks or test bypasses).
    pub fn encode_train(&mut self, x: &Tensor, train: bool) -> Result<(Session, NodeId)> {
        let mut sess = Session::new();
        let xn = sess.tape.leaf(x.clone());
        let latent = self
            .encoder
            .forward(&mut sess, &mut self.store, xn, train)?;
        Ok((sess, latent))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.aux.as_ref().map_or(0, |a| a.param_count())
    }

    /// Trainable parameters that inference actually uses.
    pub fn inference_param_count(&self) -> usize {
        self.store.trainable_count("enc.") + self.store.trainable_count("dec.")
    }
}

// ---------------------------------------------------------------------------
// Streaming paths

/// Sample-in, frames-out encoder. Frames appear once a full window has been
/// buffered (the first after window_len samples, then one per hop).
pub struct StreamingEncoder<'a> {
    model: &'a Model,
    st: EncoderState,
    buf: Vec<f64>,
}

impl<'a> StreamingEncoder<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            st: model.encoder.state(),
            buf: Vec::new(),
        }
    }

    pub fn push(&mut self, samples: &[f64]) -> Vec<QuantizedFrame> {
        let win = self.model.cfg.stft.window_len;
        let hop = self.model.cfg.stft.hop_len;
        let bins = self.model.cfg.stft.bins();
        self.buf.extend_from_slice(samples);
        let mut out = Vec::new();
        while self.buf.len() >= win {
            let mut spec = vec![0.0; bins * 2];
            self.model.kernel.analyze_frame(&self.buf[..win], &mut spec);
            power_law_inplace(&mut spec, self.model.cfg.power_exponent);
            // the Nyquist bin is dropped inside the network
            let latent =
                self.model
                    .encoder
                    .eval_frame(&self.model.store, &spec[..(bins - 1) * 2], &mut self.st);
            let (_, mut frames) = self.model.codebook.quantize_rows(&latent, 1);
            out.push(frames.pop().unwrap());
            self.buf.drain(..hop);
        }
        out
    }
}

/// Frames-in, samples-out decoder with weighted overlap-add. Each frame
/// yields one hop of samples; `finish` flushes the final window tail.
pub struct StreamingDecoder<'a> {
    model: &'a Model,
    st: DecoderState,
    /// Overlap-add accumulator for the current window span.
    pending: Vec<f64>,
    /// Matching sum of squared synthesis tapers.
    pending_w: Vec<f64>,
}

impl<'a> StreamingDecoder<'a> {
    pub fn new(model: &'a Model) -> Self {
        let win = model.cfg.stft.window_len;
        Self {
            model,
            st: model.decoder.state(),
            pending: vec![0.0; win],
            pending_w: vec![0.0; win],
        }
    }

    /// `None` marks a lost frame: the latent is zeroed and (in all-in-one
    /// mode) the mask channel reports the loss. Returns hop_len samples.
    pub fn push_frame(&mut self, frame: Option<&QuantizedFrame>) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let cp = cfg.vq.latent_channels();
        let (latent, mask) = match frame {
            Some(q) => (
                self.model.codebook.dequantize_rows(std::slice::from_ref(q)),
                1.0,
            ),
            None => (vec![0.0; cp], 0.0),
        };
        let mask = self.model.decoder.masked.then_some(mask);
        let spec_net =
            self.model
                .decoder
                .eval_frame(&self.model.store, &latent, mask, &mut self.st)?;
        // re-append a zero Nyquist bin, undo the power law, synthesize
        let bins = cfg.stft.bins();
        let mut spec = spec_net;
        spec.extend_from_slice(&[0.0, 0.0]);
        debug_assert_eq!(spec.len(), bins * 2);
        power_law_inplace(&mut spec, 1.0 / cfg.power_exponent);
        let win = cfg.stft.window_len;
        let hop = cfg.stft.hop_len;
        let mut frame_td = vec![0.0; win];
        self.model.kernel.synthesize_frame(&spec, &mut frame_td);
        let window = &self.model.kernel.window;
        for n in 0..win {
            self.pending[n] += frame_td[n];
            self.pending_w[n] += window[n] * window[n];
        }
        let out = self.emit(hop);
        Ok(out)
    }

    fn emit(&mut self, n: usize) -> Vec<f64> {
        let out: Vec<f64> = (0..n)
            .map(|i| {
                if self.pending_w[i] > 1e-12 {
                    self.pending[i] / self.pending_w[i]
                } else {
                    0.0
                }
            })
            .collect();
        self.pending.drain(..n);
        self.pending.extend(std::iter::repeat(0.0).take(n));
        self.pending_w.drain(..n);
        self.pending_w.extend(std::iter::repeat(0.0).take(n));
        out
    }

    /// Flush the remaining window - hop samples after the last frame.
    pub fn finish(mut self) -> Vec<f64> {
        let tail = self.model.cfg.stft.window_len - self.model.cfg.stft.hop_len;
        self.emit(tail)
    }
}

impl Model {
    /// Convenience batch encode: one pass of the streaming encoder.
    pub fn encode_signal(&self, samples: &[f64]) -> Result<Vec<QuantizedFrame>> {
        if samples.len() < self.cfg.stft.window_len {
            return Err(Error::InsufficientSamples {
                need: self.cfg.stft.window_len,
                got: samples.len(),
            });
        }
        Ok(StreamingEncoder::new(self).push(samples))
    }

    /// Convenience batch decode: one pass of the streaming decoder, with
    /// the tail flushed. `None` entries are lost frames.
    pub fn decode_frames(&self, frames: &[Option<QuantizedFrame>]) -> Result<Vec<f64>> {
        let mut dec = StreamingDecoder::new(self);
        let mut out = Vec::with_capacity(frames.len() * self.cfg.stft.hop_len);
        for f in frames {
            out.extend(dec.push_frame(f.as_ref())?);
        }
        out.extend(dec.finish());
        Ok(out)
    }
}

/// Compressed-spectrum tensor [1, T, bins-1, 2] from samples: STFT, power
/// law, Nyquist dropped. This is the network's input/target domain.
pub fn analysis_tensor(model: &Model, samples: &[f64]) -> Result<Tensor> {
    let spec = crate::dsp::stft_with(&model.kernel, samples)?;
    let fb = spec.bins - 1;
    let mut data = Vec::with_capacity(spec.frames * fb * 2);
    for t in 0..spec.frames {
        let row = &spec.data[t * spec.bins * 2..];
        data.extend_from_slice(&row[..fb * 2]);
    }
    power_law_inplace(&mut data, model.cfg.power_exponent);
    Tensor::new(vec![1, spec.frames, fb, 2], data)
}
