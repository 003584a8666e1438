//! Training: spectral reconstruction loss with a signal-domain consistency
//! round trip, commitment loss, EMA codebook updates, noisy-mixture
//! synthesis, packet-loss mask sampling, checkpoints, and the ablation
//! harness.

use crate::channel::ThreeStateModel;
use crate::codec::{analysis_tensor, CodecConfig, Model, EMA_DECAY, EMA_EPSILON};
use crate::dsp::{power_law_inplace, stft_with, StftConfig, StftKernel};
use crate::nn::params::{adam_step, AdamConfig, Session};
use crate::nn::NodeId;
use crate::temporal::BlockSpec;
use crate::tensor::Tensor;
use crate::vq::{Codebook, VqConfig};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub commitment: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            commitment: 0.25,
            aux: 1.0,
        }
    }
}

/// Compressed spectrum [1, T, bins, 2] of a signal (all bins kept).
pub fn compressed_spectrum_tensor(
    kernel: &StftKernel,
    samples: &[f64],
    p: f64,
) -> Result<Tensor> {
    let spec = stft_with(kernel, samples)?;
    let mut data = spec.data;
    power_law_inplace(&mut data, p);
    Tensor::new(vec![1, spec.frames, spec.bins, 2], data)
}

/// Reconstruction loss with a consistency round trip: the network's
/// compressed-spectrum estimate is expanded, synthesized to a waveform,
/// re-analyzed and re-compressed, then compared (MSE) against the
/// compressed spectrum of the target signal. Gradients flow through the
/// whole chain, so the model is penalized in the domain a listener hears.
pub fn recon_loss(
    sess: &mut Session,
    kernel: &std::sync::Arc<StftKernel>,
    p: f64,
    output: NodeId,
    target: &[f64],
) -> Result<NodeId> {
    let padded = sess.tape.pad_freq_high(output)?;
    let expanded = sess.tape.power_law(padded, 1.0 / p)?;
    let wave = sess.tape.istft(expanded, kernel.clone())?;
    let len = sess.tape.value(wave).shape()[1];
    if target.len() < len {
        return Err(Error::Shape(format!(
            "target has {} samples, synthesis spans {len}",
            target.len()
        )));
    }
    let spec = sess.tape.stft(wave, kernel.clone())?;
    let comp = sess.tape.power_law(spec, p)?;
    let target_spec = compressed_spectrum_tensor(kernel, &target[..len], p)?;
    sess.tape.mse_const(comp, target_spec)
}

// ---------------------------------------------------------------------------
// Data synthesis

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}

fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub const LEVEL_RANGE_DB: (f64, f64) = (-40.0, -10.0);
pub const SNR_RANGE_DB: (f64, f64) = (-5.0, 20.0);

#[derive(Debug, Clone)]
pub struct Mixture {
    /// What the encoder hears.
    pub input: Vec<f64>,
    /// What the decoder should reconstruct (level-scaled clean crop).
    pub target: Vec<f64>,
    pub level_db: f64,
    /// None when no noise was mixed in.
    pub snr_db: Option<f64>,
}

/// Random crop + level + SNR augmentation. The clean crop is rescaled to a
/// level drawn from LEVEL_RANGE_DB; noise (cropped with wrap-around) is
/// scaled for an SNR drawn from SNR_RANGE_DB. Near-silent clean crops are
/// re-drawn a few times before being accepted as-is.
pub fn synthesize_mixture<R: Rng>(
    clean: &[f64],
    noise: Option<&[f64]>,
    segment: usize,
    rng: &mut R,
) -> Result<Mixture> {
    if clean.len() < segment {
        return Err(Error::InsufficientSamples {
            need: segment,
            got: clean.len(),
        });
    }
    let mut crop = &clean[..segment];
    for _ in 0..10 {
        let start = rng.gen_range(0..=clean.len() - segment);
        crop = &clean[start..start + segment];
        if rms(crop) > 1e-5 {
            break;
        }
    }
    let level_db = rng.gen_range(LEVEL_RANGE_DB.0..LEVEL_RANGE_DB.1);
    let crop_rms = rms(crop);
    let gain = if crop_rms > 0.0 {
        db_to_lin(level_db) / crop_rms
    } else {
        0.0
    };
    let target: Vec<f64> = crop.iter().map(|v| v * gain).collect();

    let mut input = target.clone();
    let mut snr = None;
    if let Some(n) = noise {
        if !n.is_empty() {
            let start = rng.gen_range(0..n.len());
            let crop_n: Vec<f64> = (0..segment).map(|i| n[(start + i) % n.len()]).collect();
            let n_rms = rms(&crop_n);
            if n_rms > 1e-12 {
                let snr_db = rng.gen_range(SNR_RANGE_DB.0..SNR_RANGE_DB.1);
                let n_gain = db_to_lin(level_db) / (db_to_lin(snr_db) * n_rms);
                for (x, v) in input.iter_mut().zip(&crop_n) {
                    *x += v * n_gain;
                }
                snr = Some(snr_db);
            }
        }
    }
    Ok(Mixture {
        input,
        target,
        level_db,
        snr_db: snr,
    })
}

/// Deterministic voiced-speech-like test clip: a vibrato harmonic stack
/// with a slow amplitude envelope and a whisper of noise.
pub fn synthetic_clip(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = crate::dsp::SAMPLE_RATE as f64;
    let f0 = rng.gen_range(110.0..220.0);
    let vib_rate = rng.gen_range(4.0..7.0);
    let vib_depth = rng.gen_range(1.0..4.0);
    let env_rate = rng.gen_range(1.5..3.5);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let inst = f0 + vib_depth * (std::f64::consts::TAU * vib_rate * t).sin();
        phase += std::f64::consts::TAU * inst / fs;
        let mut s = 0.0;
        for h in 1..=6 {
            s += (phase * h as f64).sin() / h as f64;
        }
        let env = 0.55 + 0.45 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
        out.push(s * env + rng.gen_range(-0.005..0.005));
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Clean,
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
}

/// A dataset manifest is a JSON array of { "path": ..., "role": "clean" |
/// "noise" } entries.
pub fn parse_dataset_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub commitment: f64,
    pub aux: f64,
    pub codebook_entropy: f64,
    pub dead_codes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    /// Global step already completed (nonzero when resuming).
    pub start_step: u64,
    pub segment_len: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Mask source for all-in-one training; the default channel model is
    /// used when None.
    pub channel: Option<ThreeStateModel>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            start_step: 0,
            segment_len: 3 * crate::dsp::SAMPLE_RATE as usize,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            channel: None,
        }
    }
}

/// Per-step RNG derived from (seed, step) only, so a resumed run replays
/// the exact sample/mask draws of an uninterrupted one.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One optimizer step on one (input, target) pair. `mask` carries per-frame
/// receive flags and is required iff the model is all-in-one. Aborts with a
/// diagnostic if the loss goes non-finite.
pub fn train_step(
    model: &mut Model,
    input: &[f64],
    target: &[f64],
    mask: Option<&[f64]>,
    weights: &LossWeights,
    adam: &AdamConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let x = analysis_tensor(model, input)?;
    let t = x.shape()[1];
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::Shape(format!(
                "mask has {} entries for {t} frames",
                m.len()
            )));
        }
    }
    if !model.codebook.is_initialized() {
        let (sess, latent) = model.encode_train(&x, false)?;
        let v = sess.tape.value(latent).clone();
        let cp = model.cfg.vq.latent_channels();
        model.codebook.init_from_batch(v.data(), v.len() / cp, rng);
    }
    let mask_t = mask
        .map(|m| Tensor::new(vec![1, t, 1], m.to_vec()))
        .transpose()?;
    let mut fwd = model.forward_train(&x, mask_t.as_ref(), true)?;

    let p = model.cfg.power_exponent;
    let recon = recon_loss(&mut fwd.sess, &model.kernel, p, fwd.output, target)?;
    let commit = {
        let q = fwd.sess.tape.value(fwd.quantized).clone();
        fwd.sess.tape.mse_const(fwd.latent, q)?
    };
    let commit_scaled = fwd.sess.tape.scale(commit, weights.commitment);
    let mut total = fwd.sess.tape.add(recon, commit_scaled)?;
    let mut aux_v = 0.0;
    if let Some(aux_out) = fwd.aux_output {
        let aux = recon_loss(&mut fwd.sess, &model.kernel, p, aux_out, target)?;
        aux_v = fwd.sess.tape.value(aux).item();
        let aux_scaled = fwd.sess.tape.scale(aux, weights.aux);
        total = fwd.sess.tape.add(total, aux_scaled)?;
    }

    let metrics = StepMetrics {
        step,
        total: fwd.sess.tape.value(total).item(),
        recon: fwd.sess.tape.value(recon).item(),
        commitment: fwd.sess.tape.value(commit).item(),
        aux: aux_v,
        codebook_entropy: Codebook::usage_entropy(&fwd.frames, &model.cfg.vq),
        dead_codes: model.codebook.dead_codes(1e-2),
    };
    if !metrics.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}: recon {} commitment {} aux {}",
            metrics.recon, metrics.commitment, metrics.aux
        )));
    }

    let grads = fwd.sess.tape.backward(total);
    let param_grads = fwd.sess.param_grads(&grads);
    adam_step(&mut model.store, &param_grads, adam, step);
    let latent_vals = fwd.sess.tape.value(fwd.latent).data();
    model.codebook.ema_update(latent_vals, &fwd.frames);
    Ok(metrics)
}

/// The outer loop: per-step clip/noise/mask sampling driven by (seed, step)
/// alone. `sink` sees every step's metrics (e.g. for NDJSON logging).
pub fn train<F: FnMut(&StepMetrics)>(
    model: &mut Model,
    clean: &[Vec<f64>],
    noise: &[Vec<f64>],
    opts: &TrainOptions,
    mut sink: F,
) -> Result<Vec<StepMetrics>> {
    if clean.is_empty() {
        return Err(Error::Config("no clean clips to train on".into()));
    }
    let mut out = Vec::with_capacity(opts.steps as usize);
    for step in opts.start_step + 1..=opts.start_step + opts.steps {
        let mut rng = step_rng(opts.seed, step);
        let clip = &clean[rng.gen_range(0..clean.len())];
        let noise_clip = if noise.is_empty() {
            None
        } else {
            Some(noise[rng.gen_range(0..noise.len())].as_slice())
        };
        let mix = synthesize_mixture(clip, noise_clip, opts.segment_len, &mut rng)?;
        let mask = if model.is_all_in_one() {
            let t = model.cfg.stft.frames_for(opts.segment_len)?;
            let fpp = model.cfg.frames_per_packet;
            let ch = opts.channel.unwrap_or_default();
            let trace = ch.simulate(t.div_ceil(fpp), rng.gen())?;
            Some(
                (0..t)
                    .map(|ti| if trace.0[ti / fpp] { 1.0 } else { 0.0 })
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        let m = train_step(
            model,
            &mix.input,
            &mix.target,
            mask.as_deref(),
            &opts.weights,
            &opts.adam,
            step,
            &mut rng,
        )?;
        sink(&m);
        out.push(m);
    }
    Ok(out)
}

/// Mean squared error between the power-law-compressed spectra of two
/// signals, over their overlapping span.
pub fn spectral_distance(kernel: &StftKernel, p: f64, a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len().min(b.len());
    let sa = compressed_spectrum_tensor(kernel, &a[..n], p)?;
    let sb = compressed_spectrum_tensor(kernel, &b[..n], p)?;
    let sum: f64 = sa
        .data()
        .iter()
        .zip(sb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / sa.len() as f64)
}

/// Codec SNR on a clip through the streaming inference path, measured on
/// the interior (one window away from both edges).
pub fn eval_snr(model: &Model, clip: &[f64]) -> Result<f64> {
    let frames = model.encode_signal(clip)?;
    let inputs: Vec<_> = frames.iter().map(|f| Some(f.clone())).collect();
    let decoded = model.decode_frames(&inputs)?;
    let win = model.cfg.stft.window_len;
    let span = decoded.len().min(clip.len());
    if span <= 2 * win {
        return Err(Error::InsufficientSamples {
            need: 2 * win + 1,
            got: span,
        });
    }
    Ok(snr_db(&clip[win..span - win], &decoded[win..span - win]))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"TFNC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: CodecConfig,
    all_in_one: bool,
    step: u64,
    codebook_initialized: bool,
    params: Vec<ParamRecord>,
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(bytes: &[u8], cursor: &mut usize, n: usize) -> Result<Vec<f64>> {
    let need = n * 8;
    if bytes.len() < *cursor + need {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let out = bytes[*cursor..*cursor + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *cursor += need;
    Ok(out)
}

/// Full training state: every parameter with its Adam moments (running
/// stats included, since they live in the store), the codebook with its EMA
/// accumulators, the model config and the global step. Values are stored
/// exactly, so save/load/save is byte-identical and a resumed run replays
/// an uninterrupted one.
pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<()> {
    let params: Vec<ParamRecord> = model
        .store
        .iter()
        .map(|(_, p)| ParamRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let manifest = CheckpointManifest {
        config: model.cfg.clone(),
        all_in_one: model.is_all_in_one(),
        step,
        codebook_initialized: model.codebook.is_initialized(),
        params,
    };
    let json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.store.iter() {
        write_f64s(&mut w, p.value.data())?;
        write_f64s(&mut w, p.m.data())?;
        write_f64s(&mut w, p.v.data())?;
    }
    let (cw, es, esum) = model.codebook.raw_state();
    write_f64s(&mut w, cw)?;
    write_f64s(&mut w, es)?;
    write_f64s(&mut w, esum)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut model = Model::new(manifest.config, manifest.all_in_one, 0)?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let mut cursor = 16 + json_len;
    for rec in &manifest.params {
        let id = model
            .store
            .lookup(&rec.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", rec.name)))?;
        let n = {
            let p = model.store.get(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    rec.name,
                    p.value.shape(),
                    rec.shape
                )));
            }
            p.value.len()
        };
        let value = read_f64s(&bytes, &mut cursor, n)?;
        let m = read_f64s(&bytes, &mut cursor, n)?;
        let v = read_f64s(&bytes, &mut cursor, n)?;
        let p = model.store.get_mut(id);
        p.value.data_mut().copy_from_slice(&value);
        p.m.data_mut().copy_from_slice(&m);
        p.v.data_mut().copy_from_slice(&v);
    }
    {
        let (cw, es, esum) = model.codebook.raw_state_mut();
        let n_cw = cw.len();
        let n_es = es.len();
        let n_esum = esum.len();
        let a = read_f64s(&bytes, &mut cursor, n_cw)?;
        let b = read_f64s(&bytes, &mut cursor, n_es)?;
        let c = read_f64s(&bytes, &mut cursor, n_esum)?;
        cw.copy_from_slice(&a);
        es.copy_from_slice(&b);
        esum.copy_from_slice(&c);
    }
    if !manifest.codebook_initialized {
        model.codebook = Codebook::new(model.cfg.vq, EMA_DECAY, EMA_EPSILON)?;
    }
    if cursor != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cursor
        )));
    }
    Ok((model, manifest.step))
}

// ---------------------------------------------------------------------------
// Small reference configurations

/// A deliberately small codec used by fast tests and smoke runs.
pub fn tiny_config() -> CodecConfig {
    CodecConfig {
        stft: StftConfig {
            window_len: 32,
            hop_len: 8,
        },
        power_exponent: 0.3,
        enc_channels: vec![4, 8],
        strides: vec![4, 4],
        conv_kt: 2,
        encode_stack: vec![BlockSpec::Tcm {
            dilations: vec![1, 2],
            bottleneck: 4,
            kernel: 3,
        }],
        decode_stack: vec![
            BlockSpec::Tcm {
                dilations: vec![1, 2],
                bottleneck: 4,
                kernel: 3,
            },
            BlockSpec::GGru { groups: 2 },
        ],
        vq: VqConfig {
            n_groups: 2,
            codewords: 8,
            dim: 3,
        },
        frames_per_packet: 4,
    }
}

// ---------------------------------------------------------------------------
// Ablation harness

#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub encode: Vec<BlockSpec>,
    pub decode: Vec<BlockSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub name: String,
    pub param_count: usize,
    /// Mean total loss over the last few steps.
    pub final_loss: f64,
    pub snr_db: f64,
    pub spectral_distance: f64,
}

/// Base config the standard ablation arms are sized for (latent width 16).
pub fn ablation_base_config() -> CodecConfig {
    CodecConfig {
        stft: StftConfig {
            window_len: 32,
            hop_len: 8,
        },
        power_exponent: 0.3,
        enc_channels: vec![4, 8, 16],
        strides: vec![4, 2, 2],
        conv_kt: 2,
        encode_stack: vec![],
        decode_stack: vec![],
        vq: VqConfig {
            n_groups: 2,
            codewords: 8,
            dim: 8,
        },
        frames_per_packet: 4,
    }
}

/// Three arms with matched parameter budgets: convolution only, recurrence
/// only, and the interleaved combination.
pub fn ablation_arms() -> Vec<AblationArm> {
    let tcm = |dilations: Vec<usize>, bottleneck: usize| BlockSpec::Tcm {
        dilations,
        bottleneck,
        kernel: 3,
    };
    vec![
        AblationArm {
            name: "tcm-only".into(),
            encode: vec![tcm(vec![1, 2, 4, 8], 9)],
            decode: vec![tcm(vec![1, 2, 4, 8], 9)],
        },
        AblationArm {
            name: "gru-only".into(),
            encode: vec![BlockSpec::GGru { groups: 1 }],
            decode: vec![BlockSpec::GGru { groups: 1 }],
        },
        AblationArm {
            name: "interleaved".into(),
            encode: vec![tcm(vec![1, 2], 8), BlockSpec::GGru { groups: 2 }],
            decode: vec![tcm(vec![1, 2], 8), BlockSpec::GGru { groups: 2 }],
        },
    ]
}

pub fn arm_config(base: &CodecConfig, arm: &AblationArm) -> CodecConfig {
    let mut cfg = base.clone();
    cfg.encode_stack = arm.encode.clone();
    cfg.decode_stack = arm.decode.clone();
    cfg
}

/// Trains each arm on the same clip with the same budget and reports final
/// loss and codec SNR. Refuses to run if any arm's parameter count strays
/// more than `tolerance` (fraction) from the first arm's.
pub fn run_ablation(
    base: &CodecConfig,
    arms: &[AblationArm],
    clip: &[f64],
    opts: &TrainOptions,
    tolerance: f64,
) -> Result<Vec<AblationReport>> {
    let mut models: Vec<(String, Model)> = Vec::new();
    for arm in arms {
        let model = Model::new(arm_config(base, arm), false, opts.seed)?;
        models.push((arm.name.clone(), model));
    }
    let reference = models[0].1.param_count() as f64;
    for (name, m) in &models {
        let rel = (m.param_count() as f64 - reference).abs() / reference;
        if rel > tolerance {
            return Err(Error::Config(format!(
                "arm {name} has {} parameters, {:.1}% away from {} (limit {:.1}%)",
                m.param_count(),
                rel * 100.0,
                reference,
                tolerance * 100.0
            )));
        }
    }
    let clean = vec![clip.to_vec()];
    let mut reports = Vec::new();
    for (name, mut model) in models {
        let metrics = train(&mut model, &clean, &[], opts, |_| {})?;
        let tail = metrics.len().min(5);
        let final_loss =
            metrics[metrics.len() - tail..].iter().map(|m| m.total).sum::<f64>() / tail as f64;
        let frames = model.encode_signal(clip)?;
        let inputs: Vec<_> = frames.into_iter().map(Some).collect();
        let decoded = model.decode_frames(&inputs)?;
        reports.push(AblationReport {
            name,
            param_count: model.param_count(),
            final_loss,
            snr_db: eval_snr(&model, clip)?,
            spectral_distance: spectral_distance(
                &model.kernel,
                model.cfg.power_exponent,
                clip,
                &decoded,
            )?,
        });
    }
    Ok(reports)
}
