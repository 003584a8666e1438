//! Command-line surface for the codec toolkit: encode/decode audio through
//! a trained model, train and ablate models, simulate lossy channels, and
//! run the finite-difference gradient suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use tfnc::bitstream::{read_stream, write_stream, StreamHeader};
use tfnc::channel::{PacketTrace, ThreeStateModel};
use tfnc::codec::{CodecConfig, Model};
use tfnc::dsp::{StftConfig, StftKernel, SAMPLE_RATE};
use tfnc::nn::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use tfnc::nn::layers::{Conv2dLayer, Deconv2dLayer};
use tfnc::nn::params::{AdamConfig, ParamStore};
use tfnc::nn::Tape;
use tfnc::temporal::{BlockSpec, TemporalStack};
use tfnc::tensor::Tensor;
use tfnc::train::{
    ablation_arms, ablation_base_config, load_checkpoint, parse_dataset_manifest, run_ablation,
    save_checkpoint, spectral_distance, synthetic_clip, train, Role, TrainOptions,
};
use tfnc::vq::QuantizedFrame;
use tfnc::wav::{read_wav, write_wav};

#[derive(Parser)]
#[command(name = "tfnc", version, about = "Low-latency neural speech codec toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a 16 kHz mono WAV into a .tfn stream.
    Encode(EncodeArgs),
    /// Decode a .tfn stream back to WAV, optionally through a loss trace.
    Decode(DecodeArgs),
    /// Train a codec (plain or all-in-one) and write a checkpoint.
    Train(TrainArgs),
    /// Train the three temporal-module arms on one clip and report.
    Ablate(AblateArgs),
    /// Sample a packet-loss trace from the three-state channel model.
    Simulate(SimulateArgs),
    /// Run the finite-difference gradient suite over a named scope.
    Gradcheck(GradcheckArgs),
    /// Report codec quality metrics on a WAV file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint produced by `tfnc train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input WAV (16 kHz mono PCM16).
    #[arg(long)]
    input: PathBuf,
    /// Output .tfn stream.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input .tfn stream.
    #[arg(long)]
    input: PathBuf,
    /// Output WAV.
    #[arg(long)]
    output: PathBuf,
    /// Packet-loss trace ('1' received, '0' lost, one char per packet).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Reference WAV for SNR / spectral-distance reporting.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON dataset manifest; a synthetic corpus is used when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    output: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// NDJSON metrics file (one record per step).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Train the all-in-one variant (noisy input, simulated losses, aux
    /// clean decoder).
    #[arg(long)]
    all_in_one: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training clip; a synthetic clip is used when omitted.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// Optional JSON report file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    packets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file to write.
    #[arg(long)]
    output: PathBuf,
    /// TOML config with a [channel] table overriding the default model.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of: tcm, ggru, stack, conv, deconv, spectral, all.
    #[arg(long, default_value = "all")]
    scope: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input WAV (16 kHz mono PCM16).
    #[arg(long)]
    input: PathBuf,
}

// ---------------------------------------------------------------------------
// Error plumbing

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<tfnc::Error> for CliError {
    fn from(e: tfnc::Error) -> Self {
        match e {
            tfnc::Error::Numerical(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let failed = e.use_stderr();
            let _ = e.print();
            std::process::exit(if failed { 1 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Encode(a) => cmd_encode(&a),
        Cmd::Decode(a) => cmd_decode(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Ablate(a) => cmd_ablate(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::Eval(a) => cmd_eval(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(load_checkpoint(path)?.0)
}

fn read_mono_16k(path: &Path) -> CliResult<Vec<f64>> {
    let w = read_wav(path)?;
    if w.sample_rate != SAMPLE_RATE {
        return Err(CliError::Data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            w.sample_rate
        )));
    }
    Ok(w.samples)
}

fn header_for(cfg: &CodecConfig, n_frames: u64) -> StreamHeader {
    StreamHeader {
        sample_rate: SAMPLE_RATE,
        window_len: cfg.stft.window_len as u32,
        hop_len: cfg.stft.hop_len as u32,
        n_groups: cfg.vq.n_groups as u32,
        codewords: cfg.vq.codewords as u32,
        frames_per_packet: cfg.frames_per_packet as u32,
        n_frames,
    }
}

/// Meaningful payload bits: real frames only, excluding the zero-padded
/// tail of the final packet.
fn meaningful_bits(header: &StreamHeader) -> CliResult<usize> {
    let per_frame =
        header.n_groups as usize * header.bits_per_group().map_err(CliError::from)? as usize;
    Ok(header.n_frames as usize * per_frame)
}

/// Meaningful payload bits per second of audio, in kbps.
fn measured_kbps(header: &StreamHeader) -> CliResult<f64> {
    let audio_ms =
        header.n_frames as f64 * header.hop_len as f64 * 1000.0 / header.sample_rate as f64;
    Ok(meaningful_bits(header)? as f64 / audio_ms)
}

// ---------------------------------------------------------------------------
// encode / decode / eval

fn cmd_encode(a: &EncodeArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let samples = read_mono_16k(&a.input)?;
    let frames = model.encode_signal(&samples)?;
    let header = header_for(&model.cfg, frames.len() as u64);
    let bytes = write_stream(&header, &frames)?;
    std::fs::write(&a.output, &bytes)?;
    println!("frames: {}", frames.len());
    println!("packets: {}", header.n_packets());
    println!("payload_bits: {}", meaningful_bits(&header)?);
    println!("bitrate_kbps: {:.3}", measured_kbps(&header)?);
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input)?;
    let (header, packets) = read_stream(&bytes)?;
    let expected = header_for(&model.cfg, header.n_frames);
    if header != expected {
        return Err(CliError::Data(format!(
            "stream header does not match checkpoint\n  stream:     {header:?}\n  checkpoint: {expected:?}"
        )));
    }
    let trace = match &a.trace {
        Some(p) => {
            let t = PacketTrace::from_file_str(&std::fs::read_to_string(p)?)?;
            if t.0.len() != packets.len() {
                return Err(CliError::Data(format!(
                    "trace has {} entries for {} packets",
                    t.0.len(),
                    packets.len()
                )));
            }
            Some(t)
        }
        None => None,
    };
    let fpp = header.frames_per_packet as usize;
    let mut frames: Vec<Option<QuantizedFrame>> = Vec::with_capacity(header.n_frames as usize);
    for (pi, packet) in packets.iter().enumerate() {
        let received = trace.as_ref().map_or(true, |t| t.0[pi]);
        if received {
            frames.extend(
                tfnc::bitstream::unpack(packet, &header)?
                    .into_iter()
                    .map(Some),
            );
        } else {
            frames.extend(std::iter::repeat(None).take(fpp));
        }
    }
    frames.truncate(header.n_frames as usize);
    let decoded = model.decode_frames(&frames)?;
    write_wav(
        &a.output,
        &tfnc::dsp::Waveform::new(decoded.clone(), SAMPLE_RATE),
    )?;
    println!("frames: {}", header.n_frames);
    println!("bitrate_kbps: {:.3}", measured_kbps(&header)?);
    if let Some(refpath) = &a.reference {
        let reference = read_mono_16k(refpath)?;
        let n = reference.len().min(decoded.len());
        println!(
            "snr_db: {:.3}",
            tfnc::train::snr_db(&reference[..n], &decoded[..n])
        );
        println!(
            "spectral_distance: {:.6e}",
            spectral_distance(
                &model.kernel,
                model.cfg.power_exponent,
                &reference,
                &decoded
            )?
        );
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let samples = read_mono_16k(&a.input)?;
    let frames = model.encode_signal(&samples)?;
    let inputs: Vec<_> = frames.into_iter().map(Some).collect();
    let decoded = model.decode_frames(&inputs)?;
    println!(
        "bitrate_kbps: {:.3}",
        model.cfg.bitrate_kbps().map_err(CliError::from)?
    );
    println!("snr_db: {:.3}", tfnc::train::eval_snr(&model, &samples)?);
    println!(
        "spectral_distance: {:.6e}",
        spectral_distance(&model.kernel, model.cfg.power_exponent, &samples, &decoded)?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Optional TOML config; every field can be overridden by a flag.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    steps: Option<u64>,
    seed: Option<u64>,
    segment_len: Option<usize>,
    learning_rate: Option<f64>,
    commitment_weight: Option<f64>,
    aux_weight: Option<f64>,
    all_in_one: Option<bool>,
    codec: Option<CodecConfig>,
    channel: Option<ThreeStateModel>,
}

fn read_config(path: Option<&PathBuf>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
    }
}

fn load_corpus(
    manifest: Option<&PathBuf>,
    segment_len: usize,
    want_noise: bool,
) -> CliResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    match manifest {
        Some(p) => {
            let entries = parse_dataset_manifest(&std::fs::read_to_string(p)?)?;
            let base = p.parent().unwrap_or(Path::new("."));
            let mut clean = Vec::new();
            let mut noise = Vec::new();
            for e in &entries {
                let samples = read_mono_16k(&base.join(&e.path))?;
                match e.role {
                    Role::Clean => clean.push(samples),
                    Role::Noise => noise.push(samples),
                }
            }
            if clean.is_empty() {
                return Err(CliError::Data("manifest has no clean clips".into()));
            }
            Ok((clean, noise))
        }
        None => {
            let clean = (0..4)
                .map(|i| synthetic_clip(segment_len + SAMPLE_RATE as usize, 100 + i))
                .collect();
            let noise = if want_noise {
                (0..2)
                    .map(|i| synthetic_clip(segment_len + SAMPLE_RATE as usize, 200 + i))
                    .collect()
            } else {
                Vec::new()
            };
            Ok((clean, noise))
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let file = read_config(a.config.as_ref())?;
    let all_in_one = a.all_in_one || file.all_in_one.unwrap_or(false);
    let mut opts = TrainOptions::default();
    opts.steps = a.steps.or(file.steps).unwrap_or(500);
    opts.seed = a.seed.or(file.seed).unwrap_or(0);
    opts.segment_len = a
        .segment_len
        .or(file.segment_len)
        .unwrap_or(opts.segment_len);
    opts.adam = AdamConfig {
        lr: a
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(AdamConfig::default().lr),
        ..AdamConfig::default()
    };
    if let Some(w) = file.commitment_weight {
        opts.weights.commitment = w;
    }
    if let Some(w) = file.aux_weight {
        opts.weights.aux = w;
    }
    opts.channel = file.channel;

    let (mut model, start_step) = match &a.resume {
        Some(p) => {
            let (model, step) = load_checkpoint(p)?;
            if let Some(cfg) = &file.codec {
                if *cfg != model.cfg {
                    return Err(CliError::Data(format!(
                        "config file codec differs from resumed checkpoint\n  file:       {cfg:?}\n  checkpoint: {:?}",
                        model.cfg
                    )));
                }
            }
            (model, step)
        }
        None => {
            let cfg = file.codec.clone().unwrap_or_default();
            (Model::new(cfg, all_in_one, opts.seed)?, 0)
        }
    };
    opts.start_step = start_step;

    let (clean, noise) = load_corpus(a.manifest.as_ref(), opts.segment_len, model.is_all_in_one())?;

    let mut metrics_file = match &a.metrics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut sink_err = None;
    let metrics = train(&mut model, &clean, &noise, &opts, |m| {
        if let Some(f) = metrics_file.as_mut() {
            if sink_err.is_none() {
                if let Err(e) = serde_json::to_writer(&mut *f, m).map_err(std::io::Error::from) {
                    sink_err = Some(e);
                } else if let Err(e) = writeln!(f) {
                    sink_err = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }

    let end_step = start_step + opts.steps;
    save_checkpoint(&model, end_step, &a.output)?;
    println!("steps: {end_step}");
    if let Some(last) = metrics.last() {
        println!("final_loss: {:.6}", last.total);
        println!("codebook_entropy: {:.3}", last.codebook_entropy);
    }
    println!("checkpoint: {}", a.output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let base = ablation_base_config();
    let arms = ablation_arms();
    let segment_len = 4 * base.stft.window_len * 32;
    let clip = match &a.clip {
        Some(p) => read_mono_16k(p)?,
        None => synthetic_clip(segment_len + 2000, a.seed.wrapping_add(300)),
    };
    let opts = TrainOptions {
        steps: a.steps,
        seed: a.seed,
        segment_len: segment_len.min(clip.len()),
        ..Default::default()
    };
    let reports = run_ablation(&base, &arms, &clip, &opts, 0.05)?;
    for r in &reports {
        println!(
            "arm {}: params {} final_loss {:.6} snr_db {:.3} spectral_distance {:.6e}",
            r.name, r.param_count, r.final_loss, r.snr_db, r.spectral_distance
        );
    }
    println!("note: arm ordering is directional only, not asserted");
    if let Some(p) = &a.output {
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(p, json)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let file = read_config(a.config.as_ref())?;
    let channel = file.channel.unwrap_or_default();
    channel.validate()?;
    let trace = channel.simulate(a.packets, a.seed)?;
    std::fs::write(&a.output, trace.to_file_string())?;
    println!("packets: {}", a.packets);
    println!("empirical_loss_rate: {:.6}", trace.loss_rate());
    println!(
        "analytic_loss_rate: {:.6}",
        channel.stationary_loss_rate()?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

const GRADCHECK_SCOPES: &[&str] = &["tcm", "ggru", "stack", "conv", "deconv", "spectral"];
const GRADCHECK_TOL: f64 = 1e-5;

fn stack_scope_error(specs: &[BlockSpec], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = 6;
    let t = 7;
    let stack = TemporalStack::new(&mut store, &mut rng, "s", c, specs).unwrap();
    let x = random_tensor(&mut rng, vec![1, t, c]);
    let target = random_tensor(&mut rng, vec![1, t, c]);
    grad_check_params(
        &mut store,
        &x,
        |sess, store, xn| {
            let y = stack.forward(sess, store, xn).unwrap();
            sess.tape.mse_const(y, target.clone()).unwrap()
        },
        DEFAULT_STEP,
        6,
        seed ^ 1,
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scope_error(scope: &str) -> f64 {
    match scope {
        "tcm" => stack_scope_error(
            &[BlockSpec::Tcm {
                dilations: vec![1, 2],
                bottleneck: 4,
                kernel: 3,
            }],
            43,
        ),
        "ggru" => stack_scope_error(&[BlockSpec::GGru { groups: 2 }], 32),
        "stack" => stack_scope_error(
            &[
                BlockSpec::Tcm {
                    dilations: vec![1, 2],
                    bottleneck: 4,
                    kernel: 3,
                },
                BlockSpec::GGru { groups: 2 },
            ],
            33,
        ),
        "conv" => {
            let mut rng = ChaCha8Rng::seed_from_u64(34);
            let mut store = ParamStore::new();
            let layer =
                Conv2dLayer::new(&mut store, &mut rng, "c", 2, 4, 2, 3, 4, 1).unwrap();
            let x = random_tensor(&mut rng, vec![1, 5, 8, 2]);
            let target = random_tensor(&mut rng, vec![1, 5, 2, 3]);
            grad_check_params(
                &mut store,
                &x,
                |sess, store, xn| {
                    let y = layer.forward(sess, store, xn).unwrap();
                    sess.tape.mse_const(y, target.clone()).unwrap()
                },
                DEFAULT_STEP,
                6,
                35,
            )
        }
        "deconv" => {
            let mut rng = ChaCha8Rng::seed_from_u64(36);
            let mut store = ParamStore::new();
            let layer = Deconv2dLayer::new(&mut store, &mut rng, "d", 2, 4, 3, 2, 4).unwrap();
            let x = random_tensor(&mut rng, vec![1, 5, 2, 3]);
            let target = random_tensor(&mut rng, vec![1, 5, 8, 2]);
            grad_check_params(
                &mut store,
                &x,
                |sess, store, xn| {
                    let y = layer.forward(sess, store, xn).unwrap();
                    sess.tape.mse_const(y, target.clone()).unwrap()
                },
                DEFAULT_STEP,
                6,
                37,
            )
        }
        "spectral" => {
            let kernel = std::sync::Arc::new(
                StftKernel::new(StftConfig {
                    window_len: 16,
                    hop_len: 4,
                })
                .unwrap(),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(38);
            let x = random_tensor(&mut rng, vec![1, 4, 8, 2]);
            let target = random_tensor(&mut rng, vec![1, 4, 9, 2]);
            grad_check(
                move |tape: &mut Tape, leaves: &[tfnc::nn::NodeId]| {
                    let padded = tape.pad_freq_high(leaves[0]).unwrap();
                    let wave = tape.istft(padded, kernel.clone()).unwrap();
                    let spec = tape.stft(wave, kernel.clone()).unwrap();
                    tape.mse_const(spec, target.clone()).unwrap()
                },
                &[x],
                DEFAULT_STEP,
            )
        }
        _ => unreachable!(),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let scopes: Vec<&str> = if a.scope == "all" {
        GRADCHECK_SCOPES.to_vec()
    } else if GRADCHECK_SCOPES.contains(&a.scope.as_str()) {
        vec![a.scope.as_str()]
    } else {
        let mut valid = String::from("all");
        for s in GRADCHECK_SCOPES {
            let _ = write!(valid, ", {s}");
        }
        return Err(CliError::Usage(format!(
            "unknown scope '{}'; valid scopes: {valid}",
            a.scope
        )));
    };
    let mut worst: f64 = 0.0;
    for scope in scopes {
        let err = scope_error(scope);
        println!("scope {scope}: worst relative error {err:.3e}");
        worst = worst.max(err);
    }
    if worst > GRADCHECK_TOL {
        return Err(CliError::Numerical(format!(
            "worst relative error {worst:.3e} exceeds {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}
