//! Acceptance gate: ten structural criteria covering bitrate exactness,
//! causality/latency, streaming equivalence, gradients, quantization, DSP
//! invariants, the loss channel, the bitstream, training, and the ablation
//! harness. Each test prints exactly one PASS line on success; a failure
//! panics with the criterion name.

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use tfnc::bitstream::{pack, read_stream, unpack, write_stream, StreamHeader};
use tfnc::channel::{PacketTrace, ThreeStateModel, GOOD};
use tfnc::codec::{CodecConfig, Model, StreamingDecoder, StreamingEncoder};
use tfnc::dsp::{istft_with, stft_with, StftConfig, StftKernel, SAMPLE_RATE};
use tfnc::nn::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use tfnc::nn::layers::{Conv2dLayer, Deconv2dLayer, DepthwiseLayer, GruLayer};
use tfnc::nn::params::{AdamConfig, ParamStore, Session};
use tfnc::nn::{NodeId, Tape};
use tfnc::temporal::{BlockSpec, TemporalStack};
use tfnc::tensor::Tensor;
use tfnc::train::{
    ablation_arms, ablation_base_config, eval_snr, run_ablation, synthetic_clip, tiny_config,
    train, train_step, LossWeights, TrainOptions,
};
use tfnc::vq::{Codebook, QuantizedFrame, VqConfig};

fn pass(n: u32, name: &str) {
    println!("ACCEPTANCE {n:02} {name}: PASS");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero (for kinked/singular ops).
fn offset_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| r.gen_range(0.4..1.2) * if r.gen::<bool>() { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap()
}

/// Default-config model with a randomly initialized codebook.
fn default_model(all_in_one: bool, seed: u64) -> Model {
    let mut model = Model::new(CodecConfig::default(), all_in_one, seed).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    let cp = model.cfg.vq.latent_channels();
    let rows = 2048;
    let batch: Vec<f64> = (0..rows * cp).map(|_| r.gen_range(-1.0..1.0)).collect();
    model.codebook.init_from_batch(&batch, rows, &mut r);
    model
}

// ===========================================================================
// 1. Bitrate exactness

#[test]
fn a01_bitrate_exactness() {
    let measure = |codewords: u32| -> f64 {
        let mut r = rng(1);
        let n_frames = 400u64;
        let header = StreamHeader {
            sample_rate: SAMPLE_RATE,
            window_len: 320,
            hop_len: 80,
            n_groups: 3,
            codewords,
            frames_per_packet: 4,
            n_frames,
        };
        let frames: Vec<QuantizedFrame> = (0..n_frames)
            .map(|_| QuantizedFrame {
                indices: (0..3).map(|_| r.gen_range(0..codewords)).collect(),
            })
            .collect();
        let bytes = write_stream(&header, &frames).unwrap();
        let (h, packets) = read_stream(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(packets.len(), h.n_packets());
        // meaningful payload bits over audio milliseconds
        let bits = h.n_frames as f64 * h.n_groups as f64 * h.bits_per_group().unwrap() as f64;
        let audio_ms = h.n_frames as f64 * h.hop_len as f64 * 1000.0 / h.sample_rate as f64;
        bits / audio_ms
    };
    assert_eq!(measure(1024), 6.000, "N=3, S=1024 must be exactly 6 kbps");
    assert_eq!(measure(32), 3.000, "N=3, S=32 must be exactly 3 kbps");
    // formula agreement
    assert_eq!(tfnc::vq::bitrate_kbps(3, 1024, 5.0).unwrap(), 6.0);
    assert_eq!(tfnc::vq::bitrate_kbps(3, 32, 5.0).unwrap(), 3.0);
    pass(1, "bitrate-exactness");
}

// ===========================================================================
// 2. Latency / causality

/// Forward a [1,T,..] input through `f` twice, perturbing frame `k` the
/// second time, and require bit-equal outputs strictly before frame `k`.
fn assert_frame_causal<F>(mut f: F, x: &Tensor, k: usize, label: &str)
where
    F: FnMut(&Tensor) -> Tensor,
{
    let t = x.shape()[1];
    let per = x.len() / t;
    let clean = f(x);
    let mut bumped = x.clone();
    for v in &mut bumped.data_mut()[k * per..(k + 1) * per] {
        *v += 0.37;
    }
    let dirty = f(&bumped);
    let ot = clean.shape()[1];
    assert_eq!(ot, t, "{label}: frame count changed");
    let oper = clean.len() / ot;
    assert_eq!(
        clean.data()[..k * oper],
        dirty.data()[..k * oper],
        "{label}: output before frame {k} changed"
    );
    assert_ne!(
        clean.data()[k * oper..],
        dirty.data()[k * oper..],
        "{label}: perturbation had no effect at all"
    );
}

#[test]
fn a02_latency_and_causality() {
    // per-layer bit-exact causality under frame perturbation
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let conv = Conv2dLayer::new(&mut store, &mut r, "c", 2, 4, 2, 3, 4, 1).unwrap();
    let deconv = Deconv2dLayer::new(&mut store, &mut r, "d", 2, 4, 3, 2, 4).unwrap();
    let dw = DepthwiseLayer::new(&mut store, &mut r, "w", 3, 5, 2).unwrap();
    let gru = GruLayer::new(&mut store, &mut r, "g", 5, 5).unwrap();
    let tcm = TemporalStack::new(
        &mut store,
        &mut r,
        "t",
        6,
        &[BlockSpec::Tcm {
            dilations: vec![1, 2],
            bottleneck: 4,
            kernel: 3,
        }],
    )
    .unwrap();
    let ggru = TemporalStack::new(&mut store, &mut r, "q", 6, &[BlockSpec::GGru { groups: 2 }])
        .unwrap();

    let run =
        |store: &ParamStore, f: &dyn Fn(&mut Session, &ParamStore, NodeId) -> NodeId, x: &Tensor| {
            let mut sess = Session::new();
            let xn = sess.tape.leaf(x.clone());
            let y = f(&mut sess, store, xn);
            sess.tape.value(y).clone()
        };
    let t = 9;
    let k = 5;
    let x4 = random_tensor(&mut r, vec![1, t, 8, 2]);
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| conv.forward(s, st, xn).unwrap(), x),
        &x4,
        k,
        "conv2d",
    );
    let x4b = random_tensor(&mut r, vec![1, t, 2, 3]);
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| deconv.forward(s, st, xn).unwrap(), x),
        &x4b,
        k,
        "deconv2d",
    );
    let x3 = random_tensor(&mut r, vec![1, t, 5]);
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| dw.forward(s, st, xn).unwrap(), x),
        &x3,
        k,
        "depthwise",
    );
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| gru.forward(s, st, xn).unwrap(), x),
        &x3,
        k,
        "gru",
    );
    let x6 = random_tensor(&mut r, vec![1, t, 6]);
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| tcm.forward(s, st, xn).unwrap(), x),
        &x6,
        k,
        "tcm",
    );
    assert_frame_causal(
        |x| run(&store, &|s, st, xn| ggru.forward(s, st, xn).unwrap(), x),
        &x6,
        k,
        "ggru",
    );

    // full-codec truncation sweep at the 20 ms window: everything the codec
    // has already emitted must be unchanged when future input is removed
    let m = default_model(false, 3);
    let win = m.cfg.stft.window_len;
    let hop = m.cfg.stft.hop_len;
    assert_eq!(win, 320, "default window is 20 ms at 16 kHz");
    let signal = synthetic_clip(win + hop * 40, 5);
    let full = m.encode_signal(&signal).unwrap();
    let mut dec = StreamingDecoder::new(&m);
    let mut decoded_full = Vec::new();
    for f in &full {
        decoded_full.extend(dec.push_frame(Some(f)).unwrap());
    }
    for cut in [win, win + hop * 13, win + hop * 29] {
        let short = m.encode_signal(&signal[..cut]).unwrap();
        assert_eq!(short[..], full[..short.len()], "frames changed at cut {cut}");
        let mut dec2 = StreamingDecoder::new(&m);
        let mut decoded_short = Vec::new();
        for f in &short {
            decoded_short.extend(dec2.push_frame(Some(f)).unwrap());
        }
        assert_eq!(
            decoded_short[..],
            decoded_full[..decoded_short.len()],
            "emitted audio changed at cut {cut}"
        );
    }
    pass(2, "latency-causality");
}

// ===========================================================================
// 3. Streaming equivalence

#[test]
fn a03_streaming_equivalence() {
    let m = default_model(false, 7);
    let win = m.cfg.stft.window_len;
    let hop = m.cfg.stft.hop_len;
    let signal = synthetic_clip(win + hop * 30, 11);

    // batch: whole signal in one call
    let batch_frames = m.encode_signal(&signal).unwrap();
    let inputs: Vec<_> = batch_frames.iter().map(|f| Some(f.clone())).collect();
    let batch_audio = m.decode_frames(&inputs).unwrap();

    let mut r = rng(13);
    for split in 0..10 {
        // random chunking of the input stream
        let mut enc = StreamingEncoder::new(&m);
        let mut frames = Vec::new();
        let mut pos = 0;
        while pos < signal.len() {
            let n = r.gen_range(1..=97).min(signal.len() - pos);
            frames.extend(enc.push(&signal[pos..pos + n]));
            pos += n;
        }
        assert_eq!(frames, batch_frames, "split {split}: encoder diverged");

        // frame-by-frame decode
        let mut dec = StreamingDecoder::new(&m);
        let mut audio = Vec::new();
        for f in &frames {
            audio.extend(dec.push_frame(Some(f)).unwrap());
        }
        audio.extend(dec.finish());
        assert_eq!(audio, batch_audio, "split {split}: decoder diverged");
    }
    pass(3, "streaming-equivalence");
}

// ===========================================================================
// 4. Gradient suite

#[test]
fn a04_gradient_suite() {
    let tol = 1e-5;
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut r = rng(17);

    // --- elementwise / structural ops through one linear chain
    {
        let x = random_tensor(&mut r, vec![1, 4, 6]);
        let target = random_tensor(&mut r, vec![1, 4, 8]);
        let weights = vec![1.0, 0.0, 0.5, 2.0];
        let err = grad_check(
            move |tape: &mut Tape, leaves: &[NodeId]| {
                let a = tape.scale(leaves[0], 1.7);
                let b = tape.add(a, leaves[0]).unwrap();
                let lo = tape.slice_last(b, 0, 4).unwrap();
                let hi = tape.slice_last(b, 2, 6).unwrap();
                let cat = tape.concat_last(lo, hi).unwrap();
                let rs = tape.reshape(cat, vec![1, 4, 8]).unwrap();
                let sr = tape.scale_rows(rs, &weights).unwrap();
                tape.mse_const(sr, target.clone()).unwrap()
            },
            &[x],
            DEFAULT_STEP,
        );
        results.push(("structural-chain", err));
    }

    // --- conv2d
    {
        let x = random_tensor(&mut r, vec![1, 5, 8, 2]);
        let w = random_tensor(&mut r, vec![2, 4, 2, 3]);
        let b = random_tensor(&mut r, vec![3]);
        let target = random_tensor(&mut r, vec![1, 5, 2, 3]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.conv2d(l[0], l[1], l[2], 4, 1).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, w, b],
            DEFAULT_STEP,
        );
        results.push(("conv2d", err));
    }

    // --- deconv2d
    {
        let x = random_tensor(&mut r, vec![1, 5, 2, 3]);
        let w = random_tensor(&mut r, vec![2, 4, 3, 2]);
        let b = random_tensor(&mut r, vec![2]);
        let target = random_tensor(&mut r, vec![1, 5, 8, 2]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.deconv2d(l[0], l[1], l[2], 4).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, w, b],
            DEFAULT_STEP,
        );
        results.push(("deconv2d", err));
    }

    // --- depthwise dilated conv
    {
        let x = random_tensor(&mut r, vec![1, 7, 4]);
        let w = random_tensor(&mut r, vec![3, 4]);
        let b = random_tensor(&mut r, vec![4]);
        let target = random_tensor(&mut r, vec![1, 7, 4]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.depthwise_conv1d(l[0], l[1], l[2], 2).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, w, b],
            DEFAULT_STEP,
        );
        results.push(("depthwise", err));
    }

    // --- conv1x1
    {
        let x = random_tensor(&mut r, vec![1, 6, 3]);
        let w = random_tensor(&mut r, vec![3, 5]);
        let b = random_tensor(&mut r, vec![5]);
        let target = random_tensor(&mut r, vec![1, 6, 5]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.conv1x1(l[0], l[1], l[2]).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, w, b],
            DEFAULT_STEP,
        );
        results.push(("conv1x1", err));
    }

    // --- prelu (inputs bounded away from the kink)
    {
        let x = offset_tensor(&mut r, vec![1, 6, 4]);
        let s = random_tensor(&mut r, vec![4]);
        let target = random_tensor(&mut r, vec![1, 6, 4]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.prelu(l[0], l[1]).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, s],
            DEFAULT_STEP,
        );
        results.push(("prelu", err));
    }

    // --- batch norm (training statistics)
    {
        let x = random_tensor(&mut r, vec![2, 5, 4]);
        let g = offset_tensor(&mut r, vec![4]);
        let b = random_tensor(&mut r, vec![4]);
        let target = random_tensor(&mut r, vec![2, 5, 4]);
        let err = grad_check(
            move |tape, l| {
                let (y, _) = tape.batch_norm(l[0], l[1], l[2], None).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, g, b],
            DEFAULT_STEP,
        );
        results.push(("batch-norm", err));
    }

    // --- layer norm
    {
        let x = random_tensor(&mut r, vec![1, 6, 5]);
        let g = offset_tensor(&mut r, vec![5]);
        let b = random_tensor(&mut r, vec![5]);
        let target = random_tensor(&mut r, vec![1, 6, 5]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.layer_norm(l[0], l[1], l[2]).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, g, b],
            DEFAULT_STEP,
        );
        results.push(("layer-norm", err));
    }

    // --- GRU over a sequence (full BPTT)
    {
        let x = random_tensor(&mut r, vec![1, 6, 3]);
        let wx = random_tensor(&mut r, vec![3, 9]);
        let wh = random_tensor(&mut r, vec![3, 9]);
        let b = random_tensor(&mut r, vec![9]);
        let target = random_tensor(&mut r, vec![1, 6, 3]);
        let err = grad_check(
            move |tape, l| {
                let y = tape.gru_seq(l[0], l[1], l[2], l[3]).unwrap();
                tape.mse_const(y, target.clone()).unwrap()
            },
            &[x, wx, wh, b],
            DEFAULT_STEP,
        );
        results.push(("gru-seq", err));
    }

    // --- power law, both directions (magnitudes off zero)
    {
        let x = offset_tensor(&mut r, vec![1, 5, 3, 2]);
        let target = random_tensor(&mut r, vec![1, 5, 3, 2]);
        let err = grad_check(
            move |tape, l| {
                let c = tape.power_law(l[0], 0.3).unwrap();
                let e = tape.power_law(c, 1.0 / 0.3).unwrap();
                tape.mse_const(e, target.clone()).unwrap()
            },
            &[x],
            DEFAULT_STEP,
        );
        results.push(("power-law", err));
    }

    // --- spectral chain: pad -> istft -> stft
    {
        let kernel = Arc::new(
            StftKernel::new(StftConfig {
                window_len: 16,
                hop_len: 4,
            })
            .unwrap(),
        );
        let x = random_tensor(&mut r, vec![1, 4, 8, 2]);
        let target = random_tensor(&mut r, vec![1, 4, 9, 2]);
        let err = grad_check(
            move |tape, l| {
                let p = tape.pad_freq_high(l[0]).unwrap();
                let w = tape.istft(p, kernel.clone()).unwrap();
                let s = tape.stft(w, kernel.clone()).unwrap();
                tape.mse_const(s, target.clone()).unwrap()
            },
            &[x],
            DEFAULT_STEP,
        );
        results.push(("spectral-chain", err));
    }

    // --- straight-through: exact gradient-identity, not finite differences
    // (the true function has zero derivative in x; the estimator copies the
    // downstream gradient unchanged)
    {
        let x = random_tensor(&mut r, vec![1, 4, 3]);
        let q = random_tensor(&mut r, vec![1, 4, 3]);
        let target = random_tensor(&mut r, vec![1, 4, 3]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let st = tape.straight_through(xn, q.clone()).unwrap();
        let loss = tape.mse_const(st, target.clone()).unwrap();
        let grads = tape.backward(loss);
        let gx = grads.get(xn).unwrap();
        // reference: the same loss applied to a leaf holding q directly
        let mut ref_tape = Tape::new();
        let qn = ref_tape.leaf(q);
        let ref_loss = ref_tape.mse_const(qn, target.clone()).unwrap();
        let ref_grads = ref_tape.backward(ref_loss);
        assert_eq!(
            gx,
            ref_grads.get(qn).unwrap(),
            "straight-through must copy gradients exactly"
        );
        results.push(("straight-through", 0.0));
    }

    // --- composite blocks through registered parameters
    for (i, (name, specs)) in [
        (
            "tcm-block",
            vec![BlockSpec::Tcm {
                dilations: vec![1, 2],
                bottleneck: 4,
                kernel: 3,
            }],
        ),
        ("ggru-block", vec![BlockSpec::GGru { groups: 2 }]),
        (
            "interleaved-stack",
            vec![
                BlockSpec::Tcm {
                    dilations: vec![1, 2],
                    bottleneck: 4,
                    kernel: 3,
                },
                BlockSpec::GGru { groups: 2 },
            ],
        ),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r2 = rng(19 + i as u64);
        let mut store = ParamStore::new();
        let stack = TemporalStack::new(&mut store, &mut r2, "s", 6, &specs).unwrap();
        let x = random_tensor(&mut r2, vec![1, 7, 6]);
        let target = random_tensor(&mut r2, vec![1, 7, 6]);
        let err = grad_check_params(
            &mut store,
            &x,
            |sess, store, xn| {
                let y = stack.forward(sess, store, xn).unwrap();
                sess.tape.mse_const(y, target.clone()).unwrap()
            },
            // smaller step than default: composites stack PReLU kinks, and
            // a narrower probe is far less likely to straddle one
            2e-5,
            6,
            21 + i as u64,
        );
        results.push((name, err));
    }

    let mut worst = ("", 0.0f64);
    for (name, err) in &results {
        assert!(*err < tol, "{name}: rel err {err:.3e} >= {tol:e}");
        if *err > worst.1 {
            worst = (name, *err);
        }
    }
    println!(
        "  gradient suite: {} checks, worst {} at {:.3e}",
        results.len(),
        worst.0,
        worst.1
    );
    pass(4, "gradient-suite");
}

// ===========================================================================
// 5. VQ correctness

#[test]
fn a05_vq_correctness() {
    let mut r = rng(23);
    let cfg = VqConfig {
        n_groups: 2,
        codewords: 16,
        dim: 6,
    };
    let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
    let rows = 64;
    let init: Vec<f64> = (0..rows * cfg.latent_channels())
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    cb.init_from_batch(&init, rows, &mut r);

    // nearest-neighbor matches an independent brute-force oracle on 1e4
    // random vectors
    for _ in 0..10_000 {
        let g = r.gen_range(0..cfg.n_groups);
        let v: Vec<f64> = (0..cfg.dim).map(|_| r.gen_range(-1.5..1.5)).collect();
        let got = cb.nearest(g, &v);
        let mut best = (f64::INFINITY, 0u32);
        for c in 0..cfg.codewords {
            let cw = cb.codeword(g, c);
            let d: f64 = cw.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c as u32);
            }
        }
        assert_eq!(got, best.1, "group {g} vector {v:?}");
    }

    // straight-through gradient identity through the tape
    {
        let x = random_tensor(&mut r, vec![1, 3, cfg.latent_channels()]);
        let (q, _) = cb.quantize(&x).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let st = tape.straight_through(xn, q.clone()).unwrap();
        let target = Tensor::zeros(q.shape().to_vec());
        let loss = tape.mse_const(st, target).unwrap();
        let grads = tape.backward(loss);
        let gx = grads.get(xn).unwrap();
        // reference: the same loss on a plain leaf holding q; the estimator
        // must deliver exactly the gradient that arrives at the quantizer
        let mut ref_tape = Tape::new();
        let qn = ref_tape.leaf(q.clone());
        let ref_loss = ref_tape.mse_const(qn, Tensor::zeros(q.shape().to_vec())).unwrap();
        let ref_grads = ref_tape.backward(ref_loss);
        assert_eq!(gx, ref_grads.get(qn).unwrap());
    }

    // EMA recovers Gaussian-mixture means within 3 sigma / sqrt(n_eff)
    {
        let mix = VqConfig {
            n_groups: 1,
            codewords: 4,
            dim: 2,
        };
        let mut cb = Codebook::new(mix, 0.99, 1e-5).unwrap();
        let means = [[-4.0, -4.0], [-4.0, 4.0], [4.0, -4.0], [4.0, 4.0]];
        for (c, m) in means.iter().enumerate() {
            cb.set_codeword(0, c, m);
        }
        let sigma = 0.5;
        let per_step = 256;
        for _ in 0..400 {
            let mut data = Vec::with_capacity(per_step * 2);
            for _ in 0..per_step {
                let c = r.gen_range(0..4);
                let u1: f64 = r.gen_range(1e-12..1.0);
                let u2: f64 = r.gen_range(0.0..1.0);
                let rad = (-2.0 * u1.ln()).sqrt();
                let th = std::f64::consts::TAU * u2;
                data.push(means[c][0] + sigma * rad * th.cos());
                data.push(means[c][1] + sigma * rad * th.sin());
            }
            let (_, frames) = cb.quantize_rows(&data, per_step);
            cb.ema_update(&data, &frames);
        }
        // effective sample size per cluster: per_step/4 points per update
        // times the EMA horizon 1/(1-decay)
        let n_eff = (per_step as f64 / 4.0) / (1.0 - 0.99);
        let tol = 3.0 * sigma / n_eff.sqrt();
        for (c, m) in means.iter().enumerate() {
            let cw = cb.codeword(0, c);
            for d in 0..2 {
                assert!(
                    (cw[d] - m[d]).abs() < tol,
                    "cluster {c}: {cw:?} vs {m:?} (tol {tol:.4})"
                );
            }
        }
    }

    // quantization is idempotent
    {
        let x = random_tensor(&mut r, vec![1, 8, cfg.latent_channels()]);
        let (q1, f1) = cb.quantize(&x).unwrap();
        let (q2, f2) = cb.quantize(&q1).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(f1, f2);
    }
    pass(5, "vq-correctness");
}

// ===========================================================================
// 6. DSP invariants

#[test]
fn a06_dsp_invariants() {
    let kernel = StftKernel::new(StftConfig::default()).unwrap();
    // COLA: tapered overlap-add of the squared window is constant
    assert!((kernel.cola_constant() - 2.0).abs() < 1e-10);
    let win = kernel.cfg.window_len;
    let hop = kernel.cfg.hop_len;
    for n in 0..hop {
        let mut s = 0.0;
        let mut k = 0;
        while k * hop + n < win {
            let idx = win - 1 - (k * hop + n);
            s += kernel.window[idx] * kernel.window[idx];
            k += 1;
        }
        assert!((s - kernel.cola_constant()).abs() < 1e-10, "offset {n}");
    }

    // interior round-trip error below -120 dB
    let mut r = rng(29);
    let x: Vec<f64> = (0..SAMPLE_RATE as usize)
        .map(|_| r.gen_range(-0.8..0.8))
        .collect();
    let spec = stft_with(&kernel, &x).unwrap();
    let y = istft_with(&kernel, &spec).unwrap();
    let a = win;
    let b = y.len() - win;
    let sig: f64 = x[a..b].iter().map(|v| v * v).sum();
    let err: f64 = x[a..b]
        .iter()
        .zip(&y[a..b])
        .map(|(u, v)| (u - v) * (u - v))
        .sum();
    let db = 10.0 * (err / sig).log10();
    assert!(db < -120.0, "round-trip error {db:.1} dB");

    // power-law round trip within 1e-6 relative
    let spec_c = tfnc::dsp::power_law_compress(&spec, 0.3).unwrap();
    let spec_e = tfnc::dsp::power_law_expand(&spec_c, 0.3).unwrap();
    for (u, v) in spec.data.iter().zip(&spec_e.data) {
        let rel = (u - v).abs() / u.abs().max(1e-9);
        assert!(rel < 1e-6, "{u} vs {v}");
    }
    pass(6, "dsp-invariants");
}

// ===========================================================================
// 7. Channel model

#[test]
fn a07_channel_statistics() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let model = ThreeStateModel::default();
    let n = 1_000_000;
    let trace = model.simulate(n, 31).unwrap();
    let analytic = model.stationary_loss_rate().unwrap();
    assert!(
        (trace.loss_rate() - analytic).abs() < 0.01,
        "empirical {} vs analytic {analytic}",
        trace.loss_rate()
    );

    // per-state dwell times fit a geometric law (chi-square at 0.01)
    let (_, states) = model.simulate_from(GOOD, n, 37).unwrap();
    for s in 0..3 {
        let mut dwells: Vec<usize> = Vec::new();
        let mut run = 0usize;
        for &st in &states {
            if st == s {
                run += 1;
            } else if run > 0 {
                dwells.push(run);
                run = 0;
            }
        }
        if run > 0 {
            dwells.push(run);
        }
        let p_stay = model.transitions[s][s];
        // bins 1..=max_bin with a tail bin; geometric pmf (1-p)p^(k-1)
        let max_bin = 8usize;
        let total = dwells.len() as f64;
        let mut obs = vec![0f64; max_bin + 1];
        for &d in &dwells {
            obs[d.min(max_bin + 1) - 1] += 1.0;
        }
        let mut chi2 = 0.0;
        for k in 1..=max_bin + 1 {
            let p = if k <= max_bin {
                (1.0 - p_stay) * p_stay.powi(k as i32 - 1)
            } else {
                p_stay.powi(max_bin as i32) // tail mass
            };
            let expected = total * p;
            assert!(expected > 5.0, "state {s} bin {k} underpopulated");
            let d = obs[k - 1] - expected;
            chi2 += d * d / expected;
        }
        let dof = max_bin as f64; // bins - 1, parameters known a priori
        let critical = ChiSquared::new(dof).unwrap().inverse_cdf(0.99);
        assert!(
            chi2 < critical,
            "state {s}: chi2 {chi2:.2} >= critical {critical:.2}"
        );
    }

    // seeded determinism
    assert_eq!(model.simulate(5000, 41).unwrap(), model.simulate(5000, 41).unwrap());
    assert_ne!(model.simulate(5000, 41).unwrap(), model.simulate(5000, 42).unwrap());
    pass(7, "channel-statistics");
}

// ===========================================================================
// 8. Bitstream

#[test]
fn a08_bitstream() {
    // exhaustive round trip at index boundaries for several codebook sizes
    for codewords in [2u32, 4, 1024] {
        let header = StreamHeader {
            sample_rate: SAMPLE_RATE,
            window_len: 320,
            hop_len: 80,
            n_groups: 3,
            codewords,
            frames_per_packet: 4,
            n_frames: 4,
        };
        let boundary = [0, 1, codewords / 2, codewords - 2, codewords - 1];
        for &a in &boundary {
            for &b in &boundary {
                let frames: Vec<QuantizedFrame> = (0..4)
                    .map(|i| QuantizedFrame {
                        indices: vec![a, b, if i % 2 == 0 { a } else { b }],
                    })
                    .collect();
                let packet = pack(&frames, &header, 0).unwrap();
                let back = unpack(&packet, &header).unwrap();
                assert_eq!(back, frames);
            }
        }
    }

    // fuzz: arbitrary bytes never panic
    let mut r = rng(43);
    for _ in 0..2000 {
        let len = r.gen_range(0..200);
        let bytes: Vec<u8> = (0..len).map(|_| r.gen()).collect();
        let _ = read_stream(&bytes);
    }
    // corruptions of a valid stream never panic
    let header = StreamHeader {
        sample_rate: SAMPLE_RATE,
        window_len: 320,
        hop_len: 80,
        n_groups: 3,
        codewords: 1024,
        frames_per_packet: 4,
        n_frames: 16,
    };
    let frames: Vec<QuantizedFrame> = (0..16)
        .map(|_| QuantizedFrame {
            indices: (0..3).map(|_| r.gen_range(0..1024)).collect(),
        })
        .collect();
    let good = write_stream(&header, &frames).unwrap();
    for _ in 0..2000 {
        let mut bad = good.clone();
        let i = r.gen_range(0..bad.len());
        bad[i] ^= 1 << r.gen_range(0..8);
        let _ = read_stream(&bad);
        bad.truncate(r.gen_range(0..bad.len()));
        let _ = read_stream(&bad);
    }

    // alternating packet trace reproduces the 11110000 frame-mask law
    let mut cb = Codebook::new(
        VqConfig {
            n_groups: 3,
            codewords: 1024,
            dim: 4,
        },
        0.99,
        1e-5,
    )
    .unwrap();
    let init: Vec<f64> = (0..64 * 12).map(|_| r.gen_range(-1.0..1.0)).collect();
    cb.init_from_batch(&init, 64, &mut r);
    let (_, packets) = read_stream(&good).unwrap();
    let trace = PacketTrace(vec![true, false, true, false]);
    let (_, mask) = tfnc::bitstream::apply_trace(&packets, &header, &trace, &cb).unwrap();
    let expected: Vec<bool> = (0..16).map(|t| (t / 4) % 2 == 0).collect();
    assert_eq!(mask, expected, "mask must repeat 11110000");
    pass(8, "bitstream");
}

// ===========================================================================
// 9. Training smoke

/// The 6 kbps operating point (N=3, S=1024, K=40, 20 ms window / 5 ms hop)
/// with channel widths reduced to desk scale.
fn overfit_config() -> CodecConfig {
    CodecConfig {
        stft: StftConfig {
            window_len: 320,
            hop_len: 80,
        },
        power_exponent: 0.3,
        enc_channels: vec![4, 8, 16, 128],
        strides: vec![2, 2, 4, 10],
        conv_kt: 2,
        encode_stack: vec![BlockSpec::Tcm {
            dilations: vec![1, 2],
            bottleneck: 16,
            kernel: 3,
        }],
        decode_stack: vec![
            BlockSpec::Tcm {
                dilations: vec![1, 2],
                bottleneck: 16,
                kernel: 3,
            },
            BlockSpec::GGru { groups: 4 },
        ],
        vq: VqConfig {
            n_groups: 3,
            codewords: 1024,
            dim: 40,
        },
        frames_per_packet: 4,
    }
}

#[test]
fn a09_training_smoke() {
    // overfit one 3 s clip at the 6 kbps config to > 10 dB SNR
    let cfg = overfit_config();
    assert_eq!(cfg.bitrate_kbps().unwrap(), 6.0);
    let mut model = Model::new(cfg, false, 1).unwrap();
    let clip = synthetic_clip(3 * SAMPLE_RATE as usize, 42);
    let weights = LossWeights::default();
    let adam = AdamConfig {
        lr: 0.002,
        ..AdamConfig::default()
    };
    let mut r = rng(7);
    let mut losses = Vec::new();
    let mut snr = f64::NEG_INFINITY;
    for step in 1..=600u64 {
        let m = train_step(&mut model, &clip, &clip, None, &weights, &adam, step, &mut r)
            .expect("training step stays finite");
        losses.push(m.total);
        if step % 50 == 0 {
            snr = eval_snr(&model, &clip).unwrap();
            if snr > 10.5 {
                break;
            }
        }
    }
    assert!(snr > 10.0, "overfit SNR {snr:.2} dB <= 10 dB");

    // loss curve monotone under 50-step smoothing
    let window = 50;
    let smoothed: Vec<f64> = losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    for i in 1..smoothed.len() {
        assert!(
            smoothed[i] <= smoothed[i - 1],
            "smoothed loss rose at step {}: {} -> {}",
            i + window - 1,
            smoothed[i - 1],
            smoothed[i]
        );
    }

    // all-in-one: noisy input + simulated losses + aux decoder, 500 steps,
    // no NaN (train_step aborts on any non-finite loss)
    let mut aio = Model::new(tiny_config(), true, 5).unwrap();
    let seg = 32 + 8 * 29;
    let clean = synthetic_clip(seg + 2000, 10);
    let noise = synthetic_clip(4000, 11);
    let opts = TrainOptions {
        steps: 500,
        segment_len: seg,
        seed: 12,
        ..Default::default()
    };
    let metrics = train(&mut aio, &[clean], &[noise], &opts, |_| {}).unwrap();
    assert_eq!(metrics.len(), 500);
    assert!(metrics.iter().all(|m| m.total.is_finite() && m.aux > 0.0));

    // the aux decoder is absent from the inference graph: poisoning its
    // parameters cannot change decoded audio
    let probe = synthetic_clip(seg, 13);
    let frames = aio.encode_signal(&probe).unwrap();
    let inputs: Vec<_> = frames.into_iter().map(Some).collect();
    let before = aio.decode_frames(&inputs).unwrap();
    let aux_ids: Vec<_> = aio
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("aux."))
        .map(|(id, _)| id)
        .collect();
    assert!(!aux_ids.is_empty(), "all-in-one model has aux parameters");
    for id in aux_ids {
        for v in aio.store.get_mut(id).value.data_mut() {
            *v = f64::NAN;
        }
    }
    let after = aio.decode_frames(&inputs).unwrap();
    assert_eq!(before, after, "aux parameters leaked into inference");
    pass(9, "training-smoke");
}

// ===========================================================================
// 10. Ablation harness

#[test]
fn a10_ablation_harness() {
    let base = ablation_base_config();
    let arms = ablation_arms();
    assert_eq!(arms.len(), 3);
    let clip = synthetic_clip(6000, 51);
    let opts = TrainOptions {
        steps: 500,
        seed: 52,
        segment_len: 2048,
        ..Default::default()
    };
    let reports = run_ablation(&base, &arms, &clip, &opts, 0.05).unwrap();
    assert_eq!(reports.len(), 3);
    let reference = reports[0].param_count as f64;
    for rep in &reports {
        let rel = (rep.param_count as f64 - reference).abs() / reference;
        assert!(rel <= 0.05, "{}: {:.3} off budget", rep.name, rel);
        assert!(rep.final_loss.is_finite() && rep.spectral_distance.is_finite());
    }
    // ordering is reported, not asserted
    let mut by_loss: Vec<_> = reports.iter().collect();
    by_loss.sort_by(|a, b| a.final_loss.total_cmp(&b.final_loss));
    println!(
        "  ablation order by loss: {}",
        by_loss
            .iter()
            .map(|r| r.name.as_str())
            .collect::<Vec<_>>()
            .join(" < ")
    );
    pass(10, "ablation-harness");
}
