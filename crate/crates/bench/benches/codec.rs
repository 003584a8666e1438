//! Microbenchmarks for the hot inference paths: STFT analysis, vector
//! quantization, and the per-frame streaming encoder/decoder.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use tfnc::codec::{Model, StreamingDecoder, StreamingEncoder};
use tfnc::dsp::{StftConfig, StftKernel};
use tfnc::train::{synthetic_clip, tiny_config};
use tfnc::vq::{Codebook, VqConfig};

fn bench_stft_frame(c: &mut Criterion) {
    let kernel = StftKernel::new(StftConfig::default()).unwrap();
    let frame = synthetic_clip(kernel.cfg.window_len, 1);
    let mut out = vec![0.0; kernel.cfg.bins() * 2];
    c.bench_function("stft_analyze_frame", |b| {
        b.iter(|| {
            kernel.analyze_frame(black_box(&frame), &mut out);
            out[0]
        })
    });
}

fn bench_quantize(c: &mut Criterion) {
    let cfg = VqConfig {
        n_groups: 3,
        codewords: 1024,
        dim: 40,
    };
    let mut cb = Codebook::new(cfg, 0.99, 1e-5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cp = cfg.latent_channels();
    let init: Vec<f64> = (0..64 * cp).map(|_| rng.gen_range(-1.0..1.0)).collect();
    cb.init_from_batch(&init, 64, &mut rng);
    let row: Vec<f64> = (0..cp).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("vq_quantize_frame", |b| {
        b.iter(|| cb.quantize_rows(black_box(&row), 1))
    });
}

fn trained_tiny_model() -> Model {
    let mut model = Model::new(tiny_config(), false, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cp = model.cfg.vq.latent_channels();
    let batch: Vec<f64> = (0..32 * cp).map(|_| rng.gen_range(-1.0..1.0)).collect();
    model.codebook.init_from_batch(&batch, 32, &mut rng);
    model
}

fn bench_streaming(c: &mut Criterion) {
    let model = trained_tiny_model();
    let hop = model.cfg.stft.hop_len;
    let clip = synthetic_clip(model.cfg.stft.window_len + hop * 256, 3);

    c.bench_function("streaming_encode_frame", |b| {
        let mut enc = StreamingEncoder::new(&model);
        let mut pos = 0;
        // prime past the first window so every push yields one frame
        let _ = enc.push(&clip[..model.cfg.stft.window_len]);
        pos += model.cfg.stft.window_len;
        b.iter(|| {
            if pos + hop > clip.len() {
                enc = StreamingEncoder::new(&model);
                let _ = enc.push(&clip[..model.cfg.stft.window_len]);
                pos = model.cfg.stft.window_len;
            }
            let frames = enc.push(black_box(&clip[pos..pos + hop]));
            pos += hop;
            frames
        })
    });

    let frames = model.encode_signal(&clip).unwrap();
    c.bench_function("streaming_decode_frame", |b| {
        let mut dec = StreamingDecoder::new(&model);
        let mut i = 0;
        b.iter(|| {
            if i >= frames.len() {
                dec = StreamingDecoder::new(&model);
                i = 0;
            }
            let out = dec.push_frame(black_box(Some(&frames[i]))).unwrap();
            i += 1;
            out
        })
    });
}

criterion_group!(benches, bench_stft_frame, bench_quantize, bench_streaming);
criterion_main!(benches);
