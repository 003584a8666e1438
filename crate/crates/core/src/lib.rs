//! Low-latency neural speech codec toolkit.
//!
//! The pipeline is waveform -> streaming STFT -> causal conv encoder ->
//! interleaved temporal filtering -> group vector quantization -> fixed-length
//! bitstream, with the mirror path on the decoder side. Decoding accepts a
//! per-frame loss mask so the model can conceal dropped packets. A three-state
//! Markov channel simulator generates loss traces for training and evaluation.

pub mod bitstream;
pub mod channel;
pub mod codec;
pub mod dsp;
pub mod nn;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod vq;
pub mod wav;

pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
