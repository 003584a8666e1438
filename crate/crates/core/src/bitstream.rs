//! Bit-exact packing of quantized indices into fixed-length-coded packets
//! and the `.tfn` stream file format.
//!
//! Bit order is big-endian (MSB first), group-major within a frame and
//! frame-major within a packet. A stream file is the header followed by the
//! packets; the header alone is enough to unpack indices without the model.

use crate::channel::PacketTrace;
use crate::vq::{Codebook, QuantizedFrame};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub sample_rate: u32,
    pub window_len: u32,
    pub hop_len: u32,
    pub n_groups: u32,
    pub codewords: u32,
    pub frames_per_packet: u32,
    /// Real frame count; the last packet may carry zero-padded frames.
    pub n_frames: u64,
}

impl StreamHeader {
    pub const BYTE_LEN: usize = 4 + 6 * 4 + 8;

    pub fn bits_per_group(&self) -> Result<u32> {
        if !self.codewords.is_power_of_two() || self.codewords < 2 {
            return Err(Error::Config(format!(
                "fixed-length coding needs a power-of-two codebook >= 2, got {}",
                self.codewords
            )));
        }
        Ok(self.codewords.trailing_zeros())
    }

    pub fn payload_bits(&self) -> Result<usize> {
        Ok(self.frames_per_packet as usize * self.n_groups as usize * self.bits_per_group()? as usize)
    }

    pub fn payload_bytes(&self) -> Result<usize> {
        Ok(self.payload_bits()?.div_ceil(8))
    }

    pub fn n_packets(&self) -> usize {
        (self.n_frames as usize).div_ceil(self.frames_per_packet as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTE_LEN);
        out.extend_from_slice(MAGIC);
        for v in [
            self.sample_rate,
            self.window_len,
            self.hop_len,
            self.n_groups,
            self.codewords,
            self.frames_per_packet,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < Self::BYTE_LEN {
            return Err(Error::Format("stream header truncated".into()));
        }
        if &b[0..4] != MAGIC {
            return Err(Error::Format("bad stream magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let header = Self {
            sample_rate: u32_at(4),
            window_len: u32_at(8),
            hop_len: u32_at(12),
            n_groups: u32_at(16),
            codewords: u32_at(20),
            frames_per_packet: u32_at(24),
            n_frames: u64::from_le_bytes(b[28..36].try_into().unwrap()),
        };
        header.bits_per_group()?;
        if header.n_groups == 0 || header.frames_per_packet == 0 {
            return Err(Error::Format("stream header has zero-sized fields".into()));
        }
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub seq: u32,
    pub payload: Vec<u8>,
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new(capacity_bits: usize) -> Self {
        Self {
            bytes: vec![0u8; capacity_bits.div_ceil(8)],
            bit: 0,
        }
    }

    fn put(&mut self, value: u32, width: u32) {
        for i in (0..width).rev() {
            if value >> i & 1 == 1 {
                self.bytes[self.bit / 8] |= 0x80 >> (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn get(&mut self, width: u32) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self
                .bytes
                .get(self.bit / 8)
                .ok_or_else(|| Error::MalformedPacket("payload too short".into()))?;
            v = v << 1 | (byte >> (7 - self.bit % 8) & 1) as u32;
            self.bit += 1;
        }
        Ok(v)
    }
}

/// Pack exactly frames_per_packet frames into one payload.
pub fn pack(frames: &[QuantizedFrame], header: &StreamHeader, seq: u32) -> Result<Packet> {
    if frames.len() != header.frames_per_packet as usize {
        return Err(Error::Shape(format!(
            "pack: expected {} frames, got {}",
            header.frames_per_packet,
            frames.len()
        )));
    }
    let bits = header.bits_per_group()?;
    let mut w = BitWriter::new(header.payload_bits()?);
    for frame in frames {
        if frame.indices.len() != header.n_groups as usize {
            return Err(Error::Shape(format!(
                "pack: frame has {} groups, header says {}",
                frame.indices.len(),
                header.n_groups
            )));
        }
        for &idx in &frame.indices {
            if idx >= header.codewords {
                return Err(Error::MalformedPacket(format!(
                    "index {idx} out of range for {} codewords",
                    header.codewords
                )));
            }
            w.put(idx, bits);
        }
    }
    Ok(Packet {
        seq,
        payload: w.bytes,
    })
}

/// Exact inverse of `pack`.
pub fn unpack(p: &Packet, header: &StreamHeader) -> Result<Vec<QuantizedFrame>> {
    if p.payload.len() != header.payload_bytes()? {
        return Err(Error::MalformedPacket(format!(
            "payload is {} bytes, expected {}",
            p.payload.len(),
            header.payload_bytes()?
        )));
    }
    let bits = header.bits_per_group()?;
    let mut r = BitReader {
        bytes: &p.payload,
        bit: 0,
    };
    let mut frames = Vec::with_capacity(header.frames_per_packet as usize);
    for _ in 0..header.frames_per_packet {
        let mut indices = Vec::with_capacity(header.n_groups as usize);
        for _ in 0..header.n_groups {
            indices.push(r.get(bits)?);
        }
        frames.push(QuantizedFrame { indices });
    }
    Ok(frames)
}

/// Group all frames into packets (zero-padding the tail) and serialize the
/// stream: header then `seq, payload` per packet.
pub fn write_stream(header: &StreamHeader, frames: &[QuantizedFrame]) -> Result<Vec<u8>> {
    if frames.len() != header.n_frames as usize {
        return Err(Error::Shape(format!(
            "stream header says {} frames, got {}",
            header.n_frames,
            frames.len()
        )));
    }
    let fpp = header.frames_per_packet as usize;
    let mut out = header.to_bytes();
    let zero_frame = QuantizedFrame {
        indices: vec![0; header.n_groups as usize],
    };
    for (seq, chunk) in frames.chunks(fpp).enumerate() {
        let mut group: Vec<QuantizedFrame> = chunk.to_vec();
        group.resize(fpp, zero_frame.clone());
        let packet = pack(&group, header, seq as u32)?;
        out.extend_from_slice(&packet.seq.to_le_bytes());
        out.extend_from_slice(&packet.payload);
    }
    Ok(out)
}

pub fn read_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<Packet>)> {
    let header = StreamHeader::from_bytes(bytes)?;
    let payload_len = header.payload_bytes()?;
    // reject the header's packet count before trusting it for anything:
    // it must match what the byte length can actually hold
    let body = bytes.len() - StreamHeader::BYTE_LEN;
    if header.n_packets() != body / (4 + payload_len) {
        return Err(Error::MalformedPacket(format!(
            "stream holds {} packet bytes, header implies {} packets",
            body,
            header.n_packets()
        )));
    }
    let mut packets = Vec::with_capacity(header.n_packets());
    let mut pos = StreamHeader::BYTE_LEN;
    while pos < bytes.len() {
        if pos + 4 + payload_len > bytes.len() {
            return Err(Error::MalformedPacket("truncated packet".into()));
        }
        let seq = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        packets.push(Packet {
            seq,
            payload: bytes[pos + 4..pos + 4 + payload_len].to_vec(),
        });
        pos += 4 + payload_len;
    }
    if packets.len() != header.n_packets() {
        return Err(Error::MalformedPacket(format!(
            "stream has {} packets, header implies {}",
            packets.len(),
            header.n_packets()
        )));
    }
    Ok((header, packets))
}

/// Dequantize a packet stream under a loss trace. Lost packets produce
/// zeroed features and a false mask for each of their frames; the result is
/// truncated to the header's real frame count. Returns ([T, C'] features,
/// per-frame mask).
pub fn apply_trace(
    packets: &[Packet],
    header: &StreamHeader,
    trace: &PacketTrace,
    codebook: &Codebook,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if trace.0.len() != packets.len() {
        return Err(Error::Shape(format!(
            "trace has {} entries for {} packets",
            trace.0.len(),
            packets.len()
        )));
    }
    let fpp = header.frames_per_packet as usize;
    let cp = codebook.cfg.latent_channels();
    if codebook.cfg.n_groups != header.n_groups as usize
        || codebook.cfg.codewords != header.codewords as usize
    {
        return Err(Error::Config(
            "codebook configuration does not match stream header".into(),
        ));
    }
    let n_frames = header.n_frames as usize;
    let mut features = vec![0.0; n_frames * cp];
    let mut mask = vec![false; n_frames];
    for (pi, (packet, &received)) in packets.iter().zip(&trace.0).enumerate() {
        if !received {
            continue;
        }
        let frames = unpack(packet, header)?;
        for (fi, frame) in frames.iter().enumerate() {
            let t = pi * fpp + fi;
            if t >= n_frames {
                break;
            }
            mask[t] = true;
            let row = codebook.dequantize_rows(std::slice::from_ref(frame));
            features[t * cp..(t + 1) * cp].copy_from_slice(&row);
        }
    }
    Ok((features, mask))
}
