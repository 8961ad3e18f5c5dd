//! Packed code-map messages and bandwidth accounting.
//!
//! Wire layout, all integers little-endian:
//!
//! | offset  | size | field                                   |
//! |---------|------|-----------------------------------------|
//! | 0       | 4    | sender id (u32)                         |
//! | 4       | 4    | scene id (u32)                          |
//! | 8       | 1    | owner name length `n` (u8)              |
//! | 9       | n    | owner name, UTF-8                       |
//! | 9+n     | 2    | H (u16)                                 |
//! | 11+n    | 2    | W (u16)                                 |
//! | 13+n    | 1    | bits per index `b = ceil(log2 D)` (u8)  |
//! | 14+n    | 2    | codebook size D (u16)                   |
//! | 16+n    | 12   | pose x, y, heading (f32 each)           |
//! | 28+n    | ...  | payload, `ceil(H*W*b/8)` bytes          |
//!
//! Indices are written row-major, `b` bits each, most significant bit first
//! within every byte; the last byte is zero-padded.

use serde::{Deserialize, Serialize};

use crate::codespace::CodeMap;
use crate::error::{Error, Result};
use crate::grid::Pose;

pub const FIXED_HEADER_BYTES: usize = 28;
pub const MAX_CODEBOOK_SIZE: usize = 256;

/// Bits per index for a codebook of `d` codes.
pub fn bits_per_index(d: usize) -> Result<u8> {
    if !(2..=MAX_CODEBOOK_SIZE).contains(&d) {
        return Err(Error::Encode(format!("codebook size {d} outside 2..=256")));
    }
    Ok((usize::BITS - (d - 1).leading_zeros()) as u8)
}

/// Exact payload size in bytes for an `h x w` map over `d` codes.
pub fn payload_len(h: usize, w: usize, d: usize) -> Result<usize> {
    let b = bits_per_index(d)? as usize;
    Ok((h * w * b).div_ceil(8))
}

/// Dense-to-packed ratio for `f32` features with `channels` channels:
/// `32 * C / ceil(log2 D)`. Independent of the grid size.
pub fn compression_ratio(channels: usize, d: usize) -> Result<f64> {
    Ok(32.0 * channels as f64 / bits_per_index(d)? as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageMeta {
    pub sender_id: u32,
    pub scene_id: u32,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeMessage {
    pub sender_id: u32,
    pub scene_id: u32,
    pub target_owner: String,
    pub height: u16,
    pub width: u16,
    pub bits: u8,
    pub codebook_size: u16,
    /// Pose as transmitted, `f32` precision.
    pub pose: [f32; 3],
    pub payload: Vec<u8>,
}

impl CodeMessage {
    pub fn header_len(&self) -> usize {
        FIXED_HEADER_BYTES + self.target_owner.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.sender_id.to_le_bytes());
        out.extend_from_slice(&self.scene_id.to_le_bytes());
        out.push(self.target_owner.len() as u8);
        out.extend_from_slice(self.target_owner.as_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        for v in self.pose {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and validates a message; any inconsistency between header and
    /// payload is a corruption error.
    pub fn from_bytes(bytes: &[u8]) -> Result<CodeMessage> {
        let mut r = Reader { bytes, pos: 0 };
        let sender_id = u32::from_le_bytes(r.take::<4>()?);
        let scene_id = u32::from_le_bytes(r.take::<4>()?);
        let n = r.take::<1>()?[0] as usize;
        let name = r.slice(n)?;
        let target_owner = std::str::from_utf8(name)
            .map_err(|_| Error::Corruption("owner name is not UTF-8".into()))?
            .to_string();
        let height = u16::from_le_bytes(r.take::<2>()?);
        let width = u16::from_le_bytes(r.take::<2>()?);
        let bits = r.take::<1>()?[0];
        let codebook_size = u16::from_le_bytes(r.take::<2>()?);
        let mut pose = [0f32; 3];
        for p in pose.iter_mut() {
            *p = f32::from_le_bytes(r.take::<4>()?);
        }
        let payload = bytes[r.pos..].to_vec();
        let msg = CodeMessage {
            sender_id,
            scene_id,
            target_owner,
            height,
            width,
            bits,
            codebook_size,
            pose,
            payload,
        };
        msg.check()?;
        Ok(msg)
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Corruption("empty grid".into()));
        }
        let d = self.codebook_size as usize;
        let expected_bits =
            bits_per_index(d).map_err(|_| Error::Corruption(format!("codebook size {d} out of range")))?;
        if self.bits != expected_bits {
            return Err(Error::Corruption(format!(
                "{} bits per index for {d} codes, expected {expected_bits}",
                self.bits
            )));
        }
        let expected = (self.height as usize * self.width as usize * self.bits as usize).div_ceil(8);
        if self.payload.len() != expected {
            return Err(Error::Corruption(format!(
                "payload has {} bytes, header implies {expected}",
                self.payload.len()
            )));
        }
        if !self.pose.iter().all(|v| v.is_finite()) {
            return Err(Error::Corruption("non-finite pose".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn slice(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "truncated header: need {} bytes, have {}",
                self.pos + n,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.slice(N)?.try_into().expect("length checked"))
    }
}

/// Bit-packs a code map into a message.
pub fn pack(map: &CodeMap, meta: &MessageMeta) -> Result<CodeMessage> {
    let d = map.codebook_size();
    let bits = bits_per_index(d)?;
    if map.owner().len() > u8::MAX as usize {
        return Err(Error::Encode(format!("owner name {} is longer than 255 bytes", map.owner())));
    }
    let (h, w) = (map.height(), map.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Encode(format!("grid {h}x{w} exceeds u16 dimensions")));
    }
    let limit = 1u32 << bits;
    let mut payload = vec![0u8; (h * w * bits as usize).div_ceil(8)];
    let mut bitpos = 0usize;
    for &idx in map.indices() {
        if idx as u32 >= limit {
            return Err(Error::Encode(format!("index {idx} does not fit in {bits} bits")));
        }
        for k in (0..bits).rev() {
            if (idx >> k) & 1 == 1 {
                payload[bitpos / 8] |= 0x80 >> (bitpos % 8);
            }
            bitpos += 1;
        }
    }
    Ok(CodeMessage {
        sender_id: meta.sender_id,
        scene_id: meta.scene_id,
        target_owner: map.owner().to_string(),
        height: h as u16,
        width: w as u16,
        bits,
        codebook_size: d as u16,
        pose: [meta.pose.x as f32, meta.pose.y as f32, meta.pose.heading as f32],
        payload,
    })
}

/// Inverse of [`pack`]. Rejects inconsistent payload sizes, indices beyond
/// the codebook and non-zero padding bits.
pub fn unpack(msg: &CodeMessage) -> Result<(CodeMap, MessageMeta)> {
    msg.check()?;
    let (h, w) = (msg.height as usize, msg.width as usize);
    let bits = msg.bits as usize;
    let d = msg.codebook_size as usize;
    let mut indices = Vec::with_capacity(h * w);
    let mut bitpos = 0usize;
    for _ in 0..h * w {
        let mut v = 0u16;
        for _ in 0..bits {
            let bit = (msg.payload[bitpos / 8] >> (7 - bitpos % 8)) & 1;
            v = (v << 1) | bit as u16;
            bitpos += 1;
        }
        if v as usize >= d {
            return Err(Error::Corruption(format!("decoded index {v} >= codebook size {d}")));
        }
        indices.push(v);
    }
    while bitpos < msg.payload.len() * 8 {
        if (msg.payload[bitpos / 8] >> (7 - bitpos % 8)) & 1 != 0 {
            return Err(Error::Corruption("non-zero padding bits".into()));
        }
        bitpos += 1;
    }
    let map = CodeMap::new(h, w, indices, msg.target_owner.clone(), d)
        .map_err(|e| Error::Corruption(e.to_string()))?;
    let meta = MessageMeta {
        sender_id: msg.sender_id,
        scene_id: msg.scene_id,
        pose: Pose::new(msg.pose[0] as f64, msg.pose[1] as f64, msg.pose[2] as f64),
    };
    Ok((map, meta))
}

/// What a link carried, for bandwidth accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MessageKind {
    /// Packed code map; `dense_channels` is `C` of the dense features it replaces.
    CodeMap {
        height: usize,
        width: usize,
        codebook_size: usize,
        dense_channels: usize,
    },
    /// Raw `f32` feature map.
    Dense {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Detection list, 12 bytes (x, y, score as f32) per detection.
    Detections { count: usize },
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::CodeMap { .. } => "code_map",
            MessageKind::Dense { .. } => "dense",
            MessageKind::Detections { .. } => "detections",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub sender: u32,
    pub receiver: u32,
    #[serde(flatten)]
    pub kind: MessageKind,
    pub payload_bytes: usize,
    pub header_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub sender: u32,
    pub receiver: u32,
    pub kind: String,
    pub payload_bytes: usize,
    pub header_bytes: usize,
    /// `H * W * C * 4` for feature messages.
    pub dense_equivalent_bytes: Option<usize>,
    /// Dense-equivalent bytes over payload bytes; headers excluded.
    pub compression_ratio: Option<f64>,
}

pub fn bandwidth_report(links: &[LinkRecord]) -> Vec<BandwidthRow> {
    links
        .iter()
        .map(|l| {
            let dense = match l.kind {
                MessageKind::CodeMap {
                    height,
                    width,
                    dense_channels,
                    ..
                } => Some(height * width * dense_channels * 4),
                MessageKind::Dense {
                    height,
                    width,
                    channels,
                } => Some(height * width * channels * 4),
                MessageKind::Detections { .. } => None,
            };
            BandwidthRow {
                sender: l.sender,
                receiver: l.receiver,
                kind: l.kind.name().to_string(),
                payload_bytes: l.payload_bytes,
                header_bytes: l.header_bytes,
                dense_equivalent_bytes: dense,
                compression_ratio: dense
                    .filter(|_| l.payload_bytes > 0)
                    .map(|d| d as f64 / l.payload_bytes as f64),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> MessageMeta {
        MessageMeta {
            sender_id: 3,
            scene_id: 77,
            pose: Pose::new(1.5, -2.25, 0.5),
        }
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(2).unwrap(), 1);
        assert_eq!(bits_per_index(3).unwrap(), 2);
        assert_eq!(bits_per_index(16).unwrap(), 4);
        assert_eq!(bits_per_index(17).unwrap(), 5);
        assert_eq!(bits_per_index(256).unwrap(), 8);
        assert!(bits_per_index(1).is_err());
        assert!(bits_per_index(257).is_err());
    }

    #[test]
    fn golden_nibbles() {
        let m = CodeMap::new(2, 2, vec![0, 1, 2, 3], "mB", 16).unwrap();
        let msg = pack(&m, &meta()).unwrap();
        assert_eq!(msg.payload, vec![0x01, 0x23]);
    }

    #[test]
    fn golden_single_bits() {
        let m = CodeMap::new(1, 8, vec![1, 0, 1, 0, 1, 0, 1, 0], "g", 2).unwrap();
        assert_eq!(pack(&m, &meta()).unwrap().payload, vec![0xAA]);
    }

    #[test]
    fn golden_full_message() {
        let m = CodeMap::new(1, 3, vec![5, 0, 7], "ab", 8).unwrap();
        let meta = MessageMeta {
            sender_id: 1,
            scene_id: 258,
            pose: Pose::new(1.0, -2.0, 0.0),
        };
        let bytes = pack(&m, &meta).unwrap().to_bytes();
        let mut expect = vec![1, 0, 0, 0, 2, 1, 0, 0, 2, b'a', b'b', 1, 0, 3, 0, 3, 8, 0];
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        expect.extend_from_slice(&0.0f32.to_le_bytes());
        // 101 000 111 -> 1010 0011 1(000 0000)
        expect.extend_from_slice(&[0xA3, 0x80]);
        assert_eq!(bytes, expect);
        assert_eq!(bytes.len(), FIXED_HEADER_BYTES + 2 + 2);
    }

    #[test]
    fn headline_ratio_c128_d16() {
        let m = CodeMap::new(32, 32, vec![0; 1024], "x", 16).unwrap();
        let msg = pack(&m, &meta()).unwrap();
        assert_eq!(msg.payload.len(), 512);
        assert_eq!(32 * 32 * 16 * 4, 65536);
        assert_eq!(65536.0 / msg.payload.len() as f64, 128.0);
        assert_eq!(compression_ratio(16, 16).unwrap(), 128.0);
        assert_eq!(compression_ratio(128, 16).unwrap(), 1024.0);
    }

    #[test]
    fn tampered_lengths_are_corruption() {
        let m = CodeMap::new(3, 3, vec![1; 9], "o", 4).unwrap();
        let bytes = pack(&m, &meta()).unwrap().to_bytes();
        for cut in [1, bytes.len() - 1, 20] {
            assert!(matches!(CodeMessage::from_bytes(&bytes[..cut]), Err(Error::Corruption(_))));
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(CodeMessage::from_bytes(&longer), Err(Error::Corruption(_))));
    }

    #[test]
    fn out_of_range_index_is_corruption() {
        // D = 3 uses 2 bits, so the pattern 11 is representable but invalid
        let m = CodeMap::new(1, 4, vec![0, 1, 2, 0], "o", 3).unwrap();
        let mut msg = pack(&m, &meta()).unwrap();
        msg.payload[0] |= 0b0000_0011;
        assert!(matches!(unpack(&msg), Err(Error::Corruption(_))));
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(CodeMap::new(0, 0, vec![], "o", 4).is_err());
        let m = CodeMap::new(1, 1, vec![0], "o", 4).unwrap();
        let mut bytes = pack(&m, &meta()).unwrap().to_bytes();
        bytes[10] = 0; // H = 0
        bytes[9] = 0;
        assert!(CodeMessage::from_bytes(&bytes).is_err());
    }

    #[test]
    fn detections_have_no_ratio() {
        let rows = bandwidth_report(&[LinkRecord {
            sender: 1,
            receiver: 0,
            kind: MessageKind::Detections { count: 4 },
            payload_bytes: 48,
            header_bytes: 0,
        }]);
        assert_eq!(rows[0].payload_bytes, 48);
        assert!(rows[0].compression_ratio.is_none());
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(
            d in 2usize..=256,
            h in 1usize..=64,
            w in 1usize..=64,
            seed in any::<u64>(),
            sender in any::<u32>(),
            scene in any::<u32>(),
        ) {
            let mut s = seed;
            let indices: Vec<u16> = (0..h * w)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 33) % d as u64) as u16
                })
                .collect();
            let m = CodeMap::new(h, w, indices, "owner", d).unwrap();
            let meta = MessageMeta { sender_id: sender, scene_id: scene, pose: Pose::new(0.25, -1.5, 1.0) };
            let msg = pack(&m, &meta).unwrap();
            prop_assert_eq!(msg.payload.len(), payload_len(h, w, d).unwrap());
            let parsed = CodeMessage::from_bytes(&msg.to_bytes()).unwrap();
            prop_assert_eq!(&parsed, &msg);
            let (back, meta2) = unpack(&parsed).unwrap();
            prop_assert_eq!(back, m);
            prop_assert_eq!(meta2.sender_id, sender);
            prop_assert_eq!(meta2.scene_id, scene);
        }
    }
}
