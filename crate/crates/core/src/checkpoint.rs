//! The `IVQ1` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IVQ1" | version: u32 = 1 | tensor_count: u32
//! per tensor:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: u32 × rank | dtype: u8
//!   [bits: u8]                      only for dtype 2
//!   payload                         f32: 4·n bytes, f16: 2·n bytes,
//!                                   codes: ceil(n·bits / 8) bytes, LSB-first
//! "META" | layers | d_model | d_ff | vocab | heads | context   (u32 each)
//! quantized: u8 [bits: u8 | group_size: u32 | strict: u8]
//! ```
//!
//! `docs/container-format.md` at the repository root has the long form.

use std::collections::HashSet;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Matrix;
use crate::quant::QuantSpec;

pub const MAGIC: &[u8; 4] = b"IVQ1";
pub const META_MAGIC: &[u8; 4] = b"META";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F16: u8 = 1;
const DTYPE_CODES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    /// Unsigned integer codes of `bits` width (1..=32).
    Codes { bits: u8, values: Vec<u32> },
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::Codes { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn payload_bytes(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F16(v) => v.len() * 2,
            TensorData::Codes { bits, values } => packed_len(values.len(), *bits),
        }
    }

    /// Widens floating payloads to f64.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::F16(v) => Some(v.iter().map(|x| x.to_f64()).collect()),
            TensorData::Codes { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, dims: Vec<u32>, values: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            dims,
            data: TensorData::F32(values),
        }
    }

    /// Stores a matrix as f32 with dims `[rows, cols]`.
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::f32(
            name,
            vec![m.rows() as u32, m.cols() as u32],
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self::f32(
            name,
            vec![v.len() as u32],
            v.iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let values = self.float_values()?;
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r as usize, *c as usize, values),
            [n] => Matrix::from_vec(1, *n as usize, values),
            dims => Err(Error::Shape(format!(
                "tensor `{}` of rank {} is not a matrix",
                self.name,
                dims.len()
            ))),
        }
    }

    pub fn float_values(&self) -> Result<Vec<f64>> {
        self.data.to_f64().ok_or_else(|| {
            Error::Format(format!("tensor `{}` is not floating point", self.name))
        })
    }

    pub fn codes(&self) -> Result<(u8, &[u32])> {
        match &self.data {
            TensorData::Codes { bits, values } => Ok((*bits, values)),
            _ => Err(Error::Format(format!(
                "tensor `{}` does not hold integer codes",
                self.name
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.element_count() != self.data.len() {
            return Err(Error::Shape(format!(
                "tensor `{}` has dims {:?} but {} values",
                self.name,
                self.dims,
                self.data.len()
            )));
        }
        if let TensorData::Codes { bits, values } = &self.data {
            check_bits(*bits)?;
            if *bits < 32 {
                if let Some(v) = values.iter().find(|&&v| v >> bits != 0) {
                    return Err(Error::Range(format!(
                        "code {v} does not fit in {bits} bits in `{}`",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metadata {
    pub config: ModelConfig,
    pub quant: Option<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub meta: Metadata,
}

impl Checkpoint {
    pub fn new(meta: Metadata) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| 16 + t.name.len() + 4 * t.dims.len() + t.data.payload_bytes())
            .sum();
        let mut out = Vec::with_capacity(12 + payload + 40);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d);
            }
            match &t.data {
                TensorData::F32(v) => {
                    out.push(DTYPE_F32);
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F16(v) => {
                    out.push(DTYPE_F16);
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::Codes { bits, values } => {
                    out.push(DTYPE_CODES);
                    out.push(*bits);
                    out.extend(pack_codes(values, *bits));
                }
            }
        }
        out.extend_from_slice(META_MAGIC);
        let c = &self.meta.config;
        for v in [c.layers, c.d_model, c.d_ff, c.vocab, c.heads, c.context] {
            put_u32(&mut out, v as u32);
        }
        match &self.meta.quant {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                out.push(q.bits());
                put_u32(&mut out, q.group_size() as u32);
                out.push(q.is_strict() as u8);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected IVQ1".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Corrupt(format!("dims of `{name}` overflow")))?;
            let data = match r.u8()? {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(overflow)?)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_F16 => {
                    let raw = r.take(n.checked_mul(2).ok_or_else(overflow)?)?;
                    TensorData::F16(
                        raw.chunks_exact(2)
                            .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DTYPE_CODES => {
                    let bits = r.u8()?;
                    check_bits(bits)?;
                    let raw = r.take(packed_len(n, bits))?;
                    TensorData::Codes {
                        bits,
                        values: unpack_codes(raw, bits, n),
                    }
                }
                tag => return Err(Error::Format(format!("unknown dtype tag {tag}"))),
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.take(4)? != META_MAGIC {
            return Err(Error::Format("missing metadata record".into()));
        }
        let mut fields = [0usize; 6];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let config = ModelConfig {
            layers: fields[0],
            d_model: fields[1],
            d_ff: fields[2],
            vocab: fields[3],
            heads: fields[4],
            context: fields[5],
        };
        let quant = match r.u8()? {
            0 => None,
            1 => {
                let bits = r.u8()?;
                let group = r.u32()? as usize;
                let strict = r.u8()? != 0;
                let spec = QuantSpec::new(bits, group)
                    .map_err(|e| Error::Format(format!("bad quant spec: {e}")))?;
                Some(if strict { spec.strict() } else { spec })
            }
            f => return Err(Error::Format(format!("bad quantized flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        let ckpt = Checkpoint {
            tensors,
            meta: Metadata { config, quant },
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn overflow() -> Error {
    Error::Corrupt("payload size overflow".into())
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::Format(format!("invalid code width {bits}")));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes into a little-endian bit stream: code `i` occupies stream bits
/// `[i·bits, (i+1)·bits)`, stream bit `8k + j` is bit `j` of byte `k`.
pub fn pack_codes(values: &[u32], bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(packed_len(values.len(), bits));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    for &v in values {
        acc |= ((v & mask) as u64) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    let mask = if bits == 32 { u32::MAX as u64 } else { (1u64 << bits) - 1 };
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (*iter.next().expect("length checked by caller") as u64) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    out
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> Metadata {
        Metadata {
            config: ModelConfig {
                layers: 1,
                d_model: 4,
                d_ff: 8,
                vocab: 5,
                heads: 2,
                context: 16,
            },
            quant: None,
        }
    }

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Metadata {
            quant: Some(QuantSpec::new(2, 4).unwrap()),
            ..meta()
        });
        c.push(Tensor::f32("a", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]));
        c.push(Tensor {
            name: "a.scales".into(),
            dims: vec![3],
            data: TensorData::F16(vec![f16::from_f64(0.1), f16::ONE, f16::ZERO]),
        });
        c.push(Tensor {
            name: "a.codes".into(),
            dims: vec![5],
            data: TensorData::Codes {
                bits: 2,
                values: vec![0, 3, 2, 1, 3],
            },
        });
        c
    }

    #[test]
    fn byte_layout_of_small_file() {
        let mut c = Checkpoint::new(meta());
        c.push(Tensor::f32("w", vec![1], vec![1.0]));
        let bytes = c.to_bytes().unwrap();
        let mut expected = b"IVQ1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(0);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend(b"META");
        for v in [1u32, 4, 8, 5, 2, 16] {
            expected.extend(v.to_le_bytes());
        }
        expected.push(0);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn packing_is_lsb_first() {
        assert_eq!(pack_codes(&[1, 2, 3, 0], 2), vec![0b00_11_10_01]);
        assert_eq!(pack_codes(&[1, 2, 3, 0, 3], 2), vec![0b00_11_10_01, 0b11]);
        assert_eq!(pack_codes(&[5, 1, 7], 3), vec![0b11_001_101, 0b1]);
        assert_eq!(unpack_codes(&[0b00_11_10_01], 2, 4), vec![1, 2, 3, 0]);
        assert_eq!(pack_codes(&[0xdead_beef], 32), 0xdead_beefu32.to_le_bytes());
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ivq");
        let p2 = dir.path().join("b.ivq");
        let c = sample();
        write_checkpoint(&p1, &c).unwrap();
        write_checkpoint(&p2, &c).unwrap();
        assert_eq!(read_checkpoint(&p1).unwrap(), c);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_tensor_list() {
        let c = Checkpoint::new(meta());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

        for cut in [10, 20, bytes.len() - 30, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Corrupt(_))
            ));
        }
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_duplicates_and_overwide_codes() {
        let mut c = Checkpoint::new(meta());
        c.push(Tensor::f32("w", vec![1], vec![1.0]));
        c.push(Tensor::f32("w", vec![1], vec![2.0]));
        assert!(matches!(c.to_bytes(), Err(Error::Format(_))));

        let mut c = Checkpoint::new(meta());
        c.push(Tensor {
            name: "c".into(),
            dims: vec![1],
            data: TensorData::Codes {
                bits: 2,
                values: vec![4],
            },
        });
        assert!(matches!(c.to_bytes(), Err(Error::Range(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_checkpoint("/nonexistent/x.ivq"),
            Err(Error::Io { .. })
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = (Vec<u32>, TensorData)> {
        prop::collection::vec(1u32..5, 0..3).prop_flat_map(|dims| {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let f32s = prop::collection::vec(-1e3f32..1e3, n).prop_map(TensorData::F32);
            let f16s = prop::collection::vec(-100.0f32..100.0, n)
                .prop_map(|v| TensorData::F16(v.into_iter().map(f16::from_f32).collect()));
            let codes = (1u8..=8).prop_flat_map(move |bits| {
                prop::collection::vec(0u32..(1 << bits), n)
                    .prop_map(move |values| TensorData::Codes { bits, values })
            });
            (Just(dims), prop_oneof![f32s, f16s, codes])
        })
    }

    proptest! {
        #[test]
        fn read_inverts_write(tensors in prop::collection::vec(arb_tensor(), 0..6)) {
            let mut c = Checkpoint::new(meta());
            for (i, (dims, data)) in tensors.into_iter().enumerate() {
                c.push(Tensor { name: format!("t{i}"), dims, data });
            }
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn two_bit_codes_unpack_in_range(bytes in prop::collection::vec(any::<u8>(), 1..32)) {
            let n = bytes.len() * 4;
            let codes = unpack_codes(&bytes, 2, n);
            prop_assert!(codes.iter().all(|&c| c <= 3));
            prop_assert_eq!(pack_codes(&codes, 2), bytes);
        }
    }
}
