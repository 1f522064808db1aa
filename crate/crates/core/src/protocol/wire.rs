//! Little-endian primitives shared by every message body.

use crate::nn::{LayerParams, LayerSpec, ModelSpec, ParamSet, Tensor};

use super::{DecodeError, EncodeError};

/// Destination for encoded bytes; [`ByteCount`] measures without copying.
pub(crate) trait Sink {
    fn put(&mut self, bytes: &[u8]);
    fn put_f32s(&mut self, values: &[f32]);
}

impl Sink for Vec<u8> {
    fn put(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }

    fn put_f32s(&mut self, values: &[f32]) {
        self.reserve(values.len() * 4);
        for v in values {
            self.extend_from_slice(&v.to_le_bytes());
        }
    }
}

#[derive(Default)]
pub(crate) struct ByteCount(pub usize);

impl Sink for ByteCount {
    fn put(&mut self, bytes: &[u8]) {
        self.0 += bytes.len();
    }

    fn put_f32s(&mut self, values: &[f32]) {
        self.0 += values.len() * 4;
    }
}

pub(crate) struct Writer<'a, S: Sink> {
    out: &'a mut S,
}

impl<'a, S: Sink> Writer<'a, S> {
    pub fn new(out: &'a mut S) -> Self {
        Self { out }
    }

    pub fn u8(&mut self, v: u8) {
        self.out.put(&[v]);
    }

    pub fn u16(&mut self, v: u16) {
        self.out.put(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.out.put(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.out.put(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.out.put(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.out.put(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn str(&mut self, s: &str) -> Result<(), EncodeError> {
        let len = u16::try_from(s.len())
            .map_err(|_| EncodeError::Invalid(format!("string of {} bytes", s.len())))?;
        self.u16(len);
        self.out.put(s.as_bytes());
        Ok(())
    }

    pub fn usize_u32(&mut self, v: usize, what: &str) -> Result<(), EncodeError> {
        let v = u32::try_from(v)
            .map_err(|_| EncodeError::Invalid(format!("{what} {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<(), EncodeError> {
        let rank = u8::try_from(t.shape().len())
            .ok()
            .filter(|&r| r > 0)
            .ok_or_else(|| EncodeError::Invalid(format!("tensor rank {}", t.shape().len())))?;
        self.u8(rank);
        for &d in t.shape() {
            self.usize_u32(d, "dimension")?;
        }
        self.out.put_f32s(t.data());
        Ok(())
    }

    pub fn labels(&mut self, labels: &[usize]) -> Result<(), EncodeError> {
        self.usize_u32(labels.len(), "label count")?;
        for &l in labels {
            self.usize_u32(l, "label")?;
        }
        Ok(())
    }

    /// 2-byte entry count, then entries in ascending key order.
    pub fn params(&mut self, p: &ParamSet) -> Result<(), EncodeError> {
        let n =
            u16::try_from(p.len()).map_err(|_| EncodeError::Invalid("too many layers".into()))?;
        self.u16(n);
        for (k, lp) in p.iter() {
            let key =
                u16::try_from(k).map_err(|_| EncodeError::Invalid(format!("layer index {k}")))?;
            self.u16(key);
            self.tensor(&lp.weight)?;
            self.tensor(&lp.bias)?;
        }
        Ok(())
    }

    pub fn model(&mut self, m: &ModelSpec) -> Result<(), EncodeError> {
        let shape = m.input_shape();
        self.u8(shape.len() as u8);
        for &d in shape {
            self.usize_u32(d, "input dimension")?;
        }
        self.usize_u32(m.num_classes(), "class count")?;
        let n = u16::try_from(m.layers().len())
            .map_err(|_| EncodeError::Invalid("too many layers".into()))?;
        self.u16(n);
        for layer in m.layers() {
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                } => {
                    self.u8(1);
                    self.usize_u32(in_channels, "channels")?;
                    self.usize_u32(out_channels, "channels")?;
                }
                LayerSpec::Relu => self.u8(2),
                LayerSpec::MaxPool2d => self.u8(3),
                LayerSpec::Flatten => self.u8(4),
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    self.u8(5);
                    self.usize_u32(in_features, "features")?;
                    self.usize_u32(out_features, "features")?;
                }
            }
        }
        Ok(())
    }
}

/// Bounds-checked cursor over exactly one message body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(what: impl Into<String>) -> DecodeError {
    DecodeError::Protocol(what.into())
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(malformed(format!(
                "{} trailing bytes in payload",
                self.remaining()
            )));
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(malformed(format!(
                "payload truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(malformed(format!("invalid boolean byte {v}"))),
        }
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed("string is not UTF-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let rank = self.u8()? as usize;
        if rank == 0 {
            return Err(malformed("tensor rank 0"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(malformed("tensor has a zero dimension"));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| malformed("tensor size overflows"))?;
            shape.push(d);
        }
        // Checked before allocating so a lying header cannot force a huge buffer.
        let bytes = count
            .checked_mul(4)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| {
                malformed(format!(
                    "tensor of {count} elements exceeds remaining {} bytes",
                    self.remaining()
                ))
            })?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))
    }

    pub fn labels(&mut self) -> Result<Vec<usize>, DecodeError> {
        let n = self.u32()? as usize;
        if n.checked_mul(4).is_none_or(|b| b > self.remaining()) {
            return Err(malformed(format!("{n} labels exceed payload")));
        }
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub fn params(&mut self) -> Result<ParamSet, DecodeError> {
        let n = self.u16()?;
        let mut set = ParamSet::new();
        let mut last: Option<u16> = None;
        for _ in 0..n {
            let key = self.u16()?;
            if last.is_some_and(|l| key <= l) {
                return Err(malformed("parameter keys not strictly ascending"));
            }
            last = Some(key);
            let weight = self.tensor()?;
            let bias = self.tensor()?;
            set.insert(key as usize, LayerParams { weight, bias });
        }
        Ok(set)
    }

    pub fn model(&mut self) -> Result<ModelSpec, DecodeError> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > 3 {
            return Err(malformed(format!("model input rank {rank}")));
        }
        let mut input = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.push(self.u32()? as usize);
        }
        let classes = self.u32()? as usize;
        let n = self.u16()? as usize;
        let mut layers = Vec::with_capacity(n.min(self.remaining()));
        for _ in 0..n {
            let layer = match self.u8()? {
                1 => LayerSpec::Conv2d {
                    in_channels: self.u32()? as usize,
                    out_channels: self.u32()? as usize,
                },
                2 => LayerSpec::Relu,
                3 => LayerSpec::MaxPool2d,
                4 => LayerSpec::Flatten,
                5 => LayerSpec::Dense {
                    in_features: self.u32()? as usize,
                    out_features: self.u32()? as usize,
                },
                k => return Err(malformed(format!("unknown layer kind {k}"))),
            };
            layers.push(layer);
        }
        ModelSpec::new(input, layers, classes).map_err(|e| malformed(e.to_string()))
    }
}
