//! Binary serialization: single-tensor records and whole-network
//! checkpoints.
//!
//! Tensor record (little-endian): magic `PIDT`, version `u32`, dtype `u8`
//! (0 = f32, 1 = f64, 2 = packed binary), rank `u8`, dims `u32 x 4`, then
//! the raw payload (packed binary payloads are 64-bit words, bit 0 = first
//! element).
//!
//! Checkpoint: magic `PIDN`, version `u32`, task `u8`, architecture text,
//! then two named tensor tables (parameters, buffers). Files from a newer
//! format version are rejected loudly rather than misread.

use std::path::Path;

use crate::binary::{words_for, BitTensor};
use crate::blocks::{NetworkSpec, Task};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"PIDT";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PIDN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const DTYPE_F32: u8 = f32::DTYPE;
pub const DTYPE_F64: u8 = f64::DTYPE;
pub const DTYPE_BITS: u8 = 2;

/// A decoded tensor record of whichever dtype the file contained.
#[derive(Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bits(BitTensor),
}

impl AnyTensor {
    /// Convert a float record to the requested scalar type; packed-binary
    /// records do not convert.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        let as_f64 = match self {
            AnyTensor::F32(t) => t.to_f64(),
            AnyTensor::F64(t) => t,
            AnyTensor::Bits(_) => {
                return Err(Error::Format(
                    "expected a float tensor, found packed binary".into(),
                ))
            }
        };
        Ok(Tensor::from_f64_tensor(&as_f64))
    }
}

// --- byte-level helpers ----------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.buf.get(self.pos..self.pos.saturating_add(n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated data: needed {n} bytes for {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("len 4")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn check_magic(c: &mut Cursor, magic: [u8; 4], what: &str) -> Result<()> {
    let got = c.bytes(4, "magic")?;
    if got != magic {
        return Err(Error::Format(format!("not a {what}: bad magic {got:02x?}")));
    }
    Ok(())
}

fn check_version(got: u32, max: u32, what: &str) -> Result<()> {
    if got == 0 || got > max {
        return Err(Error::Format(format!(
            "{what} version {got} not supported (this build reads up to {max})"
        )));
    }
    Ok(())
}

fn encode_header(buf: &mut Vec<u8>, dtype: u8, shape: Shape) {
    buf.extend_from_slice(&TENSOR_MAGIC);
    put_u32(buf, TENSOR_VERSION);
    buf.push(dtype);
    buf.push(4); // rank
    for d in [shape.n, shape.c, shape.h, shape.w] {
        put_u32(buf, d as u32);
    }
}

fn decode_header(c: &mut Cursor) -> Result<(u8, Shape)> {
    check_magic(c, TENSOR_MAGIC, "tensor record")?;
    check_version(c.u32("tensor version")?, TENSOR_VERSION, "tensor record")?;
    let dtype = c.u8("dtype")?;
    let rank = c.u8("rank")?;
    if rank != 4 {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = c.u32("dim")? as usize;
    }
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
    // Guard before allocation: the payload must actually be present.
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        DTYPE_BITS => 0,
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    let need = if dtype == DTYPE_BITS {
        words_for(len).checked_mul(8)
    } else {
        len.checked_mul(width)
    }
    .ok_or_else(|| Error::Format("tensor payload size overflow".into()))?;
    if c.buf.len() - c.pos < need {
        return Err(Error::Format(format!(
            "truncated tensor payload: need {need} bytes, have {}",
            c.buf.len() - c.pos
        )));
    }
    Ok((dtype, Shape::new(dims[0], dims[1], dims[2], dims[3])))
}

// --- single tensor records --------------------------------------------------

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(26 + t.len() * T::BYTES);
    encode_header(&mut buf, T::DTYPE, t.shape());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes_vec());
    }
    buf
}

pub fn encode_bit_tensor(t: &BitTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(26 + t.words().len() * 8);
    encode_header(&mut buf, DTYPE_BITS, t.shape());
    for &w in t.words() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf
}

/// Decode one tensor record starting at the cursor position.
fn decode_tensor_at(c: &mut Cursor) -> Result<AnyTensor> {
    let (dtype, shape) = decode_header(c)?;
    let len = shape.len();
    match dtype {
        DTYPE_F32 => {
            let raw = c.bytes(len * 4, "f32 payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("len 4")))
                .collect();
            Ok(AnyTensor::F32(Tensor::from_vec(shape, data)?))
        }
        DTYPE_F64 => {
            let raw = c.bytes(len * 8, "f64 payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("len 8")))
                .collect();
            Ok(AnyTensor::F64(Tensor::from_vec(shape, data)?))
        }
        DTYPE_BITS => {
            let raw = c.bytes(words_for(len) * 8, "bit payload")?;
            let words = raw
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("len 8")))
                .collect();
            Ok(AnyTensor::Bits(BitTensor::from_words(shape, words)?))
        }
        _ => unreachable!("decode_header validated the tag"),
    }
}

/// Decode a buffer holding exactly one tensor record.
pub fn decode_tensor(buf: &[u8]) -> Result<AnyTensor> {
    let mut c = Cursor::new(buf);
    let t = decode_tensor_at(&mut c)?;
    if !c.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor record",
            buf.len() - c.pos
        )));
    }
    Ok(t)
}

// --- checkpoints -------------------------------------------------------------

pub struct Checkpoint<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: Vec<(String, Tensor<T>)>,
    pub buffers: Vec<(String, Tensor<T>)>,
}

fn task_tag(task: Task) -> u8 {
    match task {
        Task::Edge => 0,
        Task::Classify => 1,
    }
}

fn encode_table<T: Scalar>(buf: &mut Vec<u8>, table: &[(String, Tensor<T>)]) {
    put_u32(buf, table.len() as u32);
    for (name, t) in table {
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&encode_tensor(t));
    }
}

fn decode_table<T: Scalar>(c: &mut Cursor) -> Result<Vec<(String, Tensor<T>)>> {
    let count = c.u32("table size")? as usize;
    let mut out: Vec<(String, Tensor<T>)> = Vec::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.bytes(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
        let t = decode_tensor_at(c)?.into_tensor::<T>()?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let spec_text = ck.spec.to_kv();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    buf.push(task_tag(ck.spec.task));
    put_u32(&mut buf, spec_text.len() as u32);
    buf.extend_from_slice(spec_text.as_bytes());
    encode_table(&mut buf, &ck.params);
    encode_table(&mut buf, &ck.buffers);
    buf
}

pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor::new(buf);
    check_magic(&mut c, CHECKPOINT_MAGIC, "checkpoint")?;
    check_version(c.u32("checkpoint version")?, CHECKPOINT_VERSION, "checkpoint")?;
    let task = c.u8("task tag")?;
    let spec_len = c.u32("architecture text length")? as usize;
    let spec_text = std::str::from_utf8(c.bytes(spec_len, "architecture text")?)
        .map_err(|_| Error::Format("architecture text is not UTF-8".into()))?;
    let spec = NetworkSpec::from_kv(spec_text)?;
    if task_tag(spec.task) != task {
        return Err(Error::Format(format!(
            "task tag {task} disagrees with architecture text '{}'",
            spec.task.token()
        )));
    }
    let params = decode_table(&mut c)?;
    let buffers = decode_table(&mut c)?;
    if !c.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - c.pos
        )));
    }
    Ok(Checkpoint {
        spec,
        params,
        buffers,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(ck))?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
