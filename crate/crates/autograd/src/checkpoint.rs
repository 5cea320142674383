//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64 header_len | header_len bytes of UTF-8 JSON {"format_version", "model_config"}
//! repeated until EOF:
//!   u32 name_len | name bytes | u32 rank | rank × u64 extents | numel × f32 elements
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u64,
    pub model_config: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write, T: Element>(mut out: W, model_config: &Value, params: &ParamStore<T>) -> Result<()> {
    let header = json!({ "format_version": FORMAT_VERSION, "model_config": model_config });
    let bytes = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(&bytes)?;
    for (name, tensor) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for x in tensor.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(bad("truncated tensor record")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor record"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated tensor record"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let header_len = read_u64(&mut input)? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
    let format_version = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("header lacks format_version"))?;
    if format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {format_version}")));
    }
    let model_config = header.get("model_config").cloned().unwrap_or(Value::Null);

    let mut tensors = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut input, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut input).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input.read_exact(&mut raw).map_err(|_| bad(format!("truncated data for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint { format_version, model_config, tensors })
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, model_config: &Value, params: &ParamStore<T>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model_config, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
