//! Container file for dense float32 arrays.
//!
//! Layout: the 4-byte magic `LPCI`, a little-endian u32 format version
//! (currently 1), a little-endian u32 header length, that many bytes of
//! UTF-8 JSON, then the payload as little-endian float32 in row-major
//! order. The header carries `dtype` and `shape` plus any named values the
//! writer attached; payload length must equal `product(shape) * 4` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPCI";
pub const VERSION: u32 = 1;

/// Upper bound on the header we are willing to parse; anything larger is
/// treated as corruption rather than a legitimate header.
const MAX_HEADER_LEN: u32 = 1 << 24;

/// A dense float32 array with a free-form set of named header values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub attrs: Map<String, Value>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, attrs: Map::new() })
    }

    pub fn with_attr(mut self, key: &str, value: Value) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn attr(&self, key: &str) -> Option<&Value> {
        self.attrs.get(key)
    }

    /// Float attribute lookup; errors name the missing key so format
    /// problems in saved artifacts are self-describing.
    pub fn f64_attr(&self, key: &str) -> Result<f64> {
        self.attrs
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format(format!("missing or non-numeric header field `{key}`")))
    }

    pub fn str_attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("missing or non-string header field `{key}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = Map::new();
        header.insert("dtype".into(), Value::from("f32"));
        header.insert("shape".into(), Value::from(self.shape.clone()));
        for (k, v) in &self.attrs {
            if k != "dtype" && k != "shape" {
                header.insert(k.clone(), v.clone());
            }
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header is valid json");

        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("file shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let header_len = read_u32(&mut r)?;
        if header_len > MAX_HEADER_LEN {
            return Err(Error::Format(format!("header length {header_len} exceeds limit")));
        }
        let mut header = vec![0u8; header_len as usize];
        r.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
        let header: Value = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(mut header) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };

        match header.remove("dtype") {
            Some(Value::String(s)) if s == "f32" => {}
            other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
        }
        let shape: Vec<usize> = header
            .remove("shape")
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::Format("missing or malformed shape".into()))?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::Format(format!("payload read: {e}")))?;
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {:?} wants {}",
                payload.len(),
                shape,
                count * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data, attrs: header })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}
