//! On-disk formats.
//!
//! Adapter container (`.adpt`):
//!
//! ```text
//! "ADPT" | version: u32 LE = 1 | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header is `{d, r, layers, nonlinearity, name, track, source_task,
//! tensors: [{name, shape, offset_bytes}]}` in exactly that key order.
//! Tensors are named `layer{ℓ}/{w_down|b_down|w_up|b_up}`, stored as
//! binary32 little-endian, row-major, back to back in header order.
//! Offsets are relative to the start of the payload.
//!
//! Probe container (`.prob`):
//!
//! ```text
//! "PROB" | version: u32 LE = 1 | n: u64 LE | d: u64 LE | layer_count: u64 LE | payload
//! ```
//!
//! with `layer_count` blocks of `n × d` binary32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterLayer, AdapterStack, Nonlinearity, ProbeBatch, StackMetadata};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::MergeReport;

pub const ADAPTER_MAGIC: &[u8; 4] = b"ADPT";
pub const PROBE_MAGIC: &[u8; 4] = b"PROB";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_KINDS: [&str; 4] = ["w_down", "b_down", "w_up", "b_up"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<u64>,
    pub offset_bytes: u64,
}

impl TensorEntry {
    fn numel(&self) -> u64 {
        self.shape.iter().product()
    }
}

/// JSON header of an adapter container. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterHeader {
    pub d: u64,
    pub r: u64,
    pub layers: u64,
    pub nonlinearity: String,
    pub name: String,
    pub track: String,
    pub source_task: String,
    pub tensors: Vec<TensorEntry>,
}

fn expected_shape(kind: &str, d: u64, m: u64) -> Vec<u64> {
    match kind {
        "w_down" => vec![m, d],
        "b_down" => vec![m],
        "w_up" => vec![d, m],
        _ => vec![d],
    }
}

pub fn adapter_header(stack: &AdapterStack) -> AdapterHeader {
    let cfg = &stack.config;
    let (d, m) = (cfg.d as u64, cfg.m() as u64);
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(4 * cfg.layers);
    for l in 0..cfg.layers {
        for kind in TENSOR_KINDS {
            let shape = expected_shape(kind, d, m);
            let numel: u64 = shape.iter().product();
            tensors.push(TensorEntry {
                name: format!("layer{l}/{kind}"),
                shape,
                offset_bytes: offset,
            });
            offset += numel * 4;
        }
    }
    AdapterHeader {
        d,
        r: cfg.r as u64,
        layers: cfg.layers as u64,
        nonlinearity: cfg.nonlinearity.name().to_string(),
        name: stack.metadata.name.clone(),
        track: stack.metadata.track.clone(),
        source_task: stack.metadata.source_task.clone(),
        tensors,
    }
}

fn push_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_adapter(stack: &AdapterStack) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&adapter_header(stack))?;
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for layer in &stack.layers {
        for (_, _, data) in layer.tensors() {
            push_f32s(&mut out, data);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "truncated {what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4], kind: &str) -> Result<()> {
    let got = r
        .take(4, "magic")
        .map_err(|_| Error::Format(format!("file too short to be a {kind} container")))?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {kind} format version {version}")));
    }
    Ok(())
}

fn decode_f32s(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(k) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::Corruption(format!(
            "tensor {what} has non-finite value at element {k}"
        )));
    }
    Ok(out)
}

/// Validates the header against itself (config, names, shapes, offsets) and
/// returns the config and the payload size it implies.
pub fn validate_header(h: &AdapterHeader) -> Result<(AdapterConfig, u64)> {
    let nl = Nonlinearity::parse(&h.nonlinearity)
        .ok_or_else(|| Error::Validation(format!("unknown nonlinearity '{}'", h.nonlinearity)))?;
    let to_usize =
        |v: u64, what: &str| usize::try_from(v).map_err(|_| Error::Validation(format!("{what}={v} out of range")));
    let cfg = AdapterConfig::new(
        to_usize(h.d, "d")?,
        to_usize(h.r, "r")?,
        to_usize(h.layers, "layers")?,
        nl,
    )
    .map_err(|e| Error::Validation(e.to_string()))?;
    let (d, m) = (cfg.d as u64, cfg.m() as u64);
    if h.tensors.len() != 4 * cfg.layers {
        return Err(Error::Validation(format!(
            "expected {} tensors for {} layers, header lists {}",
            4 * cfg.layers,
            cfg.layers,
            h.tensors.len()
        )));
    }
    let mut offset = 0u64;
    for (i, t) in h.tensors.iter().enumerate() {
        let (l, kind) = (i / 4, TENSOR_KINDS[i % 4]);
        let want = format!("layer{l}/{kind}");
        if t.name != want {
            return Err(Error::Validation(format!(
                "tensor {i} is named '{}', expected '{want}'",
                t.name
            )));
        }
        let shape = expected_shape(kind, d, m);
        if t.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {want} has shape {:?}, expected {shape:?} (d={d}, r={}, m={m})",
                t.shape, h.r
            )));
        }
        if t.offset_bytes != offset {
            return Err(Error::Validation(format!(
                "tensor {want} at offset {}, expected {offset}",
                t.offset_bytes
            )));
        }
        offset += t.numel() * 4;
    }
    Ok((cfg, offset))
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterStack> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, ADAPTER_MAGIC, "adapter")?;
    let hlen = r.u64("header length")?;
    let hlen = usize::try_from(hlen).map_err(|_| Error::Corruption(format!("header length {hlen} out of range")))?;
    let header_bytes = r.take(hlen, "header")?;
    let header: AdapterHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let (cfg, payload_len) = validate_header(&header)?;

    let payload = r.rest();
    if (payload.len() as u64) < payload_len {
        return Err(Error::Corruption(format!(
            "truncated payload: header needs {payload_len} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() as u64 > payload_len {
        return Err(Error::Validation(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - payload_len
        )));
    }

    let (d, m) = (cfg.d, cfg.m());
    let tensor = |t: &TensorEntry| -> Result<Vec<f64>> {
        let start = t.offset_bytes as usize;
        decode_f32s(&payload[start..start + t.numel() as usize * 4], &t.name)
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for chunk in header.tensors.chunks(4) {
        let w_down = Matrix::new(m, d, tensor(&chunk[0])?)?;
        let b_down = tensor(&chunk[1])?;
        let w_up = Matrix::new(d, m, tensor(&chunk[2])?)?;
        let b_up = tensor(&chunk[3])?;
        layers.push(AdapterLayer::new(w_down, b_down, w_up, b_up)?);
    }
    AdapterStack::new(
        cfg,
        layers,
        StackMetadata {
            name: header.name,
            track: header.track,
            source_task: header.source_task,
            aligned_to: None,
        },
    )
}

/// Reads only the header and checks it, without touching the payload.
pub fn read_adapter_header(bytes: &[u8]) -> Result<AdapterHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, ADAPTER_MAGIC, "adapter")?;
    let hlen = r.u64("header length")? as usize;
    let header_bytes = r.take(hlen, "header")?;
    serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))
}

pub fn write_adapter(stack: &AdapterStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_adapter(stack)?).map_err(|e| Error::io(path, e))
}

pub fn read_adapter(path: impl AsRef<Path>) -> Result<AdapterStack> {
    let path = path.as_ref();
    decode_adapter(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_probe(probe: &ProbeBatch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PROBE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(probe.n() as u64).to_le_bytes());
    out.extend_from_slice(&(probe.d() as u64).to_le_bytes());
    out.extend_from_slice(&(probe.layer_count() as u64).to_le_bytes());
    for l in probe.layers() {
        push_f32s(&mut out, l.data());
    }
    out
}

pub fn decode_probe(bytes: &[u8]) -> Result<ProbeBatch> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, PROBE_MAGIC, "probe")?;
    let n = r.u64("n")?;
    let d = r.u64("d")?;
    let layers = r.u64("layer_count")?;
    if n == 0 || d == 0 || layers == 0 {
        return Err(Error::Validation(format!(
            "empty probe (n={n}, d={d}, layer_count={layers})"
        )));
    }
    let block = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Validation("probe dimensions overflow".into()))?;
    let total = block
        .checked_mul(layers)
        .ok_or_else(|| Error::Validation("probe dimensions overflow".into()))?;
    let payload = r.rest();
    if (payload.len() as u64) < total {
        return Err(Error::Corruption(format!(
            "truncated probe payload: need {total} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() as u64 > total {
        return Err(Error::Validation(format!(
            "{} trailing bytes after probe payload",
            payload.len() as u64 - total
        )));
    }
    let (n, d) = (n as usize, d as usize);
    let mats = payload
        .chunks_exact(block as usize)
        .enumerate()
        .map(|(l, c)| Matrix::new(n, d, decode_f32s(c, &format!("probe layer {l}"))?))
        .collect::<Result<Vec<_>>>()?;
    ProbeBatch::new(mats)
}

pub fn write_probe(probe: &ProbeBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_probe(probe)).map_err(|e| Error::io(path, e))
}

pub fn read_probe(path: impl AsRef<Path>) -> Result<ProbeBatch> {
    let path = path.as_ref();
    decode_probe(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_report(report: &MergeReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MergeReport> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: MergeReport = serde_json::from_str(&s)?;
    if report.schema_version != crate::merge::REPORT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported report schema version {}",
            report.schema_version
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{merge, MergeKind, MergeStrategy};
    use crate::synth::{gen_adapter, gen_probe};

    fn stack() -> AdapterStack {
        let cfg = AdapterConfig::new(8, 2, 2, Nonlinearity::Gelu).unwrap();
        let mut s = gen_adapter(&cfg, 3);
        s.metadata.track = "nli".into();
        s
    }

    #[test]
    fn adapter_round_trip_is_stable() {
        let s = stack();
        let first = encode_adapter(&s).unwrap();
        let back = decode_adapter(&first).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.metadata, s.metadata);
        assert!(back.max_abs_diff(&s) < 1e-6);
        let second = encode_adapter(&back).unwrap();
        assert_eq!(first, second);
        assert_eq!(decode_adapter(&second).unwrap(), back);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_adapter(&stack()).unwrap();
        assert_eq!(&bytes[..4], b"ADPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        assert!(header.starts_with(r#"{"d":8,"r":2,"layers":2,"nonlinearity":"gelu","name":"#));
        assert!(header.contains(r#""tensors":[{"name":"layer0/w_down","shape":[4,8],"offset_bytes":0}"#));
        assert_eq!(bytes.len() - 16 - hlen, 2 * (32 + 4 + 32 + 8) * 4);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode_adapter(&stack()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_adapter(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_adapter(&stack()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_adapter(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_adapter(b"AD"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode_adapter(&stack()).unwrap();
        assert!(matches!(
            decode_adapter(&bytes[..bytes.len() - 1]),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(decode_adapter(&bytes[..20]), Err(Error::Corruption(_))));
    }

    fn with_header(h: &AdapterHeader, payload_len: usize) -> Vec<u8> {
        let hb = serde_json::to_vec(h).unwrap();
        let mut out = b"ADPT".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        out.extend(std::iter::repeat_n(0u8, payload_len));
        out
    }

    #[test]
    fn rejects_shape_lies() {
        // d=8, r=4 means m=2, so a 4x8 down projection is a lie.
        let cfg = AdapterConfig::new(8, 2, 1, Nonlinearity::Relu).unwrap();
        let mut h = adapter_header(&gen_adapter(&cfg, 1));
        h.r = 4;
        assert!(matches!(
            decode_adapter(&with_header(&h, 160)),
            Err(Error::Validation(_))
        ));

        let mut h = adapter_header(&gen_adapter(&cfg, 1));
        h.d = 7;
        assert!(matches!(
            decode_adapter(&with_header(&h, 160)),
            Err(Error::Validation(_))
        ));

        let mut h = adapter_header(&gen_adapter(&cfg, 1));
        h.tensors.swap(0, 1);
        assert!(matches!(
            decode_adapter(&with_header(&h, 160)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rejects_non_finite_payload_naming_tensor() {
        let s = stack();
        let mut bytes = encode_adapter(&s).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_adapter(&bytes) {
            Err(Error::Corruption(msg)) => assert!(msg.contains("layer1/b_up"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn probe_round_trip() {
        let p = gen_probe(6, 10, 2, 4);
        let bytes = encode_probe(&p);
        let back = decode_probe(&bytes).unwrap();
        assert_eq!(encode_probe(&back), bytes);
        assert!(matches!(
            decode_probe(&bytes[..bytes.len() - 2]),
            Err(Error::Corruption(_))
        ));

        let mut empty = b"PROB".to_vec();
        empty.extend_from_slice(&1u32.to_le_bytes());
        for v in [0u64, 6, 1] {
            empty.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_probe(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn report_json() {
        let s = stack();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let (_, report) = merge(&[s.clone(), s], &MergeStrategy::new(MergeKind::Sum), None).unwrap();
        write_report(&report, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("transport"));
        assert_eq!(read_report(&path).unwrap(), report);
    }
}
