//! Reading and writing the NumPy `.npy` v1.0 format.
//!
//! Only little-endian `f4`/`f8` payloads in C (row-major) order are accepted.
//! Fortran-order files are rejected rather than transposed. Headers are
//! written with the same padding NumPy uses, so a saved file is byte-identical
//! to `numpy.save` of the same `float64` array.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{validate_finite, Tensor};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const PREAMBLE_LEN: usize = 10;
const ARRAY_ALIGN: usize = 64;
/// Extra header room NumPy reserves so the leading axis can grow in place.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;
/// Largest header accepted by the v1.0 reader.
const MAX_HEADER_LEN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

/// Parsed header dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

/// Decodes an in-memory `.npy` file. `f4` payloads are widened to `f64`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (header, payload) = split_header(bytes)?;
    if header.fortran_order {
        return Err(Error::Format("fortran_order=True is not supported".into()));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let width = header.dtype.width();
    let expected = count
        .checked_mul(width)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {:?} needs {expected}",
            payload.len(),
            header.shape
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    };
    let t = Tensor::new(header.shape, data).map_err(|e| Error::Format(e.to_string()))?;
    if !validate_finite(&t) {
        return Err(Error::NonFinite("array payload".into()));
    }
    Ok(t)
}

/// Encodes a tensor as a little-endian `f8` `.npy` v1.0 file.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let header = header_bytes(t.shape());
    let mut out = Vec::with_capacity(header.len() + 8 * t.len());
    out.extend_from_slice(&header);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

/// Splits a file into its parsed header and the raw payload bytes.
pub fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Format("file shorter than the npy preamble".into()));
    }
    if bytes[..6] != MAGIC {
        return Err(Error::Format("bad magic string".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format("header too long".into()));
    }
    let end = PREAMBLE_LEN + header_len;
    if bytes.len() < end {
        return Err(Error::Format("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..end])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    if !text.is_ascii() {
        return Err(Error::Format("header is not ASCII".into()));
    }
    let header = parse_header(text)?;
    Ok((header, &bytes[end..]))
}

fn header_bytes(shape: &[usize]) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': {}, }}",
        python_tuple(shape)
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let pad = (ARRAY_ALIGN - unpadded % ARRAY_ALIGN) % ARRAY_ALIGN;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn python_tuple(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [one] => format!("({one},)"),
        many => {
            let parts: Vec<String> = many.iter().map(|s| s.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Parses the Python dict literal that forms an npy header.
pub fn parse_header(text: &str) -> Result<Header> {
    let mut p = Parser::new(text);
    p.skip_ws();
    p.expect(b'{')?;
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => set_once(&mut descr, p.string()?, "descr")?,
            "fortran_order" => set_once(&mut fortran, p.boolean()?, "fortran_order")?,
            "shape" => set_once(&mut shape, p.tuple()?, "shape")?,
            other => return Err(Error::Format(format!("unexpected header key {other:?}"))),
        }
        p.skip_ws();
        if p.eat(b',') {
            continue;
        }
        p.skip_ws();
        p.expect(b'}')?;
        break;
    }
    p.skip_ws();
    if !p.at_end() {
        return Err(Error::Format("trailing data after header dict".into()));
    }

    let descr = descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?;
    let fortran_order =
        fortran.ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?;
    let dtype = match descr.as_str() {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    Ok(Header {
        dtype,
        fortran_order,
        shape,
    })
}

fn set_once<T>(slot: &mut Option<T>, value: T, key: &str) -> Result<()> {
    if slot.is_some() {
        return Err(Error::Format(format!("duplicate header key {key:?}")));
    }
    *slot = Some(value);
    Ok(())
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected {:?} at header offset {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(Error::Format(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == quote {
                let s = String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned();
                self.pos += 1;
                return Ok(s);
            }
            if c == b'\\' {
                return Err(Error::Format("escapes are not supported in header strings".into()));
            }
            self.pos += 1;
        }
        Err(Error::Format("unterminated string in header".into()))
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.bytes[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(Error::Format("expected True or False".into()))
        }
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("expected integer at offset {start}")));
        }
        // Python 2 era writers sometimes emit a trailing L.
        self.eat(b'L');
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.trim_end_matches('L').parse().ok())
            .ok_or_else(|| Error::Format("shape entry does not fit usize".into()))
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                break;
            }
            dims.push(self.integer()?);
            self.skip_ws();
            if self.eat(b',') {
                continue;
            }
            self.skip_ws();
            self.expect(b')')?;
            break;
        }
        if dims.contains(&0) {
            return Err(Error::Format(format!("shape {dims:?} has a zero extent")));
        }
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_layout() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 128 + 8);
        assert_eq!(&bytes[..6], &MAGIC);
        assert_eq!(bytes[127], b'\n');
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn header_records_row_major_shape() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let bytes = encode(&t);
        let (h, payload) = split_header(&bytes).unwrap();
        assert_eq!(h.shape, vec![2, 3]);
        assert!(!h.fortran_order);
        assert_eq!(h.dtype, Dtype::F8);
        assert_eq!(payload.len(), 48);
        assert_eq!((bytes.len() - payload.len()) % 64, 0);
    }

    #[test]
    fn small_file_decodes_exactly() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.shape(), &[2, 2]);
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_is_format_error() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        for cut in [0, 5, 9, 50, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn rejects_other_dtypes_and_layouts() {
        let hdr = |d: &str| format!("{{'descr': '{d}', 'fortran_order': False, 'shape': (1,), }}");
        assert!(matches!(parse_header(&hdr("<i4")), Err(Error::UnsupportedDtype(_))));
        assert!(matches!(parse_header(&hdr(">f8")), Err(Error::UnsupportedDtype(_))));
        let fortran = "{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(fortran.len() as u16).to_le_bytes());
        bytes.extend_from_slice(fortran.as_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_parser_accepts_variants() {
        let h = parse_header("{\"shape\": (4, 5,), \"fortran_order\": False, \"descr\": \"<f4\"}  \n")
            .unwrap();
        assert_eq!(h.shape, vec![4, 5]);
        assert_eq!(h.dtype, Dtype::F4);
        assert_eq!(parse_header("{'descr':'<f8','fortran_order':False,'shape':()}").unwrap().shape, Vec::<usize>::new());
        assert!(parse_header("{'descr': '<f8', 'shape': (1,)}").is_err());
        assert!(parse_header("{'descr': '<f8', 'descr': '<f8', 'fortran_order': False, 'shape': (1,)}").is_err());
        assert!(parse_header("{'descr': '<f8', 'fortran_order': False, 'shape': (0,)}").is_err());
    }

    #[test]
    fn f4_payload_widens() {
        let text = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(text.len() as u16).to_le_bytes());
        bytes.extend_from_slice(text.as_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        let t = decode(&bytes).unwrap();
        assert_eq!(t.data(), &[1.5, -0.25]);
    }

    #[test]
    fn nan_payload_rejected() {
        let t = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(decode(&encode(&t)), Err(Error::NonFinite(_))));
    }
}
