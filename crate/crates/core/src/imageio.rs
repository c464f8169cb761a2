//! Binary PNM (P5/P6, 8-bit) and a little-endian raw tensor format.
//!
//! Both parsers are total: every byte string yields a tensor or a typed
//! error, and payload sizes are checked before anything is allocated.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const RAW_MAGIC: [u8; 4] = *b"WGT1";
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_F64: u32 = 2;

/// Largest accepted side length; keeps `C·H·W` far from overflow.
pub const MAX_SIDE: usize = 1 << 16;

/// Cursor over a byte slice with bounds-checked little-endian reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A `u32` count that must not exceed `max`.
    pub(crate) fn count(&mut self, max: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::DimOverflow(format!("count {n} exceeds {max}")));
        }
        Ok(n)
    }
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing P magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(Error::UnsupportedFormat(format!("P{}", bytes[1] as char)));
        }
        _ => return Err(Error::MalformedHeader("unknown PNM magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before every field
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(&b) if is_space(b) => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' && bytes[pos] != b'\r' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::MalformedHeader(format!(
                        "header ends before field {i}"
                    )))
                }
            }
        }
        if !saw_space {
            return Err(Error::MalformedHeader(
                "fields must be whitespace separated".into(),
            ));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::MalformedHeader(format!("field {i} is not a number")));
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = digits
            .parse::<u64>()
            .map_err(|_| Error::DimOverflow(format!("header field {digits}")))?;
    }
    match bytes.get(pos) {
        Some(&b) if is_space(b) => pos += 1,
        Some(_) => return Err(Error::MalformedHeader("junk after maxval".into())),
        None => {
            return Err(Error::MalformedHeader(
                "missing separator after maxval".into(),
            ))
        }
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}×{h}")));
    }
    if w > MAX_SIDE as u64 || h > MAX_SIDE as u64 {
        return Err(Error::DimOverflow(format!("{w}×{h} exceeds {MAX_SIDE}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedMaxval(maxval.min(u32::MAX as u64) as u32));
    }
    Ok(PnmHeader {
        channels,
        width: w as usize,
        height: h as usize,
        maxval: maxval as u32,
        data_start: pos,
    })
}

/// Decodes P5 (grey) or P6 (RGB) with values scaled to `[0, 1]`.
pub fn read_pnm(bytes: &[u8]) -> Result<Tensor> {
    let hd = parse_pnm_header(bytes)?;
    let plane = hd.width * hd.height;
    let need = plane * hd.channels;
    let payload = &bytes[hd.data_start..];
    if payload.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    let m = hd.maxval as f64;
    let shape = Shape::new(hd.channels, hd.height, hd.width);
    let mut data = vec![0.0; need];
    for (i, &b) in payload[..need].iter().enumerate() {
        if b as u32 > hd.maxval {
            return Err(Error::MalformedHeader(format!(
                "sample {b} exceeds maxval {}",
                hd.maxval
            )));
        }
        let (pix, c) = (i / hd.channels, i % hd.channels);
        data[c * plane + pix] = b as f64 / m;
    }
    Tensor::from_vec(shape, data)
}

/// Encodes a 1- or 3-channel tensor, clamping to `[0, 1]` and rounding to
/// `maxval` levels.
pub fn write_pnm(img: &Tensor, maxval: u32) -> Result<Vec<u8>> {
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::UnsupportedFormat(format!("{c}-channel PNM"))),
    };
    let (h, w) = (img.height(), img.width());
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let m = maxval as f64;
    out.reserve(img.len());
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels() {
                let v = img.at(c, y, x);
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * m).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Rounds every sample to the nearest of `maxval + 1` levels in `[0, 1]`.
pub fn quantize(img: &Tensor, maxval: u32) -> Tensor {
    let m = maxval as f64;
    img.map(|v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * m).round() / m
    })
}

/// `WGT1`, dtype, `C H W`, row-major payload; all little-endian.
pub fn write_raw(t: &Tensor, dtype: u32) -> Result<Vec<u8>> {
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        d => return Err(Error::UnsupportedFormat(format!("raw dtype {d}"))),
    };
    let mut out = Vec::with_capacity(20 + width * t.len());
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&dtype.to_le_bytes());
    for d in [t.channels(), t.height(), t.width()] {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(format!("{d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        if dtype == DTYPE_F32 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_raw(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != RAW_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let dtype = r.u32()?;
    let width = match dtype {
        DTYPE_F32 => 4usize,
        DTYPE_F64 => 8,
        d => return Err(Error::UnsupportedFormat(format!("raw dtype {d}"))),
    };
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(width).map(|_| n))
        .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))?;
    let need = n * width;
    if r.remaining() != need {
        if r.remaining() < need {
            return Err(Error::Truncated {
                expected: need,
                found: r.remaining(),
            });
        }
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            r.remaining() - need
        )));
    }
    let payload = r.take(need)?;
    let data: Vec<f64> = if dtype == DTYPE_F32 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2]), data)
}

/// Reads a `.pgm`/`.ppm`/`.pnm` or raw tensor file, choosing by content.
pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(&RAW_MAGIC) {
        read_raw(&bytes)
    } else {
        read_pnm(&bytes)
    }
}

/// Writes PNM for `.pgm`/`.ppm`/`.pnm` extensions, raw f64 otherwise.
pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let pnm = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm" | "ppm" | "pnm")
    );
    let bytes = if pnm {
        write_pnm(t, 255)?
    } else {
        write_raw(t, DTYPE_F64)?
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_encoded_p6() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = read_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), Shape::new(3, 2, 2));
        assert_eq!(t.channel(0), &[1.0, 0.0, 0.0, 0.2]);
        assert_eq!(t.channel(1), &[0.0, 1.0, 0.0, 0.4]);
        assert_eq!(t.channel(2), &[0.0, 0.0, 1.0, 0.6]);
        let out = write_pnm(&t, 255).unwrap();
        assert_eq!(&out[11..], &bytes[bytes.len() - 12..]);
    }

    #[test]
    fn pnm_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, h, w) in [(1, 3, 5), (3, 7, 2)] {
            let t = quantize(
                &Tensor::uniform(Shape::new(c, h, w), 0.0, 1.0, &mut rng),
                255,
            );
            let a = write_pnm(&t, 255).unwrap();
            let back = read_pnm(&a).unwrap();
            assert!(back.bit_eq(&t));
            assert_eq!(write_pnm(&back, 255).unwrap(), a);
        }
    }

    #[test]
    fn pnm_error_kinds() {
        assert!(matches!(
            read_pnm(b"P4\n1 1\n\x00"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_pnm(b"P6\n1 1\n65535\n"),
            Err(Error::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            read_pnm(b"P6\n2 2\n255\n\x00\x01"),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            read_pnm(b"P5\nx 1\n255\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(read_pnm(b"Q5"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            read_pnm(b"P5 99999999999999999999999 1 255 "),
            Err(Error::DimOverflow(_))
        ));
        assert!(matches!(
            read_pnm(b"P5\n1 1\n10\n\x0b"),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn raw_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(Shape::new(2, 3, 4), 1.0, &mut rng);
        let back = read_raw(&write_raw(&t, DTYPE_F64).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
        let t32 = t.map(|v| v as f32 as f64);
        let back = read_raw(&write_raw(&t32, DTYPE_F32).unwrap()).unwrap();
        assert!(back.bit_eq(&t32));
    }

    #[test]
    fn raw_errors() {
        let t = Tensor::zeros(Shape::new(1, 2, 2));
        let mut b = write_raw(&t, DTYPE_F64).unwrap();
        b[0] = b'X';
        assert!(matches!(read_raw(&b), Err(Error::BadMagic(_))));
        let mut huge = RAW_MAGIC.to_vec();
        huge.extend_from_slice(&DTYPE_F64.to_le_bytes());
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            read_raw(&huge),
            Err(Error::DimOverflow(_)) | Err(Error::Truncated { .. })
        ));
        let b = write_raw(&t, DTYPE_F64).unwrap();
        assert!(matches!(
            read_raw(&b[..b.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn pnm_raw_pnm_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes: Vec<u8> = (0..3 * 16).map(|_| rng.random()).collect();
        let mut pnm = b"P6\n4 4\n255\n".to_vec();
        pnm.extend_from_slice(&bytes);
        let t = read_pnm(&pnm).unwrap();
        let raw = write_raw(&t, DTYPE_F32).unwrap();
        let t2 = read_raw(&raw).unwrap();
        assert_eq!(write_pnm(&t2, 255).unwrap(), pnm);
    }

    #[test]
    fn documented_byte_layouts() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.5, -1.0]).unwrap();
        let raw: Vec<u8> = [
            0x57, 0x47, 0x54, 0x31, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, //
            0, 0, 0, 0, 0, 0, 0xe0, 0x3f, 0, 0, 0, 0, 0, 0, 0xf0, 0xbf,
        ]
        .to_vec();
        assert_eq!(write_raw(&t, DTYPE_F64).unwrap(), raw);
        let g = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 1.0]).unwrap();
        assert_eq!(write_pnm(&g, 255).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }
}
