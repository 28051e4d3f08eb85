//! Binary file formats, all little-endian.
//!
//! Dataset (`CGDS`): magic, version u32, H u32, W u32, K u32, n u32, then
//! per sample H*W f64 pixels, K f64 labels and an origin byte.
//!
//! Checkpoint (`CGCK`): magic, version u32, descriptor length u32 and ASCII
//! architecture descriptor, block count u32, then per block name length u32,
//! name, ndim u32, dims u32 each, and the f64 data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::synth::{measure_properties, ImageSample, Origin, PropertyVector, Resolution};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CGDS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            self.pos = start;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            self.pos = at;
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_dataset(samples: &[ImageSample], res: Resolution) -> Result<Vec<u8>> {
    let k = samples.first().map_or(crate::synth::NUM_PROPERTIES, |s| s.label.len());
    let mut w = Writer(Vec::with_capacity(24 + samples.len() * (res.pixels() + k) * 8));
    w.bytes(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len(res.h);
    w.len(res.w);
    w.len(k);
    w.len(samples.len());
    for s in samples {
        if s.pixels.len() != res.pixels() {
            return Err(Error::LengthMismatch { expected: res.pixels(), got: s.pixels.len() });
        }
        if s.label.len() != k {
            return Err(Error::LengthMismatch { expected: k, got: s.label.len() });
        }
        w.f64s(&s.pixels);
        w.f64s(s.label.as_slice());
        w.bytes(&[match s.origin {
            Origin::Original => 0,
            Origin::Generated => 1,
        }]);
    }
    Ok(w.0)
}

/// Parse a dataset and check every stored label against the oracle.
pub fn decode_dataset(buf: &[u8]) -> Result<(Resolution, Vec<ImageSample>)> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(DATASET_MAGIC)?;
    let at = r.pos;
    let (h, w) = (r.u32("height")? as usize, r.u32("width")? as usize);
    let res = Resolution::new(h, w).map_err(|e| Error::Format { offset: at as u64, msg: e.to_string() })?;
    let k = r.u32("property count")? as usize;
    let n = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let start = r.pos;
        let pixels = r.f64s(res.pixels(), "pixels")?;
        let label = PropertyVector::new(r.f64s(k, "label")?);
        let origin = match r.take(1, "origin")?[0] {
            0 => Origin::Original,
            1 => Origin::Generated,
            b => {
                r.pos -= 1;
                return Err(r.err(format!("sample {i}: bad origin byte {b}")));
            }
        };
        if k == crate::synth::NUM_PROPERTIES && measure_properties(&pixels, res) != label {
            return Err(Error::Format {
                offset: start as u64,
                msg: format!("sample {i}: label disagrees with oracle"),
            });
        }
        samples.push(ImageSample { pixels, label, origin });
    }
    r.finish()?;
    Ok((res, samples))
}

pub fn save_dataset(path: &Path, samples: &[ImageSample], res: Resolution) -> Result<()> {
    std::fs::write(path, encode_dataset(samples, res)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Resolution, Vec<ImageSample>)> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    let desc = model.arch().descriptor();
    w.len(desc.len());
    w.bytes(desc.as_bytes());
    w.len(model.names().len());
    for (name, t) in model.names().iter().zip(model.tensors()) {
        w.len(name.len());
        w.bytes(name.as_bytes());
        w.len(t.shape().len());
        for &d in t.shape() {
            w.len(d);
        }
        w.f64s(t.data());
    }
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let dlen = r.u32("descriptor length")? as usize;
    let at = r.pos;
    let desc = std::str::from_utf8(r.take(dlen, "descriptor")?)
        .map_err(|_| Error::Format { offset: at as u64, msg: "descriptor is not UTF-8".into() })?;
    let arch =
        Architecture::from_descriptor(desc).map_err(|e| Error::Format { offset: at as u64, msg: e.to_string() })?;
    let n_blocks = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let nlen = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(nlen, "block name")?)
            .map_err(|_| Error::Format { offset: at as u64, msg: "block name is not UTF-8".into() })?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(r.err(format!("block `{name}`: implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let at = r.pos;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflow"))?;
        let data = r.f64s(len, "block data")?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format { offset: at as u64, msg: e.to_string() })?;
        blocks.push((name, t));
    }
    r.finish()?;
    ModelParams::from_parts(arch, blocks)
}

pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Binary greyscale PGM; values are clamped to `[0, 1]` and scaled to 0..=255.
pub fn encode_pgm(pixels: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, RangeSpec};

    fn data() -> (Resolution, Vec<ImageSample>) {
        let res = Resolution { h: 8, w: 8 };
        let mut s = generate_dataset(6, &RangeSpec::desk(), res, 3, 16).unwrap().train;
        s.push(ImageSample::generated(vec![0.25; 64], res));
        (res, s)
    }

    #[test]
    fn dataset_round_trip() {
        let (res, s) = data();
        let bytes = encode_dataset(&s, res).unwrap();
        assert_eq!(&bytes[..4], b"CGDS");
        let (res2, s2) = decode_dataset(&bytes).unwrap();
        assert_eq!(res2, res);
        assert_eq!(s2, s);
    }

    #[test]
    fn dataset_label_tamper_is_caught() {
        let (res, s) = data();
        let mut bytes = encode_dataset(&s, res).unwrap();
        let label_at = 24 + 64 * 8;
        bytes[label_at] ^= 1;
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_names_offset() {
        let (res, s) = data();
        let bytes = encode_dataset(&s, res).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_dataset(cut), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        match decode_dataset(&extra) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = ModelParams::init(Architecture::default(), 4).unwrap();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_magic_reports_offset_zero() {
        let m = ModelParams::init(Architecture::default(), 4).unwrap();
        let mut bytes = encode_checkpoint(&m);
        bytes[0] = b'X';
        match decode_checkpoint(&bytes) {
            Err(Error::Format { offset: 0, msg }) => assert!(msg.contains("magic")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_checkpoint(b"CG"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn pgm_header_and_clamping() {
        let p = encode_pgm(&[-1.0, 0.5, 2.0], 1, 3);
        assert_eq!(p, b"P5\n3 1\n255\n\x00\x80\xff");
    }
}
