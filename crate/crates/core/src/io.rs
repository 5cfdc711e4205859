//! Binary tensor files, checkpoints and PPM images.
//!
//! ```text
//! DFT1: "DFT1" | u8 dtype (0 = f32, 1 = f64) | u32 N, C, H, W | values, NCHW
//! DFCK: "DFCK" | u32 len | config JSON | u32 count | count x (u32 len | name | DFT1)
//! DFAD: "DFAD" | u32 len | run hash | u64 step | u32 count | count x (DFT1 m | DFT1 v)
//! ```
//!
//! All integers and values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DFT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"DFAD";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Reader { bytes, pos: 0, format }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.format, format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.format, format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.format, "string is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let saved = self.format;
        self.format = "DFT1";
        self.magic(TENSOR_MAGIC)?;
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::format("DFT1", format!("unknown dtype tag {tag}")))?;
        let dims = [self.u32()?, self.u32()?, self.u32()?, self.u32()?].map(|d| d as usize);
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format("DFT1", "shape overflows"))?;
        let bytes = self.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::format("DFT1", "shape overflows"))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        self.format = saved;
        Tensor::from_vec(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.format, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::config(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let s = t.shape();
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.tag());
    for d in [s.n(), s.c(), s.h(), s.w()] {
        put_u32(out, d)?;
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Decodes one tensor, converting from the stored dtype to `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes, "DFT1");
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_checkpoint<T: Scalar>(config: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let json = config.canonical_json();
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

/// Decodes a checkpoint, rebuilds its model and checks that every parameter
/// name and shape matches the architecture.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Model, ParamStore<T>)> {
    let mut r = Reader::new(bytes, "DFCK");
    r.magic(CHECKPOINT_MAGIC)?;
    let config = ModelConfig::from_json(&r.string()?)?;
    let (model, mut store) = Model::build::<T>(&config, &crate::rng::Rng::new(0))?;
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::format("DFCK", format!("{count} parameters stored, architecture has {}", store.len())));
    }
    for i in 0..count {
        let name = r.string()?;
        if store.names()[i] != name {
            return Err(Error::format("DFCK", format!("parameter {i} is `{name}`, expected `{}`", store.names()[i])));
        }
        let t = r.tensor()?;
        store.set(&name, t)?;
    }
    r.finish()?;
    Ok((model, store))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(config, params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model, ParamStore<T>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Optimizer moments saved next to a checkpoint so a run can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub run_hash: String,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

pub fn encode_optimizer<T: Scalar>(state: &OptimizerState<T>) -> Result<Vec<u8>> {
    if state.m.len() != state.v.len() {
        return Err(Error::config("first and second moment counts differ"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    put_u32(&mut out, state.run_hash.len())?;
    out.extend_from_slice(state.run_hash.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    put_u32(&mut out, state.m.len())?;
    for (m, v) in state.m.iter().zip(&state.v) {
        encode_tensor(m, &mut out)?;
        encode_tensor(v, &mut out)?;
    }
    Ok(out)
}

pub fn decode_optimizer<T: Scalar>(bytes: &[u8]) -> Result<OptimizerState<T>> {
    let mut r = Reader::new(bytes, "DFAD");
    r.magic(OPTIMIZER_MAGIC)?;
    let run_hash = r.string()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        m.push(r.tensor()?);
        v.push(r.tensor()?);
    }
    r.finish()?;
    Ok(OptimizerState { run_hash, step, m, v })
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PPM", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

/// Parses a binary (P6, maxval 255) PPM into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::format("PPM", "only binary P6 images are supported"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let tok = ppm_token(bytes, &mut pos)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("PPM", format!("bad {what} `{}`", String::from_utf8_lossy(tok))))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::format("PPM", format!("maxval {maxval} unsupported (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("PPM", "empty image"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("PPM", "missing whitespace after header"));
    }
    let pixels = &bytes[pos + 1..];
    if pixels.len() != 3 * w * h {
        return Err(Error::format("PPM", format!("expected {} pixel bytes, found {}", 3 * w * h, pixels.len())));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| T::lit(f64::from(pixels[3 * (y * w + x) + c]) / 255.0)))
}

/// Encodes batch item 0 as P6; values are clamped to `[0, 1]` and rounded to nearest.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c() != 3 || s.n() < 1 {
        return Err(Error::shape("encode_ppm", format!("expected (N, 3, H, W), got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                let v = img.at([0, c, y, x]).as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads height and width up to the next multiple of `multiple`.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let s = x.shape();
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    Tensor::from_fn(Shape::new(s.n(), s.c(), up(s.h()), up(s.w())), |[n, c, h, w]| {
        x.at([n, c, reflect(h as isize, s.h()), reflect(w as isize, s.w())])
    })
}

/// Top-left `h x w` crop.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h() || w > s.w() {
        return Err(Error::shape("crop", format!("cannot crop {s} to {h}x{w}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |i| x.at(i)))
}
