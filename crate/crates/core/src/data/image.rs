//! PPM/PGM and raw tensor container I/O, normalization and bilinear resize.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

/// Decoded 8-bit image, interleaved `H×W×C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::arg(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Planar `C×H×W` floating-point image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim("float image data length does not match its shape"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|v| T::c(*v)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Map `[−1, 1]` back to bytes with `(v + 1)·127.5`, rounded and
    /// clamped.
    pub fn to_raw(&self) -> RawImage {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0u8; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = ((self.at(ch, y, x) + 1.0) * 127.5).round().clamp(0.0, 255.0);
                    data[(y * w + x) * c + ch] = v as u8;
                }
            }
        }
        RawImage {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }
}

/// `v ↦ v/127.5 − 1`, converting to planar layout.
pub fn normalize(raw: &RawImage) -> FloatImage {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = raw.pixel(y, x, ch) as f64 / 127.5 - 1.0;
            }
        }
    }
    FloatImage {
        channels: c,
        height: h,
        width: w,
        data,
    }
}

/// Source coordinate and blend weight for output index `i` under half-pixel
/// centers.
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of a square or rectangular image to `target×target`
/// (half-pixel centers, edge clamped). Same-size input is returned as is.
pub fn resize_bilinear(img: &FloatImage, target: usize) -> Result<FloatImage> {
    if target == 0 {
        return Err(Error::arg("resize target must be at least 1"));
    }
    if img.height == target && img.width == target {
        return Ok(img.clone());
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::dim("cannot resize an empty image"));
    }
    let ys: Vec<_> = (0..target).map(|i| sample_axis(i, img.height, target)).collect();
    let xs: Vec<_> = (0..target).map(|i| sample_axis(i, img.width, target)).collect();
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut data = Vec::with_capacity(img.channels * target * target);
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(img.at(c, y0, x0), img.at(c, y0, x1), fx);
                let bottom = lerp(img.at(c, y1, x0), img.at(c, y1, x1), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Ok(FloatImage {
        channels: img.channels,
        height: target,
        width: target,
        data,
    })
}

/// Resize and clamp to `[−1, 1]`. Idempotent.
pub fn preprocess(img: &FloatImage, image_size: usize) -> Result<FloatImage> {
    let mut out = resize_bilinear(img, image_size)?;
    for v in &mut out.data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

fn ingestion(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Header fields of a binary PNM file and the payload offset.
fn parse_pnm_header(bytes: &[u8]) -> std::result::Result<(usize, [usize; 3], usize), String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("bad magic, expected P5 or P6".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("truncated header".into()),
    }
    Ok((channels, fields, pos))
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let (channels, [width, height, maxval], offset) =
        parse_pnm_header(bytes).map_err(|m| ingestion(path, m))?;
    if maxval != 255 {
        return Err(ingestion(path, format!("max value {maxval} unsupported, expected 255")));
    }
    let len = width * height * channels;
    let payload = &bytes[offset..];
    if payload.len() < len {
        return Err(ingestion(
            path,
            format!("truncated payload: {} of {len} bytes", payload.len()),
        ));
    }
    RawImage::new(height, width, channels, payload[..len].to_vec())
        .map_err(|e| ingestion(path, e.to_string()))
}

pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Element storage of a raw tensor container.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::U8(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// Contents of a `VAET` raw tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"VAET";
pub const TENSOR_VERSION: u16 = 1;

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize || shape.iter().any(|d| *d > u32::MAX as usize) {
            return Err(Error::dim("tensor shape too large for the container"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor shape does not match data length"));
        }
        Ok(Self { shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(self.data.dtype().tag());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| ingestion(path, m);
        if bytes.get(..4) != Some(TENSOR_MAGIC) {
            return Err(err("bad magic, expected VAET".into()));
        }
        if bytes.len() < 8 {
            return Err(err("truncated header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TENSOR_VERSION {
            return Err(err(format!("unsupported container version {version}")));
        }
        let dtype = DType::from_tag(bytes[6]).ok_or_else(|| err(format!("unknown dtype tag {}", bytes[6])))?;
        let ndim = bytes[7] as usize;
        let dims_end = 8 + 4 * ndim;
        let dims = bytes
            .get(8..dims_end)
            .ok_or_else(|| err("truncated shape table".into()))?;
        let shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| err("shape overflows".into()))?;
        let payload = &bytes[dims_end..];
        let expected = n
            .checked_mul(dtype.size())
            .ok_or_else(|| err("shape overflows".into()))?;
        if payload.len() != expected {
            return Err(err(format!(
                "payload has {} bytes, shape {shape:?} of {dtype:?} needs {expected}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
        };
        Ok(Self { shape, data })
    }
}

pub fn read_tensor_file(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| ingestion(path, e.to_string()))?;
    RawTensor::decode(&bytes, path)
}

pub fn write_tensor_file(path: &Path, tensor: &RawTensor) -> Result<()> {
    std::fs::write(path, tensor.encode())?;
    Ok(())
}

/// A decoded image file: bytes from PNM or a `u8` container, or an already
/// normalized float container.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedImage {
    Raw(RawImage),
    Float(FloatImage),
}

fn raw_from_container(t: RawTensor, path: &Path) -> Result<LoadedImage> {
    match (t.data, t.shape.as_slice()) {
        (TensorData::U8(v), &[h, w]) => Ok(LoadedImage::Raw(RawImage::new(h, w, 1, v)?)),
        (TensorData::U8(v), &[h, w, c]) => RawImage::new(h, w, c, v)
            .map(LoadedImage::Raw)
            .map_err(|e| ingestion(path, e.to_string())),
        (data, &[c, h, w]) if data.dtype() != DType::U8 => {
            Ok(LoadedImage::Float(FloatImage::new(c, h, w, data.to_f64())?))
        }
        (data, shape) => Err(ingestion(
            path,
            format!(
                "container of {:?} with shape {shape:?} is not an image (u8 H×W[×C] or float C×H×W)",
                data.dtype()
            ),
        )),
    }
}

/// Decode any supported image file, dispatching on its magic bytes.
pub fn load_any(path: &Path) -> Result<LoadedImage> {
    let bytes = std::fs::read(path).map_err(|e| ingestion(path, e.to_string()))?;
    match bytes.get(..4) {
        Some(m) if m == TENSOR_MAGIC => raw_from_container(RawTensor::decode(&bytes, path)?, path),
        _ if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") => {
            decode_pnm(&bytes, path).map(LoadedImage::Raw)
        }
        _ => Err(ingestion(path, "unsupported format (expected P5, P6 or VAET)")),
    }
}

/// Decode an 8-bit image (PNM or `u8` container).
pub fn load_image(path: &Path) -> Result<RawImage> {
    match load_any(path)? {
        LoadedImage::Raw(r) => Ok(r),
        LoadedImage::Float(_) => Err(ingestion(path, "float container is not an 8-bit image")),
    }
}

/// Write P6 for 3 channels, P5 for 1.
pub fn save_image(path: &Path, img: &RawImage) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// Load, normalize and resize, then check the value range.
pub fn load_preprocessed(path: &Path, image_size: usize, channels: usize) -> Result<FloatImage> {
    let img = match load_any(path)? {
        LoadedImage::Raw(raw) => normalize(&raw),
        LoadedImage::Float(f) => f,
    };
    let img = if img.channels == 1 && channels == 3 {
        let plane = img.data.clone();
        let data = plane.iter().chain(&plane).chain(&plane).copied().collect();
        FloatImage::new(3, img.height, img.width, data)?
    } else {
        img
    };
    if img.channels != channels {
        return Err(ingestion(
            path,
            format!("image has {} channels, model expects {channels}", img.channels),
        ));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(ingestion(path, "image contains non-finite values"));
    }
    let out = preprocess(&img, image_size)?;
    debug_assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        let raw = RawImage::new(1, 3, 1, vec![0, 255, 128]).unwrap();
        let f = normalize(&raw);
        assert_eq!(f.data[0], -1.0);
        assert_eq!(f.data[1], 1.0);
        assert!((f.data[2] - 0.00392157).abs() < 1e-8);
    }

    #[test]
    fn red_p6() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        let img = decode_pnm(&bytes, Path::new("red.ppm")).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 2, 3));
        assert_eq!(img.data, [255, 0, 0].repeat(4));
        let short = &bytes[..bytes.len() - 1];
        let err = decode_pnm(short, Path::new("red.ppm")).unwrap_err().to_string();
        assert!(err.contains("red.ppm") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn constant_resize_is_exact() {
        let img = FloatImage::new(2, 5, 7, vec![0.3; 70]).unwrap();
        for t in [1, 3, 16] {
            assert!(resize_bilinear(&img, t).unwrap().data.iter().all(|v| *v == 0.3));
        }
        assert!(resize_bilinear(&img, 0).is_err());
    }

    #[test]
    fn to_raw_inverts_normalize() {
        let raw = RawImage::new(2, 2, 3, (0..12).map(|i| i * 21).collect()).unwrap();
        assert_eq!(normalize(&raw).to_raw(), raw);
    }

    #[test]
    fn container_rejects_bad_headers() {
        let t = RawTensor::new(vec![2, 3], TensorData::F32(vec![1.5; 6])).unwrap();
        let bytes = t.encode();
        let p = Path::new("t.vaet");
        assert_eq!(RawTensor::decode(&bytes, p).unwrap(), t);
        assert!(RawTensor::decode(&bytes[..bytes.len() - 2], p).is_err());
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(RawTensor::decode(&bad, p).is_err());
        bad = bytes;
        bad[0] = b'X';
        assert!(RawTensor::decode(&bad, p).is_err());
    }
}
