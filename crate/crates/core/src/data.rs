//! Seeded "context-XOR" segmentation task and the CACD dataset file format.
//!
//! Channel 0 holds blobs of two textures (≈0.25 and ≈0.75), channel 1 a
//! per-image cue `g ∈ {0, 1}`, channel 2 a horizontal ramp. A blob pixel with
//! texture `t` in column `x` gets class `t ⊕ g ⊕ [2x ≥ w]` (offset by one when
//! class 0 is background), so the same local texture maps to different
//! classes depending on the image-level cue and on position.

use std::io::{Read, Write};

use crate::error::{CacError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const TEXTURE_LEVELS: [f64; 2] = [0.25, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// 2: no background, every pixel carries a texture. ≥3: class 0 is
    /// background and classes 1, 2 are the two semantic classes.
    pub num_classes: usize,
    /// Half-width of the uniform noise added to texture values, in [0, 1).
    pub texture_noise: f64,
    pub blob_count_range: (usize, usize),
    pub blob_radius_range: (usize, usize),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            height: 32,
            width: 32,
            num_classes: 3,
            texture_noise: 0.1,
            blob_count_range: (3, 6),
            blob_radius_range: (3, 6),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.height == 0 || self.width == 0 {
            problems.push(format!("image extent {}×{} must be positive", self.height, self.width));
        }
        if self.num_classes < 2 {
            problems.push(format!("num_classes {} must be at least 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.texture_noise) {
            problems.push(format!("texture_noise {} must lie in [0, 1)", self.texture_noise));
        }
        let (bmin, bmax) = self.blob_count_range;
        if bmin > bmax {
            problems.push(format!("blob count range ({bmin}, {bmax}) is empty"));
        }
        let (rmin, rmax) = self.blob_radius_range;
        if rmin > rmax {
            problems.push(format!("blob radius range ({rmin}, {rmax}) is empty"));
        }
        if 2 * rmax + 1 > self.height.min(self.width) {
            problems.push(format!(
                "blob diameter {} exceeds image extent {}×{}",
                2 * rmax + 1,
                self.height,
                self.width
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CacError::Generation(problems.join("; ")))
        }
    }

    pub fn has_background(&self) -> bool {
        self.num_classes >= 3
    }
}

/// One image (`3×h×w`, values in [0, 1]) with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: Vec<u16>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Latent variables behind one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub cue: u8,
    /// `None` for background, `Some(t)` for texture type `t ∈ {0, 1}`.
    pub texture: Vec<Option<u8>>,
}

/// Class of a pixel from its latent variables.
pub fn label_rule(texture: Option<u8>, cue: u8, column: usize, width: usize, has_background: bool) -> u16 {
    let side = u8::from(2 * column >= width);
    match texture {
        None => 0,
        Some(t) => u16::from(t ^ cue ^ side) + u16::from(has_background),
    }
}

/// Generates sample `index` of `spec`; its content depends only on `(spec, index)`.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<(SegSample, SampleTruth)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = SplitMix64::stream(spec.seed, index as u64);
    let cue = u8::from(rng.bit());
    let default_texture = if spec.has_background() { None } else { Some(0) };
    let mut texture = vec![default_texture; h * w];
    let blobs = rng.range_inclusive(spec.blob_count_range.0, spec.blob_count_range.1);
    for _ in 0..blobs {
        let r = rng.range_inclusive(spec.blob_radius_range.0, spec.blob_radius_range.1);
        let cy = rng.range_inclusive(r, h - 1 - r);
        let cx = rng.range_inclusive(r, w - 1 - r);
        let t = u8::from(rng.bit());
        let r2 = (r * r) as isize;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                if dy * dy + dx * dx <= r2 {
                    texture[y * w + x] = Some(t);
                }
            }
        }
    }
    let mut img = vec![0.0; 3 * h * w];
    let mut labels = vec![0u16; h * w];
    let ramp_den = (w.max(2) - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let noise = rng.uniform(-spec.texture_noise, spec.texture_noise);
            let base = texture[p].map_or(0.0, |t| TEXTURE_LEVELS[t as usize]);
            img[p] = (base + noise).clamp(0.0, 1.0);
            img[h * w + p] = f64::from(cue);
            img[2 * h * w + p] = x as f64 / ramp_den;
            labels[p] = label_rule(texture[p], cue, x, w, spec.has_background());
        }
    }
    Ok((
        SegSample {
            image: Tensor::new(&[3, h, w], img)?,
            labels,
        },
        SampleTruth { cue, texture },
    ))
}

pub fn generate_context_dataset(spec: &DatasetSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_sample(spec, i).map(|(s, _)| s)).collect()
}

pub const DATASET_MAGIC: &[u8; 4] = b"CACD";
pub const DATASET_VERSION: u16 = 1;
/// magic + version + count/h/w/classes
pub const DATASET_HEADER_BYTES: usize = 4 + 2 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub count: u32,
    pub height: u32,
    pub width: u32,
    pub num_classes: u32,
}

fn io_err(e: std::io::Error) -> CacError {
    CacError::Io {
        path: "<stream>".into(),
        message: e.to_string(),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CacError::Format(format!("{what} {v} does not fit in u32")))
}

/// Writes the CACD format: header, then per sample `h·w·3` little-endian
/// `f64` (channel-major) and `h·w` little-endian `u16` labels.
pub fn write_dataset<W: Write>(mut out: W, height: usize, width: usize, num_classes: usize, samples: &[SegSample]) -> Result<()> {
    out.write_all(DATASET_MAGIC).map_err(io_err)?;
    out.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io_err)?;
    for v in [
        to_u32(samples.len(), "count")?,
        to_u32(height, "height")?,
        to_u32(width, "width")?,
        to_u32(num_classes, "num_classes")?,
    ] {
        out.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(height * width * 26);
    for s in samples {
        if s.image.shape() != [3, height, width] || s.labels.len() != height * width {
            return Err(CacError::Format(format!(
                "sample shape {:?} does not match header 3×{height}×{width}",
                s.image.shape()
            )));
        }
        buf.clear();
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in &s.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

pub fn encode_dataset(height: usize, width: usize, num_classes: usize, samples: &[SegSample]) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    write_dataset(&mut v, height, width, num_classes, samples)?;
    Ok(v)
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<(DatasetHeader, Vec<SegSample>)> {
    let mut head = [0u8; DATASET_HEADER_BYTES];
    input
        .read_exact(&mut head)
        .map_err(|e| CacError::Format(format!("truncated CACD header: {e}")))?;
    if &head[..4] != DATASET_MAGIC {
        return Err(CacError::Format("bad magic, expected CACD".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != DATASET_VERSION {
        return Err(CacError::Format(format!("unsupported CACD version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(head[6 + 4 * i..10 + 4 * i].try_into().unwrap());
    let header = DatasetHeader {
        count: word(0),
        height: word(1),
        width: word(2),
        num_classes: word(3),
    };
    let (h, w) = (header.height as usize, header.width as usize);
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut buf = vec![0u8; h * w * 26];
    for i in 0..header.count {
        input
            .read_exact(&mut buf)
            .map_err(|e| CacError::Format(format!("truncated CACD sample {i}: {e}")))?;
        let (pix, lab) = buf.split_at(h * w * 24);
        let image = pix
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels: Vec<u16> = lab
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(bad) = labels.iter().find(|&&l| u32::from(l) >= header.num_classes) {
            return Err(CacError::Data(format!("sample {i} has label {bad} ≥ {}", header.num_classes)));
        }
        samples.push(SegSample {
            image: Tensor::new(&[3, h, w], image)?,
            labels,
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io_err)? != 0 {
        return Err(CacError::Format("trailing bytes after CACD samples".into()));
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_larger_than_image_is_rejected() {
        let spec = DatasetSpec {
            height: 8,
            width: 8,
            blob_radius_range: (2, 4),
            ..Default::default()
        };
        assert!(matches!(generate_context_dataset(&spec), Err(CacError::Generation(_))));
    }

    #[test]
    fn deterministic() {
        let spec = DatasetSpec { count: 4, ..Default::default() };
        assert_eq!(generate_context_dataset(&spec).unwrap(), generate_context_dataset(&spec).unwrap());
    }

    #[test]
    fn order_independent_streams() {
        let spec = DatasetSpec { count: 5, ..Default::default() };
        let all = generate_context_dataset(&spec).unwrap();
        assert_eq!(generate_sample(&spec, 3).unwrap().0, all[3]);
    }

    #[test]
    fn values_in_unit_interval() {
        let spec = DatasetSpec { count: 8, texture_noise: 0.5, ..Default::default() };
        for s in generate_context_dataset(&spec).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn file_size_and_empty_file() {
        let spec = DatasetSpec {
            count: 1,
            height: 8,
            width: 8,
            blob_radius_range: (1, 2),
            ..Default::default()
        };
        let samples = generate_context_dataset(&spec).unwrap();
        let bytes = encode_dataset(8, 8, 3, &samples).unwrap();
        assert_eq!(bytes.len(), DATASET_HEADER_BYTES + 8 * 8 * 3 * 8 + 8 * 8 * 2);
        let (hdr, back) = read_dataset(bytes.as_slice()).unwrap();
        assert_eq!(hdr.count, 1);
        assert_eq!(back, samples);

        let empty = encode_dataset(8, 8, 3, &[]).unwrap();
        assert_eq!(empty.len(), DATASET_HEADER_BYTES);
        assert!(read_dataset(empty.as_slice()).unwrap().1.is_empty());
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut bytes = encode_dataset(2, 2, 3, &[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_dataset(bytes.as_slice()), Err(CacError::Format(_))));
        let mut bytes = encode_dataset(2, 2, 3, &[]).unwrap();
        bytes[6] = 1; // claims one sample, none present
        assert!(matches!(read_dataset(bytes.as_slice()), Err(CacError::Format(_))));
    }
}
