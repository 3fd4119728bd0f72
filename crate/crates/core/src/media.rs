//! Binary PPM/PGM images, clip assembly and augmentation.
//!
//! Only 8-bit binary netpbm is supported: `P6` (RGB) and `P5` (grayscale),
//! maxval 255. Frame order within a directory is the lexicographic order of
//! file names, so numbered frames should be zero-padded.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{format_err, shape_err, Error, Result};
use crate::nn::resize_bilinear;
use crate::tensor::Tensor;

/// Three frames of equal size, `[3, H, W]` each, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: [Tensor; 3],
    /// Source files, empty for synthetic clips.
    pub paths: Vec<PathBuf>,
    /// Positions of the frames in the sorted directory listing.
    pub indices: [usize; 3],
}

impl FrameClip {
    pub fn from_frames(frames: [Tensor; 3]) -> Result<Self> {
        let d = frames[0].dims().to_vec();
        if d.len() != 3 || d[0] != 3 {
            return shape_err(format!("clip frames must be [3, H, W], got {d:?}"));
        }
        if frames.iter().any(|f| f.dims() != d.as_slice()) {
            return shape_err("clip frames differ in size");
        }
        Ok(Self {
            frames,
            paths: Vec::new(),
            indices: [0, 1, 2],
        })
    }

    pub fn height(&self) -> usize {
        self.frames[0].dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].dims()[2]
    }

    /// Stem of the middle frame, used to name predictions.
    pub fn middle_stem(&self) -> Option<String> {
        self.paths
            .get(1)
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let [a, b, c] = &self.frames;
        Ok(Self {
            frames: [
                resize_bilinear(a, h, w)?,
                resize_bilinear(b, h, w)?,
                resize_bilinear(c, h, w)?,
            ],
            paths: self.paths.clone(),
            indices: self.indices,
        })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return format_err(0, "file too short for a netpbm header");
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P5" && &magic != b"P6" {
        return format_err(
            0,
            format!(
                "unsupported magic {:?}, expected P5 or P6",
                String::from_utf8_lossy(&magic)
            ),
        );
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, slot) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return format_err(
                start as u64,
                format!("expected header field {}", ["width", "height", "maxval"][k]),
            );
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *slot = text.parse().map_err(|_| Error::Format {
            offset: start as u64,
            msg: format!("header value `{text}` out of range"),
        })?;
        if k == 2 && *slot != 255 {
            return format_err(
                start as u64,
                format!("maxval {} unsupported, expected 255", *slot),
            );
        }
        if k < 2 && *slot == 0 {
            return format_err(start as u64, "zero image dimension");
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return format_err(pos as u64, "expected one whitespace byte after maxval"),
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        data_start: pos,
    })
}

/// Decodes a P6 image to `[3, H, W]` or a P5 image to `[1, H, W]`, scaled by 1/255.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let channels = if &h.magic == b"P6" { 3 } else { 1 };
    let plane = h.width * h.height;
    let need = plane * channels;
    let payload = &bytes[h.data_start..];
    if payload.len() < need {
        return format_err(
            (h.data_start + payload.len()) as u64,
            format!(
                "truncated payload: need {need} bytes, found {}",
                payload.len()
            ),
        );
    }
    if payload.len() > need {
        return format_err((h.data_start + need) as u64, "trailing bytes after payload");
    }
    let mut data = vec![0f32; need];
    for (p, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f32 / 255.0;
        }
    }
    Tensor::new(vec![channels, h.height, h.width], data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[1, H, W]` as P5 or `[3, H, W]` as P6 with `round(v * 255)`.
/// Values outside `[0, 1]` are clamped.
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let d = t.dims();
    if d.len() != 3 || (d[0] != 1 && d[0] != 3) {
        return shape_err(format!("image tensors must be [1|3, H, W], got {d:?}"));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(t.data()[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Writes a `[1, H, W]` map as a P5 file.
pub fn write_gray(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.dims()[0] != 1 {
        return shape_err(format!("write_gray expects [1, H, W], got {:?}", t.dims()));
    }
    fs::write(path, encode_image(t)?)?;
    Ok(())
}

pub fn write_rgb(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.dims()[0] != 3 {
        return shape_err(format!("write_rgb expects [3, H, W], got {:?}", t.dims()));
    }
    fs::write(path, encode_image(t)?)?;
    Ok(())
}

/// Bilinear resize (half-pixel centers) in either direction.
pub fn resize_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.dims()[1] == h && t.dims()[2] == w {
        return Ok(t.clone());
    }
    resize_bilinear(t, h, w)
}

fn to_rgb(t: Tensor) -> Result<Tensor> {
    match t.dims()[0] {
        3 => Ok(t),
        _ => t.repeat_axis(0, 3),
    }
}

/// Image files (`.ppm`, `.pgm`) in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("ppm" | "pgm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Index triples `(i, i+s, i+2s)` with `s = interval + 1`. A single frame is
/// used three times.
pub fn clip_indices(n: usize, interval: usize) -> Result<Vec<[usize; 3]>> {
    if interval > 6 {
        return Err(Error::Invalid(format!(
            "interval must be in 0..=6, got {interval}"
        )));
    }
    if n == 1 {
        return Ok(vec![[0, 0, 0]]);
    }
    let s = interval + 1;
    if n < 2 * s + 1 {
        return Err(Error::Invalid(format!(
            "{n} frames are too few for a 3-frame clip at interval {interval}"
        )));
    }
    Ok((0..n - 2 * s).map(|i| [i, i + s, i + 2 * s]).collect())
}

/// Lazily reads clips from a directory of frames.
#[derive(Debug)]
pub struct ClipIter {
    paths: Vec<PathBuf>,
    triples: std::vec::IntoIter<[usize; 3]>,
    size: Option<(usize, usize)>,
}

impl ClipIter {
    /// Resize every frame to `h x w` as it is read.
    pub fn resize(mut self, h: usize, w: usize) -> Self {
        self.size = Some((h, w));
        self
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.len() == 0
    }

    fn load(&self, idx: [usize; 3]) -> Result<FrameClip> {
        let mut frames = Vec::with_capacity(3);
        for &i in &idx {
            let mut t = to_rgb(read_image(&self.paths[i])?)?;
            if let Some((h, w)) = self.size {
                t = resize_to(&t, h, w)?;
            }
            frames.push(t);
        }
        let mut clip = FrameClip::from_frames(frames.try_into().expect("three frames"))?;
        clip.paths = idx.iter().map(|&i| self.paths[i].clone()).collect();
        clip.indices = idx;
        Ok(clip)
    }
}

impl Iterator for ClipIter {
    type Item = Result<FrameClip>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.triples.next()?;
        Some(self.load(idx))
    }
}

/// Sliding 3-frame clips over the images in `dir`, see [`clip_indices`].
pub fn clip_iter(dir: impl AsRef<Path>, interval: usize) -> Result<ClipIter> {
    let paths = list_images(dir)?;
    let triples = clip_indices(paths.len(), interval)?;
    Ok(ClipIter {
        paths,
        triples: triples.into_iter(),
        size: None,
    })
}

/// Mirrors a `[C, H, W]` tensor about its vertical axis.
pub fn hflip_tensor(t: &Tensor) -> Tensor {
    let w = *t.dims().last().expect("rank >= 1");
    let mut out = t.clone();
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(w)
        .zip(t.data().chunks_exact(w))
    {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

pub fn hflip(clip: &FrameClip) -> FrameClip {
    FrameClip {
        frames: clip.frames.each_ref().map(hflip_tensor),
        paths: clip.paths.clone(),
        indices: clip.indices,
    }
}
