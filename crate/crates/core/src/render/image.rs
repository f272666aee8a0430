//! Image containers and PPM/PGM/raw-float serialisation.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major multi-channel image: value `(x, y, k)` at `(y·w + x)·c + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Image {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Image {
        let mut im = Image::new(width, height, value.len());
        for px in im.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        im
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Values rounded to the 8-bit grid used by PPM/PGM.
    pub fn quantized(&self) -> Image {
        let mut im = self.clone();
        im.data
            .iter_mut()
            .for_each(|v| *v = to_u8(*v) as f64 / 255.0);
        im
    }

    /// Values rounded to `f32`, as stored by [`write_float`].
    pub fn to_f32_precision(&self) -> Image {
        let mut im = self.clone();
        im.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        im
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, im: &Image, magic: &str, channels: usize) -> Result<()> {
    if im.channels != channels {
        return Err(Error::SizeMismatch(format!(
            "{magic} needs {channels} channels, image has {}",
            im.channels
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", im.width, im.height)?;
    let bytes: Vec<u8> = im.data.iter().map(|&v| to_u8(v)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn header_tokens<R: BufRead>(r: &mut R, count: usize) -> Result<Vec<String>> {
    let mut toks = Vec::new();
    let mut line = String::new();
    while toks.len() < count {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Dataset("truncated image header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        toks.extend(content.split_whitespace().map(str::to_string));
    }
    Ok(toks)
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<Image> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let toks = header_tokens(&mut r, 4)?;
    let bad = || Error::Dataset(format!("{}: not a binary {magic} file", path.display()));
    if toks[0] != magic || toks.len() != 4 {
        return Err(bad());
    }
    let w: usize = toks[1].parse().map_err(|_| bad())?;
    let h: usize = toks[2].parse().map_err(|_| bad())?;
    if toks[3] != "255" {
        return Err(bad());
    }
    let mut bytes = vec![0u8; w * h * channels];
    r.read_exact(&mut bytes)?;
    Ok(Image {
        width: w,
        height: h,
        channels,
        data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_ppm(path: &Path, im: &Image) -> Result<()> {
    write_netpbm(path, im, "P6", 3)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    read_netpbm(path, "P6", 3)
}

pub fn write_pgm(path: &Path, im: &Image) -> Result<()> {
    write_netpbm(path, im, "P5", 1)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    read_netpbm(path, "P5", 1)
}

/// Raw little-endian `f32` payload after a `rigsdf-float W H C` line.
pub fn write_float(path: &Path, im: &Image) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "rigsdf-float {} {} {}", im.width, im.height, im.channels)?;
    for &v in &im.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_float(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let bad = || Error::Dataset(format!("{}: bad float image header", path.display()));
    let t: Vec<&str> = line.split_whitespace().collect();
    if t.len() != 4 || t[0] != "rigsdf-float" {
        return Err(bad());
    }
    let dims: Vec<usize> = t[1..]
        .iter()
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let n = dims[0] * dims[1] * dims[2];
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    Ok(Image {
        width: dims[0],
        height: dims[1],
        channels: dims[2],
        data: bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    })
}

/// Text grid: a `W H C` line, then one line per image row with the
/// channels of each pixel separated by spaces.
pub fn write_float_text(path: &Path, im: &Image) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{} {} {}", im.width, im.height, im.channels)?;
    for row in im.data.chunks_exact(im.width * im.channels) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
