//! Image files: PNG (8/16-bit gray or RGB) and binary PGM/PPM.
//!
//! Samples are normalized to `[0, 1]` by the format's maximum value on read
//! and clamped then rounded on write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Sample depth used when writing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// File extensions accepted by [`read_image`].
pub const SUPPORTED_EXTENSIONS: &[&str] = &["png", "ppm", "pgm"];

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

pub fn is_supported(path: &Path) -> bool {
    SUPPORTED_EXTENSIONS.contains(&extension(path).as_str())
}

/// Reads a PNG, PGM or PPM file, chosen by extension.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    match extension(path).as_str() {
        "png" => read_png(path),
        "ppm" | "pgm" => read_pnm(path),
        other => Err(Error::Format(format!(
            "{}: unsupported extension '{other}'",
            path.display()
        ))),
    }
}

/// Writes a PNG, PGM or PPM file, chosen by extension.
pub fn write_image<T: Scalar>(path: &Path, img: &Image<T>, depth: BitDepth) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png(path, img, depth),
        "ppm" | "pgm" => write_pnm(path, img, depth),
        other => Err(Error::Format(format!(
            "{}: unsupported extension '{other}'",
            path.display()
        ))),
    }
}

fn from_samples<T: Scalar>(
    height: usize,
    width: usize,
    channels: usize,
    raw: &[u8],
    sixteen: bool,
    maxval: f64,
) -> Result<Image<T>> {
    let data: Vec<T> = if sixteen {
        raw.chunks_exact(2)
            .map(|b| T::of(u16::from_be_bytes([b[0], b[1]]) as f64 / maxval))
            .collect()
    } else {
        raw.iter().map(|&b| T::of(b as f64 / maxval)).collect()
    };
    Image::new(height, width, channels, data)
}

fn quantize<T: Scalar>(img: &Image<T>, depth: BitDepth) -> Result<Vec<u8>> {
    if !img.all_finite() {
        return Err(Error::NonFinite("image written to disk".into()));
    }
    let max = depth.max_value();
    let level = |v: T| (v.as_f64().clamp(0.0, 1.0) * max).round();
    Ok(match depth {
        BitDepth::Eight => img.data().iter().map(|&v| level(v) as u8).collect(),
        BitDepth::Sixteen => img
            .data()
            .iter()
            .flat_map(|&v| (level(v) as u16).to_be_bytes())
            .collect(),
    })
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (color, depth) = reader.output_color_type();
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: color type {other:?} not supported (gray or RGB only)",
                path.display()
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let sixteen = depth == png::BitDepth::Sixteen;
    let maxval = if sixteen { 65535.0 } else { 255.0 };
    from_samples(
        info.height as usize,
        info.width as usize,
        channels,
        &buf,
        sixteen,
        maxval,
    )
}

pub fn write_png<T: Scalar>(path: &Path, img: &Image<T>, depth: BitDepth) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => {
            return Err(Error::ChannelCount {
                expected: 3,
                found: n,
            })
        }
    };
    let bytes = quantize(img, depth)?;
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(match depth {
        BitDepth::Eight => png::BitDepth::Eight,
        BitDepth::Sixteen => png::BitDepth::Sixteen,
    });
    let map = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(map)?;
    writer.write_image_data(&bytes).map_err(map)?;
    writer.finish().map_err(map)?;
    Ok(())
}

fn pnm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok(tok)
}

fn pnm_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = pnm_token(r)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PNM {what} '{tok}'")))
}

pub fn read_pnm<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = pnm_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => {
            return Err(Error::Format(format!(
                "{}: PNM magic '{m}' not supported (binary P5/P6 only)",
                path.display()
            )))
        }
    };
    let width = pnm_number(&mut r, "width")?;
    let height = pnm_number(&mut r, "height")?;
    let maxval = pnm_number(&mut r, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "{}: maxval {maxval}",
            path.display()
        )));
    }
    let sixteen = maxval > 255;
    let n = width * height * channels * if sixteen { 2 } else { 1 };
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("{}: truncated pixel data", path.display())))?;
    from_samples(height, width, channels, &raw, sixteen, maxval as f64)
}

pub fn write_pnm<T: Scalar>(path: &Path, img: &Image<T>, depth: BitDepth) -> Result<()> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        n => {
            return Err(Error::ChannelCount {
                expected: 3,
                found: n,
            })
        }
    };
    let bytes = quantize(img, depth)?;
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "{magic}\n{} {}\n{}\n",
        img.width(),
        img.height(),
        depth.max_value() as u32
    )?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize) -> Image<f32> {
        Image::from_fn(5, 7, channels, |y, x, c| {
            ((y * 7 + x) * 3 + c) as f32 / 255.0
        })
    }

    #[test]
    fn png_round_trips_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let img = ramp(channels);
            for depth in [BitDepth::Eight, BitDepth::Sixteen] {
                let p = dir.path().join(format!("t{channels}{depth:?}.png"));
                write_png(&p, &img, depth).unwrap();
                let back: Image<f32> = read_image(&p).unwrap();
                assert_eq!(back.shape(), img.shape());
                assert!(back.max_abs_diff(&img) < 1e-6);
            }
        }
    }

    #[test]
    fn pnm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(3);
        let p = dir.path().join("a.ppm");
        write_image(&p, &img, BitDepth::Sixteen).unwrap();
        let back: Image<f64> = read_image(&p).unwrap();
        assert!(back.cast::<f32>().max_abs_diff(&img) < 1e-6);
        let g = ramp(1);
        let p = dir.path().join("a.pgm");
        write_image(&p, &g, BitDepth::Eight).unwrap();
        let back: Image<f32> = read_image(&p).unwrap();
        assert!(back.max_abs_diff(&g) < 1e-6);
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        let img: Image<f64> = read_image(&p).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn corrupt_and_unknown_inputs_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_image::<f32>(&p), Err(Error::Format(_))));
        let p = dir.path().join("x.bmp");
        std::fs::write(&p, b"BM").unwrap();
        assert!(read_image::<f32>(&p).is_err());
        let p = dir.path().join("short.ppm");
        std::fs::write(&p, b"P6 4 4 255\n\x01\x02").unwrap();
        assert!(read_image::<f32>(&p).is_err());
    }

    #[test]
    fn writes_clamp_out_of_range_samples() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(1, 2, 1, vec![-0.5f32, 1.5]).unwrap();
        let p = dir.path().join("c.png");
        write_png(&p, &img, BitDepth::Eight).unwrap();
        let back: Image<f32> = read_image(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }
}
