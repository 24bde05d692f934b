//! PFM (HDR, bit-exact) and PNG (LDR, 8/16-bit) image files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{linear_to_srgb, srgb_to_linear, ImageF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Transfer curve applied at the PNG boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    /// Encode linear → sRGB on write, decode on read.
    Srgb,
    /// Store values as-is (data maps such as roughness/metallic or masks).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pfm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("pfm") => Ok(ImageFormat::Pfm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::InvalidArgument(format!(
                "unknown image extension: {}",
                path.display()
            ))),
        }
    }
}

/// Reads a PFM or PNG file, chosen by extension. PNGs are decoded with the
/// sRGB transfer.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Pfm => read_pfm(path),
        ImageFormat::Png => read_png(path, Transfer::Srgb),
    }
}

/// Writes a PFM or PNG file, chosen by extension. PNGs are written 8-bit
/// with the sRGB transfer.
pub fn write_image(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Pfm => write_pfm(img, path),
        ImageFormat::Png => write_png(img, path, PngDepth::Eight, Transfer::Srgb),
    }
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pfm(img)?;
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

/// Encodes as little-endian PFM (negative scale). Two-channel images are
/// stored as three channels with a zero third channel.
pub fn encode_pfm(img: &ImageF) -> Result<Vec<u8>> {
    img.check_finite()?;
    let (w, h, c) = img.dims();
    let (magic, out_c) = if c == 1 { ("Pf", 1) } else { ("PF", 3) };
    let mut bytes = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * out_c * 4);
    // PFM scanlines run bottom to top.
    for y in (0..h).rev() {
        for x in 0..w {
            let p = img.pixel(x, y);
            for k in 0..out_c {
                let v = p.get(k).copied().unwrap_or(0.0) as f32;
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageF> {
    // Header: magic, width, height, scale, separated by whitespace, with a
    // single whitespace byte before the raster.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    let mut line = 1;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            if bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(line, "truncated PFM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::parse(line, "non-ascii PFM header"))?,
        );
    }
    pos += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::parse(1, format!("bad PFM magic {m:?}"))),
    };
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::parse(line, "bad PFM width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::parse(line, "bad PFM height"))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(line, "bad PFM scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(line, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let mut img = ImageF::zeros(width, height, channels)?;
    let needed = width * height * channels * 4;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| Error::parse(line, "truncated PFM raster"))?;
    let mut it = raster.chunks_exact(4).map(|b| {
        let b = [b[0], b[1], b[2], b[3]];
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    });
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = it.next().unwrap_or(0.0);
                if !v.is_finite() {
                    return Err(Error::NonFinite(img.index(x, y) + c));
                }
                img.set(x, y, c, v as f64);
            }
        }
    }
    Ok(img)
}

pub fn read_png(path: impl AsRef<Path>, transfer: Transfer) -> Result<ImageF> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    let depth = info.bit_depth;
    let color = info.color_type;
    let (width, height) = (info.width as usize, info.height as usize);
    let max = match depth {
        png::BitDepth::Eight => 255.0,
        png::BitDepth::Sixteen => 65535.0,
        other => return Err(Error::UnsupportedBitDepth(format!("{other:?}"))),
    };
    let (src_c, keep_c, alpha_idx) = match color {
        png::ColorType::Grayscale => (1, 1, None),
        png::ColorType::GrayscaleAlpha => (2, 2, Some(1)),
        png::ColorType::Rgb => (3, 3, None),
        png::ColorType::Rgba => (4, 3, None),
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedBitDepth("indexed color".into()))
        }
    };
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let buf = &buf[..frame.buffer_size()];
    let mut img = ImageF::zeros(width, height, keep_c)?;
    let bytes_per = if max > 255.0 { 2 } else { 1 };
    for y in 0..height {
        for x in 0..width {
            for c in 0..keep_c {
                let i = ((y * width + x) * src_c + c) * bytes_per;
                let raw = if bytes_per == 2 {
                    u16::from_be_bytes([buf[i], buf[i + 1]]) as f64
                } else {
                    buf[i] as f64
                };
                let v = raw / max;
                let v = if transfer == Transfer::Srgb && Some(c) != alpha_idx {
                    srgb_to_linear(v)
                } else {
                    v
                };
                img.set(x, y, c, v);
            }
        }
    }
    Ok(img)
}

/// Writes an LDR PNG. Samples are clamped to [0, 1] after the transfer.
pub fn write_png(img: &ImageF, path: impl AsRef<Path>, depth: PngDepth, transfer: Transfer) -> Result<()> {
    let path = path.as_ref();
    img.check_finite()?;
    let (w, h, c) = img.dims();
    let color = match c {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        _ => png::ColorType::Rgb,
    };
    let alpha_idx = (c == 2).then_some(1);
    let (bit_depth, max) = match depth {
        PngDepth::Eight => (png::BitDepth::Eight, 255.0),
        PngDepth::Sixteen => (png::BitDepth::Sixteen, 65535.0),
    };
    let mut raw = Vec::with_capacity(img.data().len() * if max > 255.0 { 2 } else { 1 });
    for (i, &v) in img.data().iter().enumerate() {
        let v = if transfer == Transfer::Srgb && Some(i % c) != alpha_idx {
            linear_to_srgb(v.max(0.0))
        } else {
            v
        };
        let q = (v.clamp(0.0, 1.0) * max).round();
        match depth {
            PngDepth::Eight => raw.push(q as u8),
            PngDepth::Sixteen => raw.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(bit_depth);
    if transfer == Transfer::Srgb {
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    }
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_constant_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        let img = ImageF::filled(2, 2, 1, 0.5).unwrap();
        write_pfm(&img, &p).unwrap();
        let back = read_pfm(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pfm_bytes_are_stable_through_read_write() {
        let img = ImageF::from_fn(3, 2, |x, y| [x as f64 * 0.1, y as f64 / 3.0, -1.25]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let again = encode_pfm(&decode_pfm(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn pfm_little_endian_negative_scale() {
        // Hand-built 2x1 RGB file: bottom row first, little-endian.
        let mut bytes = b"PF\n2 1\n-1.000000\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.dims(), (2, 1, 3));
        assert_eq!(img.pixel(1, 0), &[4.0, 5.0, 6.0]);

        let mut be = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.5f32, 2.5, 3.5] {
            be.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(decode_pfm(&be).unwrap().pixel(0, 0), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = ImageF::from_fn(1, 2, |_, y| [y as f64]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()), 1.0);
    }

    #[test]
    fn pfm_errors() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n255\n"), Err(Error::Parse { .. })));
        assert!(matches!(decode_pfm(b"PF\n4 4\n-1\n\0\0"), Err(Error::Parse { .. })));
        let mut img = ImageF::zeros(1, 1, 1).unwrap();
        img.data_mut()[0] = f64::NAN;
        assert!(matches!(encode_pfm(&img), Err(Error::NonFinite(0))));
    }

    #[test]
    fn png_value_188_decodes_to_half() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = ImageF::filled(1, 1, 1, 188.0 / 255.0).unwrap();
        write_png(&img, &p, PngDepth::Eight, Transfer::Linear).unwrap();
        let lin = read_png(&p, Transfer::Srgb).unwrap().get(0, 0, 0);
        // ((188/255 + 0.055) / 1.055)^2.4
        let expected = ((188.0 / 255.0 + 0.055) / 1.055f64).powf(2.4);
        assert!((lin - expected).abs() < 1e-12);
        assert!((lin - 0.5029).abs() < 1e-4);
    }

    #[test]
    fn png_round_trip_within_one_code() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageF::from_fn(7, 5, |x, y| {
            [x as f64 / 6.0, y as f64 / 4.0, ((x * y) % 5) as f64 / 4.0]
        })
        .unwrap();
        for depth in [PngDepth::Eight, PngDepth::Sixteen] {
            let p = dir.path().join(format!("{depth:?}.png"));
            write_png(&img, &p, depth, Transfer::Srgb).unwrap();
            let back = read_png(&p, Transfer::Srgb).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((linear_to_srgb(*a) - linear_to_srgb(*b)).abs() <= 0.5 / 255.0 + 1e-9);
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn png_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageF::zeros(1, 1, 3).unwrap();
        img.data_mut()[1] = f64::INFINITY;
        assert!(write_png(&img, dir.path().join("x.png"), PngDepth::Eight, Transfer::Srgb).is_err());
    }
}
