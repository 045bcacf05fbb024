//! Grayscale rasters and the on-disk image codecs.
//!
//! The pipeline reads plain (P2) and binary (P5) PGM at 8 or 16 bits per
//! sample, plus 8-bit grayscale PNG. Decoding preserves pixel values
//! bit-exactly; 16-bit P5 samples are big-endian per the netpbm spec.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown magic number (expected P2, P5, or PNG)")]
    UnknownMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("PGM maxval {0} unsupported (expected 255 or 65535)")]
    BadMaxval(u32),
    #[error("declared {width}x{height} at {bit_depth} bits but payload holds {actual} bytes (expected {expected})")]
    PayloadLength {
        width: usize,
        height: usize,
        bit_depth: u8,
        expected: usize,
        actual: usize,
    },
    #[error("sample value {value} exceeds declared maxval {maxval}")]
    SampleRange { value: u32, maxval: u32 },
    #[error("PNG is not 8-bit grayscale")]
    UnsupportedPng,
    #[error("PNG decode failed: {0}")]
    Png(String),
}

/// A grayscale raster. Pixels are stored row-major as `u16` regardless of
/// bit depth; every value is `< 2^bit_depth`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, pixels: Vec<u16>) -> Self {
        assert!(bit_depth == 8 || bit_depth == 16, "bit depth must be 8 or 16");
        assert_eq!(pixels.len(), width * height, "pixel count must match dimensions");
        let max = Self::max_value_for(bit_depth);
        assert!(pixels.iter().all(|&p| u32::from(p) <= max));
        GrayImage { width, height, bit_depth, pixels }
    }

    pub fn max_value(&self) -> u32 {
        Self::max_value_for(self.bit_depth)
    }

    fn max_value_for(bit_depth: u8) -> u32 {
        (1u32 << bit_depth) - 1
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }
}

/// Load an image from disk, dispatching on the magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decode PGM (P2/P5) or 8-bit grayscale PNG from a byte buffer.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    match bytes {
        [b'P', b'2', ..] | [b'P', b'5', ..] => decode_pgm(bytes),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(ImageError::UnknownMagic),
    }
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let pixels = gray.into_raw().into_iter().map(u16::from).collect();
            Ok(GrayImage { width: w, height: h, bit_depth: 8, pixels })
        }
        _ => Err(ImageError::UnsupportedPng),
    }
}

/// Decode a P2 (ASCII) or P5 (binary) PGM. Header comments introduced by
/// `#` are skipped. Maxval must be exactly 255 or 65535.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let binary = match &bytes[..2.min(bytes.len())] {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(ImageError::UnknownMagic),
    };
    let mut pos = 2;
    let width = read_header_number(bytes, &mut pos)? as usize;
    let height = read_header_number(bytes, &mut pos)? as usize;
    let maxval = read_header_number(bytes, &mut pos)?;
    if maxval != 255 && maxval != 65535 {
        return Err(ImageError::BadMaxval(maxval));
    }
    let bit_depth: u8 = if maxval == 255 { 8 } else { 16 };
    if width == 0 || height == 0 {
        return Err(ImageError::BadHeader("zero dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if binary {
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(ImageError::BadHeader("missing raster separator".into())),
        }
        let payload = &bytes[pos..];
        let bytes_per_sample = if bit_depth == 16 { 2 } else { 1 };
        let expected = width * height * bytes_per_sample;
        if payload.len() != expected {
            return Err(ImageError::PayloadLength {
                width,
                height,
                bit_depth,
                expected,
                actual: payload.len(),
            });
        }
        let pixels: Vec<u16> = if bit_depth == 8 {
            payload.iter().map(|&b| u16::from(b)).collect()
        } else {
            // 16-bit samples are big-endian, most significant byte first.
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Ok(GrayImage { width, height, bit_depth, pixels })
    } else {
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let v = read_header_number(bytes, &mut pos)?;
            if v > maxval {
                return Err(ImageError::SampleRange { value: v, maxval });
            }
            pixels.push(v as u16);
        }
        // Trailing content other than whitespace means the declared
        // dimensions disagree with the payload.
        if bytes[pos..].iter().any(|b| !b.is_ascii_whitespace()) {
            return Err(ImageError::PayloadLength {
                width,
                height,
                bit_depth,
                expected: width * height,
                actual: width * height + 1,
            });
        }
        Ok(GrayImage { width, height, bit_depth, pixels })
    }
}

/// Read one whitespace-delimited decimal from a PGM header, skipping `#`
/// comments that run to end of line.
fn read_header_number(bytes: &[u8], pos: &mut usize) -> Result<u32, ImageError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => {
                return Err(ImageError::BadHeader(format!(
                    "unexpected byte 0x{b:02x} in header"
                )))
            }
            None => return Err(ImageError::BadHeader("truncated header".into())),
        }
    }
    let mut value: u64 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            value = value * 10 + u64::from(b - b'0');
            if value > u64::from(u32::MAX) {
                return Err(ImageError::BadHeader("number overflow".into()));
            }
            *pos += 1;
        } else {
            break;
        }
    }
    Ok(value as u32)
}

/// Encode as binary (P5) PGM: the canonical on-disk form emitted by this
/// crate. Decoding the result reproduces the pixel payload byte-exactly.
pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let maxval = image.max_value();
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).into_bytes();
    if image.bit_depth == 8 {
        out.extend(image.pixels.iter().map(|&p| p as u8));
    } else {
        for &p in &image.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    out
}

/// Write a raster to disk as binary PGM.
pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2_literal_payload() {
        let img = decode_pgm(b"P2\n2 2\n255\n0 128 255 64\n").unwrap();
        assert_eq!((img.width, img.height, img.bit_depth), (2, 2, 8));
        assert_eq!(img.pixels, vec![0, 128, 255, 64]);
    }

    #[test]
    fn p5_sixteen_bit_big_endian() {
        // 2x2, maxval 65535, 8 payload bytes; samples are big-endian
        // byte pairs.
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x00, 0x00, 0xFF, 0xFF, 0xFF, 0x12, 0x34]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.bit_depth, 16);
        assert_eq!(img.pixels, vec![0x0100, 0x00FF, 0xFFFF, 0x1234]);
    }

    #[test]
    fn p5_payload_length_mismatch() {
        let mut bytes = b"P5\n3 3\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 8]);
        match decode_pgm(&bytes) {
            Err(ImageError::PayloadLength { expected: 9, actual: 8, .. }) => {}
            other => panic!("expected payload-length error, got {other:?}"),
        }
    }

    #[test]
    fn bad_maxval_rejected() {
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n100\n5\n"),
            Err(ImageError::BadMaxval(100))
        ));
    }

    #[test]
    fn unknown_magic_rejected() {
        assert!(matches!(decode_image(b"P6\n1 1\n255\n123"), Err(ImageError::UnknownMagic)));
    }

    #[test]
    fn header_comments_skipped() {
        let img = decode_pgm(b"P2\n# a comment\n2 1 # trailing\n255\n7 9\n").unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn p2_sample_above_maxval_rejected() {
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n256\n"),
            Err(ImageError::SampleRange { value: 256, maxval: 255 })
        ));
    }

    #[test]
    fn encode_decode_round_trip_payload_identity() {
        // 8-bit: payload bytes of the re-encoded image equal the original.
        let img = GrayImage::new(3, 2, 8, vec![0, 1, 2, 253, 254, 255]);
        let encoded = encode_pgm(&img);
        let decoded = decode_pgm(&encoded).unwrap();
        assert_eq!(decoded, img);
        assert_eq!(encode_pgm(&decoded), encoded);

        // 16-bit round trip.
        let img16 = GrayImage::new(2, 2, 16, vec![0, 65535, 256, 511]);
        let decoded16 = decode_pgm(&encode_pgm(&img16)).unwrap();
        assert_eq!(decoded16, img16);
    }

    #[test]
    fn p2_and_p5_agree_on_pixels() {
        let ascii = decode_pgm(b"P2\n3 1\n255\n10 20 30\n").unwrap();
        let mut bin = b"P5\n3 1\n255\n".to_vec();
        bin.extend_from_slice(&[10, 20, 30]);
        assert_eq!(ascii, decode_pgm(&bin).unwrap());
    }

    #[test]
    fn png_round_trip_eight_bit() {
        let gray = image::GrayImage::from_raw(2, 2, vec![5, 10, 200, 255]).unwrap();
        let mut bytes = Vec::new();
        gray.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.bit_depth), (2, 2, 8));
        assert_eq!(img.pixels, vec![5, 10, 200, 255]);
    }

    #[test]
    fn malformed_fixtures_produce_diagnostics_not_panics() {
        let fixtures: &[&[u8]] = &[
            b"",
            b"P5",
            b"P5\n",
            b"P2\n2\n",
            b"P2\n2 2\n255\n1 2 3\n",
            b"P2\n2 2\n255\n1 2 3 4 5\n",
            b"P5\n4 4\n65535\nxx",
            b"P2\n-1 2\n255\n",
            b"P2\n1 1\n4294967296\n0\n",
        ];
        for fixture in fixtures {
            assert!(decode_image(fixture).is_err());
        }
    }
}
