use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use log::warn;

use super::RasterImage;
use crate::error::{Error, Result};

pub const DEFAULT_DEFLATE_LEVEL: u32 = 6;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];
const BPP: usize = 3;

/// Encodes `img` as an 8-bit RGB, non-interlaced PNG.
///
/// Each scanline gets the filter with the smallest sum of absolute signed
/// residuals (ties go to the lower filter type), and the filtered stream is
/// compressed with zlib at `level`. Output is a pure function of the pixels
/// and the level.
pub fn encode_png(img: &RasterImage, level: u32) -> Result<Vec<u8>> {
    if level > 9 {
        return Err(Error::InvalidInput(format!(
            "deflate level must be 0-9, got {level}"
        )));
    }
    let stride = img.width() * BPP;
    let mut filtered = Vec::with_capacity((stride + 1) * img.height());
    let zero_row = vec![0u8; stride];
    let mut candidates = [
        vec![0u8; stride],
        vec![0u8; stride],
        vec![0u8; stride],
        vec![0u8; stride],
        vec![0u8; stride],
    ];
    for y in 0..img.height() {
        let row = &img.data()[y * stride..(y + 1) * stride];
        let prev = if y == 0 {
            &zero_row[..]
        } else {
            &img.data()[(y - 1) * stride..y * stride]
        };
        let mut best = 0usize;
        let mut best_cost = u64::MAX;
        for (ftype, out) in candidates.iter_mut().enumerate() {
            apply_filter(ftype as u8, row, prev, out);
            let cost: u64 = out.iter().map(|&b| (b as i8).unsigned_abs() as u64).sum();
            if cost < best_cost {
                best_cost = cost;
                best = ftype;
            }
        }
        filtered.push(best as u8);
        filtered.extend_from_slice(&candidates[best]);
    }

    let mut z = ZlibEncoder::new(Vec::new(), Compression::new(level));
    z.write_all(&filtered).expect("in-memory write");
    let idat = z.finish().expect("in-memory write");

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(img.width() as u32).to_be_bytes());
    ihdr.extend_from_slice(&(img.height() as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);

    let mut out = Vec::with_capacity(idat.len() + 64);
    out.extend_from_slice(&SIGNATURE);
    write_chunk(&mut out, b"IHDR", &ihdr);
    write_chunk(&mut out, b"IDAT", &idat);
    write_chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

fn write_chunk(out: &mut Vec<u8>, kind: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    let mut h = crc32fast::Hasher::new();
    h.update(kind);
    h.update(body);
    out.extend_from_slice(&h.finalize().to_be_bytes());
}

fn apply_filter(ftype: u8, row: &[u8], prev: &[u8], out: &mut [u8]) {
    // The first pixel has no left neighbour, so a = c = 0 there.
    let n = BPP.min(row.len());
    match ftype {
        0 => out.copy_from_slice(row),
        1 => {
            out[..n].copy_from_slice(&row[..n]);
            for i in n..row.len() {
                out[i] = row[i].wrapping_sub(row[i - BPP]);
            }
        }
        2 => {
            for i in 0..row.len() {
                out[i] = row[i].wrapping_sub(prev[i]);
            }
        }
        3 => {
            for i in 0..n {
                out[i] = row[i].wrapping_sub(prev[i] / 2);
            }
            for i in n..row.len() {
                out[i] = row[i].wrapping_sub(((row[i - BPP] as u16 + prev[i] as u16) / 2) as u8);
            }
        }
        _ => {
            for i in 0..n {
                out[i] = row[i].wrapping_sub(paeth(0, prev[i], 0));
            }
            for i in n..row.len() {
                out[i] = row[i].wrapping_sub(paeth(row[i - BPP], prev[i], prev[i - BPP]));
            }
        }
    }
}

#[inline]
fn paeth(a: u8, b: u8, c: u8) -> u8 {
    let p = a as i16 + b as i16 - c as i16;
    let pa = (p - a as i16).abs();
    let pb = (p - b as i16).abs();
    let pc = (p - c as i16).abs();
    if pa <= pb && pa <= pc {
        a
    } else if pb <= pc {
        b
    } else {
        c
    }
}

/// Writes `img` as PNG and returns the size of the written file in bytes.
pub fn save_image(img: &RasterImage, path: &Path, deflate_level: u32) -> Result<u64> {
    let bytes = encode_png(img, deflate_level)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Decodes an 8-bit RGB or RGBA PNG. Alpha is discarded.
pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<RasterImage> {
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: origin.to_path_buf(),
        message: e.to_string(),
    };
    let limits = png::Limits { bytes: 1 << 32 };
    let decoder = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::Unsupported {
            path: origin.to_path_buf(),
            message: format!("bit depth {depth:?}, expected 8"),
        });
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => {
            warn!("{}: dropping alpha channel", origin.display());
            4
        }
        other => {
            return Err(Error::Unsupported {
                path: origin.to_path_buf(),
                message: format!("color type {other:?}, expected RGB or RGBA"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: origin.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * info.line_size..y * info.line_size + w * channels];
        if channels == 3 {
            data.extend_from_slice(line);
        } else {
            for px in line.chunks_exact(4) {
                data.extend_from_slice(&px[..3]);
            }
        }
    }
    RasterImage::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
        RasterImage::new(w, h, data).unwrap()
    }

    #[test]
    fn tiny_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RasterImage::new(2, 2, (0u8..12).map(|v| v * 20).collect()).unwrap();
        save_image(&img, &path, 6).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patch_sized_png_has_raw_size_150528() {
        let img = noise(224, 224, 1);
        let bytes = encode_png(&img, 6).unwrap();
        let back = decode_png(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.data().len(), 150_528);
    }

    #[test]
    fn truncated_file_fails_to_decode() {
        let bytes = encode_png(&noise(16, 16, 2), 6).unwrap();
        assert!(matches!(
            decode_png(&bytes[..bytes.len() / 2], Path::new("t")),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image(Path::new("/nonexistent/x.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn constant_compresses_better_than_noise() {
        let flat = RasterImage::filled(224, 224, [200, 120, 180]).unwrap();
        let b_const = encode_png(&flat, 6).unwrap().len();
        let b_noise = encode_png(&noise(224, 224, 3), 6).unwrap().len();
        assert!(b_const < 150_528);
        assert!(b_noise > b_const);
    }

    #[test]
    fn encoding_is_deterministic() {
        let img = noise(64, 48, 4);
        let dir = tempfile::tempdir().unwrap();
        let a = save_image(&img, &dir.path().join("a.png"), 6).unwrap();
        let b = save_image(&img, &dir.path().join("b.png"), 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_level_out_of_range() {
        assert!(encode_png(&noise(4, 4, 5), 10).is_err());
    }

    #[test]
    fn rgba_alpha_is_dropped_and_gray_rejected() {
        let mut rgba = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut rgba, 2, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 9, 4, 5, 6, 9]).unwrap();
        }
        let img = decode_png(&rgba, Path::new("rgba")).unwrap();
        assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);

        let mut gray = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut gray, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2]).unwrap();
        }
        assert!(matches!(
            decode_png(&gray, Path::new("gray")),
            Err(Error::Unsupported { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn round_trip_any_raster(w in 1usize..40, h in 1usize..40, level in 0u32..10, seed in any::<u64>()) {
            let img = noise(w, h, seed);
            let bytes = encode_png(&img, level).unwrap();
            let back = decode_png(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
