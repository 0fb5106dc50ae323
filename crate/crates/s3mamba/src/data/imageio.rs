//! Image file I/O: 8-bit PNG (via the `image` crate) and binary PPM (P6,
//! hand-rolled). In memory an image is a Tensor [1, 3, H, W] in [0, 1];
//! files store interleaved 8-bit RGB, quantized by round(v·255).

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Quantize to interleaved RGB8 (row-major, H×W×3).
pub fn to_rgb8(img: &Tensor) -> (usize, usize, Vec<u8>) {
    assert_eq!(img.shape.len(), 4, "image must be [1, 3, H, W]");
    assert_eq!(img.shape[1], 3, "image must have 3 channels");
    let (h, w) = (img.shape[2], img.shape[3]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(plane * 3);
    for k in 0..plane {
        for c in 0..3 {
            let v = img.data[c * plane + k].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    (h, w, bytes)
}

/// Expand interleaved RGB8 into [1, 3, H, W] with values v/255.
pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Tensor {
    assert_eq!(bytes.len(), h * w * 3, "byte count mismatch");
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for k in 0..plane {
        for c in 0..3 {
            data[c * plane + k] = bytes[k * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Write an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, bytes) = to_rgb8(img);
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("byte buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Read a PNG (or any format the decoder recognizes); alpha is dropped and
/// non-8-bit depths are converted.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(from_rgb8(h, w, rgb.as_raw()))
}

/// Write a binary PPM (P6, maxval 255).
pub fn save_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, bytes) = to_rgb8(img);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary PPM (P6, maxval 255, `#` comments allowed in the header).
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Image(format!("{}: {msg}", path.display()));
    if raw.len() < 2 || &raw[..2] != b"P6" {
        return Err(bad("not a P6 PPM"));
    }
    // Header: three whitespace-separated fields after the magic, with
    // optional comment lines; then a single whitespace byte before the data.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // the single whitespace after maxval
    let need = w * h * 3;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(from_rgb8(h, w, &raw[pos..pos + need]))
}

/// Dispatch on extension: `.png` or `.ppm`.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    match ext_of(path)?.as_str() {
        "png" => save_png(path, img),
        "ppm" => save_ppm(path, img),
        other => Err(Error::Image(format!("unsupported image extension '.{other}'"))),
    }
}

/// Dispatch on extension: `.png` or `.ppm`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    match ext_of(path)?.as_str() {
        "png" => load_png(path),
        "ppm" => load_ppm(path),
        other => Err(Error::Image(format!("unsupported image extension '.{other}'"))),
    }
}

fn ext_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::Image(format!("{}: no file extension", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints_are_exact() {
        let img = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.25]);
        let (h, w, bytes) = to_rgb8(&img);
        assert_eq!((h, w), (1, 2));
        assert_eq!(bytes, [0, 255, 128, 255, 0, 64]);
        let back = from_rgb8(1, 2, &bytes);
        assert_eq!(back.data[0], 0.0);
        assert_eq!(back.data[1], 1.0);
        assert_eq!(back.data[2], 1.0);
        assert_eq!(back.data[3], 0.0);
    }

    #[test]
    fn ppm_round_trips_bytes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = from_rgb8(1, 2, &[1, 2, 3, 250, 251, 252]);
        save_ppm(&path, &img).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..], b"P6\n2 1\n255\n\x01\x02\x03\xfa\xfb\xfc");
        let back = load_ppm(&path).unwrap();
        let (_, _, bytes) = to_rgb8(&back);
        assert_eq!(bytes, [1, 2, 3, 250, 251, 252]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        fs::write(&path, b"P6\n# a comment\n2 1\n# more\n255\n\x10\x20\x30\x40\x50\x60").unwrap();
        let img = load_ppm(&path).unwrap();
        let (_, _, bytes) = to_rgb8(&img);
        assert_eq!(bytes, [0x10, 0x20, 0x30, 0x40, 0x50, 0x60]);
    }

    #[test]
    fn malformed_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P5\n2 1\n255\n\x00\x00").unwrap();
        assert!(matches!(load_ppm(&path), Err(Error::Image(_))));
        fs::write(&path, b"P6\n2 1\n65535\n").unwrap();
        assert!(matches!(load_ppm(&path), Err(Error::Image(_))));
        fs::write(&path, b"P6\n2 1\n255\n\x00").unwrap();
        assert!(matches!(load_ppm(&path), Err(Error::Image(_))));
    }

    #[test]
    fn png_round_trips_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut r = crate::data::rng::SplitMix64::new(4);
        let img = {
            let bytes: Vec<u8> = (0..5 * 4 * 3).map(|_| (r.next_u64() & 0xFF) as u8).collect();
            from_rgb8(5, 4, &bytes)
        };
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape, img.shape);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn png_alpha_channel_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        // Write an RGBA file with a reference encoder, then load it.
        let rgba = image::RgbaImage::from_fn(2, 1, |x, _| {
            image::Rgba([10 + x as u8, 20, 30, 99])
        });
        rgba.save_with_format(&path, image::ImageFormat::Png).unwrap();
        let img = load_image(&path).unwrap();
        let (_, _, bytes) = to_rgb8(&img);
        assert_eq!(bytes, [10, 20, 30, 11, 20, 30]);
    }

    #[test]
    fn unknown_extension_is_an_error() {
        assert!(matches!(
            load_image(Path::new("x.jpeg2000")),
            Err(Error::Image(_))
        ));
    }
}
