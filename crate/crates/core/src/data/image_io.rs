//! Binary PGM (P5) and PPM (P6) dumps: header-exact, trivially parseable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "write_pgm: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(format!(
            "write_ppm: {}x{} needs {} bytes, got {}",
            width,
            height,
            3 * width * height,
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_netpbm(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Header: magic, whitespace-separated width, height, maxval, then one
    // whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields.len() < 4 || fields[0] != magic {
        return Err(Error::parse(format!(
            "{}: not a {magic} file (header fields: {fields:?})",
            path.display()
        )));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(format!("{}: bad {what} '{s}'", path.display())))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::parse(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    Ok((width, height, pos + 1))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (w, h, start) = parse_netpbm(&bytes, "P5", path)?;
    if bytes.len() < start + w * h {
        return Err(Error::parse(format!("{}: raster truncated", path.display())));
    }
    Ok((w, h, bytes[start..start + w * h].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (w, h, start) = parse_netpbm(&bytes, "P6", path)?;
    if bytes.len() < start + 3 * w * h {
        return Err(Error::parse(format!("{}: raster truncated", path.display())));
    }
    Ok((w, h, bytes[start..start + 3 * w * h].to_vec()))
}

/// Maps a [1, H, W] tensor in [-1, 1] to 8-bit grayscale.
pub fn tensor_to_gray_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "tensor_to_gray_bytes: expected [1, H, W], got {:?}",
            image.shape()
        )));
    }
    Ok(image
        .data()
        .iter()
        .map(|v| (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Maps a [3, H, W] tensor in [0, 255] to interleaved RGB bytes.
pub fn tensor_to_rgb_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "tensor_to_rgb_bytes: expected [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(d[(ch * h + y) * w + x].round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Interleaved RGB bytes back to a [3, H, W] tensor in [0, 255].
pub fn rgb_bytes_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(format!(
            "rgb_bytes_to_tensor: {}x{} needs {} bytes, got {}",
            width,
            height,
            3 * width * height,
            rgb.len()
        )));
    }
    let mut data = vec![0.0; 3 * width * height];
    for y in 0..height {
        for x in 0..width {
            for ch in 0..3 {
                data[(ch * height + y) * width + x] = rgb[(y * width + x) * 3 + ch] as f64;
            }
        }
    }
    Tensor::from_vec(vec![3, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dfkd_img_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm_roundtrip() {
        let path = tmp("a.pgm");
        let pixels: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn ppm_roundtrip_through_tensor() {
        let path = tmp("b.ppm");
        let t = Tensor::from_vec(
            vec![3, 2, 2],
            vec![
                10.0, 20.0, 30.0, 40.0, // R
                50.0, 60.0, 70.0, 80.0, // G
                90.0, 100.0, 110.0, 120.0, // B
            ],
        )
        .unwrap();
        let rgb = tensor_to_rgb_bytes(&t).unwrap();
        write_ppm(&path, 2, 2, &rgb).unwrap();
        let (w, h, bytes) = read_ppm(&path).unwrap();
        let back = rgb_bytes_to_tensor(w, h, &bytes).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn gray_mapping_covers_range() {
        let t = Tensor::from_vec(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tensor_to_gray_bytes(&t).unwrap(), vec![0, 128, 255]);
    }
}
