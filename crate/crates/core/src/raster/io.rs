use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::PageImage;
use crate::error::{Error, Result};

fn quantize(p: f32) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &PageImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| quantize(p)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PageImage> {
    // Header: magic, width, height, maxval separated by whitespace, then a
    // single whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|e| Error::format("pgm", e.to_string()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::format("pgm", format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::format("pgm", e.to_string()));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(Error::format("pgm", "only maxval 255 is supported"));
    }
    let data = bytes.get(i + 1..).ok_or_else(|| Error::format("pgm", "missing raster"))?;
    if data.len() != w * h {
        return Err(Error::format("pgm", format!("expected {} raster bytes, found {}", w * h, data.len())));
    }
    PageImage::from_pixels(w, h, data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_pgm(img: &PageImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<PageImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_png(img: &PageImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
    let data: Vec<u8> = img.pixels().iter().map(|&p| quantize(p)).collect();
    writer.write_image_data(&data).map_err(|e| Error::format("png", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_quantization() {
        let img = PageImage::from_pixels(2, 1, vec![0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 255]);
    }

    #[test]
    fn pgm_round_trip_on_quantized_levels() {
        let px: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let img = PageImage::from_pixels(4, 3, px).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_rejects_other_formats() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
