//! Binary PPM (P6) codec, 8-bit samples mapped linearly onto `[0,1]`.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Image("non-ASCII header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Image(format!("unsupported magic {:?}, expected P6", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad {what} {s:?}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * CHANNELS;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Image("truncated PPM raster".into()))?;
    let scale = maxval as f64;
    Image::new(height, width, raster.iter().map(|&b| b as f64 / scale).collect())
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    decode(&bytes)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_header_and_raster() {
        let img = Image::new(1, 2, vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2]).unwrap();
        let bytes = encode(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 0, 51]);
    }

    #[test]
    fn decodes_comments() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn quantised_round_trip_is_exact() {
        let img = Image::from_fn(3, 4, |y, x| {
            [((y * 4 + x) * 20) as f64 / 255.0, 1.0, (x * 50) as f64 / 255.0]
        });
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn rejects_p3() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
    }
}
