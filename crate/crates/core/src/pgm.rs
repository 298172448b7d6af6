//! Binary portable graymap (P5), 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Gray8, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P5" {
        return Err(format!("bad magic {:?}", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("truncated header".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(format!(
            "expected {} pixels, found {}",
            width * height,
            raster.len()
        ));
    }
    Ok(Gray8 {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

pub fn write(path: &Path, img: &Gray8) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0, 255]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P2\n1 1\n255\n\0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode(b"P5\n1").is_err());
    }

    #[test]
    fn round_trip() {
        let img = Gray8 {
            width: 3,
            height: 2,
            pixels: vec![1, 2, 3, 10, 32, 255],
        };
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }
}
