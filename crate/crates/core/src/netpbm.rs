//! Binary netpbm images: P6 (RGB) and P5 (gray), 8-bit only.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pnm> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::Format(format!("unsupported netpbm magic {other:?}"))),
        };
        let mut number = |what: &str| -> Result<usize> {
            let t = token(bytes, &mut pos)?;
            t.parse().map_err(|_| Error::Format(format!("bad {what} {t:?}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("maxval {maxval} is not 8-bit")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("empty image".into()));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * channels;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != need {
            return Err(Error::Format(format!("raster has {} bytes, expected {need}", raster.len())));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            pixels: raster.to_vec(),
        })
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated netpbm header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 200]);
        let p = Pnm::decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (2, 1, 1));
        assert_eq!(p.pixels, vec![7, 200]);
    }

    #[test]
    fn raster_byte_that_looks_like_whitespace() {
        let p = Pnm {
            width: 1,
            height: 1,
            channels: 3,
            pixels: vec![b'\n', b' ', b'#'],
        };
        assert_eq!(Pnm::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn rejects_wrong_length_and_magic() {
        assert!(Pnm::decode(b"P5 2 2 255\n\x01\x02\x03").is_err());
        assert!(Pnm::decode(b"P3 1 1 255\n1 2 3").is_err());
        assert!(Pnm::decode(b"P5 1 1 65535\n\x00\x00").is_err());
    }
}
