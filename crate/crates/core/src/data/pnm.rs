//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decoded 8-bit raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

impl Raster {
    /// `(1, C, H, W)` floats in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; c * h * w];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v as f32 / 255.0;
            }
        }
        Tensor::from_parts(Shape::new(1, c, h, w), data)
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => {
                return Err(Error::Format {
                    offset: *pos as u64,
                    message: "unexpected end of header".into(),
                })
            }
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let at = *pos;
    let tok = header_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Format {
        offset: at as u64,
        message: format!("invalid {what} {tok:?}"),
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        "P1" | "P2" | "P3" | "P4" => {
            return Err(Error::Unsupported(format!(
                "{magic} is not a binary 8-bit PGM/PPM (only P5 and P6 are supported)"
            )))
        }
        other => {
            return Err(Error::Unsupported(format!(
                "not a PNM file (magic {other:?})"
            )))
        }
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!(
            "maxval {maxval} (only 255 is supported)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let available = bytes.len().saturating_sub(pos);
    if available < need {
        return Err(Error::Format {
            offset: pos as u64,
            message: format!("truncated raster: expected {need} bytes, found {available}"),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

/// Loads a P5/P6 file as a `(1, 1|3, H, W)` tensor in `[0, 1]`.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pnm(&bytes)?.to_tensor())
}

/// Writes channel planes `(C, H, W)` of 8-bit samples as P5 (C = 1) or P6
/// (C = 3).
pub fn save_planes(
    path: impl AsRef<Path>,
    channels: usize,
    height: usize,
    width: usize,
    planes: &[u8],
) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::Unsupported(format!("{channels}-channel rasters")));
    }
    assert_eq!(planes.len(), channels * height * width);
    let mut pixels = vec![0u8; planes.len()];
    for c in 0..channels {
        for i in 0..height * width {
            pixels[i * channels + c] = planes[c * height * width + i];
        }
    }
    let raster = Raster {
        width,
        height,
        channels,
        pixels,
    };
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(&raster)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_scales_by_255() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = decode_pnm(&bytes).unwrap().to_tensor();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
        assert!((t.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn p6_splits_channels() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_pnm(&bytes).unwrap().to_tensor();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(
            (t.at(0, 0, 0, 0), t.at(0, 1, 0, 0), t.at(0, 2, 0, 0)),
            (1.0, 0.0, 0.0)
        );
        assert_eq!(t.at(0, 2, 0, 1), 1.0);
    }

    #[test]
    fn ascii_and_16_bit_are_unsupported() {
        assert!(matches!(
            decode_pnm(b"P2\n1 1\n255\n0\n"),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            decode_pnm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn truncated_raster() {
        assert!(matches!(
            decode_pnm(b"P5\n2 2\n255\n\0\0"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            pixels: (0..18).map(|i| (i * 13) as u8).collect(),
        };
        assert_eq!(decode_pnm(&encode_pnm(&r)).unwrap(), r);
    }
}
