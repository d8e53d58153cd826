//! Minimal 8-bit PGM/PPM codec: reads the plain (P2/P3) and raw (P5/P6)
//! variants, writes raw, and converts to and from network tensors.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Side length cap; keeps hostile headers from demanding huge rasters.
pub const MAX_DIM: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    pub maxval: u8,
    /// Row-major, channel-interleaved samples.
    pub data: Vec<u8>,
}

impl PnmImage {
    /// `(1, channels, h, w)` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = Shape::new(1, self.channels, self.height, self.width);
        let mut t = Tensor::zeros(s);
        let inv = 1.0 / self.maxval as f32;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = self.data[(y * self.width + x) * self.channels + c];
                    t.data_mut()[s.idx(0, c, y, x)] = v as f32 * inv;
                }
            }
        }
        t
    }

    /// Quantize a single-channel map in `[0, 1]` to 8-bit gray levels.
    pub fn from_gray_tensor(t: &Tensor<f32>) -> Result<PnmImage> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            shape_err!("gray image wants a (1, 1, h, w) map, got {s}");
        }
        let data = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(PnmImage {
            width: s.w,
            height: s.h,
            channels: 1,
            maxval: 255,
            data,
        })
    }
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n' | 0x0b | 0x0c)
}

struct Lexer<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    /// Whitespace and `#`-to-end-of-line comments.
    fn skip_filler(&mut self) {
        loop {
            while self.pos < self.b.len() && is_space(self.b[self.pos]) {
                self.pos += 1;
            }
            if self.pos < self.b.len() && self.b[self.pos] == b'#' {
                while self.pos < self.b.len() && self.b[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_filler();
        let start = self.pos;
        let mut v: usize = 0;
        while self.pos < self.b.len() && self.b[self.pos].is_ascii_digit() {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.b[self.pos] - b'0') as usize))
                .ok_or_else(|| Error::Format(format!("{what} overflows at byte {start}")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format(format!(
                "expected {what} at byte {start}"
            )));
        }
        Ok(v)
    }

    /// Nothing but filler may remain.
    fn expect_end(&mut self) -> Result<()> {
        self.skip_filler();
        if self.pos != self.b.len() {
            return Err(Error::Format(format!(
                "trailing data at byte {}",
                self.pos
            )));
        }
        Ok(())
    }
}

/// Decode any of P2/P3 (plain) or P5/P6 (raw) at up to 8 bits per sample.
pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 {
        return Err(Error::Format("not a PNM file: too short".into()));
    }
    let (plain, channels) = match &bytes[..2] {
        b"P2" => (true, 1),
        b"P3" => (true, 3),
        b"P5" => (false, 1),
        b"P6" => (false, 3),
        _ => {
            return Err(Error::Format(
                "unsupported magic (want P2, P3, P5 or P6)".into(),
            ))
        }
    };
    let mut lx = Lexer { b: bytes, pos: 2 };
    let width = lx.number("width")?;
    let height = lx.number("height")?;
    let maxval = lx.number("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Format(format!(
            "bad dimensions {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} outside 1..=255"
        )));
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("raster size overflows".into()))?;
    let maxval8 = maxval as u8;
    let data = if plain {
        let mut data = Vec::new();
        for _ in 0..need {
            let v = lx.number("sample")?;
            if v > maxval {
                return Err(Error::Format(format!(
                    "sample {v} exceeds maxval {maxval}"
                )));
            }
            data.push(v as u8);
        }
        lx.expect_end()?;
        data
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        if lx.pos >= bytes.len() || !is_space(bytes[lx.pos]) {
            return Err(Error::Format(format!(
                "expected whitespace before raster at byte {}",
                lx.pos
            )));
        }
        let raster = &bytes[lx.pos + 1..];
        if raster.len() < need {
            return Err(Error::Format(format!(
                "raster holds {} of {need} bytes",
                raster.len()
            )));
        }
        if raster.len() > need {
            return Err(Error::Format(format!(
                "trailing data at byte {}",
                lx.pos + 1 + need
            )));
        }
        if let Some(i) = raster.iter().position(|&v| v > maxval8) {
            return Err(Error::Format(format!(
                "sample {} exceeds maxval {maxval}",
                raster[i]
            )));
        }
        raster.to_vec()
    };
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval8,
        data,
    })
}

/// Raw encoding: P5 for one channel, P6 for three.
pub fn encode_pnm(img: &PnmImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => shape_err!("cannot encode {c}-channel image"),
    };
    if img.data.len() != img.width * img.height * img.channels {
        shape_err!(
            "raster holds {} samples for {}x{}x{}",
            img.data.len(),
            img.width,
            img.height,
            img.channels
        );
    }
    if img.maxval == 0 {
        shape_err!("maxval must be at least 1");
    }
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    Ok(out)
}
