//! RGB raster in `[0,1]`, stored channel-planar so it can be copied straight
//! into the denoiser's NCHW input.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Layout(String),
}

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevFrame {
    pub h: usize,
    pub w: usize,
    /// `[channel][row][col]`.
    pub data: Vec<f32>,
}

impl BevFrame {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; CHANNELS * h * w],
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        Self { h, w, data }
    }

    pub fn from_planar(h: usize, w: usize, data: Vec<f32>) -> Result<Self, FrameError> {
        if data.len() != CHANNELS * h * w {
            return Err(FrameError::Shape {
                expected: (h, w, CHANNELS),
                got: (h, w, data.len() / (h * w).max(1)),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[ch * self.h * self.w + row * self.w + col]
    }

    #[inline]
    pub fn rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let i = row * self.w + col;
        let n = self.h * self.w;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    #[inline]
    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = row * self.w + col;
        let n = self.h * self.w;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Interleaved HWC bytes, `round(v * 255)` after clamping.
    pub fn to_u8_hwc(&self) -> Vec<u8> {
        let n = self.plane_len();
        let mut out = Vec::with_capacity(n * CHANNELS);
        for i in 0..n {
            for c in 0..CHANNELS {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_u8_hwc(h: usize, w: usize, bytes: &[u8]) -> Result<Self, FrameError> {
        let n = h * w;
        if bytes.len() != n * CHANNELS {
            return Err(FrameError::Shape {
                expected: (h, w, CHANNELS),
                got: (h, w, bytes.len() / n.max(1)),
            });
        }
        let mut data = vec![0.0; n * CHANNELS];
        for (i, px) in bytes.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { h, w, data })
    }

    /// The frame after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self::from_u8_hwc(self.h, self.w, &self.to_u8_hwc()).expect("shape preserved")
    }

    pub fn to_png(&self) -> Result<Vec<u8>, FrameError> {
        encode_png(self.w, self.h, png::ColorType::Rgb, &self.to_u8_hwc())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, FrameError> {
        let (w, h, color, buf) = decode_png(bytes)?;
        if color != png::ColorType::Rgb {
            return Err(FrameError::Layout(format!("{color:?}")));
        }
        Self::from_u8_hwc(h, w, &buf)
    }

    pub fn mse(&self, other: &BevFrame) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        sum / self.data.len() as f64
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn encode_png(
    w: usize,
    h: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(bytes)?;
    }
    Ok(out)
}

pub(crate) fn decode_png(bytes: &[u8]) -> Result<(usize, usize, png::ColorType, Vec<u8>), FrameError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(FrameError::Layout(format!("bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_quantized_frames() {
        let mut f = BevFrame::zeros(4, 6);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        let png = f.to_png().unwrap();
        let back = BevFrame::from_png(&png).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn hwc_layout() {
        let mut f = BevFrame::zeros(2, 2);
        f.set_rgb(1, 0, [1.0, 0.0, 0.5]);
        let b = f.to_u8_hwc();
        assert_eq!(&b[6..9], &[255, 0, 128]);
    }
}
