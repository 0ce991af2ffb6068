//! Hard and soft vehicle masks.
//!
//! The soft mask weights ego pixels by a Gaussian around the ego centroid,
//! adds the surrounding-vehicle pixels, and attenuates everything with a
//! longitudinal Gaussian centred on the ego column. Both Gaussians are
//! peak-normalised so the composition stays inside `[0,1]` before the final
//! clamp. The result is resampled to the denoiser resolution with a
//! separable Catmull-Rom filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::BevFrame;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("invalid mask parameter: {0}")]
    Param(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskField {
    pub h: usize,
    pub w: usize,
    /// Row-major.
    pub values: Vec<f32>,
}

impl MaskField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.w + col] = v;
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// `(row, col)` of every nonzero entry in raster order.
    pub fn support(&self) -> Vec<(usize, usize)> {
        (0..self.h)
            .flat_map(|r| (0..self.w).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c) != 0.0)
            .collect()
    }

    /// 8-bit grayscale bytes, `floor(v * 255 + 0.5)`.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>, crate::frame::FrameError> {
        crate::frame::encode_png(self.w, self.h, png::ColorType::Grayscale, &self.to_gray_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Hard,
    Soft,
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = MaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            "none" => Ok(MaskMode::None),
            other => Err(MaskError::Param(format!("unknown mask mode {other:?}"))),
        }
    }
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Hard => "hard",
            MaskMode::Soft => "soft",
            MaskMode::None => "none",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            MaskMode::None => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub mode: MaskMode,
    pub w_ego: f64,
    pub w_surr: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Fraction of the frame width.
    pub sigma_global: f64,
    pub green_margin: f32,
    pub blue_margin: f32,
    pub target_h: usize,
    pub target_w: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            mode: MaskMode::Soft,
            w_ego: 0.8,
            w_surr: 1.0,
            sigma_x: 6.0,
            sigma_y: 3.0,
            sigma_global: 0.25,
            green_margin: 0.2,
            blue_margin: 0.2,
            target_h: 32,
            target_w: 64,
        }
    }
}

impl MaskParams {
    pub fn with_mode(mode: MaskMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let positive = [
            ("w_ego", self.w_ego),
            ("w_surr", self.w_surr),
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_global", self.sigma_global),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MaskError::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.target_h < 1 || self.target_w < 1 {
            return Err(MaskError::Param("target dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoCentroid {
    pub x_ego: f64,
    pub y_ego: f64,
    pub found: bool,
}

pub fn classify_colors(frame: &BevFrame, params: &MaskParams) -> (MaskField, MaskField) {
    let mut ego = MaskField::zeros(frame.h, frame.w);
    let mut surr = MaskField::zeros(frame.h, frame.w);
    for r in 0..frame.h {
        for c in 0..frame.w {
            let [red, g, b] = frame.rgb(r, c);
            if g - red.max(b) > params.green_margin {
                ego.set(r, c, 1.0);
            }
            if b - red.max(g) > params.blue_margin {
                surr.set(r, c, 1.0);
            }
        }
    }
    (ego, surr)
}

pub fn hard_mask(m_ego: &MaskField, m_surr: &MaskField) -> Result<MaskField, MaskError> {
    if (m_ego.h, m_ego.w) != (m_surr.h, m_surr.w) {
        return Err(MaskError::Shape((m_ego.h, m_ego.w), (m_surr.h, m_surr.w)));
    }
    let values = m_ego
        .values
        .iter()
        .zip(&m_surr.values)
        .map(|(a, b)| if *a != 0.0 || *b != 0.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(MaskField {
        h: m_ego.h,
        w: m_ego.w,
        values,
    })
}

pub fn ego_centroid(m_ego: &MaskField) -> EgoCentroid {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (r, c) in m_ego.support() {
        sx += c as f64;
        sy += r as f64;
        n += 1;
    }
    if n == 0 {
        return EgoCentroid {
            x_ego: 0.0,
            y_ego: 0.0,
            found: false,
        };
    }
    EgoCentroid {
        x_ego: sx / n as f64,
        y_ego: sy / n as f64,
        found: true,
    }
}

pub fn ego_gaussian(
    centroid: &EgoCentroid,
    sigma_x: f64,
    sigma_y: f64,
    h: usize,
    w: usize,
) -> Result<MaskField, MaskError> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(MaskError::Param("ego gaussian sigmas must be positive".into()));
    }
    let mut out = MaskField::zeros(h, w);
    for r in 0..h {
        let dy = r as f64 - centroid.y_ego;
        let ey = dy * dy / (2.0 * sigma_y * sigma_y);
        for c in 0..w {
            let dx = c as f64 - centroid.x_ego;
            let ex = dx * dx / (2.0 * sigma_x * sigma_x);
            out.set(r, c, (-(ex + ey)).exp() as f32);
        }
    }
    Ok(out)
}

pub fn global_gaussian(
    x_ego: f64,
    sigma_global: f64,
    h: usize,
    w: usize,
) -> Result<MaskField, MaskError> {
    if !(sigma_global > 0.0) {
        return Err(MaskError::Param("sigma_global must be positive".into()));
    }
    let s = sigma_global * w as f64;
    let row: Vec<f32> = (0..w)
        .map(|c| {
            let dx = c as f64 - x_ego;
            (-(dx * dx) / (2.0 * s * s)).exp() as f32
        })
        .collect();
    let mut values = Vec::with_capacity(h * w);
    for _ in 0..h {
        values.extend_from_slice(&row);
    }
    Ok(MaskField { h, w, values })
}

/// Where the ego is assumed to be when it is not detected.
pub fn fallback_centroid(h: usize, w: usize) -> EgoCentroid {
    EgoCentroid {
        x_ego: (w / 4) as f64,
        y_ego: (h / 2) as f64,
        found: false,
    }
}

/// Soft mask at frame resolution together with the centroid it was built
/// around. When the ego is missing, `prev` is reused, else the frame-centre
/// fallback.
pub fn soft_mask_with_fallback(
    frame: &BevFrame,
    params: &MaskParams,
    prev: Option<EgoCentroid>,
) -> Result<(MaskField, EgoCentroid), MaskError> {
    params.validate()?;
    let (m_ego, m_surr) = classify_colors(frame, params);
    let detected = ego_centroid(&m_ego);
    let centre = if detected.found {
        detected
    } else {
        prev.map(|p| EgoCentroid { found: false, ..p })
            .unwrap_or_else(|| fallback_centroid(frame.h, frame.w))
    };
    let n_ego = ego_gaussian(&centre, params.sigma_x, params.sigma_y, frame.h, frame.w)?;
    let n_global = global_gaussian(centre.x_ego, params.sigma_global, frame.h, frame.w)?;
    let values = (0..frame.h * frame.w)
        .map(|i| {
            let v = (params.w_ego * m_ego.values[i] as f64 * n_ego.values[i] as f64
                + params.w_surr * m_surr.values[i] as f64)
                * n_global.values[i] as f64;
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((
        MaskField {
            h: frame.h,
            w: frame.w,
            values,
        },
        centre,
    ))
}

pub fn soft_mask(frame: &BevFrame, params: &MaskParams) -> Result<MaskField, MaskError> {
    soft_mask_with_fallback(frame, params, None).map(|(m, _)| m)
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for one output coordinate: half-pixel
/// centred mapping, four taps, indices clamped to the border.
pub fn cubic_taps(out_index: usize, src_len: usize, dst_len: usize) -> [(usize, f64); 4] {
    let scale = src_len as f64 / dst_len as f64;
    let s = (out_index as f64 + 0.5) * scale - 0.5;
    let base = s.floor();
    let mut taps = [(0usize, 0.0f64); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let j = base as i64 - 1 + k as i64;
        let idx = j.clamp(0, src_len as i64 - 1) as usize;
        *tap = (idx, cubic_kernel(s - j as f64));
    }
    taps
}

pub fn downsample_bicubic(
    mask: &MaskField,
    target_h: usize,
    target_w: usize,
) -> Result<MaskField, MaskError> {
    if target_h < 1 || target_w < 1 {
        return Err(MaskError::Param("target dims must be >= 1".into()));
    }
    if target_h > mask.h || target_w > mask.w {
        return Err(MaskError::Param(format!(
            "target {target_h}x{target_w} exceeds source {}x{}",
            mask.h, mask.w
        )));
    }
    if (target_h, target_w) == (mask.h, mask.w) {
        return Ok(mask.clone());
    }
    // Horizontal pass.
    let col_taps: Vec<_> = (0..target_w).map(|c| cubic_taps(c, mask.w, target_w)).collect();
    let mut tmp = vec![0.0f64; mask.h * target_w];
    for r in 0..mask.h {
        let src = &mask.values[r * mask.w..(r + 1) * mask.w];
        for (c, taps) in col_taps.iter().enumerate() {
            tmp[r * target_w + c] = taps.iter().map(|&(i, wt)| wt * src[i] as f64).sum();
        }
    }
    // Vertical pass.
    let mut out = MaskField::zeros(target_h, target_w);
    for r in 0..target_h {
        let taps = cubic_taps(r, mask.h, target_h);
        for c in 0..target_w {
            let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * target_w + c]).sum();
            out.set(r, c, v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// Builds the conditioning mask for one frame at the denoiser resolution.
/// Returns `None` in `MaskMode::None`.
pub fn conditioning_mask(
    frame: &BevFrame,
    params: &MaskParams,
    prev: Option<EgoCentroid>,
) -> Result<(Option<MaskField>, Option<EgoCentroid>), MaskError> {
    let (field, centre) = match params.mode {
        MaskMode::None => return Ok((None, prev)),
        MaskMode::Hard => {
            let (e, s) = classify_colors(frame, params);
            let c = ego_centroid(&e);
            (hard_mask(&e, &s)?, if c.found { Some(c) } else { prev })
        }
        MaskMode::Soft => {
            let (m, c) = soft_mask_with_fallback(frame, params, prev)?;
            (m, Some(c))
        }
    };
    let down = downsample_bicubic(&field, params.target_h, params.target_w)?;
    Ok((Some(down), centre))
}
