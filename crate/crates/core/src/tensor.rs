//! Dense channel-major pixel arrays.
//!
//! Latent frames, RGB previews and decoded images all share this in-memory
//! layout: `data[c * h * w + y * w + x]`, row-major within each channel.

use crate::error::{Error, Result};

/// A `(C, H, W)` array of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Chw {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Chw {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape {
                context: "Chw::new".into(),
                expected: format!("{expected} values for ({channels},{height},{width})"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// One channel as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize of every channel to `(out_h, out_w)`.
    ///
    /// Uses half-pixel centers, clamped at the borders. Resizing to the
    /// input size reproduces the input exactly.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Chw {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let mut out = Chw::zeros(self.channels, out_h, out_w);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        for c in 0..self.channels {
            for oy in 0..out_h {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
                let y0 = (fy.floor() as usize).min(self.height - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for ox in 0..out_w {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                    let x0 = (fx.floor() as usize).min(self.width - 1);
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let top =
                        self.get(c, y0, x0) as f64 * (1.0 - wx) + self.get(c, y0, x1) as f64 * wx;
                    let bot =
                        self.get(c, y1, x0) as f64 * (1.0 - wx) + self.get(c, y1, x1) as f64 * wx;
                    out.set(c, oy, ox, (top * (1.0 - wy) + bot * wy) as f32);
                }
            }
        }
        out
    }

    /// Mean value of every channel, in channel order.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                let ch = self.channel(c);
                ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64
            })
            .collect()
    }
}

/// An RGB image in `[0, 1]`, stored channel-major. Previews produced from
/// latents and decoded final images both use this shape.
pub type RgbImage = Chw;
