use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Pixel video, `[frames, 3, height, width]`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * 3 * height * width {
            return Err(shape_err!("video {frames}x3x{height}x{width} needs {} values, got {}", frames * 3 * height * width, data.len()));
        }
        Ok(Video { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Video { frames, height, width, data: vec![0.0; frames * 3 * height * width] }
    }

    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Frames `start..end` as a new video.
    pub fn slice(&self, start: usize, end: usize) -> Video {
        let n = self.frame_len();
        Video { frames: end - start, height: self.height, width: self.width, data: self.data[start * n..end * n].to_vec() }
    }

    pub fn concat(parts: &[Video]) -> Result<Video> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero videos"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(shape_err!("video concat size mismatch"));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(Video { frames, height: first.height, width: first.width, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, 3, self.height, self.width], self.data.clone()).expect("video shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Video> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err!("expected [T,3,H,W], got {s:?}"));
        }
        Video::new(s[0], s[2], s[3], t.to_vec())
    }

    /// Interleaved RGB8 rows per frame, clamped to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for t in 0..self.frames {
            let f = self.frame(t);
            for p in 0..hw {
                for c in 0..3 {
                    out.push(quantize(f[c * hw + p]));
                }
            }
        }
        out
    }

    pub fn from_rgb8(frames: usize, height: usize, width: usize, rgb: &[u8]) -> Result<Video> {
        let hw = height * width;
        if rgb.len() != frames * hw * 3 {
            return Err(shape_err!("rgb payload of {} bytes for {frames}x{height}x{width}", rgb.len()));
        }
        let mut v = Video::zeros(frames, height, width);
        for t in 0..frames {
            let f = v.frame_mut(t);
            for p in 0..hw {
                for c in 0..3 {
                    f[c * hw + p] = rgb[(t * hw + p) * 3 + c] as f32 / 255.0;
                }
            }
        }
        Ok(v)
    }

    /// Mean of `|x|` over one frame's values.
    pub fn frame_abs_mean(&self, t: usize) -> f32 {
        let f = self.frame(t);
        f.iter().map(|v| v.abs()).sum::<f32>() / f.len() as f32
    }

    pub fn psnr(&self, other: &Video) -> f32 {
        let mse: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / self.data.len() as f64;
        (10.0 * (1.0 / mse.max(1e-12)).log10()) as f32
    }

    /// Luma plane of frame `t`, `[height * width]`.
    pub fn luma(&self, t: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        let f = self.frame(t);
        (0..hw).map(|p| 0.299 * f[p] + 0.587 * f[hw + p] + 0.114 * f[2 * hw + p]).collect()
    }
}

impl Video {
    /// Values snapped to the RGB8 grid.
    pub fn quantized(&self) -> Video {
        Video::from_rgb8(self.frames, self.height, self.width, &self.to_rgb8()).expect("same geometry")
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
