//! Frame sampling, optical flow against the first sampled frame, and
//! validation of precomputed flow.

use rayon::prelude::*;

use crate::data_model::{validate_flow_tensor, Dims, FlowSequence};
use crate::error::{MednError, Result};
use crate::tensor::Tensor;

/// `T` frame indices spread evenly over `0..interval_length`, rounding half
/// up; indices repeat when the interval is shorter than `T`.
pub fn uniform_sample(interval_length: usize, t: usize) -> Vec<usize> {
    assert!(
        interval_length >= 1 && t >= 2,
        "need interval_length >= 1 and T >= 2"
    );
    let span = interval_length - 1;
    let denom = 2 * (t - 1);
    (0..t).map(|i| (2 * i * span + (t - 1)) / denom).collect()
}

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with clamped borders.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> GrayImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(self.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5));
            }
        }
        GrayImage::new(height, width, data)
    }

    fn downsample(&self) -> GrayImage {
        let (h, w) = (self.height.div_ceil(2), self.width.div_ceil(2));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let ys = [2 * y, (2 * y + 1).min(self.height - 1)];
                let xs = [2 * x, (2 * x + 1).min(self.width - 1)];
                let s: f64 = ys
                    .iter()
                    .flat_map(|&yy| xs.iter().map(move |&xx| (yy, xx)))
                    .map(|(yy, xx)| self.at(yy, xx))
                    .sum();
                data.push(s / 4.0);
            }
        }
        GrayImage::new(h, w, data)
    }
}

/// Aligned frames `[T, C, H0, W0]` with `C` of 1 (gray) or 3 (RGB), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence(Tensor);

impl FrameSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] < 2 || !(s[1] == 1 || s[1] == 3) {
            return Err(MednError::ShapeMismatch(format!(
                "frames must be [T >= 2, 1 or 3, H, W], got {s:?}"
            )));
        }
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Keeps the frames at `indices`.
    pub fn select(&self, indices: &[usize]) -> FrameSequence {
        let plane: usize = self.0.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.0.data()[i * plane..(i + 1) * plane]);
        }
        let mut shape = self.0.shape().to_vec();
        shape[0] = indices.len();
        FrameSequence(Tensor::from_vec(&shape, data).unwrap())
    }

    /// Luma of frame `t`.
    pub fn gray(&self, t: usize) -> GrayImage {
        let s = self.0.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        let base = t * c * plane;
        let d = self.0.data();
        let data = if c == 1 {
            d[base..base + plane].to_vec()
        } else {
            (0..plane)
                .map(|i| {
                    0.299 * d[base + i]
                        + 0.587 * d[base + plane + i]
                        + 0.114 * d[base + 2 * plane + i]
                })
                .collect()
        };
        GrayImage::new(h, w, data)
    }
}

/// Dense displacement `(u, v)` such that `first(x) ≈ other(x + (u, v))`.
pub trait FlowEstimator: Sync {
    fn estimate(
        &self,
        first: &GrayImage,
        other: &GrayImage,
    ) -> std::result::Result<[Vec<f64>; 2], String>;
}

/// Coarse-to-fine Horn–Schunck with image warping. Adequate for smoke runs
/// and small displacements; not a substitute for a TV-L1 solver.
#[derive(Clone, Debug)]
pub struct HornSchunck {
    pub alpha: f64,
    pub iterations: usize,
    pub warps: usize,
    pub min_size: usize,
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            iterations: 80,
            warps: 3,
            min_size: 8,
        }
    }
}

fn neighbour_mean(f: &[f64], h: usize, w: usize, y: usize, x: usize) -> f64 {
    let up = f[y.saturating_sub(1) * w + x];
    let down = f[(y + 1).min(h - 1) * w + x];
    let left = f[y * w + x.saturating_sub(1)];
    let right = f[y * w + (x + 1).min(w - 1)];
    0.25 * (up + down + left + right)
}

fn upsample_flow(f: &[f64], from: (usize, usize), to: (usize, usize), scale: f64) -> Vec<f64> {
    let img = GrayImage::new(from.0, from.1, f.to_vec()).resize(to.0, to.1);
    img.data.into_iter().map(|v| v * scale).collect()
}

impl HornSchunck {
    fn refine(&self, i0: &GrayImage, i1: &GrayImage, u: &mut [f64], v: &mut [f64]) {
        let (h, w) = (i0.height, i0.width);
        let grad = |img: &GrayImage, y: usize, x: usize| {
            let gx = 0.5 * (img.at(y, (x + 1).min(w - 1)) - img.at(y, x.saturating_sub(1)));
            let gy = 0.5 * (img.at((y + 1).min(h - 1), x) - img.at(y.saturating_sub(1), x));
            (gx, gy)
        };
        let a2 = self.alpha * self.alpha;
        for _ in 0..self.warps {
            let mut warped = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    warped[y * w + x] = i1.sample(y as f64 + v[y * w + x], x as f64 + u[y * w + x]);
                }
            }
            let warped = GrayImage::new(h, w, warped);
            let mut ix = vec![0.0; h * w];
            let mut iy = vec![0.0; h * w];
            let mut it = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let (gx0, gy0) = grad(i0, y, x);
                    let (gx1, gy1) = grad(&warped, y, x);
                    let k = y * w + x;
                    ix[k] = 0.5 * (gx0 + gx1);
                    iy[k] = 0.5 * (gy0 + gy1);
                    it[k] = warped.data[k] - i0.data[k];
                }
            }
            let mut du = vec![0.0; h * w];
            let mut dv = vec![0.0; h * w];
            // Smoothness acts on the total flow, so the increment is relaxed
            // towards the neighbourhood mean of u + du.
            for _ in 0..self.iterations {
                let mut nu = vec![0.0; h * w];
                let mut nv = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let k = y * w + x;
                        let ubar =
                            neighbour_mean(u, h, w, y, x) + neighbour_mean(&du, h, w, y, x) - u[k];
                        let vbar =
                            neighbour_mean(v, h, w, y, x) + neighbour_mean(&dv, h, w, y, x) - v[k];
                        let r = (ix[k] * ubar + iy[k] * vbar + it[k])
                            / (a2 + ix[k] * ix[k] + iy[k] * iy[k]);
                        nu[k] = ubar - ix[k] * r;
                        nv[k] = vbar - iy[k] * r;
                    }
                }
                du = nu;
                dv = nv;
            }
            for k in 0..h * w {
                u[k] += du[k];
                v[k] += dv[k];
            }
        }
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate(
        &self,
        first: &GrayImage,
        other: &GrayImage,
    ) -> std::result::Result<[Vec<f64>; 2], String> {
        if first.height != other.height || first.width != other.width {
            return Err(format!(
                "frame sizes differ: {}x{} vs {}x{}",
                first.height, first.width, other.height, other.width
            ));
        }
        let mut pyramid = vec![(first.clone(), other.clone())];
        loop {
            let (a, b) = pyramid.last().unwrap();
            if a.height.min(a.width) / 2 < self.min_size.max(2) {
                break;
            }
            let next = (a.downsample(), b.downsample());
            pyramid.push(next);
        }
        let (top, _) = pyramid.last().unwrap();
        let mut size = (top.height, top.width);
        let mut u = vec![0.0; size.0 * size.1];
        let mut v = vec![0.0; size.0 * size.1];
        for (a, b) in pyramid.iter().rev() {
            let target = (a.height, a.width);
            if target != size {
                u = upsample_flow(&u, size, target, target.1 as f64 / size.1 as f64);
                v = upsample_flow(&v, size, target, target.0 as f64 / size.0 as f64);
                size = target;
            }
            self.refine(a, b, &mut u, &mut v);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err("non-finite flow".into());
        }
        Ok([u, v])
    }
}

/// Flow of every frame after the first against the first, each frame
/// converted to gray and resized to `height x width` first.
pub fn flow_vs_first(
    frames: &FrameSequence,
    estimator: &dyn FlowEstimator,
    height: usize,
    width: usize,
) -> Result<FlowSequence> {
    let first = frames.gray(0).resize(height, width);
    let steps = frames.len() - 1;
    let mut data = Vec::with_capacity(steps * 2 * height * width);
    for t in 1..frames.len() {
        let other = frames.gray(t).resize(height, width);
        let [u, v] = estimator
            .estimate(&first, &other)
            .map_err(|message| MednError::EstimatorFailure { frame: t, message })?;
        data.extend(u);
        data.extend(v);
    }
    FlowSequence::new(Tensor::from_vec(&[steps, 2, height, width], data)?)
}

/// Samples `dims.t` frames from the interval and computes their flow.
pub fn preprocess_frames(
    frames: &FrameSequence,
    estimator: &dyn FlowEstimator,
    dims: &Dims,
) -> Result<FlowSequence> {
    let sampled = frames.select(&uniform_sample(frames.len(), dims.t));
    flow_vs_first(&sampled, estimator, dims.h, dims.w)
}

/// Runs [`preprocess_frames`] over many samples; output order follows input order.
pub fn preprocess_batch(
    inputs: &[FrameSequence],
    estimator: &dyn FlowEstimator,
    dims: &Dims,
) -> Vec<Result<FlowSequence>> {
    inputs
        .par_iter()
        .map(|f| preprocess_frames(f, estimator, dims))
        .collect()
}

/// Checks a precomputed flow tensor against the manifest dims.
pub fn validate_flow(flow: &Tensor, dims: &Dims) -> Result<()> {
    validate_flow_tensor(flow, dims)
}
