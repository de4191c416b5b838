use super::{BackboneError, Result, MIN_INPUT_SIZE};
use crate::imaging::IrisCrop;
use crate::tensor::{Real, Tensor3};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// 1-D linear interpolation weights with half-pixel centres.
#[derive(Debug, Clone, PartialEq)]
struct Axis {
    taps: Vec<(usize, usize, f64)>,
}

impl Axis {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

/// Separable bilinear resize from one grid to another, with its adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    rows: Axis,
    cols: Axis,
}

impl ResizePlan {
    pub fn new(in_height: usize, in_width: usize, out_height: usize, out_width: usize) -> Self {
        Self {
            in_height,
            in_width,
            out_height,
            out_width,
            rows: Axis::new(in_height, out_height),
            cols: Axis::new(in_width, out_width),
        }
    }

    pub fn forward(&self, src: &[f64]) -> Vec<f64> {
        assert_eq!(src.len(), self.in_height * self.in_width);
        let mut tmp = vec![0.0; self.in_height * self.out_width];
        for r in 0..self.in_height {
            let row = &src[r * self.in_width..(r + 1) * self.in_width];
            for (c, &(i0, i1, f)) in self.cols.taps.iter().enumerate() {
                tmp[r * self.out_width + c] = row[i0] * (1.0 - f) + row[i1] * f;
            }
        }
        let mut out = vec![0.0; self.out_height * self.out_width];
        for (r, &(i0, i1, f)) in self.rows.taps.iter().enumerate() {
            for c in 0..self.out_width {
                out[r * self.out_width + c] = tmp[i0 * self.out_width + c] * (1.0 - f) + tmp[i1 * self.out_width + c] * f;
            }
        }
        out
    }

    /// Transpose of `forward`.
    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.out_height * self.out_width);
        let mut tmp = vec![0.0; self.in_height * self.out_width];
        for (r, &(i0, i1, f)) in self.rows.taps.iter().enumerate() {
            for c in 0..self.out_width {
                let g = grad[r * self.out_width + c];
                tmp[i0 * self.out_width + c] += g * (1.0 - f);
                tmp[i1 * self.out_width + c] += g * f;
            }
        }
        let mut out = vec![0.0; self.in_height * self.in_width];
        for r in 0..self.in_height {
            for (c, &(i0, i1, f)) in self.cols.taps.iter().enumerate() {
                let g = tmp[r * self.out_width + c];
                out[r * self.in_width + i0] += g * (1.0 - f);
                out[r * self.in_width + i1] += g * f;
            }
        }
        out
    }
}

/// Maps a grayscale crop in `[0, 1]` to a normalised `3 × S × S` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPipeline {
    resize: ResizePlan,
}

impl InputPipeline {
    pub fn new(crop_height: usize, crop_width: usize, size: usize) -> Result<Self> {
        if crop_height == 0 || crop_width == 0 {
            return Err(BackboneError::EmptyCrop);
        }
        if size < MIN_INPUT_SIZE {
            return Err(BackboneError::InputTooSmall(size));
        }
        Ok(Self { resize: ResizePlan::new(crop_height, crop_width, size, size) })
    }

    pub fn size(&self) -> usize {
        self.resize.out_height
    }

    pub fn forward<T: Real>(&self, pixels: &[f64]) -> Tensor3<T> {
        let s = self.size();
        let plane = self.resize.forward(pixels);
        let mut data = Vec::with_capacity(3 * s * s);
        for (mean, std) in IMAGENET_MEAN.iter().zip(IMAGENET_STD) {
            data.extend(plane.iter().map(|&v| T::lit((v - mean) / std)));
        }
        Tensor3::from_vec(3, s, s, data)
    }

    /// Gradient with respect to the crop pixels given one for the network input.
    pub fn backward<T: Real>(&self, grad: &Tensor3<T>) -> Vec<f64> {
        let n = grad.plane_len();
        let mut plane = vec![0.0; n];
        for (c, std) in IMAGENET_STD.iter().enumerate() {
            for (p, g) in plane.iter_mut().zip(grad.plane(c)) {
                *p += g.as_f64() / std;
            }
        }
        self.resize.backward(&plane)
    }
}

/// Resizes, replicates and normalises a crop for the backbone.
pub fn prepare_input<T: Real>(crop: &IrisCrop, size: usize) -> Result<Tensor3<T>> {
    Ok(InputPipeline::new(crop.height, crop.width, size)?.forward(&crop.pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_size_resize_is_identity() {
        let plan = ResizePlan::new(7, 9, 7, 9);
        let x: Vec<f64> = (0..63).map(|v| v as f64 * 0.1).collect();
        assert_eq!(plan.forward(&x), x);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ih, iw, oh, ow) in &[(13, 29, 32, 32), (80, 50, 32, 32), (5, 5, 9, 3)] {
            let plan = ResizePlan::new(ih, iw, oh, ow);
            let x: Vec<f64> = (0..ih * iw).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..oh * ow).map(|_| rng.random()).collect();
            let lhs: f64 = plan.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(plan.backward(&y)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_normalises_per_channel() {
        let pipe = InputPipeline::new(10, 20, 32).unwrap();
        let t: Tensor3<f64> = pipe.forward(&vec![0.5; 200]);
        for c in 0..3 {
            let expect = (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!(t.plane(c).iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn pipeline_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pipe = InputPipeline::new(21, 40, 32).unwrap();
        let x: Vec<f64> = (0..21 * 40).map(|_| rng.random()).collect();
        let g = Tensor3::from_vec(3, 32, 32, (0..3 * 1024).map(|_| rng.random::<f64>()).collect());
        let zero: Tensor3<f64> = pipe.forward(&vec![0.0; 840]);
        let fx: Tensor3<f64> = pipe.forward(&x);
        let lhs: f64 = fx.data.iter().zip(&zero.data).zip(&g.data).map(|((a, z), b)| (a - z) * b).sum();
        let rhs: f64 = x.iter().zip(pipe.backward(&g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(matches!(InputPipeline::new(10, 10, 16), Err(BackboneError::InputTooSmall(16))));
        assert!(matches!(InputPipeline::new(0, 10, 64), Err(BackboneError::EmptyCrop)));
    }
}
