//! Frozen image feature extractors for the appearance-based estimator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use super::GazeError;
use crate::backbone::weights::read_values;
use crate::backbone::InputPipeline;
use crate::imaging::EyeImage;
use crate::tensor::{max_pool, Conv2d, Tensor3};

fn kaiming(conv: &mut Conv2d<f32>, rng: &mut ChaCha8Rng) {
    let std = (2.0 / (conv.in_channels * conv.kernel * conv.kernel) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    for w in &mut conv.weight {
        *w = normal.sample(rng) as f32;
    }
    conv.bias = Some(vec![0.0; conv.out_channels]);
}

fn relu(mut t: Tensor3<f32>) -> Tensor3<f32> {
    t.relu_in_place();
    t
}

fn hash_convs<'a>(convs: impl Iterator<Item = &'a Conv2d<f32>>) -> String {
    let mut h = Sha256::new();
    for c in convs {
        for v in c.weight.iter().chain(c.bias.iter().flatten()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn image_plane(image: &EyeImage) -> Vec<f64> {
    image.pixels().iter().map(|&p| p as f64 / 255.0).collect()
}

/// Four stride-2 3×3 convolutions on a grey square input, average-pooled
/// onto a 4×4 grid so the descriptor keeps coarse position.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvNet {
    pub input_size: usize,
    convs: Vec<Conv2d<f32>>,
}

const SMALL_WIDTHS: [usize; 5] = [1, 16, 32, 64, 64];
const SMALL_GRID: usize = 4;

impl SmallConvNet {
    pub fn seeded(seed: u64, input_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, &["small-conv-init"]));
        let convs = SMALL_WIDTHS
            .windows(2)
            .map(|w| {
                let mut c = Conv2d::new(w[0], w[1], 3, 2, 1);
                kaiming(&mut c, &mut rng);
                c
            })
            .collect();
        Self { input_size: input_size.max(32), convs }
    }

    pub fn dim(&self) -> usize {
        SMALL_WIDTHS[SMALL_WIDTHS.len() - 1] * SMALL_GRID * SMALL_GRID
    }

    pub fn features(&self, image: &EyeImage) -> Vec<f32> {
        let s = self.input_size;
        let plan = crate::backbone::ResizePlan::new(image.height(), image.width(), s, s);
        let plane: Vec<f32> = plan.forward(&image_plane(image)).into_iter().map(|v| ((v - 0.5) / 0.25) as f32).collect();
        let mut x = Tensor3::from_vec(1, s, s, plane);
        for c in &self.convs {
            x = relu(c.forward(&x));
        }
        grid_pool(&x, SMALL_GRID)
    }

    pub fn checksum(&self) -> String {
        hash_convs(self.convs.iter())
    }
}

/// Mean over each cell of a `grid × grid` partition (cells may be empty on
/// tiny maps and then contribute 0).
fn grid_pool(x: &Tensor3<f32>, grid: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.channels * grid * grid);
    for c in 0..x.channels {
        let p = x.plane(c);
        for gy in 0..grid {
            for gx in 0..grid {
                let (y0, y1) = (gy * x.height / grid, (gy + 1) * x.height / grid);
                let (x0, x1) = (gx * x.width / grid, (gx + 1) * x.width / grid);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        sum += p[y * x.width + xx];
                    }
                }
                let n = (y1 - y0) * (x1 - x0);
                out.push(if n == 0 { 0.0 } else { sum / n as f32 });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct Bottleneck {
    reduce: Conv2d<f32>,
    spatial: Conv2d<f32>,
    expand: Conv2d<f32>,
    shortcut: Option<Conv2d<f32>>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor3<f32>) -> Tensor3<f32> {
        let h = relu(self.reduce.forward(x));
        let h = relu(self.spatial.forward(&h));
        let mut out = self.expand.forward(&h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        for (o, s) in out.data.iter_mut().zip(&skip.data) {
            *o += s;
        }
        relu(out)
    }
}

/// Block counts and bottleneck widths of the 50-layer residual network.
const RESNET50_STAGES: [(usize, usize); 4] = [(3, 64), (4, 128), (6, 256), (3, 512)];
const BN_EPS: f64 = 1e-5;
pub const RESNET50_DIM: usize = 2048;

/// 50-layer residual network with batch norm folded into the convolutions,
/// ending in global average pooling. Parameters follow torchvision's names.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNet50 {
    pub input_size: usize,
    stem: Conv2d<f32>,
    blocks: Vec<Bottleneck>,
}

/// `(name prefix, conv, bn prefix)` for every convolution in order, with the
/// conv shape.
fn resnet_layout() -> Vec<(String, String, [usize; 4], usize, usize)> {
    let mut out = vec![("conv1".to_string(), "bn1".to_string(), [64, 3, 7, 7], 2, 3)];
    let mut in_ch = 64;
    for (stage, &(blocks, width)) in RESNET50_STAGES.iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", stage + 1);
            out.push((format!("{p}.conv1"), format!("{p}.bn1"), [width, in_ch, 1, 1], 1, 0));
            out.push((format!("{p}.conv2"), format!("{p}.bn2"), [width, width, 3, 3], stride, 1));
            out.push((format!("{p}.conv3"), format!("{p}.bn3"), [width * 4, width, 1, 1], 1, 0));
            if b == 0 {
                out.push((format!("{p}.downsample.0"), format!("{p}.downsample.1"), [width * 4, in_ch, 1, 1], stride, 0));
            }
            in_ch = width * 4;
        }
    }
    out
}

impl ResNet50 {
    fn assemble(mut convs: Vec<Conv2d<f32>>, input_size: usize) -> Self {
        convs.reverse();
        let stem = convs.pop().expect("stem");
        let mut blocks = Vec::new();
        for (stage, &(n, _)) in RESNET50_STAGES.iter().enumerate() {
            let _ = stage;
            for b in 0..n {
                let reduce = convs.pop().unwrap();
                let spatial = convs.pop().unwrap();
                let expand = convs.pop().unwrap();
                let shortcut = (b == 0).then(|| convs.pop().unwrap());
                blocks.push(Bottleneck { reduce, spatial, expand, shortcut });
            }
        }
        Self { input_size, stem, blocks }
    }

    /// He-initialised weights with identity batch norm; only useful for
    /// shape checks, since the descriptor is meant to be pre-trained.
    pub fn seeded(seed: u64, input_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, &["resnet50-init"]));
        let convs = resnet_layout()
            .into_iter()
            .map(|(_, _, [o, i, k, _], stride, pad)| {
                let mut c = Conv2d::new(i, o, k, stride, pad);
                kaiming(&mut c, &mut rng);
                c
            })
            .collect();
        Self::assemble(convs, input_size)
    }

    /// Builds the network from a parameter lookup returning `None` for
    /// absent tensors or wrong shapes; every problem is reported.
    pub fn from_lookup(mut get: impl FnMut(&str, &[usize]) -> Option<Vec<f32>>, input_size: usize) -> Result<Self, Vec<String>> {
        let mut missing = Vec::new();
        let mut convs = Vec::new();
        for (conv_name, bn_name, shape, stride, pad) in resnet_layout() {
            let mut c = Conv2d::new(shape[1], shape[0], shape[2], stride, pad);
            let mut fetch = |name: String, shape: &[usize]| {
                let v = get(&name, shape);
                if v.is_none() {
                    missing.push(format!("{name} {shape:?}"));
                }
                v
            };
            let w = fetch(format!("{conv_name}.weight"), &shape);
            let bn: Vec<Option<Vec<f32>>> =
                ["weight", "bias", "running_mean", "running_var"].iter().map(|p| fetch(format!("{bn_name}.{p}"), &[shape[0]])).collect();
            if let (Some(w), [Some(g), Some(b), Some(m), Some(v)]) = (w, bn.as_slice()) {
                fold_batch_norm(&mut c, &w, g, b, m, v);
            }
            convs.push(c);
        }
        if missing.is_empty() {
            Ok(Self::assemble(convs, input_size))
        } else {
            Err(missing)
        }
    }

    pub fn load(path: &Path, input_size: usize) -> Result<Self, GazeError> {
        let bytes = std::fs::read(path).map_err(|e| GazeError::Weights(format!("{}: {e}", path.display())))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| GazeError::Weights(format!("{}: {e}", path.display())))?;
        Self::from_lookup(
            |name, shape| {
                let view = st.tensor(name).ok()?;
                (view.shape() == shape).then(|| read_values::<f32>(&view)).flatten()
            },
            input_size,
        )
        .map_err(|missing| GazeError::Weights(format!("{}: missing or misshaped tensors: {}", path.display(), missing.join(", "))))
    }

    pub fn dim(&self) -> usize {
        RESNET50_DIM
    }

    pub fn features(&self, image: &EyeImage) -> Vec<f32> {
        let pipeline = InputPipeline::new(image.height(), image.width(), self.input_size).expect("validated sizes");
        let x: Tensor3<f32> = pipeline.forward(&image_plane(image));
        let x = relu(self.stem.forward(&x));
        let mut x = max_pool(&x, 3, 2, 1).output;
        for b in &self.blocks {
            x = b.forward(&x);
        }
        (0..x.channels).map(|c| x.plane(c).iter().sum::<f32>() / x.plane_len().max(1) as f32).collect()
    }

    pub fn checksum(&self) -> String {
        hash_convs(std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [&b.reduce, &b.spatial, &b.expand].into_iter().chain(&b.shortcut))))
    }
}

/// `conv → bn` as a single biased convolution.
fn fold_batch_norm(conv: &mut Conv2d<f32>, weight: &[f32], gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) {
    let per_out = weight.len() / conv.out_channels;
    let mut bias = vec![0.0; conv.out_channels];
    for o in 0..conv.out_channels {
        let scale = gamma[o] as f64 / (var[o] as f64 + BN_EPS).sqrt();
        for i in 0..per_out {
            conv.weight[o * per_out + i] = (weight[o * per_out + i] as f64 * scale) as f32;
        }
        bias[o] = (beta[o] as f64 - mean[o] as f64 * scale) as f32;
    }
    conv.bias = Some(bias);
}

/// The frozen descriptor behind the appearance-based estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum AppearanceNet {
    Small(SmallConvNet),
    ResNet50(Box<ResNet50>),
}

impl AppearanceNet {
    pub fn name(&self) -> &'static str {
        match self {
            AppearanceNet::Small(_) => "small-conv",
            AppearanceNet::ResNet50(_) => "resnet50",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AppearanceNet::Small(n) => n.dim(),
            AppearanceNet::ResNet50(n) => n.dim(),
        }
    }

    pub fn features(&self, image: &EyeImage) -> Vec<f32> {
        match self {
            AppearanceNet::Small(n) => n.features(image),
            AppearanceNet::ResNet50(n) => n.features(image),
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            AppearanceNet::Small(n) => n.checksum(),
            AppearanceNet::ResNet50(n) => n.checksum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye() -> EyeImage {
        let px: Vec<u8> = (0..48 * 80).map(|i| ((i * 37) % 251) as u8).collect();
        EyeImage::new(48, 80, px, "u", "r").unwrap()
    }

    #[test]
    fn small_net_descriptor() {
        let n = SmallConvNet::seeded(1, 64);
        let f = n.features(&eye());
        assert_eq!(f.len(), n.dim());
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(f, SmallConvNet::seeded(1, 64).features(&eye()));
        assert_ne!(n.checksum(), SmallConvNet::seeded(2, 64).checksum());
    }

    #[test]
    fn resnet_layout_and_forward() {
        let layout = resnet_layout();
        // 1 stem + 16 blocks × 3 + 4 projections
        assert_eq!(layout.len(), 53);
        let params: usize = layout.iter().map(|(_, _, s, _, _)| s.iter().product::<usize>()).sum();
        assert_eq!(params, 23_454_912);
        let net = ResNet50::seeded(3, 64);
        let f = net.features(&eye());
        assert_eq!(f.len(), RESNET50_DIM);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lookup_reports_every_missing_tensor() {
        let err = ResNet50::from_lookup(|name, shape| (!name.starts_with("layer4")).then(|| vec![0.5; shape.iter().product()]), 64).unwrap_err();
        // 3 blocks × 3 convs + 1 projection, each with weight + 4 norm tensors
        assert_eq!(err.len(), 10 * 5);
        assert!(err.iter().all(|m| m.starts_with("layer4")));
    }

    #[test]
    fn batch_norm_folding() {
        let mut c = Conv2d::new(1, 2, 1, 1, 0);
        fold_batch_norm(&mut c, &[2.0, 3.0], &[1.0, 2.0], &[0.5, -1.0], &[1.0, 0.0], &[4.0 - 1e-5, 1.0 - 1e-5]);
        // channel 0: (2x - 1) / 2 + 0.5 = x; channel 1: 2 * 3x - 1
        let y = c.forward(&Tensor3::from_vec(1, 1, 1, vec![1.5f32]));
        assert!((y.data[0] - 1.5).abs() < 1e-5 && (y.data[1] - 8.0).abs() < 1e-5);
    }
}
