use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{ActivationTap, BackboneError, Result, DEFAULT_INPUT_SIZE, FINAL_ENCODING, MIN_INPUT_SIZE};
use crate::tensor::{max_pool, max_pool_backward, Conv2d, Real, Tensor3};

/// Output widths of the conv layers of each VGG19 block.
pub const VGG19_BLOCKS: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256, 256], &[512, 512, 512, 512], &[512, 512, 512, 512]];

#[derive(Debug, Clone)]
enum Op<T> {
    ConvRelu { name: String, conv: Conv2d<T> },
    Pool { name: String },
}

impl<T> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::ConvRelu { name, .. } | Op::Pool { name } => name,
        }
    }
}

/// Activations of one tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub tap: String,
    pub values: Tensor3<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.values.channels
    }

    /// Channel-major, then row, then column.
    pub fn flatten(&self) -> &[T] {
        &self.values.data
    }
}

/// A differentiable scalar over tap activations.
pub trait TapObjective<T: Real> {
    /// Taps the objective reads, in the order `evaluate` receives them.
    fn taps(&self) -> Vec<String>;

    /// Value and gradient with respect to each tap (same shapes as `maps`).
    fn evaluate(&self, maps: &[FeatureMap<T>]) -> (f64, Vec<Tensor3<T>>);
}

/// Frozen VGG19 feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone<T = f32> {
    ops: Vec<Op<T>>,
    checksum: String,
    input_size: usize,
}

struct Trace<T> {
    outputs: Vec<Option<Tensor3<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    shapes: Vec<(usize, usize, usize)>,
}

impl<T: Real> Backbone<T> {
    pub(super) fn from_convs(convs: Vec<Conv2d<T>>) -> Self {
        let mut ops = Vec::new();
        let mut it = convs.into_iter();
        for (b, widths) in VGG19_BLOCKS.iter().enumerate() {
            for (l, _) in widths.iter().enumerate() {
                let conv = it.next().expect("16 conv layers");
                ops.push(Op::ConvRelu { name: format!("relu{}_{}", b + 1, l + 1), conv });
            }
            ops.push(Op::Pool { name: format!("pool{}", b + 1) });
        }
        let mut net = Self { ops, checksum: String::new(), input_size: DEFAULT_INPUT_SIZE };
        net.checksum = net.compute_checksum();
        net
    }

    /// Declared `(out, in, 3, 3)` conv shapes in network order.
    pub fn topology() -> Vec<[usize; 4]> {
        let mut shapes = Vec::new();
        let mut cin = 3;
        for widths in VGG19_BLOCKS {
            for &cout in widths {
                shapes.push([cout, cin, 3, 3]);
                cin = cout;
            }
        }
        shapes
    }

    /// Deterministic He-initialised weights (zero biases) for runs without a
    /// pre-trained parameter file.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, &["vgg19-init"]));
        let convs = Self::topology()
            .into_iter()
            .map(|[cout, cin, k, _]| {
                let mut conv = Conv2d::new(cin, cout, k, 1, 1);
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                for w in &mut conv.weight {
                    // round through f32 so every precision shares one checksum
                    *w = T::lit(normal.sample(&mut rng) as f32 as f64);
                }
                conv
            })
            .collect();
        Self::from_convs(convs)
    }

    pub fn with_input_size(mut self, size: usize) -> Result<Self> {
        if size < MIN_INPUT_SIZE {
            return Err(BackboneError::InputTooSmall(size));
        }
        self.input_size = size;
        Ok(self)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// SHA-256 over all parameters as little-endian `f32`, in network order.
    pub fn compute_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for conv in self.convs() {
            for v in conv.weight.iter().chain(conv.bias.iter().flatten()) {
                hasher.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub(super) fn convs(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.ops.iter().filter_map(|op| match op {
            Op::ConvRelu { conv, .. } => Some(conv),
            Op::Pool { .. } => None,
        })
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let convs = self
            .convs()
            .map(|c| Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
                weight: c.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
                bias: c.bias.as_ref().map(|b| b.iter().map(|v| U::lit(v.as_f64())).collect()),
            })
            .collect();
        let mut out = Backbone::<U>::from_convs(convs);
        out.input_size = self.input_size;
        out
    }

    fn resolve(&self, tap: &str) -> Result<usize> {
        let name = if tap == FINAL_ENCODING { "pool5" } else { tap };
        self.ops.iter().position(|op| op.name() == name).ok_or_else(|| BackboneError::UnknownTap(tap.to_string()))
    }

    pub fn has_tap(&self, tap: &str) -> bool {
        self.resolve(tap).is_ok()
    }

    /// Every tap with its shape for a square input of the configured size.
    pub fn taps(&self) -> Vec<ActivationTap> {
        let names: Vec<String> = self.ops.iter().map(|op| op.name().to_string()).chain([FINAL_ENCODING.to_string()]).collect();
        names.iter().map(|n| self.tap_shape(n, self.input_size, self.input_size).expect("known tap")).collect()
    }

    /// Shape of `tap` for an input of `height × width`.
    pub fn tap_shape(&self, tap: &str, height: usize, width: usize) -> Result<ActivationTap> {
        let idx = self.resolve(tap)?;
        let (mut c, mut h, mut w) = (3, height, width);
        for op in &self.ops[..=idx] {
            match op {
                Op::ConvRelu { conv, .. } => c = conv.out_channels,
                Op::Pool { .. } => {
                    h /= 2;
                    w /= 2;
                }
            }
        }
        Ok(ActivationTap { name: tap.to_string(), channels: c, height: h, width: w })
    }

    fn check_input(&self, input: &Tensor3<T>) -> Result<()> {
        if input.channels != 3 {
            return Err(BackboneError::InputChannels(input.channels));
        }
        if input.height < MIN_INPUT_SIZE || input.width < MIN_INPUT_SIZE {
            return Err(BackboneError::InputTooSmall(input.height.min(input.width)));
        }
        Ok(())
    }

    fn run(&self, input: &Tensor3<T>, last: usize, keep: &[bool], record_pools: bool) -> Trace<T> {
        let n = last + 1;
        let mut trace = Trace { outputs: vec![None; n], argmax: vec![None; n], shapes: Vec::with_capacity(n) };
        let mut current: Option<Tensor3<T>> = None;
        for (i, op) in self.ops[..n].iter().enumerate() {
            let x = current.as_ref().unwrap_or(input);
            let out = match op {
                Op::ConvRelu { conv, .. } => {
                    let mut y = conv.forward(x);
                    y.relu_in_place();
                    y
                }
                Op::Pool { .. } => {
                    let pooled = max_pool(x, 2, 2, 0);
                    if record_pools {
                        trace.argmax[i] = Some(pooled.argmax);
                    }
                    pooled.output
                }
            };
            trace.shapes.push(out.shape());
            if let Some(prev) = current.take() {
                if keep[i - 1] {
                    trace.outputs[i - 1] = Some(prev);
                }
            }
            current = Some(out);
        }
        trace.outputs[last] = current;
        trace
    }

    /// Activations at `taps` (returned in the requested order).
    pub fn activations(&self, input: &Tensor3<T>, taps: &[&str]) -> Result<Vec<FeatureMap<T>>> {
        self.check_input(input)?;
        let idx: Vec<usize> = taps.iter().map(|t| self.resolve(t)).collect::<Result<_>>()?;
        let Some(&last) = idx.iter().max() else {
            return Ok(Vec::new());
        };
        let mut keep = vec![false; last + 1];
        for &i in &idx {
            keep[i] = true;
        }
        let trace = self.run(input, last, &keep, false);
        Ok(taps
            .iter()
            .zip(&idx)
            .map(|(t, &i)| FeatureMap { tap: t.to_string(), values: trace.outputs[i].clone().expect("kept") })
            .collect())
    }

    /// Objective value and its gradient with respect to `input`.
    pub fn input_gradient(&self, input: &Tensor3<T>, objective: &dyn TapObjective<T>) -> Result<(f64, Tensor3<T>)> {
        self.check_input(input)?;
        let taps = objective.taps();
        let idx: Vec<usize> = taps.iter().map(|t| self.resolve(t)).collect::<Result<_>>()?;
        let Some(&last) = idx.iter().max() else {
            let (value, _) = objective.evaluate(&[]);
            return Ok((value, Tensor3::zeros(3, input.height, input.width)));
        };
        let keep: Vec<bool> = self.ops[..=last].iter().map(|op| matches!(op, Op::ConvRelu { .. })).collect();
        let mut keep = keep;
        for &i in &idx {
            keep[i] = true;
        }
        let trace = self.run(input, last, &keep, true);
        let maps: Vec<FeatureMap<T>> = taps
            .iter()
            .zip(&idx)
            .map(|(t, &i)| FeatureMap { tap: t.clone(), values: trace.outputs[i].clone().expect("kept") })
            .collect();
        let (value, tap_grads) = objective.evaluate(&maps);
        if tap_grads.len() != taps.len() {
            return Err(BackboneError::ObjectiveArity { expected: taps.len(), got: tap_grads.len() });
        }
        drop(maps);

        let mut injected: Vec<Option<Tensor3<T>>> = vec![None; last + 1];
        for (g, &i) in tap_grads.into_iter().zip(&idx) {
            match &mut injected[i] {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }

        let mut grad: Option<Tensor3<T>> = None;
        for i in (0..=last).rev() {
            if let Some(g) = injected[i].take() {
                grad = Some(match grad {
                    Some(mut acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += *b;
                        }
                        acc
                    }
                    None => g,
                });
            }
            let Some(mut g) = grad.take() else { continue };
            let in_shape = if i == 0 { input.shape() } else { trace.shapes[i - 1] };
            g = match &self.ops[i] {
                Op::ConvRelu { conv, .. } => {
                    let out = trace.outputs[i].as_ref().expect("conv outputs kept");
                    for (gv, &yv) in g.data.iter_mut().zip(&out.data) {
                        if yv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    conv.backward_input(&g, in_shape.1, in_shape.2)
                }
                Op::Pool { .. } => max_pool_backward(&g, trace.argmax[i].as_ref().expect("pool indices"), in_shape),
            };
            grad = Some(g);
        }
        Ok((value, grad.unwrap_or_else(|| Tensor3::zeros(3, input.height, input.width))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct SumOf(&'static str);

    impl TapObjective<f64> for SumOf {
        fn taps(&self) -> Vec<String> {
            vec![self.0.to_string()]
        }

        fn evaluate(&self, maps: &[FeatureMap<f64>]) -> (f64, Vec<Tensor3<f64>>) {
            let v = &maps[0].values;
            (v.data.iter().sum(), vec![Tensor3::from_vec(v.channels, v.height, v.width, vec![1.0; v.data.len()])])
        }
    }

    struct Constant;

    impl TapObjective<f32> for Constant {
        fn taps(&self) -> Vec<String> {
            vec!["relu2_1".into()]
        }

        fn evaluate(&self, maps: &[FeatureMap<f32>]) -> (f64, Vec<Tensor3<f32>>) {
            let v = &maps[0].values;
            (3.5, vec![Tensor3::zeros(v.channels, v.height, v.width)])
        }
    }

    fn random_input(seed: u64, s: usize) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_vec(3, s, s, (0..3 * s * s).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn tap_channel_table() {
        let net = Backbone::<f32>::seeded(1);
        let expect = [("relu1_1", 64), ("relu2_1", 128), ("relu3_1", 256), ("relu4_1", 512), ("relu4_2", 512)];
        for (tap, ch) in expect {
            assert_eq!(net.tap_shape(tap, 224, 224).unwrap().channels, ch);
        }
        assert_eq!(net.tap_shape("relu1_1", 224, 224).unwrap().height, 224);
        assert_eq!(net.tap_shape(FINAL_ENCODING, 224, 224).unwrap().flat_len(), 25_088);
        assert_eq!(net.tap_shape(FINAL_ENCODING, 640, 400).unwrap().flat_len(), 122_880);
        assert!(matches!(net.tap_shape("relu9_9", 64, 64), Err(BackboneError::UnknownTap(_))));
    }

    #[test]
    fn activations_have_declared_shapes_and_are_nonnegative() {
        let net = Backbone::<f64>::seeded(3);
        let x = random_input(2, 64);
        let maps = net.activations(&x, &["relu2_1", "relu1_1", FINAL_ENCODING]).unwrap();
        assert_eq!(maps[0].values.shape(), (128, 32, 32));
        assert_eq!(maps[1].values.shape(), (64, 64, 64));
        assert_eq!(maps[2].values.shape(), (512, 2, 2));
        assert!(maps.iter().all(|m| m.values.data.iter().all(|&v| v >= 0.0 && v.is_finite())));
    }

    #[test]
    fn relu1_1_sum_gradient_matches_central_differences() {
        let net = Backbone::<f64>::seeded(5);
        let x = random_input(8, 32);
        let obj = SumOf("relu1_1");
        let (_, grad) = net.input_gradient(&x, &obj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let step = 1e-6;
        for _ in 0..20 {
            let i = rng.random_range(0..x.data.len());
            let mut plus = x.clone();
            plus.data[i] += step;
            let mut minus = x.clone();
            minus.data[i] -= step;
            let f = |t: &Tensor3<f64>| net.activations(t, &["relu1_1"]).unwrap()[0].values.data.iter().sum::<f64>();
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            let analytic = grad.data[i];
            let scale = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!((numeric - analytic).abs() / scale < 1e-3, "pixel {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let net = Backbone::<f32>::seeded(5);
        let x = random_input(1, 32).cast::<f32>();
        let (v, g) = net.input_gradient(&x, &Constant).unwrap();
        assert_eq!(v, 3.5);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checksum_is_stable_across_precisions_and_calls() {
        let net = Backbone::<f32>::seeded(11);
        let wide = net.cast::<f64>();
        assert_eq!(net.checksum(), wide.checksum());
        let x = random_input(4, 32).cast::<f32>();
        let _ = net.activations(&x, &["relu3_1"]).unwrap();
        let _ = net.input_gradient(&x, &Constant).unwrap();
        assert_eq!(net.compute_checksum(), net.checksum());
        assert_ne!(Backbone::<f32>::seeded(12).checksum(), net.checksum());
    }

    #[test]
    fn unknown_tap_and_bad_input_are_errors() {
        let net = Backbone::<f32>::seeded(1);
        let x = Tensor3::<f32>::zeros(3, 32, 32);
        assert!(matches!(net.activations(&x, &["conv1_1"]), Err(BackboneError::UnknownTap(_))));
        assert!(matches!(net.activations(&Tensor3::zeros(1, 32, 32), &["relu1_1"]), Err(BackboneError::InputChannels(1))));
        assert!(matches!(net.activations(&Tensor3::zeros(3, 16, 16), &["relu1_1"]), Err(BackboneError::InputTooSmall(16))));
        assert!(net.clone().with_input_size(31).is_err());
    }
}
