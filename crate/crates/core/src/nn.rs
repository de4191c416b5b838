//! Fully connected heads trained with Adam.
//!
//! Hidden layers are `Linear → ReLU → Dropout`; the last layer is linear.
//! Weights use the `(out, in)` row-major layout and PyTorch's default
//! initialisation (uniform in `±1/sqrt(fan_in)` for weights and biases).

use std::io::{Read, Write};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self { inputs, outputs, weight, bias }
    }

    /// `y = x · Wᵀ + b` for a batch of rows.
    fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        f32::gemm(batch, self.inputs, self.outputs, x, false, &self.weight, true, &mut y, true);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug)]
pub struct Tape {
    batch: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f32>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f32>>,
    /// Hidden dropout multipliers (0 or 1/keep).
    drop: Vec<Vec<f32>>,
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f32,
}

impl Mlp {
    /// `widths` lists every layer size from input to output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], dropout: f32, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    /// Inference (dropout off).
    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, batch);
            if i + 1 < self.layers.len() {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        h
    }

    pub fn forward_train<R: Rng + ?Sized>(&self, x: &[f32], batch: usize, rng: &mut R) -> Tape {
        let keep = 1.0 - self.dropout;
        let mut tape = Tape { batch, inputs: Vec::new(), pre: Vec::new(), drop: Vec::new(), output: Vec::new() };
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, batch);
            tape.inputs.push(h);
            if i + 1 == self.layers.len() {
                tape.output = z;
                break;
            }
            let mask: Vec<f32> =
                (0..z.len()).map(|_| if self.dropout > 0.0 && rng.random::<f32>() >= keep { 0.0 } else { 1.0 / keep }).collect();
            h = z.iter().zip(&mask).map(|(v, m)| v.max(0.0) * m).collect();
            tape.pre.push(z);
            tape.drop.push(mask);
        }
        tape
    }

    /// Parameter gradients given the gradient on the output.
    pub fn backward(&self, tape: &Tape, grad_output: &[f32]) -> Vec<LayerGrad> {
        let b = tape.batch;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let mut gw = vec![0.0f32; layer.outputs * layer.inputs];
            f32::gemm(layer.outputs, b, layer.inputs, &g, true, x, false, &mut gw, false);
            let mut gb = vec![0.0f32; layer.outputs];
            for row in g.chunks(layer.outputs) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            grads.push(LayerGrad { weight: gw, bias: gb });
            if i == 0 {
                break;
            }
            let mut gx = vec![0.0f32; b * layer.inputs];
            f32::gemm(b, layer.outputs, layer.inputs, &g, false, &layer.weight, false, &mut gx, false);
            for ((v, z), m) in gx.iter_mut().zip(&tape.pre[i - 1]).zip(&tape.drop[i - 1]) {
                *v = if *z > 0.0 { *v * m } else { 0.0 };
            }
            g = gx;
        }
        grads.reverse();
        grads
    }

    /// SHA-256 over all parameters as little-endian `f32`.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_params(&self, w: &mut impl Write) -> std::io::Result<()> {
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads parameters for the given widths, as written by `write_params`.
    pub fn read_params(widths: &[usize], dropout: f32, r: &mut impl Read) -> std::io::Result<Self> {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let mut read = |n: usize| -> std::io::Result<Vec<f32>> {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            };
            let weight = read(w[0] * w[1])?;
            let bias = read(w[1])?;
            layers.push(Linear { inputs: w[0], outputs: w[1], weight, bias });
        }
        Ok(Self { layers, dropout })
    }
}

/// Adam with PyTorch's defaults for the moment decay rates and epsilon.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f32) -> Self {
        let moments = net
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.weight.len()], vec![0.0; l.bias.len()], vec![0.0; l.bias.len()]))
            .collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[LayerGrad]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for ((layer, grad), (mw, vw, mb, vb)) in net.layers.iter_mut().zip(grads).zip(&mut self.moments) {
            update(&mut layer.weight, &grad.weight, mw, vw);
            update(&mut layer.bias, &grad.bias, mb, vb);
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(logits: &mut [f32], width: usize) {
    for row in logits.chunks_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], labels: &[usize], width: usize) -> (f64, Vec<f32>) {
    let mut probs = logits.to_vec();
    softmax_rows(&mut probs, width);
    let n = labels.len() as f32;
    let mut loss = 0.0f64;
    for (row, &y) in probs.chunks_mut(width).zip(labels) {
        loss -= (row[y].max(1e-30) as f64).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss / labels.len() as f64, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &[f32], y: &[usize]) -> f64 {
        cross_entropy(&net.forward(x, y.len()), y, net.output_dim()).0
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[5, 7, 6, 3], 0.0, &mut rng);
        let x: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = [0, 2, 1, 2];
        let tape = net.forward_train(&x, 4, &mut rng);
        let (_, g) = cross_entropy(&tape.output, &y, 3);
        let grads = net.backward(&tape, &g);
        for (l, idx) in [(0, 3), (1, 10), (2, 5)] {
            let h = 1e-2;
            let orig = net.layers[l].weight[idx];
            net.layers[l].weight[idx] = orig + h;
            let up = loss(&net, &x, &y);
            net.layers[l].weight[idx] = orig - h;
            let down = loss(&net, &x, &y);
            net.layers[l].weight[idx] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            assert!((numeric - grads[l].weight[idx] as f64).abs() < 2e-3, "layer {l}: {numeric} vs {}", grads[l].weight[idx]);
        }
    }

    #[test]
    fn softmax_is_a_simplex() {
        let mut v = vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0];
        softmax_rows(&mut v, 3);
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 8, 2], 0.5, &mut rng);
        let mut buf = Vec::new();
        net.write_params(&mut buf).unwrap();
        let back = Mlp::read_params(&net.widths(), 0.5, &mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.checksum(), net.checksum());
    }
}
