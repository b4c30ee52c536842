//! Small fully connected networks with residual softplus blocks, manual
//! backpropagation and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::{Tensor, TensorFile};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("weights file: {0}")]
    Weights(String),
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `in → hidden` (softplus), `blocks × (h + softplus(W h + b))`, `hidden → out`
/// (linear). Parameters live in one flat vector, each layer stored as a
/// row-major `out×in` matrix followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    x: Vec<f64>,
    /// Pre-activations of the input layer and of every block.
    z: Vec<Vec<f64>>,
    /// Hidden states after the input layer and after every block.
    h: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, blocks: usize, output: usize) -> Self {
        let n = Self::param_count(input, hidden, blocks, output);
        Self {
            input,
            hidden,
            blocks,
            output,
            params: vec![0.0; n],
        }
    }

    /// Uniform init with variance `1 / fan_in` (residual blocks scaled down by
    /// 2 to keep the stack near identity), zero biases.
    pub fn seeded(input: usize, hidden: usize, blocks: usize, output: usize, seed: u64) -> Self {
        let mut m = Self::zeros(input, hidden, blocks, output);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..m.layer_count() {
            let (fan_in, fan_out, off) = m.layer(layer);
            let mut a = (3.0 / fan_in as f64).sqrt();
            if layer > 0 && layer <= blocks {
                a *= 0.5;
            }
            for w in &mut m.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-a..a);
            }
        }
        m
    }

    fn param_count(input: usize, hidden: usize, blocks: usize, output: usize) -> usize {
        (input + 1) * hidden + blocks * (hidden + 1) * hidden + (hidden + 1) * output
    }

    pub fn layer_count(&self) -> usize {
        self.blocks + 2
    }

    /// `(fan_in, fan_out, weight offset)`; the bias follows the weights.
    pub fn layer(&self, l: usize) -> (usize, usize, usize) {
        let h = self.hidden;
        let first = (self.input + 1) * h;
        if l == 0 {
            (self.input, h, 0)
        } else if l <= self.blocks {
            (h, h, first + (l - 1) * (h + 1) * h)
        } else {
            (h, self.output, first + self.blocks * (h + 1) * h)
        }
    }

    fn affine(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (fi, fo, off) = self.layer(l);
        let w = &self.params[off..off + fi * fo];
        let b = &self.params[off + fi * fo..off + fi * fo + fo];
        out.clear();
        out.extend(w.chunks_exact(fi).zip(b).map(|(row, bias)| {
            bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        }));
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut cache = Cache::default();
        self.forward_cached(x, &mut cache)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut Cache) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input {
            return Err(NnError::InputLength {
                expected: self.input,
                got: x.len(),
            });
        }
        cache.x.clear();
        cache.x.extend_from_slice(x);
        cache.z.resize(self.blocks + 1, Vec::new());
        cache.h.resize(self.blocks + 1, Vec::new());
        let mut z = std::mem::take(&mut cache.z[0]);
        self.affine(0, x, &mut z);
        cache.h[0] = z.iter().map(|v| softplus(*v)).collect();
        cache.z[0] = z;
        for l in 1..=self.blocks {
            let mut z = std::mem::take(&mut cache.z[l]);
            self.affine(l, &cache.h[l - 1], &mut z);
            cache.h[l] = cache.h[l - 1].iter().zip(&z).map(|(h, v)| h + softplus(*v)).collect();
            cache.z[l] = z;
        }
        let mut out = Vec::with_capacity(self.output);
        self.affine(self.blocks + 1, &cache.h[self.blocks], &mut out);
        Ok(out)
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output` for the pass
    /// recorded in `cache`.
    pub fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let accumulate = |l: usize, dz: &[f64], input: &[f64], grad: &mut [f64]| -> Vec<f64> {
            let (fi, fo, off) = self.layer(l);
            let mut dx = vec![0.0; fi];
            for o in 0..fo {
                let g = dz[o];
                if g == 0.0 {
                    continue;
                }
                let row = off + o * fi;
                for i in 0..fi {
                    grad[row + i] += g * input[i];
                    dx[i] += g * self.params[row + i];
                }
                grad[off + fi * fo + o] += g;
            }
            dx
        };
        let mut dh = accumulate(self.blocks + 1, dout, &cache.h[self.blocks], grad);
        for l in (1..=self.blocks).rev() {
            let dz: Vec<f64> = dh.iter().zip(&cache.z[l]).map(|(d, z)| d * sigmoid(*z)).collect();
            let dprev = accumulate(l, &dz, &cache.h[l - 1], grad);
            dh.iter_mut().zip(dprev).for_each(|(a, b)| *a += b);
        }
        let dz: Vec<f64> = dh.iter().zip(&cache.z[0]).map(|(d, z)| d * sigmoid(*z)).collect();
        accumulate(0, &dz, &cache.x, grad);
    }

    pub fn to_tensor_file(&self, kind: &str, feature_dim: u32, provenance: &str, extra: Vec<Tensor>) -> TensorFile {
        let mut tensors = Vec::with_capacity(2 * self.layer_count() + extra.len());
        for l in 0..self.layer_count() {
            let (fi, fo, off) = self.layer(l);
            let cast = |s: &[f64]| s.iter().map(|v| *v as f32).collect();
            tensors.push(Tensor {
                name: format!("layer{l}.w"),
                shape: vec![fo, fi],
                data: cast(&self.params[off..off + fi * fo]),
            });
            tensors.push(Tensor {
                name: format!("layer{l}.b"),
                shape: vec![fo],
                data: cast(&self.params[off + fi * fo..off + fi * fo + fo]),
            });
        }
        tensors.extend(extra);
        TensorFile {
            kind: kind.into(),
            feature_dim,
            provenance: provenance.into(),
            tensors,
        }
    }

    /// Rebuilds a network from `layer{l}.w/.b` tensors.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, NnError> {
        let shape = |name: &str| -> Result<&Tensor, NnError> {
            file.get(name).ok_or_else(|| NnError::Weights(format!("missing tensor {name}")))
        };
        let first = shape("layer0.w")?;
        let mut count = 0;
        while file.get(&format!("layer{count}.w")).is_some() {
            count += 1;
        }
        if count < 2 || first.shape.len() != 2 {
            return Err(NnError::Weights("need at least two dense layers".into()));
        }
        let last = shape(&format!("layer{}.w", count - 1))?;
        let mut m = Self::zeros(first.shape[1], first.shape[0], count - 2, last.shape[0]);
        for l in 0..count {
            let (fi, fo, off) = m.layer(l);
            let w = shape(&format!("layer{l}.w"))?;
            let b = shape(&format!("layer{l}.b"))?;
            if w.shape != [fo, fi] || b.shape != [fo] {
                return Err(NnError::Weights(format!("layer {l} has inconsistent shapes")));
            }
            for (dst, src) in m.params[off..off + fi * fo + fo].iter_mut().zip(w.data.iter().chain(&b.data)) {
                *dst = *src as f64;
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
