//! Small dense networks over flat parameter vectors, and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};

/// Fully connected network: tanh on hidden layers, linear output.
/// Parameters per layer are the `in x out` weight matrix (row-major)
/// followed by the `out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `out_gain` scales the last layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut params = Vec::with_capacity(Self::count(sizes));
        for (l, w) in sizes.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let gain = if l + 2 == sizes.len() { out_gain } else { 1.0 };
            for _ in 0..w[0] * w[1] {
                params.push(gain * rng.gen_range(-limit..=limit));
            }
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        Self::count(&self.sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Records a batch forward pass; `x` is `batch x input_dim`, `params` a
    /// `1 x param_count` row.
    pub fn record(&self, tape: &mut Tape, params: Var, x: Var) -> Var {
        let mut h = x;
        let mut at = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let wm = tape.slice(params, at, w[0], w[1]);
            at += w[0] * w[1];
            let b = tape.slice(params, at, 1, w[1]);
            at += w[1];
            let z = tape.matmul(h, wm);
            let z = tape.add(z, b);
            h = if l + 1 < layers { tape.tanh(z) } else { z };
        }
        h
    }

    /// Plain forward pass for one input row.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        let mut h = x.to_vec();
        let mut at = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (wm, rest) = self.params[at..].split_at(w[0] * w[1]);
            let b = &rest[..w[1]];
            at += w[0] * w[1] + w[1];
            let mut z = b.to_vec();
            for (i, hi) in h.iter().enumerate() {
                let row = &wm[i * w[1]..(i + 1) * w[1]];
                for (zj, wij) in z.iter_mut().zip(row) {
                    *zj += hi * wij;
                }
            }
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }

    pub fn to_f32(&self) -> MlpF32 {
        MlpF32 {
            sizes: self.sizes.clone(),
            params: self.params.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Single-precision copy used for batched inference.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpF32 {
    pub sizes: Vec<usize>,
    pub params: Vec<f32>,
}

impl MlpF32 {
    /// Forward pass over `rows` inputs stored row-major in `x`. Each output
    /// row depends only on its own input row.
    pub fn forward_batch(&self, x: &[f32], rows: usize) -> Vec<f32> {
        assert_eq!(x.len(), rows * self.sizes[0]);
        let mut h = x.to_vec();
        let mut at = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let wm = &self.params[at..at + w[0] * w[1]];
            let b = &self.params[at + w[0] * w[1]..at + w[0] * w[1] + w[1]];
            at += w[0] * w[1] + w[1];
            let mut z = Vec::with_capacity(rows * w[1]);
            for _ in 0..rows {
                z.extend_from_slice(b);
            }
            if rows > 0 {
                // SAFETY: `h` is rows x w0, `wm` is w0 x w1 and `z` is rows x w1,
                // all row-major and non-overlapping.
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        w[0],
                        w[1],
                        1.0,
                        h.as_ptr(),
                        w[0] as isize,
                        1,
                        wm.as_ptr(),
                        w[1] as isize,
                        1,
                        1.0,
                        z.as_mut_ptr(),
                        w[1] as isize,
                        1,
                    );
                }
            }
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    /// Applies one descent step to `params` given the loss gradient.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{backward, check_gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 5, 2], 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let mut tape = Tape::new();
        let p = tape.row(&net.params);
        let xv = tape.row(&x);
        let y = net.record(&mut tape, p, xv);
        let plain = net.forward(&x);
        for (a, b) in tape.value(y).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[2, 4, 1], 1.0, &mut rng);
        let x = [0.5, -1.0, 0.25, 0.75];
        let report = check_gradients(
            |tape, p| {
                let xv = tape.input(&x, 2, 2);
                let y = net.record(tape, p, xv);
                let sq = tape.square(y);
                tape.sum(sq)
            },
            &net.params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report}");
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[30, 16, 3], 1.0, &mut rng).to_f32();
        let x: Vec<f32> = (0..30 * 9).map(|_| rng.gen()).collect();
        let all = net.forward_batch(&x, 9);
        for r in 0..9 {
            let one = net.forward_batch(&x[r * 30..(r + 1) * 30], 1);
            assert_eq!(&all[r * 3..(r + 1) * 3], one.as_slice());
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let v = tape.row(&p);
            let sq = tape.square(v);
            let l = tape.sum(sq);
            let g = backward(&tape, l).unwrap();
            let grad = g.get(v).to_vec();
            opt.step(&mut p, &grad);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
