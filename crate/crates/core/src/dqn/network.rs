use rand::Rng;

use crate::error::{Error, Result};

/// Two-layer MLP `Q = W2 * relu(W1 * s + b1) + b2`.
///
/// `w1` is stored row-major as `hidden x in_dim`, `w2` as `out_dim x hidden`.
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl QNetwork {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(in_dim, hidden, out_dim);
        let b1 = 1.0 / (in_dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        for v in net.w1.iter_mut().chain(net.b1.iter_mut()) {
            *v = rng.gen_range(-b1..b1);
        }
        for v in net.w2.iter_mut().chain(net.b2.iter_mut()) {
            *v = rng.gen_range(-b2..b2);
        }
        net
    }

    pub fn from_flat(in_dim: usize, hidden: usize, out_dim: usize, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(in_dim, hidden, out_dim);
        if flat.len() != net.n_params() {
            return Err(Error::Dimension {
                expected: net.n_params(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for part in [&mut net.w1, &mut net.b1, &mut net.w2, &mut net.b2] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.in_dim + self.hidden + self.out_dim * self.hidden + self.out_dim
    }

    /// Parameters in checkpoint order: `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    fn hidden_pre(&self, state: &[f64], pre: &mut [f64]) {
        for (j, z) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            *z = self.b1[j] + dot(row, state);
        }
    }

    pub fn forward(&self, state: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.hidden];
        self.hidden_pre(state, &mut hidden);
        for h in hidden.iter_mut() {
            *h = h.max(0.0);
        }
        (0..self.out_dim)
            .map(|a| self.output(a, &hidden))
            .collect()
    }

    fn output(&self, action: usize, hidden: &[f64]) -> f64 {
        let row = &self.w2[action * self.hidden..(action + 1) * self.hidden];
        self.b2[action] + dot(row, hidden)
    }

    /// Single action value without computing the other outputs.
    pub fn q_value(&self, state: &[f64], action: usize) -> f64 {
        let mut hidden = vec![0.0; self.hidden];
        self.hidden_pre(state, &mut hidden);
        for h in hidden.iter_mut() {
            *h = h.max(0.0);
        }
        self.output(action, &hidden)
    }

    /// Q(state, action), leaving the hidden pre-activations in `pre` for a
    /// following [`Self::accumulate_grad`].
    pub(crate) fn q_with_pre(&self, state: &[f64], action: usize, pre: &mut [f64]) -> f64 {
        self.hidden_pre(state, pre);
        let row = &self.w2[action * self.hidden..(action + 1) * self.hidden];
        self.b2[action] + row.iter().zip(pre.iter()).map(|(w, z)| w * z.max(0.0)).sum::<f64>()
    }

    /// Adds `scale * dQ(state, action)/dθ` into `grad`, given the
    /// pre-activations computed by [`Self::q_with_pre`] for the same state.
    pub(crate) fn accumulate_grad(
        &self,
        state: &[f64],
        action: usize,
        scale: f64,
        grad: &mut QNetwork,
        pre: &[f64],
    ) {
        grad.b2[action] += scale;
        let w2 = &self.w2[action * self.hidden..(action + 1) * self.hidden];
        let g2 = &mut grad.w2[action * self.hidden..(action + 1) * self.hidden];
        for j in 0..self.hidden {
            if pre[j] <= 0.0 {
                continue;
            }
            g2[j] += scale * pre[j];
            let back = scale * w2[j];
            grad.b1[j] += back;
            let row = &mut grad.w1[j * self.in_dim..(j + 1) * self.in_dim];
            for (g, s) in row.iter_mut().zip(state) {
                *g += back * s;
            }
        }
    }

    /// Applies `f(param, grad)` to every parameter paired with its gradient.
    pub(crate) fn zip_apply(&mut self, grad: &QNetwork, mut f: impl FnMut(usize, &mut f64, f64)) {
        let mut offset = 0;
        for (p, g) in [
            (&mut self.w1, &grad.w1),
            (&mut self.b1, &grad.b1),
            (&mut self.w2, &grad.w2),
            (&mut self.b2, &grad.b2),
        ] {
            for (i, (p, &g)) in p.iter_mut().zip(g.iter()).enumerate() {
                f(offset + i, p, g);
            }
            offset += g.len();
        }
    }

    pub(crate) fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.hidden]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let split = n - n % 4;
    let mut i = 0;
    while i < split {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for j in split..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
