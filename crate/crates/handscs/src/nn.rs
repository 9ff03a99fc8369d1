//! Minimal feed-forward network stack with manual reverse-mode gradients.
//!
//! All decoders, the dynamic-bone generator, and the pose-embedding net are
//! gated MLPs: `output = gate * raw_head(input)` with ReLU hidden layers.
//! The gate is a learnable scalar so a zero-initialized net is exactly the
//! zero function at the start of training.

use crate::error::Error;
use crate::math::{real, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Mlp<T: Real> {
    /// Layer widths including input and output, e.g. `[68, 64, 64, 9]`.
    pub dims: Vec<usize>,
    /// Row-major `out x in` weight matrices, one per layer.
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub gate: T,
}

/// Primal values recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone, Default)]
pub struct GradientTape<T: Real> {
    input: Vec<T>,
    /// Post-activation output of every hidden layer.
    hidden: Vec<Vec<T>>,
    raw_out: Vec<T>,
    recorded: bool,
}

/// Accumulated parameter gradients, same shapes as the net.
#[derive(Debug, Clone)]
pub struct MlpGrads<T: Real> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub gate: T,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
            gate: T::zero(),
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(T::zero());
        }
        for b in &mut self.biases {
            b.fill(T::zero());
        }
        self.gate = T::zero();
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        self.gate += other.gate;
    }
}

impl<T: Real> Mlp<T> {
    /// Kaiming-style init with a fixed per-name seed; gate starts at zero.
    pub fn new(dims: &[usize], name: &str) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for b in name.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| {
                    // Box-Muller keeps the init free of extra distribution deps.
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random::<f64>();
                    let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    real(n * std)
                })
                .collect();
            weights.push(w);
            biases.push(vec![T::zero(); fan_out]);
        }
        Self { dims: dims.to_vec(), weights, biases, gate: T::zero() }
    }

    /// Same net with the gate opened; used where a zero gate would stall
    /// training (pose-embedding net, dynamic-bone generator).
    pub fn with_gate(mut self, gate: T) -> Self {
        self.gate = gate;
        self
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        1 + self
            .dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum::<usize>()
    }

    fn affine(&self, layer: usize, input: &[T], out: &mut Vec<T>) {
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        out.clear();
        out.reserve(fan_out);
        for o in 0..fan_out {
            let mut acc = b[o];
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for (wi, xi) in row.iter().zip(input) {
                acc += *wi * *xi;
            }
            out.push(acc);
        }
    }

    /// Forward pass without recording.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, Error> {
        let mut tape = GradientTape::default();
        self.forward_tape(input, &mut tape)
    }

    /// Forward pass recording primals onto `tape` for a later backward.
    pub fn forward_tape(&self, input: &[T], tape: &mut GradientTape<T>) -> Result<Vec<T>, Error> {
        if input.len() != self.input_width() {
            return Err(Error::Contract(format!(
                "input width {} does not match net input {}",
                input.len(),
                self.input_width()
            )));
        }
        tape.input = input.to_vec();
        tape.hidden.clear();
        let layers = self.dims.len() - 1;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for l in 0..layers {
            self.affine(l, &cur, &mut next);
            if l + 1 < layers {
                for v in next.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                tape.hidden.push(next.clone());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        tape.raw_out = cur.clone();
        tape.recorded = true;
        for v in cur.iter_mut() {
            *v *= self.gate;
        }
        Ok(cur)
    }

    /// Raw head output of the last recorded forward (pre-gate).
    pub fn raw_output<'t>(&self, tape: &'t GradientTape<T>) -> &'t [T] {
        &tape.raw_out
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` and returns
    /// the cotangent with respect to the input.
    pub fn backward(
        &self,
        tape: &GradientTape<T>,
        output_cotangent: &[T],
        grads: &mut MlpGrads<T>,
    ) -> Result<Vec<T>, Error> {
        if !tape.recorded {
            return Err(Error::Contract("backward called before forward".into()));
        }
        if output_cotangent.len() != self.output_width() {
            return Err(Error::Contract("output cotangent width mismatch".into()));
        }
        let layers = self.dims.len() - 1;

        // Gate: out = gate * raw  =>  d gate = <raw, cot>, d raw = gate * cot.
        let mut delta: Vec<T> = Vec::with_capacity(output_cotangent.len());
        for (r, c) in tape.raw_out.iter().zip(output_cotangent) {
            grads.gate += *r * *c;
            delta.push(self.gate * *c);
        }

        let mut next_delta: Vec<T> = Vec::new();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let input: &[T] = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            let w = &self.weights[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            next_delta.clear();
            next_delta.resize(fan_in, T::zero());
            for o in 0..fan_out {
                let d = delta[o];
                gb[o] += d;
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    grow[i] += d * input[i];
                    next_delta[i] += d * row[i];
                }
            }
            if l > 0 {
                // ReLU mask from the recorded post-activation values.
                for (nd, h) in next_delta.iter_mut().zip(&tape.hidden[l - 1]) {
                    if *h == T::zero() {
                        *nd = T::zero();
                    }
                }
            }
            std::mem::swap(&mut delta, &mut next_delta);
        }
        Ok(delta)
    }
}

/// Adam optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: u64,
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], steps: 0, skipped: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update. A non-finite gradient anywhere in the tensor skips the
/// whole update and bumps the skip counter.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return;
    }
    state.steps += 1;
    let t = state.steps as i32;
    let b1 = real::<T>(hyper.beta1);
    let b2 = real::<T>(hyper.beta2);
    let lr = real::<T>(hyper.lr);
    let eps = real::<T>(hyper.eps);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fresh_net_outputs_zeros() {
        let net = Mlp::<f64>::new(&[5, 8, 8, 3], "test");
        let out = net.forward(&[0.3, -0.7, 1.2, 0.0, 2.5]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn zero_weights_bias_gate_one_outputs_bias() {
        let mut net = Mlp::<f64>::new(&[2, 3], "bias").with_gate(1.0);
        net.weights[0].fill(0.0);
        net.biases[0] = vec![0.4, -0.2, 0.9];
        let out = net.forward(&[7.0, -3.0]).unwrap();
        assert_eq!(out, vec![0.4, -0.2, 0.9]);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        // Identity weights on the hidden layer, negative input -> zeros.
        let mut net = Mlp::<f64>::new(&[2, 2, 2], "relu").with_gate(1.0);
        net.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        net.biases[0].fill(0.0);
        net.weights[1] = vec![1.0, 0.0, 0.0, 1.0];
        net.biases[1].fill(0.0);
        let out = net.forward(&[-1.0, -2.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let net = Mlp::<f64>::new(&[4, 4], "w");
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let net = Mlp::<f64>::new(&[2, 2], "b");
        let tape = GradientTape::default();
        let mut grads = MlpGrads::zeros_like(&net);
        assert!(net.backward(&tape, &[1.0, 1.0], &mut grads).is_err());
    }

    #[test]
    fn linear_net_gradient_is_analytic() {
        // Single linear layer, gate 1: out = W x + b.
        let mut net = Mlp::<f64>::new(&[3, 2], "lin").with_gate(1.0);
        net.weights[0] = vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        net.biases[0] = vec![0.1, -0.3];
        let x = [1.0, 2.0, 3.0];
        let cot = [1.0, -2.0];
        let mut tape = GradientTape::default();
        net.forward_tape(&x, &mut tape).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        let din = net.backward(&tape, &cot, &mut grads).unwrap();
        // dW[o][i] = cot[o] * x[i], db = cot, dx = W^T cot.
        for o in 0..2 {
            for i in 0..3 {
                assert_relative_eq!(grads.weights[0][o * 3 + i], cot[o] * x[i]);
            }
            assert_relative_eq!(grads.biases[0][o], cot[o]);
        }
        for i in 0..3 {
            let want = net.weights[0][i] * cot[0] + net.weights[0][3 + i] * cot[1];
            assert_relative_eq!(din[i], want);
        }
    }

    #[test]
    fn random_net_gradients_match_finite_differences() {
        let net = Mlp::<f64>::new(&[7, 16, 16, 4], "fd").with_gate(0.8);
        let x: Vec<f64> = (0..7).map(|i| (i as f64 * 0.713).sin()).collect();
        let cot: Vec<f64> = (0..4).map(|i| 0.5 + 0.1 * i as f64).collect();
        let loss = |n: &Mlp<f64>| -> f64 {
            let out = n.forward(&x).unwrap();
            out.iter().zip(&cot).map(|(o, c)| o * c).sum()
        };

        let mut tape = GradientTape::default();
        net.forward_tape(&x, &mut tape).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&tape, &cot, &mut grads).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for l in 0..net.weights.len() {
            for i in (0..net.weights[l].len()).step_by(13) {
                let mut plus = net.clone();
                plus.weights[l][i] += h;
                let mut minus = net.clone();
                minus.weights[l][i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert_relative_eq!(grads.weights[l][i], fd, max_relative = 1e-4, epsilon = 1e-9);
                checked += 1;
            }
        }
        // Gate.
        let mut plus = net.clone();
        plus.gate += h;
        let mut minus = net.clone();
        minus.gate -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert_relative_eq!(grads.gate, fd, max_relative = 1e-4);
        assert!(checked > 20);
    }

    #[test]
    fn gate_gradient_at_zero_is_raw_dot_cotangent() {
        let net = Mlp::<f64>::new(&[4, 8, 8, 3], "gate0");
        assert_eq!(net.gate, 0.0);
        let x = [0.2, -0.4, 0.6, 1.0];
        let cot = [1.0, 2.0, -1.0];
        let mut tape = GradientTape::default();
        net.forward_tape(&x, &mut tape).unwrap();
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&tape, &cot, &mut grads).unwrap();
        let raw = net.raw_output(&tape);
        let want: f64 = raw.iter().zip(&cot).map(|(r, c)| r * c).sum();
        assert_relative_eq!(grads.gate, want, epsilon = 1e-12);
        // With gate 0 nothing flows into weights.
        assert!(grads.weights.iter().all(|w| w.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::<f32>::new(&[6, 32, 32, 5], "det").with_gate(1.0);
        let x: Vec<f32> = (0..6).map(|i| i as f32 * 0.37 - 1.0).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, &AdamHyper::with_lr(1e-2));
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_lr() {
        let mut p = vec![0.0f64];
        let g = vec![0.37];
        let mut st = AdamState::new(1);
        let hyper = AdamHyper::with_lr(1e-3);
        adam_step(&mut p, &g, &mut st, &hyper);
        // Bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g).
        assert_relative_eq!(p[0], -1e-3, max_relative = 1e-4);
    }

    #[test]
    fn adam_skips_nan_gradients() {
        let mut p = vec![1.0f64, 2.0];
        let g = vec![f64::NAN, 0.5];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, &AdamHyper::with_lr(1e-3));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.skipped, 1);
        assert_eq!(st.steps, 0);
    }
}
