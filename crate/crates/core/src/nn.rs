//! Tiny MLPs with explicit forward/backward and a bias-corrected Adam.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense layer, weights row-major (out x in).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out.push(acc);
        }
    }
}

/// Feed-forward MLP: affine + ReLU on hidden layers, identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer post-activation values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Vec<f64>,
    activations: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> MlpGrads {
        MlpGrads {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: mlp.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalInit {
    /// He-style uniform like the hidden layers.
    Random,
    /// Zero weights and biases so the network starts as the zero map.
    Zero,
}

impl Mlp {
    /// He-style uniform init scaled by fan-in; `final_init` controls the
    /// last layer (deformation heads start at exactly zero).
    pub fn new(widths: &[usize], final_init: FinalInit, rng: &mut Rng) -> Mlp {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let is_last = layers.len() == widths.len() - 2;
            let (weights, biases) = if is_last && final_init == FinalInit::Zero {
                (vec![0.0; in_dim * out_dim], vec![0.0; out_dim])
            } else {
                let limit = (6.0 / in_dim as f64).sqrt();
                (
                    (0..in_dim * out_dim).map(|_| rng.range(-limit, limit)).collect(),
                    vec![0.0; out_dim],
                )
            };
            layers.push(DenseLayer { weights, biases, in_dim, out_dim });
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("empty mlp").in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("empty mlp").out_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} entries, mlp expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if li + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(x)?;
        let mut cache = MlpCache { input: x.to_vec(), activations: Vec::with_capacity(self.layers.len()) };
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if li + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cache.activations.push(next.clone());
            std::mem::swap(&mut cur, &mut next);
        }
        Ok((cur, cache))
    }

    /// Exact reverse-mode gradients; accumulates into `grads`, returns the
    /// input gradient.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream has {} entries, mlp produces {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            // ReLU applied on every layer output except the last
            if li + 1 < self.layers.len() {
                let act = &cache.activations[li];
                for (d, &a) in delta.iter_mut().zip(act) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let prev: &[f64] = if li == 0 { &cache.input } else { &cache.activations[li - 1] };
            let gw = &mut grads.weights[li];
            let gb = &mut grads.biases[li];
            for o in 0..layer.out_dim {
                gb[o] += delta[o];
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &p) in row.iter_mut().zip(prev) {
                    *g += delta[o] * p;
                }
            }
            let mut prev_delta = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (pd, &w) in prev_delta.iter_mut().zip(row) {
                    *pd += delta[o] * w;
                }
            }
            delta = prev_delta;
        }
        Ok(delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    /// One bias-corrected update over a flat tensor.
    pub fn apply(&mut self, hp: &AdamParams, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} entries, got params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
        Ok(())
    }

    /// Rebuild state after a structural edit: survivors keep their moments,
    /// new entries start at zero. `stride` = scalars per Gaussian.
    pub fn remap(&self, sources: &[Option<usize>], stride: usize) -> AdamState {
        let mut out = AdamState::new(sources.len() * stride);
        out.step = self.step;
        for (new, src) in sources.iter().enumerate() {
            if let Some(old) = src {
                for k in 0..stride {
                    out.m[new * stride + k] = self.m[old * stride + k];
                    out.v[new * stride + k] = self.v[old * stride + k];
                }
            }
        }
        out
    }

    pub fn zero_moments(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Adam over an MLP's layer tensors.
#[derive(Clone, Debug)]
pub struct MlpOptimizer {
    pub weights: Vec<AdamState>,
    pub biases: Vec<AdamState>,
}

impl MlpOptimizer {
    pub fn new(mlp: &Mlp) -> MlpOptimizer {
        MlpOptimizer {
            weights: mlp.layers.iter().map(|l| AdamState::new(l.weights.len())).collect(),
            biases: mlp.layers.iter().map(|l| AdamState::new(l.biases.len())).collect(),
        }
    }

    pub fn step(&mut self, hp: &AdamParams, mlp: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        for (li, layer) in mlp.layers.iter_mut().enumerate() {
            self.weights[li].apply(hp, &mut layer.weights, &grads.weights[li])?;
            self.biases[li].apply(hp, &mut layer.biases, &grads.biases[li])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent straight-line evaluation of an MLP used as the oracle.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur: Vec<f64> = x.to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let mut next = vec![0.0f64; layer.out_dim];
            #[allow(clippy::needless_range_loop)]
            for o in 0..layer.out_dim {
                let mut acc = layer.biases[o];
                for i in 0..layer.in_dim {
                    acc += layer.weights[o * layer.in_dim + i] * cur[i];
                }
                next[o] = if li + 1 < mlp.layers.len() && acc < 0.0 { 0.0 } else { acc };
            }
            cur = next;
        }
        cur
    }

    fn random_mlp(widths: &[usize], seed: u64) -> Mlp {
        let mut rng = Rng::seed_from(seed);
        let mut m = Mlp::new(widths, FinalInit::Random, &mut rng);
        // randomize biases too so the oracle exercises them
        for l in &mut m.layers {
            for b in &mut l.biases {
                *b = rng.range(-0.5, 0.5);
            }
        }
        m
    }

    #[test]
    fn forward_zero_weights() {
        let mut rng = Rng::seed_from(1);
        let mut m = Mlp::new(&[3, 4, 2], FinalInit::Random, &mut rng);
        for l in &mut m.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.biases.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_identity_single_layer() {
        let m = Mlp {
            layers: vec![DenseLayer {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                biases: vec![0.0, 0.0],
                in_dim: 2,
                out_dim: 2,
            }],
        };
        assert_eq!(m.forward(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn forward_shape_mismatch() {
        let m = random_mlp(&[3, 4, 2], 2);
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::seed_from(5);
        for widths in [vec![4, 8, 3], vec![2, 16, 16, 1], vec![6, 64, 4]] {
            let m = random_mlp(&widths, 50 + widths.len() as u64);
            for _ in 0..50 {
                let x: Vec<f64> = (0..widths[0]).map(|_| rng.normal()).collect();
                let got = m.forward(&x).unwrap();
                let want = reference_forward(&m, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let m = random_mlp(&[3, 8, 2], 3);
        let (_, cache) = m.forward_cached(&[0.1, 0.2, 0.3]).unwrap();
        let mut grads = MlpGrads::zeros_like(&m);
        let din = m.backward(&cache, &[0.0, 0.0], &mut grads).unwrap();
        assert!(din.iter().all(|&v| v == 0.0));
        assert!(grads.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_identity_layer_passes_upstream() {
        let m = Mlp {
            layers: vec![DenseLayer {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                biases: vec![0.0, 0.0],
                in_dim: 2,
                out_dim: 2,
            }],
        };
        let (_, cache) = m.forward_cached(&[0.4, -0.6]).unwrap();
        let mut grads = MlpGrads::zeros_like(&m);
        let din = m.backward(&cache, &[2.0, -3.0], &mut grads).unwrap();
        assert_eq!(din, vec![2.0, -3.0]);
    }

    /// Gradient check over every architecture the pipeline instantiates.
    #[test]
    fn backward_matches_finite_differences_all_architectures() {
        let pipeline_widths: Vec<Vec<usize>> = vec![
            vec![16, 64, 32], // stage-1 feature net
            vec![32, 64, 3],  // stage-1 motion head
            vec![24, 64, 32], // stage-2 feature net
            vec![32, 64, 3],  // position head
            vec![32, 64, 4],  // rotation head
            vec![32, 64, 3],  // scale head
        ];
        for widths in pipeline_widths {
            for seed in 0..20u64 {
                check_gradients(&widths, seed);
            }
        }
    }

    fn check_gradients(widths: &[usize], seed: u64) {
        let m = random_mlp(widths, seed * 131 + 7);
        let mut rng = Rng::seed_from(seed * 17 + 3);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.normal()).collect();
        let up: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.normal()).collect();
        let (_, cache) = m.forward_cached(&x).unwrap();
        let mut grads = MlpGrads::zeros_like(&m);
        let din = m.backward(&cache, &up, &mut grads).unwrap();

        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            m.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        // h balances truncation against roundoff for losses of order one
        let h = 1e-5;

        // input gradient
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            let denom = fd.abs().max(din[i].abs()).max(1e-4);
            assert!((fd - din[i]).abs() / denom < 1e-5, "input {i}: {fd} vs {}", din[i]);
        }

        // a deterministic subsample of weight gradients per layer
        let mut m2 = m.clone();
        for li in 0..m.layers.len() {
            let nw = m.layers[li].weights.len();
            for probe in 0..nw.min(25) {
                let idx = (probe * 97) % nw;
                let orig = m2.layers[li].weights[idx];
                m2.layers[li].weights[idx] = orig + h;
                let lp = loss(&m2, &x);
                m2.layers[li].weights[idx] = orig - h;
                let lm = loss(&m2, &x);
                m2.layers[li].weights[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads.weights[li][idx];
                let denom = fd.abs().max(g.abs()).max(1e-4);
                assert!((fd - g).abs() / denom < 1e-5, "layer {li} w{idx}: {fd} vs {g}");
            }
            for bidx in 0..m.layers[li].biases.len().min(8) {
                let orig = m2.layers[li].biases[bidx];
                m2.layers[li].biases[bidx] = orig + h;
                let lp = loss(&m2, &x);
                m2.layers[li].biases[bidx] = orig - h;
                let lm = loss(&m2, &x);
                m2.layers[li].biases[bidx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let g = grads.biases[li][bidx];
                let denom = fd.abs().max(g.abs()).max(1e-4);
                assert!((fd - g).abs() / denom < 1e-5, "layer {li} b{bidx}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn zero_final_init_gives_zero_map() {
        let mut rng = Rng::seed_from(8);
        let m = Mlp::new(&[5, 64, 3], FinalInit::Zero, &mut rng);
        let mut r2 = Rng::seed_from(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| r2.normal()).collect();
            assert_eq!(m.forward(&x).unwrap(), vec![0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.apply(&AdamParams::with_lr(0.1), &mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_single_step_hand_value() {
        // g = 1: bias correction makes m-hat = v-hat = 1, so the step is
        // lr / (1 + eps) which is 0.1 to within eps
        let mut st = AdamState::new(1);
        let mut p = vec![3.0];
        st.apply(&AdamParams::with_lr(0.1), &mut p, &[1.0]).unwrap();
        let delta = 3.0 - p[0];
        assert!((delta - 0.1).abs() < 1e-8, "step was {delta}");
    }

    #[test]
    fn adam_constant_gradient_monotone() {
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        let hp = AdamParams::with_lr(0.01);
        let mut prev = p[0];
        for _ in 0..100 {
            st.apply(&hp, &mut p, &[1.0]).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0];
        assert!(st.apply(&AdamParams::with_lr(0.1), &mut p, &[1.0]).is_err());
    }

    #[test]
    fn adam_remap_preserves_survivors() {
        let mut st = AdamState::new(4); // 2 gaussians x stride 2
        let mut p = vec![0.0; 4];
        st.apply(&AdamParams::with_lr(0.1), &mut p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let remapped = st.remap(&[Some(1), None], 2);
        assert_eq!(remapped.m[0], st.m[2]);
        assert_eq!(remapped.m[1], st.m[3]);
        assert_eq!(remapped.m[2], 0.0);
        assert_eq!(remapped.step, st.step);
    }
}
