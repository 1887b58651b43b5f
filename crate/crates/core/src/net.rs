//! Sin-activated MLP `t ↦ N(t)` with the trunk transform
//! `ẑ(t) = z0 + (1 − e^(−t))·N(t)`.
//!
//! The time derivative `dẑ/dt` comes from a forward dual-number pass seeded
//! at the scalar input. Loss gradients are accumulated by a hand-written
//! reverse sweep over that dual pass, so they include the path through
//! the tangents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual::DualScalar;
use crate::error::{Error, Result};
use crate::systems::SystemDef;

pub const DEFAULT_HIDDEN: usize = 32;

/// One affine map `x ↦ W·x + b`, `W` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            *o = self.bias[r] + dot(row, x, |v| v);
        }
    }

    fn apply_dual(&self, x: &[DualScalar], out: &mut [DualScalar]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let value = self.bias[r] + dot(row, x, |v| v.value);
            *o = DualScalar::new(value, dot(row, x, |v| v.tangent));
        }
    }

    /// `out = Wᵀ·g`
    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, gr) in g.iter().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gr;
            }
        }
    }
}

/// Dot product with four running sums, so the additions do not form a
/// single dependency chain.
#[inline]
fn dot<T: Copy>(w: &[f64], x: &[T], get: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let n = w.len().min(x.len());
    let split = n - n % 4;
    for (wc, xc) in w[..split].chunks_exact(4).zip(x[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += wc[k] * get(xc[k]);
        }
    }
    for i in split..n {
        acc[0] += w[i] * get(x[i]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Weights and biases of the `1 → H → H → D` network. The flattened
/// parameter vector is layer by layer, weights (row-major) before biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub t: f64,
    pub raw: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub z_hat_dot: Vec<f64>,
}

/// Scalar loss, its per-output-dimension parts, and `∂L/∂w`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub components: Vec<f64>,
    pub grad: MlpParams,
}

/// `1 − e^(−t)` and its derivative `e^(−t)`.
#[inline]
pub fn trunk(t: f64) -> (f64, f64) {
    let e = (-t).exp();
    (1.0 - e, e)
}

impl MlpParams {
    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_out, fan_in);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            seed,
        })
    }

    /// Standard `[1, H, H, D]` shape.
    pub fn for_system(hidden: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::init(&[1, hidden, hidden, dim], seed)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
            seed: self.seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated layer sizes")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: flat.len(),
                context: "flattened parameter vector",
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn from_flat(template: &Self, flat: &[f64]) -> Result<Self> {
        let mut p = template.clone();
        p.assign_flat(flat)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Raw output `N(t)` and `N′(t)`.
    pub fn raw_dual(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut tape = DualTape::new(self);
        tape.run(self, t);
        let out = tape.output();
        (
            out.iter().map(|d| d.value).collect(),
            out.iter().map(|d| d.tangent).collect(),
        )
    }

    pub fn forward(&self, t: f64, z0: &[f64]) -> NetOutput {
        let (raw, raw_dot) = self.raw_dual(t);
        let (g, dg) = trunk(t);
        let z_hat = z0.iter().zip(&raw).map(|(z, n)| z + g * n).collect();
        let z_hat_dot = raw.iter().zip(&raw_dot).map(|(n, nd)| dg * n + g * nd).collect();
        NetOutput {
            t,
            raw,
            z_hat,
            z_hat_dot,
        }
    }

    /// `ẑ(t)` without the tangent pass.
    pub fn predict(&self, t: f64, z0: &[f64]) -> Vec<f64> {
        let mut tape = ValueTape::new(self);
        tape.run(self, t);
        let (g, _) = trunk(t);
        z0.iter().zip(tape.output()).map(|(z, n)| z + g * n).collect()
    }

    /// Residual loss `L = mean_n |dẑ/dt(t_n) − F(ẑ(t_n))|²` without gradient.
    pub fn residual_loss(&self, batch: &[f64], z0: &[f64], system: &SystemDef) -> Result<(f64, Vec<f64>)> {
        check_batch(self, batch, z0)?;
        let d = self.output_dim();
        let mut comps = vec![0.0; d];
        for &t in batch {
            let out = self.forward(t, z0);
            let f = system.f(&out.z_hat);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t });
            }
            for i in 0..d {
                let r = out.z_hat_dot[i] - f[i];
                comps[i] += r * r;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        comps.iter_mut().for_each(|c| *c *= inv);
        Ok((comps.iter().sum(), comps))
    }

    /// Residual loss and its gradient with respect to every weight and bias.
    pub fn residual_loss_grad(&self, batch: &[f64], z0: &[f64], system: &SystemDef) -> Result<LossGrad> {
        check_batch(self, batch, z0)?;
        let d = self.output_dim();
        let inv = 1.0 / batch.len() as f64;
        let mut comps = vec![0.0; d];
        let mut grad = self.zeros_like();
        let mut tape = DualTape::new(self);
        let mut z_hat = vec![0.0; d];
        let mut d_raw = vec![0.0; d];
        let mut d_raw_dot = vec![0.0; d];

        for &t in batch {
            tape.run(self, t);
            let (g, dg) = trunk(t);
            let out = tape.output();
            let mut resid = vec![0.0; d];
            for i in 0..d {
                z_hat[i] = z0[i] + g * out[i].value;
            }
            let f = system.f(&z_hat);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t });
            }
            for i in 0..d {
                let zdot = dg * out[i].value + g * out[i].tangent;
                resid[i] = zdot - f[i];
                comps[i] += resid[i] * resid[i];
            }
            // ∂L/∂ℓ = 2ℓ/B; ∂L/∂ẑ = −F_zᵀ·∂L/∂ℓ
            let jac = system.jacobian(&z_hat);
            for i in 0..d {
                let r = 2.0 * inv * resid[i];
                let mut dz = 0.0;
                for k in 0..d {
                    dz -= jac[(k, i)] * 2.0 * inv * resid[k];
                }
                d_raw[i] = dg * r + g * dz;
                d_raw_dot[i] = g * r;
            }
            tape.backward(self, t, &d_raw, &d_raw_dot, &mut grad);
        }
        comps.iter_mut().for_each(|c| *c *= inv);
        Ok(LossGrad {
            loss: comps.iter().sum(),
            components: comps,
            grad,
        })
    }

    /// Supervised loss `mean_n |ẑ(t_n) − target_n|²` and gradient, using
    /// only the value pass.
    pub fn fit_loss_grad(&self, times: &[f64], targets: &[&[f64]], z0: &[f64]) -> Result<LossGrad> {
        check_batch(self, times, z0)?;
        if targets.len() != times.len() {
            return Err(Error::Dimension {
                expected: times.len(),
                got: targets.len(),
                context: "supervised targets",
            });
        }
        let d = self.output_dim();
        let inv = 1.0 / times.len() as f64;
        let mut comps = vec![0.0; d];
        let mut grad = self.zeros_like();
        let mut tape = ValueTape::new(self);
        let mut d_raw = vec![0.0; d];
        for (&t, target) in times.iter().zip(targets) {
            tape.run(self, t);
            let (g, _) = trunk(t);
            let out = tape.output();
            for i in 0..d {
                let e = z0[i] + g * out[i] - target[i];
                comps[i] += e * e;
                d_raw[i] = g * 2.0 * inv * e;
            }
            tape.backward(self, t, &d_raw, &mut grad);
        }
        comps.iter_mut().for_each(|c| *c *= inv);
        Ok(LossGrad {
            loss: comps.iter().sum(),
            components: comps,
            grad,
        })
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() != 4 {
        return Err(Error::LayerSizes {
            sizes: sizes.to_vec(),
            reason: format!("expected 4 layer sizes [1, H, H, D], got {}", sizes.len()),
        });
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::LayerSizes {
            sizes: sizes.to_vec(),
            reason: "non-positive layer size".into(),
        });
    }
    if sizes[0] != 1 {
        return Err(Error::LayerSizes {
            sizes: sizes.to_vec(),
            reason: "input layer must have size 1".into(),
        });
    }
    Ok(())
}

fn check_batch(params: &MlpParams, batch: &[f64], z0: &[f64]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if z0.len() != params.output_dim() {
        return Err(Error::Dimension {
            expected: params.output_dim(),
            got: z0.len(),
            context: "initial condition",
        });
    }
    Ok(())
}

/// Activations of one dual forward pass, kept for the reverse sweep.
/// `pre[l]` is the pre-activation of hidden layer `l`, `post[l]` its sine.
struct DualTape {
    pre: Vec<Vec<DualScalar>>,
    post: Vec<Vec<DualScalar>>,
    /// `(sin a, cos a)` of each pre-activation value.
    trig: Vec<Vec<(f64, f64)>>,
    out: Vec<DualScalar>,
    g: Vec<Vec<f64>>,
    gd: Vec<Vec<f64>>,
}

impl DualTape {
    fn new(p: &MlpParams) -> Self {
        let hidden = &p.layer_sizes[1..p.layer_sizes.len() - 1];
        let mut g: Vec<Vec<f64>> = p.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        g.insert(0, vec![0.0; 1]);
        Self {
            pre: hidden.iter().map(|&n| vec![DualScalar::default(); n]).collect(),
            post: hidden.iter().map(|&n| vec![DualScalar::default(); n]).collect(),
            trig: hidden.iter().map(|&n| vec![(0.0, 0.0); n]).collect(),
            out: vec![DualScalar::default(); p.output_dim()],
            gd: g.clone(),
            g,
        }
    }

    fn run(&mut self, p: &MlpParams, t: f64) {
        let input = [DualScalar::variable(t)];
        let n_hidden = self.pre.len();
        for l in 0..n_hidden {
            if l == 0 {
                p.layers[0].apply_dual(&input, &mut self.pre[0]);
            } else {
                p.layers[l].apply_dual(&self.post[l - 1], &mut self.pre[l]);
            }
            for ((o, sc), a) in self.post[l].iter_mut().zip(&mut self.trig[l]).zip(&self.pre[l]) {
                *sc = libm::sincos(a.value);
                *o = DualScalar::new(sc.0, sc.1 * a.tangent);
            }
        }
        p.layers[n_hidden].apply_dual(&self.post[n_hidden - 1], &mut self.out);
    }

    fn output(&self) -> &[DualScalar] {
        &self.out
    }

    /// Accumulates into `grad` given `∂L/∂N` and `∂L/∂N′` for the last run.
    fn backward(&mut self, p: &MlpParams, t: f64, d_out: &[f64], d_out_dot: &[f64], grad: &mut MlpParams) {
        let n_layers = p.layers.len();
        self.g[n_layers].copy_from_slice(d_out);
        self.gd[n_layers].copy_from_slice(d_out_dot);
        let input = [DualScalar::variable(t)];
        for l in (0..n_layers).rev() {
            let x: &[DualScalar] = if l == 0 { &input } else { &self.post[l - 1] };
            let (lower_g, upper_g) = self.g.split_at_mut(l + 1);
            let (lower_gd, upper_gd) = self.gd.split_at_mut(l + 1);
            let (g, gd) = (&upper_g[0], &upper_gd[0]);
            let layer_grad = &mut grad.layers[l];
            let cols = layer_grad.cols;
            for r in 0..layer_grad.rows {
                let row = &mut layer_grad.weights[r * cols..(r + 1) * cols];
                for (w, xv) in row.iter_mut().zip(x) {
                    *w += g[r] * xv.value + gd[r] * xv.tangent;
                }
                layer_grad.bias[r] += g[r];
            }
            if l == 0 {
                break;
            }
            let (dx, dxd) = (&mut lower_g[l], &mut lower_gd[l]);
            p.layers[l].apply_transpose(g, dx);
            p.layers[l].apply_transpose(gd, dxd);
            // through x = sin(a), x′ = cos(a)·a′
            for (i, (a, &(s, c))) in self.pre[l - 1].iter().zip(&self.trig[l - 1]).enumerate() {
                let gx = dx[i];
                let gxd = dxd[i];
                dx[i] = c * gx - s * a.tangent * gxd;
                dxd[i] = c * gxd;
            }
        }
    }
}

/// Value-only counterpart of [`DualTape`].
struct ValueTape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    cos: Vec<Vec<f64>>,
    out: Vec<f64>,
    g: Vec<Vec<f64>>,
}

impl ValueTape {
    fn new(p: &MlpParams) -> Self {
        let hidden = &p.layer_sizes[1..p.layer_sizes.len() - 1];
        let mut g: Vec<Vec<f64>> = p.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        g.insert(0, vec![0.0; 1]);
        Self {
            pre: hidden.iter().map(|&n| vec![0.0; n]).collect(),
            post: hidden.iter().map(|&n| vec![0.0; n]).collect(),
            cos: hidden.iter().map(|&n| vec![0.0; n]).collect(),
            out: vec![0.0; p.output_dim()],
            g,
        }
    }

    fn run(&mut self, p: &MlpParams, t: f64) {
        let n_hidden = self.pre.len();
        for l in 0..n_hidden {
            if l == 0 {
                p.layers[0].apply(&[t], &mut self.pre[0]);
            } else {
                p.layers[l].apply(&self.post[l - 1], &mut self.pre[l]);
            }
            for ((o, c), a) in self.post[l].iter_mut().zip(&mut self.cos[l]).zip(&self.pre[l]) {
                (*o, *c) = libm::sincos(*a);
            }
        }
        p.layers[n_hidden].apply(&self.post[n_hidden - 1], &mut self.out);
    }

    fn output(&self) -> &[f64] {
        &self.out
    }

    fn backward(&mut self, p: &MlpParams, t: f64, d_out: &[f64], grad: &mut MlpParams) {
        let n_layers = p.layers.len();
        self.g[n_layers].copy_from_slice(d_out);
        let input = [t];
        for l in (0..n_layers).rev() {
            let x: &[f64] = if l == 0 { &input } else { &self.post[l - 1] };
            let (lower, upper) = self.g.split_at_mut(l + 1);
            let g = &upper[0];
            let layer_grad = &mut grad.layers[l];
            let cols = layer_grad.cols;
            for r in 0..layer_grad.rows {
                let row = &mut layer_grad.weights[r * cols..(r + 1) * cols];
                for (w, xv) in row.iter_mut().zip(x) {
                    *w += g[r] * xv;
                }
                layer_grad.bias[r] += g[r];
            }
            if l == 0 {
                break;
            }
            let dx = &mut lower[l];
            p.layers[l].apply_transpose(g, dx);
            for (d, c) in dx.iter_mut().zip(&self.cos[l - 1]) {
                *d *= c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::catalog_get;

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[1, 2, 2, 2], 7).unwrap();
        let b = MlpParams::init(&[1, 2, 2, 2], 7).unwrap();
        assert_eq!(a, b);
        let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, MlpParams::init(&[1, 2, 2, 2], 8).unwrap());
    }

    #[test]
    fn init_rejects_bad_shapes() {
        let err = MlpParams::init(&[1, 0, 2, 2], 7).unwrap_err();
        assert!(err.to_string().contains("non-positive layer size"));
        assert!(MlpParams::init(&[1, 4, 2], 7).is_err());
        assert!(MlpParams::init(&[1, 4, 4, 4, 2], 7).is_err());
    }

    #[test]
    fn init_respects_fan_in_scaling() {
        let p = MlpParams::init(&[1, 32, 32, 2], 1).unwrap();
        for (l, layer) in p.layers.iter().enumerate() {
            let bound = 1.0 / (p.layer_sizes[l] as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            assert_eq!(layer.weights.len(), p.layer_sizes[l + 1] * p.layer_sizes[l]);
            assert_eq!(layer.bias.len(), p.layer_sizes[l + 1]);
        }
        // sampled spread actually uses the range
        let max_first = p.layers[0].weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(max_first > 0.8);
    }

    #[test]
    fn zero_network_is_constant() {
        let p = MlpParams::init(&[1, 4, 4, 2], 3).unwrap().zeros_like();
        let out = p.forward(3.0, &[1.0, 0.0]);
        assert_eq!(out.z_hat, vec![1.0, 0.0]);
        assert_eq!(out.z_hat_dot, vec![0.0, 0.0]);
    }

    #[test]
    fn initial_condition_is_exact() {
        let p = MlpParams::init(&[1, 16, 16, 3], 5).unwrap();
        let z0 = [0.123456789, -7.5, 1e-300];
        assert_eq!(p.forward(0.0, &z0).z_hat, z0.to_vec());
        assert_eq!(p.predict(0.0, &z0), z0.to_vec());
    }

    #[test]
    fn time_derivative_matches_central_difference() {
        let p = MlpParams::init(&[1, 32, 32, 2], 9).unwrap();
        let z0 = [1.0, 0.0];
        let t = 0.3;
        let h = 1e-5;
        let out = p.forward(t, &z0);
        let zp = p.predict(t + h, &z0);
        let zm = p.predict(t - h, &z0);
        for i in 0..2 {
            let fd = (zp[i] - zm[i]) / (2.0 * h);
            let rel = (fd - out.z_hat_dot[i]).abs() / out.z_hat_dot[i].abs().max(1e-12);
            assert!(rel <= 1e-6, "component {i}: rel {rel}");
        }
    }

    #[test]
    fn predict_agrees_with_dual_forward() {
        let p = MlpParams::init(&[1, 8, 8, 4], 2).unwrap();
        let z0 = [0.1, 0.2, 0.3, 0.4];
        for t in [0.0, 0.5, 2.0] {
            assert_eq!(p.predict(t, &z0), p.forward(t, &z0).z_hat);
        }
    }

    #[test]
    fn zero_network_single_point_loss() {
        let sys = catalog_get("harmonic_oscillator").unwrap();
        let p = MlpParams::init(&[1, 4, 4, 2], 3).unwrap().zeros_like();
        let lg = p.residual_loss_grad(&[0.0], &[1.0, 0.0], &sys).unwrap();
        assert_eq!(lg.loss, 1.0);
        assert_eq!(lg.components, vec![0.0, 1.0]);
    }

    #[test]
    fn duplicated_points_do_not_change_loss() {
        let sys = catalog_get("nonlinear_pendulum").unwrap();
        let p = MlpParams::init(&[1, 8, 8, 2], 4).unwrap();
        let a = p.residual_loss(&[0.5], &[0.3, 0.0], &sys).unwrap().0;
        let b = p.residual_loss(&[0.5, 0.5], &[0.3, 0.0], &sys).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn components_sum_to_loss() {
        let sys = catalog_get("henon_heiles").unwrap();
        let p = MlpParams::init(&[1, 8, 8, 4], 4).unwrap();
        let lg = p
            .residual_loss_grad(&[0.0, 0.3, 0.9, 1.4], &[0.1, 0.0, 0.0, 0.2], &sys)
            .unwrap();
        assert!((lg.components.iter().sum::<f64>() - lg.loss).abs() <= 1e-12);
        let (l2, _) = p
            .residual_loss(&[0.0, 0.3, 0.9, 1.4], &[0.1, 0.0, 0.0, 0.2], &sys)
            .unwrap();
        assert!((l2 - lg.loss).abs() <= 1e-15 * lg.loss.max(1.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = MlpParams::init(&[1, 5, 6, 2], 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        assert_eq!(p.num_params(), 5 + 5 + 30 + 6 + 12 + 2);
        assert_eq!(MlpParams::from_flat(&p, &flat).unwrap(), p);
        assert!(MlpParams::from_flat(&p, &flat[1..]).is_err());
    }

    #[test]
    fn rejects_mismatched_initial_condition() {
        let sys = catalog_get("harmonic_oscillator").unwrap();
        let p = MlpParams::init(&[1, 4, 4, 2], 3).unwrap();
        assert!(p.residual_loss_grad(&[0.1], &[1.0], &sys).is_err());
        assert!(p.residual_loss_grad(&[], &[1.0, 0.0], &sys).is_err());
    }
}
