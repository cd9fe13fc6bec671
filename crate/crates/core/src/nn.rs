//! Dense feed-forward networks `h(x) = softmax(g(f(x)))`.
//!
//! `f` is everything up to and including the last hidden layer (the
//! embedding, width `p`); `g` is the final affine layer producing `k` logits.
//! Besides the usual forward pass and cross-entropy gradient this module
//! provides exact input Jacobians of either sub-network and the parameter
//! gradient of the logit geometric complexity, which needs second-order
//! backpropagation through the Jacobian recursion.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative. ReLU uses the subgradient 0 at exactly 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation {other:?} (expected relu or tanh)")),
        }
    }
}

/// Which sub-network a Jacobian or GC is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subnet {
    /// The feature map `f`, output width `p`.
    Embedding,
    /// The logit network `g ∘ f`, output width `k`.
    Logit,
}

/// Architecture: `layer_widths = [d, hidden..., p, k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 3 {
            return contract(format!(
                "layer_widths needs at least input, one hidden and a logit layer, got {layer_widths:?}"
            ));
        }
        if layer_widths.contains(&0) {
            return contract(format!("layer widths must be positive, got {layer_widths:?}"));
        }
        Ok(Self { layer_widths, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All weights of a network. Gradients and other parameter-space vectors use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

impl Parameters {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer { weight: Array2::zeros((w[1], w[0])), bias: Array1::zeros(w[1]) })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattens layer by layer: weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        if flat.len() != p.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                p.num_params()
            )));
        }
        let mut it = flat.iter();
        for l in &mut p.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = *it.next().unwrap());
        }
        Ok(p)
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Parameters) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Parameters) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Zero-mean normal weights with std `sqrt(2/fan_in)` (relu) or
/// `sqrt(1/fan_in)` (tanh); zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::zeros(spec);
    let gain = match spec.activation {
        Activation::Relu => 2.0,
        Activation::Tanh => 1.0,
    };
    for layer in &mut params.layers {
        let fan_in = layer.weight.ncols() as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).unwrap();
        layer.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    }
    params
}

/// Per-layer pre-activations and post-activations for one batch.
///
/// `post[0]` is the input batch, `post[l + 1]` the output of layer `l`; the
/// last entry holds the logits (no activation).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &Array2<f64> {
        &self.post[self.post.len() - 2]
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.post.last().unwrap()
    }
}

fn check_input(params: &Parameters, x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != params.spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            params.spec.input_dim()
        )));
    }
    Ok(())
}

pub fn forward(params: &Parameters, x: ArrayView2<f64>) -> Result<ForwardTrace> {
    check_input(params, x)?;
    let depth = params.layers.len();
    let act = params.spec.activation;
    let mut pre = Vec::with_capacity(depth);
    let mut post = Vec::with_capacity(depth + 1);
    post.push(x.to_owned());
    for (l, layer) in params.layers.iter().enumerate() {
        let z = post[l].dot(&layer.weight.t()) + &layer.bias;
        let a = if l + 1 < depth { z.mapv(|v| act.apply(v)) } else { z.clone() };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardTrace { pre, post })
}

/// Mean softmax cross-entropy and its exact parameter gradient.
pub fn loss_and_grad(params: &Parameters, x: ArrayView2<f64>, y: &[usize]) -> Result<(f64, Parameters)> {
    let trace = forward(params, x)?;
    let k = params.spec.num_classes();
    if y.len() != x.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.nrows())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return contract(format!("label {bad} out of range for {k} classes"));
    }
    let m = x.nrows() as f64;
    let logits = trace.logits();
    let mut delta = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y[i]];
        for c in 0..k {
            delta[[i, c]] = (row[c] - lse).exp() / m;
        }
        delta[[i, y[i]]] -= 1.0 / m;
    }
    loss /= m;

    let act = params.spec.activation;
    let mut grads = params.zeros_like();
    for l in (0..params.layers.len()).rev() {
        grads.layers[l].weight = delta.t().dot(&trace.post[l]);
        grads.layers[l].bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut upstream = delta.dot(&params.layers[l].weight);
            Zip::from(&mut upstream).and(&trace.pre[l - 1]).for_each(|g, &z| *g *= act.derivative(z));
            delta = upstream;
        }
    }
    Ok((loss, grads))
}

struct SingleTrace {
    /// `a[0] = x`, `a[l + 1] = σ(z[l])` for hidden layers.
    a: Vec<Array1<f64>>,
    z: Vec<Array1<f64>>,
}

fn forward_single(params: &Parameters, x: ArrayView1<f64>) -> SingleTrace {
    let depth = params.layers.len();
    let act = params.spec.activation;
    let mut a = vec![x.to_owned()];
    let mut z = Vec::with_capacity(depth);
    for (l, layer) in params.layers.iter().enumerate() {
        let zl = layer.weight.dot(&a[l]) + &layer.bias;
        if l + 1 < depth {
            a.push(zl.mapv(|v| act.apply(v)));
        }
        z.push(zl);
    }
    SingleTrace { a, z }
}

/// Exact Jacobian of the chosen sub-network at `x` (`p × d` or `k × d`).
pub fn input_jacobian(params: &Parameters, x: ArrayView1<f64>, subnet: Subnet) -> Result<Array2<f64>> {
    if x.len() != params.spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} entries, network expects {}",
            x.len(),
            params.spec.input_dim()
        )));
    }
    let trace = forward_single(params, x);
    let act = params.spec.activation;
    let hidden = params.layers.len() - 1;
    let mut jac = params.layers[0].weight.clone();
    for l in 0..hidden {
        if l > 0 {
            jac = params.layers[l].weight.dot(&jac);
        }
        for (mut row, &z) in jac.outer_iter_mut().zip(trace.z[l].iter()) {
            row *= act.derivative(z);
        }
    }
    Ok(match subnet {
        Subnet::Embedding => jac,
        Subnet::Logit => params.layers[hidden].weight.dot(&jac),
    })
}

/// `‖∇_x (g∘f)(x)‖²_F` and its gradient with respect to the parameters,
/// by reverse-mode differentiation of the Jacobian recursion
/// `J_{l+1} = diag(σ'(z_l)) W_l J_l`.
fn logit_gc_and_grad_single(params: &Parameters, x: ArrayView1<f64>) -> (f64, Parameters) {
    let act = params.spec.activation;
    let depth = params.layers.len();
    let hidden = depth - 1;
    let trace = forward_single(params, x);

    // jz[l] = W_l J_l, jacs[l] = J_l (jacs[0] = I is never materialized).
    let mut jz: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut jacs: Vec<Array2<f64>> = Vec::with_capacity(depth);
    jacs.push(Array2::zeros((0, 0)));
    for l in 0..depth {
        let pre = if l == 0 { params.layers[0].weight.clone() } else { params.layers[l].weight.dot(&jacs[l]) };
        if l < hidden {
            let mut next = pre.clone();
            for (mut row, &z) in next.outer_iter_mut().zip(trace.z[l].iter()) {
                row *= act.derivative(z);
            }
            jacs.push(next);
        }
        jz.push(pre);
    }
    let logit_jac = &jz[hidden];
    let value = logit_jac.iter().map(|v| v * v).sum::<f64>();

    let mut grad = params.zeros_like();
    let g_bar = logit_jac * 2.0;
    grad.layers[hidden].weight = g_bar.dot(&jacs[hidden].t());
    let mut j_bar = params.layers[hidden].weight.t().dot(&g_bar);
    let mut a_bar = Array1::<f64>::zeros(trace.a[hidden].len());

    for l in (0..hidden).rev() {
        let z = &trace.z[l];
        let mut jz_bar = j_bar.clone();
        let mut z_bar = Array1::<f64>::zeros(z.len());
        for (i, (mut row, jz_row)) in jz_bar.outer_iter_mut().zip(jz[l].outer_iter()).enumerate() {
            let s_bar: f64 = row.iter().zip(jz_row.iter()).map(|(a, b)| a * b).sum();
            let s = act.derivative(z[i]);
            row *= s;
            z_bar[i] = a_bar[i] * s + s_bar * act.second_derivative(z[i]);
        }
        let w = &params.layers[l].weight;
        let mut dw = if l == 0 { jz_bar.clone() } else { jz_bar.dot(&jacs[l].t()) };
        let a_prev = &trace.a[l];
        for (mut row, &zb) in dw.outer_iter_mut().zip(z_bar.iter()) {
            if zb != 0.0 {
                row.scaled_add(zb, a_prev);
            }
        }
        grad.layers[l].weight = dw;
        grad.layers[l].bias = z_bar.clone();
        if l > 0 {
            j_bar = w.t().dot(&jz_bar);
            a_bar = w.t().dot(&z_bar);
        }
    }
    (value, grad)
}

/// Gradient over θ of the empirical logit GC `(1/m) Σ ‖∇_x (g∘f)(x)‖²_F`.
pub fn gc_reg_grad(params: &Parameters, x: ArrayView2<f64>) -> Result<Parameters> {
    Ok(logit_gc_and_grad(params, x)?.1)
}

/// Empirical logit GC together with its parameter gradient.
pub fn logit_gc_and_grad(params: &Parameters, x: ArrayView2<f64>) -> Result<(f64, Parameters)> {
    check_input(params, x)?;
    if x.nrows() == 0 {
        return contract("empty batch");
    }
    let parts = par::map_range(x.nrows(), |i| logit_gc_and_grad_single(params, x.row(i)));
    let mut total = params.zeros_like();
    let mut value = 0.0;
    for (v, g) in &parts {
        value += v;
        total.axpy(1.0, g);
    }
    let inv = 1.0 / x.nrows() as f64;
    total.scale(inv);
    Ok((value * inv, total))
}

/// Central-difference Hessian-vector product of a gradient oracle over flat
/// parameter vectors: `(∇L(θ+εv) − ∇L(θ−εv)) / 2ε`.
pub fn hvp_with<G>(grad: G, theta: &[f64], v: &[f64], eps: f64) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad(&plus);
    let gm = grad(&minus);
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
}

/// Default finite-difference step: `1e-4` relative to the RMS parameter size
/// (but never below `1e-4`).
pub fn default_hvp_eps(params: &Parameters) -> f64 {
    let rms = (params.norm_sq() / params.num_params() as f64).sqrt();
    1e-4 * rms.max(1.0)
}

/// Hessian-vector product of the mean cross-entropy on `(x, y)`.
pub fn hvp(params: &Parameters, x: ArrayView2<f64>, y: &[usize], v: &Parameters, eps: f64) -> Result<Parameters> {
    loss_and_grad(params, x, y)?;
    let spec = params.spec.clone();
    let grad = |theta: &[f64]| {
        let p = Parameters::from_flat(&spec, theta).expect("length checked");
        loss_and_grad(&p, x, y).expect("shapes checked").1.to_flat()
    };
    let out = hvp_with(grad, &params.to_flat(), &v.to_flat(), eps);
    Parameters::from_flat(&params.spec, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(act: Activation) -> Parameters {
        init_params(&NetworkSpec::new(vec![3, 5, 4, 2], act).unwrap(), 11)
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3, 2], Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
        let s = NetworkSpec::new(vec![3, 7, 5, 2], Activation::Tanh).unwrap();
        assert_eq!((s.input_dim(), s.embed_dim(), s.num_classes(), s.depth()), (3, 5, 2, 3));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        assert_eq!(init_params(&spec, 7), init_params(&spec, 7));
        assert_ne!(init_params(&spec, 7), init_params(&spec, 8));
        assert!(init_params(&spec, 7).layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_std_matches_fan_in() {
        // 10^4 draws of the first layer of [4, 2500, 3].
        let spec = NetworkSpec::new(vec![4, 2500, 3], Activation::Relu).unwrap();
        let p = init_params(&spec, 3);
        let w = &p.layers[0].weight;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 4.0).sqrt();
        assert!((std / expected - 1.0).abs() < 0.05, "std {std} vs {expected}");
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let p = Parameters::zeros(&NetworkSpec::new(vec![3, 4, 2], Activation::Relu).unwrap());
        let t = forward(&p, array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(t.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_embedding_at_origin_is_zero() {
        let spec = NetworkSpec::new(vec![2, 2, 2], Activation::Tanh).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = array![[1.0, 0.0], [0.0, 1.0]];
        let t = forward(&p, array![[0.0, 0.0]].view()).unwrap();
        assert!(t.embedding().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_forward() {
        // W1 = [[1,2],[-1,1]], b1 = [0.5,0]; relu; W2 = [[1,-1]], b2 = [0.25].
        // x = (1,-1): z1 = (1-2+0.5, -1-1) = (-0.5, -2) -> relu (0,0); logits = 0.25.
        // x = (2, 1): z1 = (4.5, -1) -> (4.5, 0); logits = 4.5 + 0.25.
        let spec = NetworkSpec::new(vec![2, 2, 1], Activation::Relu).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = array![[1.0, 2.0], [-1.0, 1.0]];
        p.layers[0].bias = array![0.5, 0.0];
        p.layers[1].weight = array![[1.0, -1.0]];
        p.layers[1].bias = array![0.25];
        let t = forward(&p, array![[1.0, -1.0], [2.0, 1.0]].view()).unwrap();
        assert_eq!(t.logits(), &array![[0.25], [4.75]]);
        assert_eq!(t.embedding(), &array![[0.0, 0.0], [4.5, 0.0]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = tiny(Activation::Relu);
        assert!(matches!(forward(&p, Array2::zeros((2, 4)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let p = Parameters::zeros(&NetworkSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap());
        let (loss, _) = loss_and_grad(&p, array![[1.0, 0.0, -1.0], [0.3, 0.2, 0.1]].view(), &[0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let spec = NetworkSpec::new(vec![2, 2, 2], Activation::Relu).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = array![[1.0, 0.0], [0.0, 1.0]];
        p.layers[1].weight = array![[100.0, -100.0], [-100.0, 100.0]];
        let (loss, _) = loss_and_grad(&p, array![[1.0, 0.0], [0.0, 1.0]].view(), &[0, 1]).unwrap();
        assert!(loss < 1e-10, "{loss}");
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let p = tiny(Activation::Relu);
        assert!(loss_and_grad(&p, Array2::zeros((1, 3)).view(), &[2]).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let p = tiny(Activation::Tanh);
        assert_eq!(Parameters::from_flat(&p.spec, &p.to_flat()).unwrap(), p);
        assert!(Parameters::from_flat(&p.spec, &[0.0]).is_err());
    }

    #[test]
    fn linear_network_jacobian_is_weight_product() {
        // A relu net whose pre-activations are all positive behaves linearly.
        let spec = NetworkSpec::new(vec![2, 2, 2, 3], Activation::Relu).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = array![[1.0, 0.5], [0.25, 2.0]];
        p.layers[0].bias = array![10.0, 10.0];
        p.layers[1].weight = array![[1.5, -0.5], [0.5, 1.0]];
        p.layers[1].bias = array![10.0, 10.0];
        p.layers[2].weight = array![[1.0, 2.0], [-1.0, 0.0], [3.0, 0.5]];
        let x = array![0.1, -0.2];
        let w01 = p.layers[1].weight.dot(&p.layers[0].weight);
        assert_eq!(input_jacobian(&p, x.view(), Subnet::Embedding).unwrap(), w01);
        assert_eq!(input_jacobian(&p, x.view(), Subnet::Logit).unwrap(), p.layers[2].weight.dot(&w01));
    }

    #[test]
    fn zero_weights_zero_jacobian_and_gc_grad() {
        let p = Parameters::zeros(&NetworkSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap());
        let x = array![0.3, -1.0, 2.0];
        assert!(input_jacobian(&p, x.view(), Subnet::Logit).unwrap().iter().all(|&v| v == 0.0));
        let g = gc_reg_grad(&p, array![[0.3, -1.0, 2.0]].view()).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn gc_grad_of_linear_map_is_twice_the_weights() {
        // Hidden layer with identity-like behaviour: relu with huge positive bias,
        // so logit GC = ‖W2 W1‖²; with W1 = I the W2 gradient is exactly 2·W2.
        let spec = NetworkSpec::new(vec![2, 2, 3], Activation::Relu).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = array![[1.0, 0.0], [0.0, 1.0]];
        p.layers[0].bias = array![100.0, 100.0];
        p.layers[1].weight = array![[0.5, -1.5], [2.0, 0.25], [-0.75, 1.0]];
        let (gc, g) = logit_gc_and_grad(&p, array![[0.1, 0.2], [-0.3, 0.4]].view()).unwrap();
        assert_eq!(gc, p.layers[1].weight.iter().map(|v| v * v).sum::<f64>());
        assert_eq!(g.layers[1].weight, &p.layers[1].weight * 2.0);
        assert!(g.layers[1].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn hvp_of_quadratic_is_2v() {
        let theta = vec![0.3, -1.0, 2.5, 0.0];
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let out = hvp_with(|t| t.iter().map(|x| 2.0 * x).collect(), &theta, &v, 1e-4);
        for (o, vi) in out.iter().zip(&v) {
            assert!((o - 2.0 * vi).abs() < 1e-8);
        }
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let p = tiny(Activation::Tanh);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let h = hvp(&p, x.view(), &[0, 1], &p.zeros_like(), 1e-4).unwrap();
        assert_eq!(h.norm_sq(), 0.0);
    }
}
