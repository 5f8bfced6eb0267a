//! The 3-layer fully connected intent classifier.
//!
//! Parameters live in one flat `f64` buffer (layer 1 weights row-major,
//! layer 1 biases, layer 2 weights, ..., layer 3 biases) with `ndarray`
//! views on top, so flatten/unflatten is the identity and per-coordinate
//! finite-difference probing is cheap. Inputs are flattened channel-major
//! (channel 0's W samples, then channel 1's, ...).
//!
//! Besides the forward pass and the exact reverse-mode batch gradient, the
//! module provides [`loss_hvp`], the Hessian-vector product of the batch
//! loss, computed by reverse-mode differentiation of the scalar
//! `v . grad(loss)` through the recorded forward-and-backward computation
//! (reverse-over-reverse). This is the primitive that meta-training uses to
//! backpropagate through unrolled inner-loop steps.
//!
//! All reductions (batch sums inside matrix products, bias sums) run in a
//! fixed order, so results are bit-stable across runs and thread counts.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataio::{IntentDistribution, WindowedSample};
use crate::error::{Error, Result};
use crate::seeds;

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Hidden-layer nonlinearity.
///
/// ReLU is the production default. Tanh is available because it is twice
/// differentiable everywhere, which keeps finite-difference checks of
/// second-order quantities clean (ReLU's kink can spoil them at isolated
/// points).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative, evaluated from the activation value `a = act(z)`.
    #[inline]
    fn d_from_act(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// Second derivative, evaluated from the activation value.
    #[inline]
    fn dd_from_act(self, a: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
        }
    }
}

/// Layer widths of the fixed 3-layer architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

impl LayerDims {
    /// Production architecture: 1600 inputs (8 channels x 200 samples),
    /// hidden layers of 512 and 128, three output classes.
    pub fn standard() -> LayerDims {
        LayerDims { input: 1600, hidden1: 512, hidden2: 128, output: 3 }
    }

    /// Total number of parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.hidden1 * self.input
            + self.hidden1
            + self.hidden2 * self.hidden1
            + self.hidden2
            + self.output * self.hidden2
            + self.output
    }
}

/// Architecture plus activation and nothing else; what a checkpoint stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub dims: LayerDims,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn standard() -> NetworkConfig {
        NetworkConfig { dims: LayerDims::standard(), activation: Activation::Relu }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Full parameter set of the classifier, stored flat.
///
/// Also used for gradients and other parameter-shaped vectors (see
/// [`GradientVector`]); the flat layout makes `flatten`/`unflatten` exact by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: LayerDims,
    activation: Activation,
    data: Vec<f64>,
}

/// A parameter-shaped vector holding per-coordinate gradient values.
pub type GradientVector = ModelParams;

impl ModelParams {
    pub fn zeros(cfg: &NetworkConfig) -> ModelParams {
        ModelParams { dims: cfg.dims, activation: cfg.activation, data: vec![0.0; cfg.dims.param_count()] }
    }

    pub fn dims(&self) -> LayerDims {
        self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig { dims: self.dims, activation: self.activation }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The flat parameter vector (layer 1 weights row-major, layer 1 biases,
    /// layer 2 weights, layer 2 biases, layer 3 weights, layer 3 biases).
    pub fn flatten(&self) -> &[f64] {
        &self.data
    }

    pub fn flatten_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rebuild from a flat vector; exact inverse of [`ModelParams::flatten`].
    pub fn from_flat(cfg: &NetworkConfig, data: Vec<f64>) -> Result<ModelParams> {
        if data.len() != cfg.dims.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, architecture needs {}",
                data.len(),
                cfg.dims.param_count()
            )));
        }
        Ok(ModelParams { dims: cfg.dims, activation: cfg.activation, data })
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 6] {
        let d = &self.dims;
        let mut o = 0usize;
        let mut next = |len: usize| {
            let r = o..o + len;
            o += len;
            r
        };
        [
            next(d.hidden1 * d.input),
            next(d.hidden1),
            next(d.hidden2 * d.hidden1),
            next(d.hidden2),
            next(d.output * d.hidden2),
            next(d.output),
        ]
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        let r = self.ranges()[0].clone();
        ArrayView2::from_shape((self.dims.hidden1, self.dims.input), &self.data[r]).unwrap()
    }

    pub fn b1(&self) -> ArrayView1<'_, f64> {
        let r = self.ranges()[1].clone();
        ArrayView1::from_shape(self.dims.hidden1, &self.data[r]).unwrap()
    }

    pub fn w2(&self) -> ArrayView2<'_, f64> {
        let r = self.ranges()[2].clone();
        ArrayView2::from_shape((self.dims.hidden2, self.dims.hidden1), &self.data[r]).unwrap()
    }

    pub fn b2(&self) -> ArrayView1<'_, f64> {
        let r = self.ranges()[3].clone();
        ArrayView1::from_shape(self.dims.hidden2, &self.data[r]).unwrap()
    }

    pub fn w3(&self) -> ArrayView2<'_, f64> {
        let r = self.ranges()[4].clone();
        ArrayView2::from_shape((self.dims.output, self.dims.hidden2), &self.data[r]).unwrap()
    }

    pub fn b3(&self) -> ArrayView1<'_, f64> {
        let r = self.ranges()[5].clone();
        ArrayView1::from_shape(self.dims.output, &self.data[r]).unwrap()
    }

    pub fn w1_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let r = self.ranges()[0].clone();
        let dims = self.dims;
        ArrayViewMut2::from_shape((dims.hidden1, dims.input), &mut self.data[r]).unwrap()
    }

    pub fn w2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let r = self.ranges()[2].clone();
        let dims = self.dims;
        ArrayViewMut2::from_shape((dims.hidden2, dims.hidden1), &mut self.data[r]).unwrap()
    }

    pub fn w3_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let r = self.ranges()[4].clone();
        let dims = self.dims;
        ArrayViewMut2::from_shape((dims.output, dims.hidden2), &mut self.data[r]).unwrap()
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[1].clone();
        &mut self.data[r]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[3].clone();
        &mut self.data[r]
    }

    pub fn b3_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[5].clone();
        &mut self.data[r]
    }

    fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape("parameter vectors have different architectures".into()));
        }
        Ok(())
    }

    /// `self += a * other`, elementwise.
    pub fn axpy(&mut self, a: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other)?;
        for (p, &g) in self.data.iter_mut().zip(&other.data) {
            *p += a * g;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn scale(&mut self, a: f64) {
        for p in &mut self.data {
            *p *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// Random initialization: per layer, weights uniform in
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`, biases zero.
///
/// Deterministic given the seed; draw order is layer 1, 2, 3, row-major.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(cfg);
    let mut rng = seeds::rng(seed, "nn/init", &[]);
    let d = cfg.dims;
    let layers = [(d.input, d.hidden1), (d.hidden1, d.hidden2), (d.hidden2, d.output)];
    let ranges = params.ranges();
    for (i, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut params.data[ranges[2 * i].clone()] {
            *w = dist.sample(&mut rng);
        }
    }
    params
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A batch of flattened windows: `x` is `[B x input_dim]`, one label index
/// per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[WindowedSample], input_dim: usize) -> Result<Batch> {
        let mut x = Array2::zeros((samples.len(), input_dim));
        let mut labels = Vec::with_capacity(samples.len());
        for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
            if s.x.len() != input_dim {
                return Err(Error::Shape(format!(
                    "window flattens to {} entries, classifier expects {}",
                    s.x.len(),
                    input_dim
                )));
            }
            for (dst, &src) in row.iter_mut().zip(s.x.iter()) {
                *dst = src;
            }
            labels.push(s.label.index());
        }
        Ok(Batch { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `ids` gathered into a new batch.
    pub fn gather(&self, ids: &[usize]) -> Batch {
        let mut x = Array2::zeros((ids.len(), self.x.ncols()));
        let mut labels = Vec::with_capacity(ids.len());
        for (mut row, &i) in x.rows_mut().into_iter().zip(ids) {
            row.assign(&self.x.row(i));
            labels.push(self.labels[i]);
        }
        Batch { x, labels }
    }
}

fn check_batch(params: &ModelParams, batch: &Batch, what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty(format!("{what} requires a nonempty batch")));
    }
    if batch.x.ncols() != params.dims.input {
        return Err(Error::Shape(format!(
            "batch rows have {} entries, classifier expects {}",
            batch.x.ncols(),
            params.dims.input
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= params.dims.output) {
        return Err(Error::Shape(format!("label index {bad} out of range")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward pass, loss, prediction
// ---------------------------------------------------------------------------

struct ForwardCache {
    a1: Array2<f64>,
    a2: Array2<f64>,
    z3: Array2<f64>,
}

fn batch_forward(params: &ModelParams, x: &ArrayView2<'_, f64>) -> ForwardCache {
    let act = params.activation;
    let mut z1 = x.dot(&params.w1().t());
    z1 += &params.b1();
    let a1 = z1.mapv_into(|z| act.apply(z));
    let mut z2 = a1.dot(&params.w2().t());
    z2 += &params.b2();
    let a2 = z2.mapv_into(|z| act.apply(z));
    let mut z3 = a2.dot(&params.w3().t());
    z3 += &params.b3();
    ForwardCache { a1, a2, z3 }
}

/// Raw class scores for one window; softmax is applied by [`predict`].
pub fn forward(params: &ModelParams, x: &WindowedSample) -> Result<[f64; 3]> {
    forward_flat(params, &x.flatten())
}

/// As [`forward`], for an already flattened input.
pub fn forward_flat(params: &ModelParams, x: &[f64]) -> Result<[f64; 3]> {
    if params.dims.output != 3 {
        return Err(Error::Shape("forward_flat expects a 3-class head".into()));
    }
    if x.len() != params.dims.input {
        return Err(Error::Shape(format!(
            "input has {} entries, classifier expects {}",
            x.len(),
            params.dims.input
        )));
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
    let cache = batch_forward(params, &xv);
    let row = cache.z3.row(0);
    Ok([row[0], row[1], row[2]])
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Intent probabilities for one window.
pub fn predict(params: &ModelParams, x: &WindowedSample) -> Result<IntentDistribution> {
    let logits = forward(params, x)?;
    let p = softmax(&logits);
    Ok(IntentDistribution::from_probs([p[0], p[1], p[2]]))
}

/// Predicted class indices (argmax of the logits; lowest index on ties).
pub fn predict_batch(params: &ModelParams, batch: &Batch) -> Result<Vec<usize>> {
    check_batch(params, batch, "predict_batch")?;
    let cache = batch_forward(params, &batch.x.view());
    Ok(cache
        .z3
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn loss_from_logits(z3: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in z3.rows().into_iter().zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Mean cross-entropy of the batch, in log-sum-exp form.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch, "batch_loss")?;
    let cache = batch_forward(params, &batch.x.view());
    Ok(loss_from_logits(&cache.z3, &batch.labels))
}

// ---------------------------------------------------------------------------
// Exact gradient
// ---------------------------------------------------------------------------

fn apply_dact(mut m: Array2<f64>, acts: &Array2<f64>, act: Activation) -> Array2<f64> {
    m.zip_mut_with(acts, |v, &a| *v *= act.d_from_act(a));
    m
}

/// `(P - onehot(labels)) / B`: the logit-space gradient of the mean loss.
fn logit_delta(z3: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut d3 = softmax_rows(z3);
    let b_inv = 1.0 / labels.len() as f64;
    for (mut row, &y) in d3.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
        row.mapv_inplace(|v| v * b_inv);
    }
    d3
}

/// Exact reverse-mode gradient of [`batch_loss`] in every parameter.
pub fn batch_gradient(params: &ModelParams, batch: &Batch) -> Result<GradientVector> {
    Ok(batch_loss_and_gradient(params, batch)?.1)
}

/// One shared forward pass returning both the loss and its gradient.
pub fn batch_loss_and_gradient(params: &ModelParams, batch: &Batch) -> Result<(f64, GradientVector)> {
    check_batch(params, batch, "batch_gradient")?;
    let act = params.activation;
    let x = batch.x.view();
    let cache = batch_forward(params, &x);
    let loss = loss_from_logits(&cache.z3, &batch.labels);

    let d3 = logit_delta(&cache.z3, &batch.labels);
    let gw3 = d3.t().dot(&cache.a2);
    let gb3 = d3.sum_axis(Axis(0));
    let d2 = apply_dact(d3.dot(&params.w3()), &cache.a2, act);
    let gw2 = d2.t().dot(&cache.a1);
    let gb2 = d2.sum_axis(Axis(0));
    let d1 = apply_dact(d2.dot(&params.w2()), &cache.a1, act);
    let gw1 = d1.t().dot(&x);
    let gb1 = d1.sum_axis(Axis(0));

    let mut grad = ModelParams::zeros(&params.config());
    grad.w1_mut().assign(&gw1);
    grad.b1_mut().copy_from_slice(gb1.as_slice().unwrap());
    grad.w2_mut().assign(&gw2);
    grad.b2_mut().copy_from_slice(gb2.as_slice().unwrap());
    grad.w3_mut().assign(&gw3);
    grad.b3_mut().copy_from_slice(gb3.as_slice().unwrap());
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Hessian-vector product
// ---------------------------------------------------------------------------

/// Hessian-vector product `H(params) . v` of the batch loss.
///
/// Computed by taking the scalar `s = v . grad(loss)` and reverse-propagating
/// through the forward-and-backward computation that produced the gradient,
/// so no second-derivative expression is ever formed explicitly. Exact for
/// tanh; for ReLU it uses the same measure-zero kink convention as
/// [`batch_gradient`].
pub fn loss_hvp(params: &ModelParams, batch: &Batch, v: &ModelParams) -> Result<GradientVector> {
    check_batch(params, batch, "loss_hvp")?;
    params.check_same_shape(v)?;
    let act = params.activation;
    let x = batch.x.view();
    let b_inv = 1.0 / batch.len() as f64;

    // Recorded computation: forward activations, then the gradient-side
    // intermediates (pre-activation deltas d3, d2 and their linear parts
    // u2, u1).
    let cache = batch_forward(params, &x);
    let p = softmax_rows(&cache.z3);
    let d3 = {
        let mut d3 = p.clone();
        for (mut row, &y) in d3.rows_mut().into_iter().zip(&batch.labels) {
            row[y] -= 1.0;
            row.mapv_inplace(|t| t * b_inv);
        }
        d3
    };
    let u2 = d3.dot(&params.w3());
    let d2 = apply_dact(u2.clone(), &cache.a2, act);
    let u1 = d2.dot(&params.w2());

    // Adjoint sweep over that computation, seeded with v on the gradient
    // outputs. `*_bar` are adjoints; h* accumulate the product.
    //
    // grad_w1 = d1^T x, grad_b1 = sum_rows(d1)  =>  d1_bar = x V1^T + 1 c1^T
    let mut d1_bar = x.dot(&v.w1().t());
    d1_bar += &v.b1();

    // d1 = u1 * act'(z1)
    let u1_bar = apply_dact(d1_bar.clone(), &cache.a1, act);
    let mut z1_bar = d1_bar;
    z1_bar.zip_mut_with(&u1, |t, &u| *t *= u);
    z1_bar.zip_mut_with(&cache.a1, |t, &a| *t *= act.dd_from_act(a));

    // u1 = d2 w2  =>  adjoints into d2 and w2
    let mut d2_bar = u1_bar.dot(&params.w2().t());
    let hw2_backprop = d2.t().dot(&u1_bar);
    // grad_w2 = d2^T a1, grad_b2 = sum_rows(d2)
    d2_bar += &cache.a1.dot(&v.w2().t());
    d2_bar += &v.b2();
    let mut a1_bar = d2.dot(&v.w2());

    // d2 = u2 * act'(z2)
    let u2_bar = apply_dact(d2_bar.clone(), &cache.a2, act);
    let mut z2_bar = d2_bar;
    z2_bar.zip_mut_with(&u2, |t, &u| *t *= u);
    z2_bar.zip_mut_with(&cache.a2, |t, &a| *t *= act.dd_from_act(a));

    // u2 = d3 w3
    let mut d3_bar = u2_bar.dot(&params.w3().t());
    let hw3_backprop = d3.t().dot(&u2_bar);
    // grad_w3 = d3^T a2, grad_b3 = sum_rows(d3)
    d3_bar += &cache.a2.dot(&v.w3().t());
    d3_bar += &v.b3();
    let mut a2_bar = d3.dot(&v.w3());

    // d3 = (softmax(z3) - onehot)/B: softmax Jacobian (symmetric) times 1/B.
    let z3_bar = {
        let mut pd = p.clone();
        pd.zip_mut_with(&d3_bar, |t, &d| *t *= d);
        let row_dots = pd.sum_axis(Axis(1));
        let mut out = p;
        for ((mut row, pdrow), &dot) in out.rows_mut().into_iter().zip(pd.rows()).zip(&row_dots) {
            for (o, &pd_v) in row.iter_mut().zip(pdrow) {
                *o = (pd_v - *o * dot) * b_inv;
            }
        }
        out
    };

    // z3 = a2 w3^T + b3
    let hw3 = hw3_backprop + z3_bar.t().dot(&cache.a2);
    let hb3 = z3_bar.sum_axis(Axis(0));
    a2_bar += &z3_bar.dot(&params.w3());

    // a2 = act(z2)
    z2_bar += &apply_dact(a2_bar, &cache.a2, act);

    // z2 = a1 w2^T + b2
    let hw2 = hw2_backprop + z2_bar.t().dot(&cache.a1);
    let hb2 = z2_bar.sum_axis(Axis(0));
    a1_bar += &z2_bar.dot(&params.w2());

    // a1 = act(z1)
    z1_bar += &apply_dact(a1_bar, &cache.a1, act);

    // z1 = x w1^T + b1
    let hw1 = z1_bar.t().dot(&x);
    let hb1 = z1_bar.sum_axis(Axis(0));

    let mut out = ModelParams::zeros(&params.config());
    out.w1_mut().assign(&hw1);
    out.b1_mut().copy_from_slice(hb1.as_slice().unwrap());
    out.w2_mut().assign(&hw2);
    out.b2_mut().copy_from_slice(hb2.as_slice().unwrap());
    out.w3_mut().assign(&hw3);
    out.b3_mut().copy_from_slice(hb3.as_slice().unwrap());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central difference `(f(x + h e_j) - f(x - h e_j)) / 2h` over `coords`.
pub fn central_difference<F>(x: &[f64], h: f64, coords: &[usize], mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Precondition("finite-difference step h must be positive".into()));
    }
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &j in coords {
        if j >= work.len() {
            return Err(Error::Shape(format!("coordinate {j} out of range")));
        }
        let orig = work[j];
        work[j] = orig + h;
        let fp = f(&work);
        work[j] = orig - h;
        let fm = f(&work);
        work[j] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference estimate of [`batch_gradient`] on all coordinates.
pub fn fd_gradient(params: &ModelParams, batch: &Batch, h: f64) -> Result<GradientVector> {
    let coords: Vec<usize> = (0..params.len()).collect();
    let vals = fd_gradient_coords(params, batch, h, &coords)?;
    let mut grad = ModelParams::zeros(&params.config());
    grad.flatten_mut().copy_from_slice(&vals);
    Ok(grad)
}

/// Central-difference gradient restricted to `coords` (for cost control on
/// large nets).
pub fn fd_gradient_coords(params: &ModelParams, batch: &Batch, h: f64, coords: &[usize]) -> Result<Vec<f64>> {
    check_batch(params, batch, "fd_gradient")?;
    if h <= 0.0 {
        return Err(Error::Precondition("finite-difference step h must be positive".into()));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &j in coords {
        if j >= work.len() {
            return Err(Error::Shape(format!("coordinate {j} out of range")));
        }
        let orig = work.data[j];
        work.data[j] = orig + h;
        let lp = batch_loss(&work, batch)?;
        work.data[j] = orig - h;
        let lm = batch_loss(&work, batch)?;
        work.data[j] = orig;
        out.push((lp - lm) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error with an absolute floor: `|a-b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero coordinates (where finite differences only
/// resolve ~1e-11 absolute) from dominating an otherwise-tight comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state (first/second moments plus the step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    /// Fresh state for `params` with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ModelParams, grad: &GradientVector, lr: f64) -> Result<()> {
        params.check_same_shape(grad)?;
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameter count".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Plain gradient-descent update, `params -= lr * grad`.
pub fn sgd_step(params: &mut ModelParams, grad: &GradientVector, lr: f64) -> Result<()> {
    params.axpy(-lr, grad)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    /// Small architecture for oracle tests; 74 parameters with (6,5,4,3).
    pub fn tiny_config(input: usize, h1: usize, h2: usize, activation: Activation) -> NetworkConfig {
        NetworkConfig { dims: LayerDims { input, hidden1: h1, hidden2: h2, output: 3 }, activation }
    }

    /// Params with entries uniform in [-scale, scale] (biases included).
    pub fn random_params(cfg: &NetworkConfig, seed: u64, scale: f64) -> ModelParams {
        let mut p = ModelParams::zeros(cfg);
        let mut rng = seeds::rng(seed, "test/params", &[]);
        for v in p.flatten_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        p
    }

    /// Random batch with inputs in [-1, 1] and uniform labels.
    pub fn random_batch(input_dim: usize, n: usize, seed: u64) -> Batch {
        let mut rng = seeds::rng(seed, "test/batch", &[]);
        let x = Array2::from_shape_fn((n, input_dim), |_| rng.gen_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
        Batch { x, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn standard_param_count() {
        let dims = LayerDims::standard();
        assert_eq!(
            dims.param_count(),
            512 * 1600 + 512 + 128 * 512 + 128 + 3 * 128 + 3
        );
    }

    #[test]
    fn flatten_round_trip_is_exact() {
        let cfg = tiny_config(6, 5, 4, Activation::Tanh);
        let p = random_params(&cfg, 3, 0.7);
        let flat = p.flatten().to_vec();
        let back = ModelParams::from_flat(&cfg, flat.clone()).unwrap();
        assert_eq!(p, back);
        assert_eq!(back.flatten(), flat.as_slice());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let cfg = NetworkConfig::standard();
        let a = init_params(&cfg, 11);
        let b = init_params(&cfg, 11);
        assert_eq!(a, b);
        assert!(a.b1().iter().chain(a.b2().iter()).chain(a.b3().iter()).all(|&v| v == 0.0));
        let bound1 = (6.0f64 / 2112.0).sqrt();
        assert!(a.w1().iter().all(|&w| w.abs() <= bound1));
        assert!(a.w1().iter().any(|&w| w.abs() > 0.9 * bound1), "draws should fill the range");
        let c = init_params(&cfg, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_zero_params_gives_zero_logits() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let p = ModelParams::zeros(&cfg);
        let logits = forward_flat(&p, &[0.3, -0.2, 0.9, 0.0]).unwrap();
        assert_eq!(logits, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_zero_weights_passes_through_final_bias() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut p = ModelParams::zeros(&cfg);
        p.b3_mut().copy_from_slice(&[0.4, -1.25, 2.0]);
        let logits = forward_flat(&p, &[0.3, -0.2, 0.9, 0.0]).unwrap();
        assert_eq!(logits, [0.4, -1.25, 2.0]);
    }

    /// 4 -> 3 -> 2 -> 3 net with hand-set weights; expected logits follow by
    /// expanding the matrix algebra by hand (ReLU stays in its linear
    /// region except one exactly-zero unit).
    #[test]
    fn forward_matches_hand_computation() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut p = ModelParams::zeros(&cfg);
        p.w1_mut().assign(&ndarray::arr2(&[
            [0.1, 0.2, 0.3, 0.4],
            [-0.5, 0.25, 0.0, 1.0],
            [0.2, -0.1, 0.1, -0.2],
        ]));
        p.b1_mut().copy_from_slice(&[0.05, -0.1, 0.2]);
        p.w2_mut().assign(&ndarray::arr2(&[[1.0, -1.0, 0.5], [0.2, 0.3, -0.4]]));
        p.b2_mut().copy_from_slice(&[0.1, 0.0]);
        p.w3_mut().assign(&ndarray::arr2(&[[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3]]));
        p.b3_mut().copy_from_slice(&[0.01, -0.02, 0.03]);

        let logits = forward_flat(&p, &[1.0, 2.0, -1.0, 0.5]).unwrap();
        assert_abs_diff_eq!(logits[0], 0.58, epsilon = 1e-12);
        assert_abs_diff_eq!(logits[1], -0.065, epsilon = 1e-12);
        assert_abs_diff_eq!(logits[2], 0.138, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let p = ModelParams::zeros(&cfg);
        assert!(matches!(forward_flat(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[1000.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(p[1] < 1e-300 && p[2] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 7f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn uniform_predictor_loss_is_ln3() {
        let cfg = tiny_config(6, 5, 4, Activation::Relu);
        let p = ModelParams::zeros(&cfg);
        let batch = random_batch(6, 17, 5);
        let loss = batch_loss(&p, &batch).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let mut p = ModelParams::zeros(&cfg);
            p.b3_mut().copy_from_slice(&[margin, 0.0, 0.0]);
            let batch = Batch { x: Array2::zeros((4, 4)), labels: vec![0; 4] };
            let loss = batch_loss(&p, &batch).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-13);
    }

    #[test]
    fn two_sample_loss_matches_hand_arithmetic() {
        // Zero weights, final bias = logits, so each sample sees the same
        // logits; labels differ.
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut p = ModelParams::zeros(&cfg);
        let logits = [0.2, -0.4, 1.1];
        p.b3_mut().copy_from_slice(&logits);
        let batch = Batch { x: Array2::zeros((2, 4)), labels: vec![0, 2] };
        // Oracle route: direct per-sample cross-entropy, no log-sum-exp.
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let expected = 0.5 * ((z.ln() - 0.2) + (z.ln() - 1.1));
        let loss = batch_loss(&p, &batch).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let p = ModelParams::zeros(&cfg);
        let batch = Batch { x: Array2::zeros((0, 4)), labels: vec![] };
        assert!(matches!(batch_loss(&p, &batch), Err(Error::Empty(_))));
    }

    #[test]
    fn gradient_at_zero_params_single_class() {
        let cfg = tiny_config(5, 4, 3, Activation::Tanh);
        let p = ModelParams::zeros(&cfg);
        let batch = random_batch(5, 6, 9);
        let batch = Batch { labels: vec![2; 6], ..batch };
        let g = batch_gradient(&p, &batch).unwrap();
        // Only the layer-3 bias sees a gradient: softmax(0) - onehot.
        let gb3 = g.b3();
        assert_abs_diff_eq!(gb3[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gb3[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gb3[2], 1.0 / 3.0 - 1.0, epsilon = 1e-15);
        assert!(g.w1().iter().all(|&v| v == 0.0));
        assert!(g.w2().iter().all(|&v| v == 0.0));
        assert!(g.w3().iter().all(|&v| v == 0.0));
        assert!(g.b1().iter().all(|&v| v == 0.0));
        assert!(g.b2().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let cfg = tiny_config(6, 5, 4, Activation::Tanh);
        let p = random_params(&cfg, 21, 0.6);
        let batch = random_batch(6, 7, 22);
        let mut x2 = Array2::zeros((14, 6));
        let mut labels2 = Vec::new();
        for (i, (row, &y)) in batch.x.rows().into_iter().zip(&batch.labels).enumerate() {
            x2.row_mut(2 * i).assign(&row);
            x2.row_mut(2 * i + 1).assign(&row);
            labels2.push(y);
            labels2.push(y);
        }
        let doubled = Batch { x: x2, labels: labels2 };
        let g1 = batch_gradient(&p, &batch).unwrap();
        let g2 = batch_gradient(&p, &doubled).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-13);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_tiny() {
        for trial in 0..4u64 {
            let cfg = tiny_config(6, 5, 4, Activation::Tanh);
            let p = random_params(&cfg, 100 + trial, 0.8);
            let batch = random_batch(6, 9, 200 + trial);
            let g = batch_gradient(&p, &batch).unwrap();
            let fd = fd_gradient(&p, &batch, 1e-5).unwrap();
            let worst = g
                .flatten()
                .iter()
                .zip(fd.flatten())
                .map(|(&a, &b)| relative_error(a, b, 1e-3))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-6, "trial {trial}: max relative error {worst}");
        }
    }

    #[test]
    fn fd_gradient_rejects_nonpositive_h() {
        let cfg = tiny_config(4, 3, 2, Activation::Tanh);
        let p = ModelParams::zeros(&cfg);
        let batch = random_batch(4, 3, 1);
        assert!(matches!(fd_gradient(&p, &batch, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn central_difference_exact_on_quadratics() {
        // f(x) = 3x0^2 - 2x0x1 + 0.5x1^2 + 4x1; central differences are
        // exact for quadratics up to rounding, for any h.
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + 4.0 * x[1];
        let x = [1.25, -0.75];
        let expect = [6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + x[1] + 4.0];
        for h in [1e-1, 1e-3, 1e-6] {
            let g = central_difference(&x, h, &[0, 1], f).unwrap();
            assert_abs_diff_eq!(g[0], expect[0], epsilon = 1e-7);
            assert_abs_diff_eq!(g[1], expect[1], epsilon = 1e-7);
        }
        assert!(central_difference(&x, 0.0, &[0], f).is_err());
    }

    #[test]
    fn hvp_matches_directional_finite_difference_of_gradient() {
        // (grad(theta + h v) - grad(theta - h v)) / 2h ~ H v
        for trial in 0..4u64 {
            let cfg = tiny_config(6, 5, 4, Activation::Tanh);
            let p = random_params(&cfg, 300 + trial, 0.7);
            let v = random_params(&cfg, 400 + trial, 1.0);
            let batch = random_batch(6, 8, 500 + trial);

            let hv = loss_hvp(&p, &batch, &v).unwrap();

            let h = 1e-6;
            let mut plus = p.clone();
            plus.axpy(h, &v).unwrap();
            let mut minus = p.clone();
            minus.axpy(-h, &v).unwrap();
            let gp = batch_gradient(&plus, &batch).unwrap();
            let gm = batch_gradient(&minus, &batch).unwrap();

            let worst = hv
                .flatten()
                .iter()
                .zip(gp.flatten().iter().zip(gm.flatten()))
                .map(|(&a, (&p_, &m_))| relative_error(a, (p_ - m_) / (2.0 * h), 1e-3))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-5, "trial {trial}: max relative error {worst}");
        }
    }

    #[test]
    fn hvp_is_symmetric_bilinear() {
        let cfg = tiny_config(5, 4, 3, Activation::Tanh);
        let p = random_params(&cfg, 71, 0.5);
        let u = random_params(&cfg, 72, 1.0);
        let v = random_params(&cfg, 73, 1.0);
        let batch = random_batch(5, 6, 74);
        let hu = loss_hvp(&p, &batch, &u).unwrap();
        let hv = loss_hvp(&p, &batch, &v).unwrap();
        let vhu = v.dot(&hu).unwrap();
        let uhv = u.dot(&hv).unwrap();
        assert_abs_diff_eq!(vhu, uhv, epsilon = 1e-10 * vhu.abs().max(1.0));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut p = random_params(&cfg, 31, 0.5);
        let before = p.clone();
        let mut g = ModelParams::zeros(&cfg);
        let mut rng = seeds::rng(32, "test/grad", &[]);
        for v in g.flatten_mut() {
            *v = rng.gen_range(1e-3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let lr = 0.01;
        let mut state = AdamState::new(&p);
        state.step(&mut p, &g, lr).unwrap();
        for ((pv, bv), gv) in p.flatten().iter().zip(before.flatten()).zip(g.flatten()) {
            let update = pv - bv;
            assert!(update.signum() == -gv.signum());
            let mag = update.abs();
            assert!(mag <= lr && mag >= lr * (1.0 - 1e-4), "step magnitude {mag} outside [lr(1-1e-4), lr]");
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let mut p = random_params(&cfg, 33, 0.5);
        let before = p.clone();
        let g = ModelParams::zeros(&cfg);
        let mut state = AdamState::new(&p);
        for _ in 0..25 {
            state.step(&mut p, &g, 0.05).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let cfg = tiny_config(6, 5, 4, Activation::Tanh);
        let batch = random_batch(6, 10, 41);
        let run = || {
            let mut p = init_params(&cfg, 42);
            let mut state = AdamState::new(&p);
            for _ in 0..10 {
                let g = batch_gradient(&p, &batch).unwrap();
                state.step(&mut p, &g, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let cfg = tiny_config(4, 3, 2, Activation::Relu);
        let other = tiny_config(5, 3, 2, Activation::Relu);
        let mut p = ModelParams::zeros(&cfg);
        let g = ModelParams::zeros(&other);
        let mut state = AdamState::new(&p);
        assert!(matches!(state.step(&mut p, &g, 0.01), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-1e6f64..1e6, 3)) {
            let p = softmax(&z);
            // exp underflows to exactly 0 once logits sit ~745 below the
            // max; within [0, 1] and a unit sum is what f64 can promise.
            prop_assert!(p.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
            prop_assert!(p.iter().any(|&v| v > 0.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_stays_interior_for_moderate_logits(z in proptest::collection::vec(-15.0f64..15.0, 3)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..1000) {
            let cfg = tiny_config(5, 4, 3, Activation::Tanh);
            let p = random_params(&cfg, seed, 0.6);
            let batch = random_batch(5, 11, seed + 5000);
            let mut order: Vec<usize> = (0..batch.len()).collect();
            let mut rng = seeds::rng(seed, "test/perm", &[]);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let permuted = batch.gather(&order);
            let l1 = batch_loss(&p, &batch).unwrap();
            let l2 = batch_loss(&p, &permuted).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        }

        #[test]
        fn flatten_unflatten_round_trips(seed in 0u64..1000) {
            let cfg = tiny_config(6, 5, 4, Activation::Relu);
            let p = random_params(&cfg, seed, 2.0);
            let back = ModelParams::from_flat(&cfg, p.flatten().to_vec()).unwrap();
            prop_assert_eq!(p, back);
        }
    }
}
