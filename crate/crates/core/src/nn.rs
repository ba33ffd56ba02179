//! Dense feedforward networks with exact reverse-mode gradients, the Adam
//! optimizer, SAM perturbation, and a finite-difference gradient oracle.
//!
//! Parameters live in one flat [`WeightVector`]. Layer l with fan-in `n_in`
//! and fan-out `n_out` occupies a row-major weight block `W[o*n_in + i]`
//! followed by a bias block of length `n_out`. The gradient engine is a
//! fixed layerwise accumulation over {affine, tanh, relu, softmax
//! cross-entropy, mean squared error}; there is no general tape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::vector::WeightVector;

pub const DEFAULT_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    /// Raw affine outputs; no task loss is defined for this head.
    Linear,
    /// Mean cross-entropy over integer class labels.
    SoftmaxCrossEntropy,
    /// Mean squared error over real-valued targets.
    MeanSquaredError,
}

/// Architecture of a dense network: layer widths, hidden activation, head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl NetworkSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        output_head: OutputHead,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec("layer sizes must be >= 1".into()));
        }
        Ok(NetworkSpec {
            layer_sizes,
            activation,
            output_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weight offset, bias offset, fan-in, fan-out) per layer.
    fn layer_layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            out.push((off, off + n_in * n_out, n_in, n_out));
            off += n_in * n_out + n_out;
        }
        out
    }

    fn check_weights(&self, w: &WeightVector) -> Result<()> {
        if w.len() != self.parameter_count() {
            return Err(Error::dim(format!(
                "weight vector has {} entries, spec needs {}",
                w.len(),
                self.parameter_count()
            )));
        }
        Ok(())
    }
}

/// A batch of labeled samples. Classification heads take class indices,
/// regression heads real-valued target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |r| r.len())
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }

    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let d = spec.input_dim();
        if self.inputs.iter().any(|r| r.len() != d) {
            return Err(Error::dim(format!("batch input width != {d}")));
        }
        match (&self.targets, spec.output_head) {
            (Targets::Classes(labels), OutputHead::SoftmaxCrossEntropy) => {
                if labels.len() != self.inputs.len() {
                    return Err(Error::dim("label count != sample count"));
                }
                if labels.iter().any(|&l| l >= spec.output_dim()) {
                    return Err(Error::arg("class label out of range"));
                }
            }
            (Targets::Values(rows), OutputHead::MeanSquaredError) => {
                if rows.len() != self.inputs.len() {
                    return Err(Error::dim("target count != sample count"));
                }
                if rows.iter().any(|r| r.len() != spec.output_dim()) {
                    return Err(Error::dim("target width != output width"));
                }
            }
            (_, OutputHead::Linear) => {
                return Err(Error::arg("linear head has no task loss"));
            }
            _ => {
                return Err(Error::arg(
                    "target kind does not match the output head",
                ));
            }
        }
        Ok(())
    }
}

/// Loss value together with its exact gradient.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub grad: WeightVector,
}

/// Adam optimizer state. `step` counts completed updates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: WeightVector,
    pub v: WeightVector,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Result<Self> {
        Self::with_params(dim, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(dim: usize, lr: f64, beta1: f64, beta2: f64, eps_stab: f64) -> Result<Self> {
        if lr <= 0.0 || eps_stab <= 0.0 {
            return Err(Error::arg("lr and eps_stab must be positive"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::arg("betas must lie in (0,1)"));
        }
        Ok(AdamState {
            m: WeightVector::zeros(dim),
            v: WeightVector::zeros(dim),
            step: 0,
            lr,
            beta1,
            beta2,
            eps_stab,
        })
    }
}

/// Gaussian-initialized weights for a spec; deterministic per rng state.
pub fn init_network(spec: &NetworkSpec, init_std: f64, rng: &mut ChaCha8Rng) -> Result<WeightVector> {
    if init_std <= 0.0 {
        return Err(Error::arg("init_std must be positive"));
    }
    spec.parameter_count(); // spec is validated at construction
    WeightVector::new(rng::gaussian_vec(rng, spec.parameter_count(), init_std))
}

fn apply_activation(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Tanh => z.iter().map(|x| x.tanh()).collect(),
        Activation::Relu => z.iter().map(|x| x.max(0.0)).collect(),
    }
}

/// d(activation)/dz given pre-activation z and post-activation h.
fn activation_derivative(act: Activation, z: f64, h: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - h * h,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Per-layer activations recorded by [`forward_trace`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// activations[l] is what enters layer l; activations[0] is the batch input.
    activations: Vec<Vec<Vec<f64>>>,
    /// pre_activations[l] is z = W h + b of layer l.
    pre_activations: Vec<Vec<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn outputs(&self) -> &Vec<Vec<f64>> {
        self.pre_activations.last().unwrap()
    }
}

/// Affine + activation composition; returns final affine outputs (logits for
/// a softmax head). Pure in all arguments.
pub fn forward(spec: &NetworkSpec, w: &WeightVector, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(forward_trace(spec, w, inputs)?.outputs().clone())
}

/// Forward pass that keeps every intermediate needed by [`backward`].
pub fn forward_trace(
    spec: &NetworkSpec,
    w: &WeightVector,
    inputs: &[Vec<f64>],
) -> Result<ForwardTrace> {
    spec.check_weights(w)?;
    let d = spec.input_dim();
    if inputs.iter().any(|r| r.len() != d) {
        return Err(Error::dim(format!("input width != {d}")));
    }
    let layout = spec.layer_layout();
    let n_layers = layout.len();
    let mut activations: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers + 1);
    let mut pre_activations: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers);
    activations.push(inputs.to_vec());

    for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
        let current = &activations[l];
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(current.len());
        for h in current {
            let mut z = vec![0.0; n_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[w_off + o * n_in..w_off + (o + 1) * n_in];
                let mut acc = w[b_off + o];
                for (wi, hi) in row.iter().zip(h.iter()) {
                    acc += wi * hi;
                }
                *zo = acc;
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} pre-activation")));
            }
            zs.push(z);
        }
        let last = l + 1 == n_layers;
        if !last {
            let hs = zs
                .iter()
                .map(|z| apply_activation(spec.activation, z))
                .collect();
            activations.push(hs);
        }
        pre_activations.push(zs);
    }

    Ok(ForwardTrace {
        activations,
        pre_activations,
    })
}

/// Reverse-mode accumulation from per-sample output gradients down to a
/// parameter gradient. `output_grads` is dL/d(final affine outputs).
pub fn backward(
    spec: &NetworkSpec,
    w: &WeightVector,
    trace: &ForwardTrace,
    output_grads: &[Vec<f64>],
) -> Result<WeightVector> {
    spec.check_weights(w)?;
    let layout = spec.layer_layout();
    let n_layers = layout.len();
    let n_samples = trace.activations[0].len();
    if output_grads.len() != n_samples {
        return Err(Error::dim("output grad count != sample count"));
    }
    if output_grads.iter().any(|g| g.len() != spec.output_dim()) {
        return Err(Error::dim("output grad width != output width"));
    }

    let mut grad = vec![0.0; w.len()];
    // dz for the layer currently being processed, per sample.
    let mut dz: Vec<Vec<f64>> = output_grads.to_vec();

    for l in (0..n_layers).rev() {
        let (w_off, b_off, n_in, _n_out) = layout[l];
        let inputs_l = &trace.activations[l];
        for (s, dz_s) in dz.iter().enumerate() {
            let h = &inputs_l[s];
            for (o, &g_o) in dz_s.iter().enumerate() {
                grad[b_off + o] += g_o;
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (gi, hi) in row.iter_mut().zip(h.iter()) {
                    *gi += g_o * hi;
                }
            }
        }
        if l > 0 {
            // Propagate to the previous layer's post-activation, then
            // through its activation derivative.
            let z_prev = &trace.pre_activations[l - 1];
            let h_prev = &trace.activations[l];
            let mut next_dz = Vec::with_capacity(n_samples);
            for (s, dz_s) in dz.iter().enumerate() {
                let mut dh = vec![0.0; n_in];
                for (o, &g_o) in dz_s.iter().enumerate() {
                    let row = &w[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (di, wi) in dh.iter_mut().zip(row.iter()) {
                        *di += g_o * wi;
                    }
                }
                for i in 0..n_in {
                    dh[i] *= activation_derivative(spec.activation, z_prev[s][i], h_prev[s][i]);
                }
                next_dz.push(dh);
            }
            dz = next_dz;
        }
    }

    WeightVector::new(grad)
}

fn head_loss_and_grad(
    spec: &NetworkSpec,
    outputs: &[Vec<f64>],
    batch: &Batch,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len() as f64;
    match (&batch.targets, spec.output_head) {
        (Targets::Classes(labels), OutputHead::SoftmaxCrossEntropy) => {
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(outputs.len());
            for (z, &label) in outputs.iter().zip(labels.iter()) {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                loss += sum.ln() - (z[label] - m);
                let mut g: Vec<f64> = exps.iter().map(|e| e / sum / n).collect();
                g[label] -= 1.0 / n;
                grads.push(g);
            }
            Ok((loss / n, grads))
        }
        (Targets::Values(rows), OutputHead::MeanSquaredError) => {
            let width = spec.output_dim() as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(outputs.len());
            for (z, t) in outputs.iter().zip(rows.iter()) {
                let mut g = vec![0.0; z.len()];
                for ((gi, zi), ti) in g.iter_mut().zip(z.iter()).zip(t.iter()) {
                    let r = zi - ti;
                    loss += r * r;
                    *gi = 2.0 * r / (n * width);
                }
                grads.push(g);
            }
            Ok((loss / (n * width), grads))
        }
        _ => Err(Error::arg(
            "target kind does not match the output head",
        )),
    }
}

/// Downstream task loss (mean cross-entropy or mean squared error) and its
/// exact gradient.
pub fn task_loss_grad(spec: &NetworkSpec, w: &WeightVector, batch: &Batch) -> Result<GradResult> {
    batch.validate(spec)?;
    let trace = forward_trace(spec, w, &batch.inputs)?;
    let (loss, output_grads) = head_loss_and_grad(spec, trace.outputs(), batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("task loss".into()));
    }
    let grad = backward(spec, w, &trace, &output_grads)?;
    Ok(GradResult { loss, grad })
}

/// Loss value only; shares the forward path with [`task_loss_grad`].
pub fn task_loss(spec: &NetworkSpec, w: &WeightVector, batch: &Batch) -> Result<f64> {
    batch.validate(spec)?;
    let trace = forward_trace(spec, w, &batch.inputs)?;
    let (loss, _) = head_loss_and_grad(spec, trace.outputs(), batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("task loss".into()));
    }
    Ok(loss)
}

/// Central finite differences of an arbitrary scalar function, one
/// coordinate at a time. Oracle machinery for gradient verification.
pub fn finite_diff<F>(f: F, w: &WeightVector, h: f64) -> Result<WeightVector>
where
    F: Fn(&WeightVector) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut grad = vec![0.0; w.len()];
    let mut probe = w.clone();
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    WeightVector::new(grad)
}

/// Central-difference approximation of the task-loss gradient.
pub fn finite_diff_grad(
    spec: &NetworkSpec,
    w: &WeightVector,
    batch: &Batch,
    h: f64,
) -> Result<WeightVector> {
    finite_diff(|probe| task_loss(spec, probe, batch), w, h)
}

/// One Adam update with bias correction. Pure: returns the new weights and
/// state, leaving the inputs untouched.
pub fn adam_step(
    state: &AdamState,
    w: &WeightVector,
    grad: &WeightVector,
) -> Result<(WeightVector, AdamState)> {
    if w.len() != grad.len() || w.len() != state.m.len() {
        return Err(Error::dim("adam_step: weight/grad/state dims differ"));
    }
    grad.check_finite("adam_step gradient")?;
    let mut next = state.clone();
    next.step = state.step + 1;
    let t = next.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut new_w = w.clone();
    for i in 0..w.len() {
        let g = grad[i];
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        new_w[i] = w[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps_stab);
    }
    new_w.check_finite("adam_step output")?;
    Ok((new_w, next))
}

/// SAM perturbation: rho * g / ||g||, or zero when the gradient is
/// (numerically) zero.
pub fn sam_perturb(grad: &WeightVector, rho: f64) -> Result<WeightVector> {
    if rho < 0.0 {
        return Err(Error::arg("rho must be nonnegative"));
    }
    let norm = grad.norm();
    if norm < 1e-12 || rho == 0.0 {
        return Ok(WeightVector::zeros(grad.len()));
    }
    Ok(grad.scaled(rho / norm))
}
