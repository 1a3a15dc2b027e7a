//! Feed-forward autoencoder used for demand prediction.
//!
//! Batches are row-major: each row is one user's popularity-factor vector and
//! each column one content. A layer maps `x ↦ α(x Wᵀ + v)` with `W` stored as
//! `(out_dim, in_dim)`, the row-wise counterpart of `α(W x + v)` on column
//! samples. Dropout sits after a chosen hidden layer and scales survivors by
//! `1/(1 − r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Gradient, LayerGrad};
use crate::tensor::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Linear => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Autoencoder layout: `inputs → hidden[0] → … → hidden[k] → inputs`, ReLU on
/// hidden layers and `output` on the reconstruction layer.
pub fn autoencoder_specs(inputs: usize, hidden: &[usize], output: Activation) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(inputs);
    dims.extend_from_slice(hidden);
    dims.push(inputs);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last { output } else { Activation::Relu };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `(out_dim, in_dim)`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weights.cols(), self.weights.rows(), self.activation)
    }
}

/// The global model: one weight matrix and bias vector per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.rows() == 0 || l.weights.cols() == 0 {
                return Err(Error::Config(format!("layer {i} has an empty dimension")));
            }
            if l.bias.len() != l.weights.rows() {
                return Err(Error::Shape {
                    op: "layer bias",
                    left: l.weights.shape(),
                    right: (l.bias.len(), 1),
                });
            }
        }
        for pair in layers.windows(2) {
            if pair[1].weights.cols() != pair[0].weights.rows() {
                return Err(Error::Shape {
                    op: "layer chain",
                    left: pair[0].weights.shape(),
                    right: pair[1].weights.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Uniform init in `±√(6 / (in + out))`, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| {
                if s.in_dim == 0 || s.out_dim == 0 {
                    return Err(Error::Config(format!("layer dims must be ≥ 1, got {s:?}")));
                }
                let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                Ok(Layer {
                    weights: Matrix::random_uniform(s.out_dim, s.in_dim, -bound, bound, rng),
                    bias: vec![0.0; s.out_dim],
                    activation: s.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// Bitwise fingerprint, used to reject traces from a different model.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    /// Fraction of units dropped.
    pub rate: f64,
    /// Dropout is applied to the output of this layer index.
    pub after_layer: Option<usize>,
}

impl DropoutSpec {
    pub fn new(rate: f64, after_layer: Option<usize>) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate, after_layer })
    }

    pub fn disabled() -> Self {
        Self {
            rate: 0.0,
            after_layer: None,
        }
    }

    /// Dropout right after the last hidden layer of an `n_layers` network.
    pub fn after_last_hidden(rate: f64, n_layers: usize) -> Result<Self> {
        let after = if n_layers >= 2 {
            Some(n_layers - 2)
        } else {
            None
        };
        Self::new(rate, after)
    }

    pub fn is_active(&self) -> bool {
        self.after_layer.is_some() && self.rate > 0.0
    }

    fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(after) = self.after_layer {
            if after + 1 >= n_layers {
                return Err(Error::Config(format!(
                    "dropout after layer {after} needs a following layer (model has {n_layers})"
                )));
            }
        }
        Ok(())
    }
}

/// Draws a dropout mask: each entry is `1/(1 − r)` with probability `1 − r`,
/// else zero.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Matrix {
    let keep_scale = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.uniform() >= rate {
                keep_scale
            } else {
                0.0
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("mask length matches shape")
}

/// Builds a dropout mask from explicit keep flags.
pub fn mask_from_keep(rows: usize, cols: usize, keep: &[bool], rate: f64) -> Result<Matrix> {
    let keep_scale = 1.0 / (1.0 - rate);
    let data = keep
        .iter()
        .map(|&k| if k { keep_scale } else { 0.0 })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input fed to each layer (after dropout where applicable).
    pub inputs: Vec<Matrix>,
    /// Affine outputs before the activation.
    pub pre: Vec<Matrix>,
    /// Post-activation outputs.
    pub post: Vec<Matrix>,
    /// `(layer index, scaled mask)` when dropout fired.
    pub dropout: Option<(usize, Matrix)>,
    pub mode: Mode,
    fingerprint: u64,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }
}

/// `α(x Wᵀ + v)` with `v` broadcast across the batch rows.
pub fn forward_layer(x: &Matrix, w: &Matrix, v: &[f64], activation: Activation) -> Result<Matrix> {
    Ok(affine(x, w, v)?.elementwise(|z| activation.apply(z)))
}

fn affine(x: &Matrix, w: &Matrix, v: &[f64]) -> Result<Matrix> {
    if v.len() != w.rows() {
        return Err(Error::Shape {
            op: "forward_layer bias",
            left: w.shape(),
            right: (v.len(), 1),
        });
    }
    let mut z = x.matmul_transposed(w)?;
    for i in 0..z.rows() {
        for (zij, b) in z.row_mut(i).iter_mut().zip(v) {
            *zij += b;
        }
    }
    Ok(z)
}

/// Chained forward pass. In [`Mode::Train`] a dropout mask is drawn from `rng`
/// for the configured layer; in [`Mode::Infer`] dropout is the identity and
/// `rng` is untouched.
pub fn forward(
    params: &ModelParams,
    x: &Matrix,
    dropout: &DropoutSpec,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Matrix, ForwardTrace)> {
    forward_inner(params, x, dropout, mode, |rows, cols| {
        dropout_mask(rows, cols, dropout.rate, rng)
    })
}

/// Inference-mode reconstruction of `x`.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let mut unused = RngStream::new(0);
    Ok(forward(
        params,
        x,
        &DropoutSpec::disabled(),
        Mode::Infer,
        &mut unused,
    )?
    .0)
}

/// Train-mode forward pass with a caller-supplied dropout mask.
pub fn forward_with_mask(
    params: &ModelParams,
    x: &Matrix,
    dropout: &DropoutSpec,
    mask: Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    let mut mask = Some(mask);
    forward_inner(params, x, dropout, Mode::Train, |_, _| {
        mask.take().expect("mask used once")
    })
}

fn forward_inner(
    params: &ModelParams,
    x: &Matrix,
    dropout: &DropoutSpec,
    mode: Mode,
    mut draw_mask: impl FnMut(usize, usize) -> Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    dropout.validate(params.layers.len())?;
    if x.cols() != params.input_dim() {
        return Err(Error::Shape {
            op: "forward input",
            left: x.shape(),
            right: params.layers[0].weights.shape(),
        });
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n);
    let mut used_mask = None;
    let mut current = x.clone();

    for (idx, layer) in params.layers.iter().enumerate() {
        let z = affine(&current, &layer.weights, &layer.bias)?;
        let mut out = z.elementwise(|v| layer.activation.apply(v));
        inputs.push(current);
        pre.push(z);
        post.push(out.clone());
        if mode == Mode::Train && dropout.is_active() && dropout.after_layer == Some(idx) {
            let mask = draw_mask(out.rows(), out.cols());
            out = out.hadamard(&mask)?;
            used_mask = Some((idx, mask));
        }
        current = out;
    }

    let trace = ForwardTrace {
        inputs,
        pre,
        post,
        dropout: used_mask,
        mode,
        fingerprint: params.fingerprint(),
    };
    Ok((current, trace))
}

/// Per-sample mean squared error over observed entries, averaged over samples
/// that have at least one observed entry.
pub fn masked_mse(y: &Matrix, x: &Matrix, mask: &Matrix) -> Result<f64> {
    check_loss_shapes(y, x, mask)?;
    let mut total = 0.0;
    let mut samples = 0usize;
    for i in 0..y.rows() {
        let (mut sq, mut count) = (0.0, 0usize);
        for ((&yv, &xv), &m) in y.row(i).iter().zip(x.row(i)).zip(mask.row(i)) {
            if m != 0.0 {
                let r = yv - xv;
                sq += r * r;
                count += 1;
            }
        }
        if count > 0 {
            total += sq / count as f64;
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::Degenerate(
            "loss mask has no observed entries".into(),
        ));
    }
    Ok(total / samples as f64)
}

fn check_loss_shapes(y: &Matrix, x: &Matrix, mask: &Matrix) -> Result<()> {
    for (op, other) in [("loss target", x), ("loss mask", mask)] {
        if other.shape() != y.shape() {
            return Err(Error::Shape {
                op,
                left: y.shape(),
                right: other.shape(),
            });
        }
    }
    Ok(())
}

/// Gradient of [`masked_mse`] with respect to every weight and bias.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    y: &Matrix,
    x: &Matrix,
    mask: &Matrix,
) -> Result<Gradient> {
    check_loss_shapes(y, x, mask)?;
    if trace.mode != Mode::Train {
        return Err(Error::Contract("backward needs a train-mode trace".into()));
    }
    if trace.len() != params.layers.len() || trace.fingerprint != params.fingerprint() {
        return Err(Error::Contract(
            "trace was produced by a different model".into(),
        ));
    }
    // dropout never follows the last layer, so its post-activation is the output
    let out = trace.post.last().expect("non-empty trace");
    if out != y {
        return Err(Error::Contract("output does not match the trace".into()));
    }

    // dL/dy for the per-sample masked mean
    let mut samples = 0usize;
    let mut counts = Vec::with_capacity(y.rows());
    for i in 0..y.rows() {
        let c = mask.row(i).iter().filter(|&&m| m != 0.0).count();
        if c > 0 {
            samples += 1;
        }
        counts.push(c);
    }
    if samples == 0 {
        return Err(Error::Degenerate(
            "loss mask has no observed entries".into(),
        ));
    }
    let mut upstream = Matrix::zeros(y.rows(), y.cols());
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let coeff = 2.0 / (samples as f64 * count as f64);
        let row = upstream.row_mut(i);
        for (((g, &yv), &xv), &m) in row.iter_mut().zip(y.row(i)).zip(x.row(i)).zip(mask.row(i)) {
            if m != 0.0 {
                *g = coeff * (yv - xv);
            }
        }
    }

    let mut grads = Vec::with_capacity(params.layers.len());
    for idx in (0..params.layers.len()).rev() {
        let layer = &params.layers[idx];
        let act = layer.activation;
        let delta = upstream.zip_with(&trace.pre[idx], |g, z| g * act.derivative(z))?;
        let d_weights = delta.transposed_matmul(&trace.inputs[idx])?;
        let d_bias = delta.column_sums();
        grads.push(LayerGrad {
            weights: d_weights,
            bias: d_bias,
        });
        if idx > 0 {
            let mut d_input = delta.matmul(&layer.weights)?;
            if let Some((after, m)) = &trace.dropout {
                if *after == idx - 1 {
                    d_input = d_input.hadamard(m)?;
                }
            }
            upstream = d_input;
        }
    }
    grads.reverse();
    Ok(Gradient { layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: &[&[f64]], v: &[f64], act: Activation) -> ModelParams {
        let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        ModelParams::from_layers(vec![Layer {
            weights: Matrix::from_rows(&rows),
            bias: v.to_vec(),
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn forward_layer_examples() {
        // one sample per row: x = (-3, 5)
        let y = forward_layer(
            &Matrix::from_rows(&[[-3.0, 5.0]]),
            &Matrix::identity(2),
            &[0.0, 0.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(y, Matrix::from_rows(&[[0.0, 5.0]]));

        let y = forward_layer(
            &Matrix::from_rows(&[[3.0]]),
            &Matrix::from_rows(&[[2.0]]),
            &[1.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(y, Matrix::from_rows(&[[7.0]]));

        // (2 - 4 + 0, 1 + 2 - 2) = (-2, 1) -> relu (0, 1)
        let w = Matrix::from_rows(&[[1.0, -1.0], [0.5, 0.5]]);
        let y = forward_layer(
            &Matrix::from_rows(&[[2.0, 4.0]]),
            &w,
            &[0.0, -2.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(y, Matrix::from_rows(&[[0.0, 1.0]]));
    }

    #[test]
    fn forward_layer_shape_errors() {
        let w = Matrix::identity(2);
        assert!(forward_layer(&Matrix::zeros(1, 3), &w, &[0.0, 0.0], Activation::Relu).is_err());
        assert!(forward_layer(&Matrix::zeros(1, 2), &w, &[0.0], Activation::Relu).is_err());
    }

    #[test]
    fn identity_network() {
        let p = single(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Linear);
        let x = Matrix::from_rows(&[[1.5, -2.0], [0.0, 3.0]]);
        let mut rng = RngStream::new(0);
        let (y, trace) = forward(&p, &x, &DropoutSpec::disabled(), Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn fixed_mask_scales_survivors() {
        // hidden layer is the identity on (4, 6); keep the second unit, r = 0.5
        let p = ModelParams::from_layers(vec![
            Layer {
                weights: Matrix::identity(2),
                bias: vec![0.0, 0.0],
                activation: Activation::Relu,
            },
            Layer {
                weights: Matrix::identity(2),
                bias: vec![0.0, 0.0],
                activation: Activation::Linear,
            },
        ])
        .unwrap();
        let drop = DropoutSpec::new(0.5, Some(0)).unwrap();
        let mask = mask_from_keep(1, 2, &[false, true], 0.5).unwrap();
        let (y, trace) =
            forward_with_mask(&p, &Matrix::from_rows(&[[4.0, 6.0]]), &drop, mask).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[0.0, 12.0]]));
        assert_eq!(trace.dropout.as_ref().map(|d| d.0), Some(0));
    }

    #[test]
    fn two_layer_composition() {
        let w1 = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        let w2 = Matrix::from_rows(&[[0.5, -1.0]]);
        let p = ModelParams::from_layers(vec![
            Layer {
                weights: w1.clone(),
                bias: vec![0.1, 0.2],
                activation: Activation::Relu,
            },
            Layer {
                weights: w2.clone(),
                bias: vec![0.3],
                activation: Activation::Relu,
            },
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0], [-2.0, 3.0]]);
        let h = forward_layer(&x, &w1, &[0.1, 0.2], Activation::Relu).unwrap();
        let expected = forward_layer(&h, &w2, &[0.3], Activation::Relu).unwrap();
        let (y, _) = forward(
            &p,
            &x,
            &DropoutSpec::disabled(),
            Mode::Infer,
            &mut RngStream::new(1),
        )
        .unwrap();
        assert_eq!(y, expected);
        // hand-expanded first sample: h = (3.1, -0.3 -> 0), y = 0.5*3.1 + 0.3 = 1.85
        assert!((y[(0, 0)] - 1.85).abs() < 1e-12);
    }

    #[test]
    fn infer_mode_ignores_rng() {
        let mut rng = RngStream::new(9);
        let specs = autoencoder_specs(6, &[4, 4], Activation::Relu);
        let p = ModelParams::init(&specs, &mut rng).unwrap();
        let drop = DropoutSpec::after_last_hidden(0.8, p.layers().len()).unwrap();
        let x = Matrix::random_uniform(3, 6, 0.0, 1.0, &mut rng);
        let (a, ta) = forward(&p, &x, &drop, Mode::Infer, &mut RngStream::new(1)).unwrap();
        let (b, _) = forward(&p, &x, &drop, Mode::Infer, &mut RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(ta.dropout.is_none());
    }

    #[test]
    fn masked_mse_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let any_mask = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(masked_mse(&x, &x, &any_mask).unwrap(), 0.0);

        let y = x.elementwise(|v| v + 2.0);
        assert_eq!(masked_mse(&y, &x, &any_mask).unwrap(), 4.0);

        // residuals [1,2;3,4], observed (1,1) and (2,2): per-sample {1, 16}
        let zero = Matrix::zeros(2, 2);
        let mask = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(masked_mse(&x, &zero, &mask).unwrap(), 8.5);
    }

    #[test]
    fn masked_mse_full_mask_is_plain_mse() {
        let mut rng = RngStream::new(5);
        let y = Matrix::random_uniform(4, 7, -1.0, 1.0, &mut rng);
        let x = Matrix::random_uniform(4, 7, -1.0, 1.0, &mut rng);
        let plain = y
            .sub(&x)
            .unwrap()
            .as_slice()
            .iter()
            .map(|r| r * r)
            .sum::<f64>()
            / 28.0;
        let full = Matrix::filled(4, 7, 1.0);
        assert!((masked_mse(&y, &x, &full).unwrap() - plain).abs() < 1e-14);
    }

    #[test]
    fn masked_mse_empty_mask_is_degenerate() {
        let y = Matrix::zeros(2, 2);
        assert!(matches!(masked_mse(&y, &y, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scalar_gradient() {
        // y = 0.5 * 1, loss (y - 1)^2: dL/dw = 2(wx - x)x = -1, dL/dv = -1
        let p = single(&[&[0.5]], &[0.0], Activation::Linear);
        let x = Matrix::from_rows(&[[1.0]]);
        let mask = Matrix::from_rows(&[[1.0]]);
        let (y, trace) = forward(
            &p,
            &x,
            &DropoutSpec::disabled(),
            Mode::Train,
            &mut RngStream::new(0),
        )
        .unwrap();
        let g = backward(&p, &trace, &y, &x, &mask).unwrap();
        assert!((g.layers[0].weights[(0, 0)] + 1.0).abs() < 1e-15);
        assert!((g.layers[0].bias[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction_has_zero_gradient() {
        let p = single(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Relu);
        let x = Matrix::from_rows(&[[0.5, 2.0]]);
        let mask = Matrix::filled(1, 2, 1.0);
        let (y, trace) = forward(
            &p,
            &x,
            &DropoutSpec::disabled(),
            Mode::Train,
            &mut RngStream::new(0),
        )
        .unwrap();
        let g = backward(&p, &trace, &y, &x, &mask).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let p = single(&[&[0.5]], &[0.0], Activation::Linear);
        let q = single(&[&[0.6]], &[0.0], Activation::Linear);
        let x = Matrix::from_rows(&[[1.0]]);
        let mask = Matrix::from_rows(&[[1.0]]);
        let (y, trace) = forward(
            &p,
            &x,
            &DropoutSpec::disabled(),
            Mode::Train,
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(matches!(
            backward(&q, &trace, &y, &x, &mask),
            Err(Error::Contract(_))
        ));
        let (y, trace) = forward(
            &p,
            &x,
            &DropoutSpec::disabled(),
            Mode::Infer,
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(matches!(
            backward(&p, &trace, &y, &x, &mask),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropped_units_get_no_upstream_gradient() {
        let mut rng = RngStream::new(21);
        let specs = autoencoder_specs(5, &[6], Activation::Linear);
        let p = ModelParams::init(&specs, &mut rng).unwrap();
        let drop = DropoutSpec::new(0.5, Some(0)).unwrap();
        let keep = [true, false, true, false, true, false];
        let mask = mask_from_keep(1, 6, &keep, 0.5).unwrap();
        let x = Matrix::random_uniform(1, 5, 0.1, 1.0, &mut rng);
        let (y, trace) = forward_with_mask(&p, &x, &drop, mask).unwrap();
        let g = backward(&p, &trace, &y, &x, &Matrix::filled(1, 5, 1.0)).unwrap();
        // output-layer weights reading a dropped unit see a zero input
        for j in 0..5 {
            for (h, &k) in keep.iter().enumerate() {
                if !k {
                    assert_eq!(g.layers[1].weights[(j, h)], 0.0);
                }
            }
        }
        for (h, &k) in keep.iter().enumerate() {
            if !k {
                assert_eq!(g.layers[0].bias[h], 0.0);
            }
        }
    }

    #[test]
    fn autoencoder_layout() {
        let specs = autoencoder_specs(40, &[64, 64], Activation::Relu);
        assert_eq!(specs.len(), 3);
        assert_eq!((specs[0].in_dim, specs[0].out_dim), (40, 64));
        assert_eq!((specs[2].in_dim, specs[2].out_dim), (64, 40));
        assert!(specs.iter().all(|s| s.activation == Activation::Relu));
        let lin = autoencoder_specs(4, &[2], Activation::Linear);
        assert_eq!(lin[0].activation, Activation::Relu);
        assert_eq!(lin[1].activation, Activation::Linear);
    }

    #[test]
    fn init_respects_bounds() {
        let specs = [LayerSpec::new(10, 20, Activation::Relu)];
        let p = ModelParams::init(&specs, &mut RngStream::new(4)).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(p.layers()[0]
            .weights
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
        assert_eq!(p.num_params(), 220);
    }

    #[test]
    fn dropout_placement_must_precede_a_layer() {
        let p = single(&[&[1.0]], &[0.0], Activation::Linear);
        let drop = DropoutSpec::new(0.5, Some(0)).unwrap();
        let r = forward(
            &p,
            &Matrix::from_rows(&[[1.0]]),
            &drop,
            Mode::Train,
            &mut RngStream::new(0),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(DropoutSpec::new(1.0, Some(0)).is_err());
    }
}
