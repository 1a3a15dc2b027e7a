//! Adam updates and gradient averaging for [`ModelParams`].
//!
//! Two moment recurrences are available. [`AdamMode::Paper`] raises the decay
//! coefficients to the power of the iteration count inside the moment
//! averages, `η ← γ_η^τ η + (1 − γ_η^τ) G`, exactly as the update rules are
//! written. [`AdamMode::Standard`] keeps the coefficients constant. Both use the
//! bias-corrected step `λ_τ = λ √(1 − γ_δ^τ) / (1 − γ_η^τ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Matrix;

/// Weight and bias gradient for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// A value shaped like [`ModelParams`]: gradients and Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layers: Vec<LayerGrad>,
}

impl Gradient {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All values, layer by layer, weights before biases. Same order as
    /// [`ModelParams::values`].
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

    pub fn same_shape(&self, other: &Gradient) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len()
            })
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers().len()
            && self.layers.iter().zip(params.layers()).all(|(g, p)| {
                g.weights.shape() == p.weights.shape() && g.bias.len() == p.bias.len()
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.values().map(f64::abs).fold(0.0, f64::max)
    }

    fn scale_in_place(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    fn add_scaled(&mut self, other: &Gradient, factor: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += factor * b;
        }
    }
}

fn check_shapes(grads: &[Gradient]) -> Result<()> {
    let Some(first) = grads.first() else {
        return Err(Error::Contract(
            "cannot average an empty list of gradients".into(),
        ));
    };
    if let Some(pos) = grads.iter().position(|g| !g.same_shape(first)) {
        return Err(Error::Contract(format!(
            "gradient {pos} does not match the shape of gradient 0"
        )));
    }
    Ok(())
}

/// Elementwise mean `(1/N) Σ g_n`, reduced in index order.
pub fn average_gradients(grads: &[Gradient]) -> Result<Gradient> {
    check_shapes(grads)?;
    let mut acc = grads[0].clone();
    for g in &grads[1..] {
        acc.add_scaled(g, 1.0);
    }
    if grads.len() > 1 {
        acc.scale_in_place(1.0 / grads.len() as f64);
    }
    Ok(acc)
}

/// Mean weighted by per-gradient sample counts, for uneven shards.
pub fn weighted_average_gradients(grads: &[Gradient], counts: &[usize]) -> Result<Gradient> {
    check_shapes(grads)?;
    if counts.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} gradients",
            counts.len(),
            grads.len()
        )));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("sample counts sum to zero".into()));
    }
    let mut acc = Gradient {
        layers: grads[0]
            .layers
            .iter()
            .map(|l| LayerGrad {
                weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect(),
    };
    for (g, &c) in grads.iter().zip(counts) {
        acc.add_scaled(g, c as f64 / total as f64);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamMode {
    /// Moment coefficients decayed as `γ^τ`.
    #[default]
    Paper,
    /// Textbook Adam with constant moment coefficients.
    Standard,
}

impl std::str::FromStr for AdamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown adam mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Base step λ.
    pub step: f64,
    /// Decay γ_η of the first moment.
    pub decay_mean: f64,
    /// Decay γ_δ of the second moment.
    pub decay_var: f64,
    pub epsilon: f64,
    pub mode: AdamMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step: 0.001,
            decay_mean: 0.9,
            decay_var: 0.999,
            epsilon: 1e-8,
            mode: AdamMode::Paper,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "adam step must be > 0, got {}",
                self.step
            )));
        }
        for (name, g) in [
            ("decay_mean", self.decay_mean),
            ("decay_var", self.decay_var),
        ] {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {g}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// First moment η.
    pub mean: Gradient,
    /// Second moment δ.
    pub var: Gradient,
    /// Iteration counter τ.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            mean: Gradient::zeros_like(params),
            var: Gradient::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update. Consumes and returns the model and state so that callers
/// holding the previous round's values cannot observe a half-applied step.
pub fn adam_step(
    mut params: ModelParams,
    mut state: AdamState,
    grad: &Gradient,
    cfg: &AdamConfig,
) -> Result<(ModelParams, AdamState)> {
    if !grad.matches(&params) || !state.mean.matches(&params) || !state.var.matches(&params) {
        return Err(Error::Contract(
            "gradient or optimizer state does not mirror the model".into(),
        ));
    }
    for (idx, layer) in grad.layers.iter().enumerate() {
        if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: idx,
                what: "gradient",
            });
        }
    }

    let tau = state.step;
    let (c_mean, c_var) = match cfg.mode {
        AdamMode::Paper => (powi(cfg.decay_mean, tau), powi(cfg.decay_var, tau)),
        AdamMode::Standard => (cfg.decay_mean, cfg.decay_var),
    };
    let next = tau + 1;
    let step =
        cfg.step * (1.0 - powi(cfg.decay_var, next)).sqrt() / (1.0 - powi(cfg.decay_mean, next));

    for (l, ((p, g), (m, v))) in params
        .layers_mut()
        .iter_mut()
        .zip(&grad.layers)
        .zip(
            state
                .mean
                .layers
                .iter_mut()
                .zip(state.var.layers.iter_mut()),
        )
        .enumerate()
    {
        let params_iter = p.weights.as_mut_slice().iter_mut().chain(p.bias.iter_mut());
        let grads_iter = g.weights.as_slice().iter().chain(g.bias.iter());
        let mean_iter = m.weights.as_mut_slice().iter_mut().chain(m.bias.iter_mut());
        let var_iter = v.weights.as_mut_slice().iter_mut().chain(v.bias.iter_mut());
        for (((w, &g), m), v) in params_iter.zip(grads_iter).zip(mean_iter).zip(var_iter) {
            *m = c_mean * *m + (1.0 - c_mean) * g;
            *v = c_var * *v + (1.0 - c_var) * g * g;
            *w -= step * *m / (v.sqrt() + cfg.epsilon);
        }
        if !p.weights.is_finite() || p.bias.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                layer: l,
                what: "parameters after update",
            });
        }
    }
    state.step = next;
    Ok((params, state))
}

fn powi(base: f64, exp: u64) -> f64 {
    // exponents beyond i32 underflow to zero for any base in [0, 1)
    if exp > i32::MAX as u64 {
        0.0
    } else {
        base.powi(exp as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};

    fn grad_of(values: &[f64]) -> Gradient {
        Gradient {
            layers: vec![LayerGrad {
                weights: Matrix::from_rows(&[values]),
                bias: vec![],
            }],
        }
    }

    fn scalar_model(w: f64) -> ModelParams {
        ModelParams::from_layers(vec![Layer {
            weights: Matrix::from_rows(&[[w]]),
            bias: vec![0.0],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    fn scalar_grad(g: f64) -> Gradient {
        Gradient {
            layers: vec![LayerGrad {
                weights: Matrix::from_rows(&[[g]]),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn average_examples() {
        assert_eq!(
            average_gradients(&[grad_of(&[2.0])]).unwrap(),
            grad_of(&[2.0])
        );
        assert_eq!(
            average_gradients(&[grad_of(&[2.0]), grad_of(&[4.0])]).unwrap(),
            grad_of(&[3.0])
        );
        // (1 + 3 + 5) / 3 = 3, (-2 + 0 + 8) / 3 = 2
        let avg = average_gradients(&[
            grad_of(&[1.0, -2.0]),
            grad_of(&[3.0, 0.0]),
            grad_of(&[5.0, 8.0]),
        ])
        .unwrap();
        let expected = [3.0, 2.0];
        for (a, e) in avg.values().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn average_rejects_empty_and_mismatched() {
        assert!(matches!(average_gradients(&[]), Err(Error::Contract(_))));
        assert!(matches!(
            average_gradients(&[grad_of(&[1.0]), grad_of(&[1.0, 2.0])]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_gradient_average_is_bit_exact() {
        let g = grad_of(&[-0.0, 1e-300, 0.1 + 0.2]);
        let avg = average_gradients(std::slice::from_ref(&g)).unwrap();
        let a: Vec<u64> = avg.values().map(f64::to_bits).collect();
        let b: Vec<u64> = g.values().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_average_matches_plain_for_equal_counts() {
        let gs = [grad_of(&[1.0, 2.0]), grad_of(&[3.0, 6.0])];
        let w = weighted_average_gradients(&gs, &[5, 5]).unwrap();
        let p = average_gradients(&gs).unwrap();
        for (a, b) in w.values().zip(p.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = weighted_average_gradients(&gs, &[3, 1]).unwrap();
        let vals: Vec<f64> = w.values().collect();
        assert!((vals[0] - 1.5).abs() < 1e-15 && (vals[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        for mode in [AdamMode::Paper, AdamMode::Standard] {
            let cfg = AdamConfig { mode, ..cfg };
            let mut p = scalar_model(0.37);
            let mut s = AdamState::new(&p);
            for _ in 0..50 {
                (p, s) = adam_step(p, s, &scalar_grad(0.0), &cfg).unwrap();
            }
            assert_eq!(p, scalar_model(0.37));
            assert_eq!(s.step, 50);
        }
    }

    #[test]
    fn paper_mode_first_step_is_a_no_op() {
        // γ^0 = 1 leaves both moments at zero on the first iteration.
        let p = scalar_model(1.0);
        let s = AdamState::new(&p);
        let (p1, s1) = adam_step(p.clone(), s, &scalar_grad(1.0), &AdamConfig::default()).unwrap();
        assert_eq!(p1, p);
        assert_eq!(s1.step, 1);
        assert_eq!(s1.mean.values().next(), Some(0.0));
    }

    #[test]
    fn update_opposes_gradient_sign() {
        for g in [1.0, -1.0, 1e-3, -250.0] {
            let std_cfg = AdamConfig {
                mode: AdamMode::Standard,
                ..AdamConfig::default()
            };
            let (p1, _) = adam_step(
                scalar_model(0.0),
                AdamState::new(&scalar_model(0.0)),
                &scalar_grad(g),
                &std_cfg,
            )
            .unwrap();
            let w = p1.layers()[0].weights[(0, 0)];
            assert!(w * g < 0.0, "standard: g = {g}, w = {w}");

            let cfg = AdamConfig::default();
            let mut p = scalar_model(0.0);
            let mut s = AdamState::new(&p);
            for _ in 0..2 {
                (p, s) = adam_step(p, s, &scalar_grad(g), &cfg).unwrap();
                assert!(p.layers()[0].weights[(0, 0)] * g <= 0.0);
            }
            assert!(p.layers()[0].weights[(0, 0)] * g < 0.0, "paper: g = {g}");
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let p = scalar_model(1.0);
        let s = AdamState::new(&p);
        let err = adam_step(p, s, &scalar_grad(f64::NAN), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 0, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig {
            step: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            decay_mean: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
