use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{gaussian_sample, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Layer widths from input to output. Hidden layers use `activation`, the
/// output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "MLP widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Short label such as `tanh[32-64-8]`, used to group clients.
    pub fn label(&self) -> String {
        let widths: Vec<String> = self.layer_widths.iter().map(|w| w.to_string()).collect();
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        format!("{act}[{}]", widths.join("-"))
    }
}

/// Affine layer `x ↦ x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// He-scaled Gaussian weights, zero bias.
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Result<Dense> {
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Dense {
            weight: gaussian_sample(rng, fan_in, fan_out, 0.0, std)?,
            bias: vec![0.0; fan_out],
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row_vector(&self.bias)
    }

    pub(crate) fn zeros_like(&self) -> Dense {
        Dense::zeros(self.fan_in(), self.fan_out())
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &Dense) -> Result<()> {
        self.weight = self.weight.add_scaled(&other.weight, alpha)?;
        for (b, o) in self.bias.iter_mut().zip(&other.bias) {
            *b += alpha * o;
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("Dense::axpy"));
        }
        Ok(())
    }

    pub(crate) fn scaled(&self, alpha: f64) -> Result<Dense> {
        Ok(Dense {
            weight: self.weight.scale(alpha)?,
            bias: self.bias.iter().map(|b| alpha * b).collect(),
        })
    }

    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Overwrites parameters from `src`, returning the number consumed.
    pub(crate) fn load_flat(&mut self, src: &[f64]) -> Result<usize> {
        let nw = self.weight.rows() * self.weight.cols();
        let total = nw + self.bias.len();
        if src.len() < total {
            return Err(Error::shape("Dense::load_flat", "parameter vector too short"));
        }
        self.weight = Matrix::new(self.weight.rows(), self.weight.cols(), src[..nw].to_vec())?;
        self.bias.copy_from_slice(&src[nw..total]);
        Ok(total)
    }
}

/// Cached values of one forward pass, enough to backpropagate.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
    /// Final output.
    output: Matrix,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

/// Stack of dense layers; every layer but the last is followed by `activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Result<Mlp> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense::he(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp {
            layers,
            activation: spec.activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_width() {
            return Err(Error::shape(
                "mlp forward",
                format!("input has {} columns, network expects {}", x.cols(), self.input_width()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            h = if i < last {
                let act = self.activation;
                z.map(|v| act.apply(v))?
            } else {
                z
            };
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &Matrix) -> Result<Tape> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            inputs.push(h);
            h = if i < last {
                let act = self.activation;
                z.map(|v| act.apply(v))?
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Returns layer gradients and the gradient with respect to the input,
    /// given `grad_out = ∂loss/∂output`.
    pub fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<(Vec<Dense>, Matrix)> {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // delta currently holds ∂loss/∂h_i; move to ∂loss/∂z_i.
                let act = self.activation;
                let z = &tape.pre[i];
                let h = &tape.inputs[i + 1];
                let d: Vec<f64> = delta
                    .as_slice()
                    .iter()
                    .zip(z.as_slice().iter().zip(h.as_slice()))
                    .map(|(g, (&zv, &hv))| g * act.derivative(zv, hv))
                    .collect();
                delta = Matrix::new(delta.rows(), delta.cols(), d)?;
            }
            let gw = tape.inputs[i].t_matmul(&delta)?;
            let gb = delta.column_sums();
            grads.push(Dense {
                weight: gw,
                bias: gb,
            });
            delta = delta.matmul_t(&self.layers[i].weight)?;
        }
        grads.reverse();
        Ok((grads, delta))
    }
}
