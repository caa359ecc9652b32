//! Dense MLPs with squareplus hidden activations and a linear output layer.
//!
//! Batched passes use row-per-sample matrices so the heavy lifting goes
//! through `ndarray`'s GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// Weight matrix is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Smooth rectifier `(x + sqrt(x^2 + 4)) / 2`.
#[inline]
pub fn squareplus(x: f64) -> f64 {
    0.5 * (x + (x * x + 4.0).sqrt())
}

#[inline]
pub fn squareplus_grad(x: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + 4.0).sqrt())
}

/// Activations retained by [`MlpParams::forward_cached`] for the reverse pass.
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl MlpParams {
    /// `widths = [in, hidden.., out]`, all parameters zero.
    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut p = Self::zeros(widths);
        for layer in &mut p.layers {
            let a = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.gen_range(-a..a));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("MLP has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Dimension {
                    expected: w[0].outputs(),
                    actual: w[1].inputs(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::Dimension {
                    expected: l.outputs(),
                    actual: l.bias.len(),
                });
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// Weight then bias of every layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().flatten().map(|v| v * v).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::Dimension {
                expected: self.input_width(),
                actual: input.len(),
            });
        }
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.bias.to_vec();
            for (o, row) in layer.weight.outer_iter().enumerate() {
                y[o] += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            }
            if k != last {
                y.iter_mut().for_each(|v| *v = squareplus(*v));
            }
            x = y;
        }
        Ok(x)
    }

    /// Row-per-sample forward pass without retaining activations.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.input_width());
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&a, layer);
            if k != last {
                z.mapv_inplace(squareplus);
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        debug_assert_eq!(x.ncols(), self.input_width());
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut a = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(&a, layer);
            cache.inputs.push(a);
            if k == last {
                return (z, cache);
            }
            a = z.mapv(squareplus);
            cache.pre.push(z);
        }
        unreachable!("MLP has at least one layer")
    }

    /// Accumulates parameter gradients into `grad` given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, d_out: Array2<f64>, grad: &mut MlpParams) {
        let mut dz = d_out;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grad.layers[k];
            let input = &cache.inputs[k];
            general_mat_mul(1.0, &dz.t(), input, 1.0, &mut g.weight);
            g.bias += &dz.sum_axis(Axis(0));
            if k == 0 {
                break;
            }
            let mut da = dz.dot(&layer.weight);
            Zip::from(&mut da)
                .and(&cache.pre[k - 1])
                .for_each(|d, &z| *d *= squareplus_grad(z));
            dz = da;
        }
    }
}

fn affine(a: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = Array2::zeros((a.nrows(), layer.outputs()));
    z.rows_mut()
        .into_iter()
        .for_each(|mut row| row.assign(&layer.bias));
    general_mat_mul(1.0, a, &layer.weight.t(), 1.0, &mut z);
    z
}
