use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Identity => x,
        }
    }
}

/// Uniform(−√(6/(d_in+d_out)), +√(6/(d_in+d_out))) weights of shape `[d_in, d_out]`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Tensor {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![d_in, d_out], data).expect("non-zero extents")
}

/// `activation(input · weights + bias)` for `input: [batch, d_in]`,
/// `weights: [d_in, d_out]`, `bias: [d_out]`.
pub fn dense_forward(tape: &mut Tape, input: Var, weights: Var, bias: Var, activation: Activation) -> Result<Var> {
    let (si, sw, sb) = (tape.value(input).shape(), tape.value(weights).shape(), tape.value(bias).shape());
    if si.len() != 2 || sw.len() != 2 || si[1] != sw[0] || sb != [sw[1]] {
        return Err(Error::Dimension(format!(
            "dense: input {si:?}, weights {sw:?}, bias {sb:?}"
        )));
    }
    let z = tape.matmul(input, weights)?;
    let z = tape.add_row_bias(z, bias)?;
    Ok(activation.apply(tape, z))
}

/// A fully connected layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Dense {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = store.insert(&format!("{name}.w"), glorot_uniform(rng, d_in, d_out))?;
        let bias = store.insert(&format!("{name}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Dense { weights, bias, activation })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weights);
        let b = tape.param(store, self.bias);
        dense_forward(tape, x, w, b, self.activation)
    }
}

/// Stack of [`Dense`] layers: `layers` hidden widths, then a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    d_in: usize,
    d_out: usize,
}

impl Mlp {
    /// `widths` lists the hidden layer widths; the last layer maps to `d_out`
    /// with `out_activation`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        widths: &[usize],
        d_out: usize,
        hidden: Activation,
        out_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut prev = d_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{prefix}.{i}"), prev, w, hidden, rng)?);
            prev = w;
        }
        layers.push(Dense::new(
            store,
            &format!("{prefix}.{}", widths.len()),
            prev,
            d_out,
            out_activation,
            rng,
        )?);
        Ok(Mlp { layers, d_in, d_out })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.d_in {
            return Err(Error::Config(format!(
                "network expects input width {}, got {cols}",
                self.d_in
            )));
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, store, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = tape.input(Tensor::vector(vec![3.0]));
        let y = dense_forward(&mut tape, x, w, b, Activation::Identity).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn dense_zero_in_zero_out() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 4]));
        let w = tape.input(Tensor::filled(&[4, 2], 0.7));
        let b = tape.input(Tensor::zeros(&[2]));
        let y = dense_forward(&mut tape, x, w, b, Activation::Identity).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_shape_mismatch_names_operands() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 4]));
        let w = tape.input(Tensor::zeros(&[5, 2]));
        let b = tape.input(Tensor::zeros(&[2]));
        let err = dense_forward(&mut tape, x, w, b, Activation::Tanh).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }
}
