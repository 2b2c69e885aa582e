//! Fully connected layers and their composition.
//!
//! Layer parameters live in a [`ParamStore`] under `<prefix>.w` (`[in × out]`)
//! and `<prefix>.b` (`[1 × out]`); a [`DenseLayer`] only remembers the names,
//! sizes and activation.

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

/// Weight initialization scheme; recorded in checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// He-uniform for relu layers, Xavier-uniform for linear layers.
    HeXavierUniform,
}

impl Init {
    /// Half-width of the uniform distribution for a layer.
    pub fn bound(self, fan_in: usize, fan_out: usize, act: Activation) -> f64 {
        match act {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            Activation::Linear => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            inputs,
            outputs,
            activation,
        }
    }

    /// Register freshly initialized parameters (zero bias).
    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut Rng) -> Result<()> {
        let bound = init.bound(self.inputs, self.outputs, self.activation);
        let w: Vec<f64> = (0..self.inputs * self.outputs)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        store.insert(&self.weight, Tensor::matrix(self.inputs, self.outputs, w)?)?;
        store.insert(&self.bias, Tensor::zeros(&[1, self.outputs]))?;
        Ok(())
    }

    /// Set weights and bias to zero, turning the layer into a constant-zero map.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        store.value_mut(&self.weight)?.fill(0.0);
        store.value_mut(&self.bias)?.fill(0.0);
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let xw = g.matmul(x, w)?;
        let y = g.add_bias(xw, b)?;
        match self.activation {
            Activation::Relu => g.relu(y),
            Activation::Linear => Ok(y),
        }
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `inputs → hidden… → outputs`, relu on hidden layers, `output` on the last.
    pub fn new(prefix: &str, inputs: usize, hidden: &[usize], outputs: usize, output: Activation) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(DenseLayer::new(&format!("{prefix}.{i}"), width, h, Activation::Relu));
            width = h;
        }
        layers.push(DenseLayer::new(
            &format!("{prefix}.{}", hidden.len()),
            width,
            outputs,
            output,
        ));
        Self { layers }
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, init, rng))
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        mlp_forward_graph(&self.layers, g, store, x)
    }
}

fn check_chain(layers: &[DenseLayer], width: usize) -> Result<()> {
    let mut width = width;
    for (index, l) in layers.iter().enumerate() {
        if l.inputs != width {
            return Err(NumericsError::LayerChain {
                index,
                expected: l.inputs,
                found: width,
            });
        }
        width = l.outputs;
    }
    Ok(())
}

/// Apply `layers` in sequence on a graph.
pub fn mlp_forward_graph(layers: &[DenseLayer], g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let width = g.value(x)?.cols();
    check_chain(layers, width)?;
    layers.iter().try_fold(x, |h, l| l.forward(g, store, h))
}

/// `activation(input · W + b)` without recording a tape.
pub fn dense_forward(layer: &DenseLayer, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let w = store.value(&layer.weight)?;
    let b = store.value(&layer.bias)?;
    if input.shape().len() != 2 || input.cols() != w.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "dense_forward",
            left: input.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut y = input.matmul(w)?;
    let d = y.cols();
    for row in y.data_mut().chunks_mut(d.max(1)) {
        for (o, bi) in row.iter_mut().zip(b.data()) {
            *o += bi;
            if layer.activation == Activation::Relu && *o < 0.0 {
                *o = 0.0;
            }
        }
    }
    Ok(y)
}

/// Sequential [`dense_forward`]; an empty list is the identity.
pub fn mlp_forward(layers: &[DenseLayer], store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    check_chain(layers, input.cols())?;
    let mut h = input.clone();
    for l in layers {
        h = dense_forward(l, store, &h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_with(w: Tensor, b: Tensor, act: Activation, store: &mut ParamStore, name: &str) -> DenseLayer {
        let l = DenseLayer::new(name, w.rows(), w.cols(), act);
        store.insert(&l.weight, w).unwrap();
        store.insert(&l.bias, b).unwrap();
        l
    }

    #[test]
    fn zero_layer_gives_zero_output() {
        let mut s = ParamStore::new();
        let l = layer_with(Tensor::zeros(&[3, 2]), Tensor::zeros(&[1, 2]), Activation::Relu, &mut s, "l");
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 4., 5., -6.]).unwrap();
        let y = dense_forward(&l, &s, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 2]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut s = ParamStore::new();
        let l = layer_with(Tensor::identity(3), Tensor::zeros(&[1, 3]), Activation::Linear, &mut s, "l");
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 4., 5., -6.]).unwrap();
        assert_eq!(dense_forward(&l, &s, &x).unwrap(), x);
    }

    #[test]
    fn scalar_affine() {
        let mut s = ParamStore::new();
        let l = layer_with(Tensor::scalar(2.0), Tensor::scalar(1.0), Activation::Linear, &mut s, "l");
        let y = dense_forward(&l, &s, &Tensor::scalar(3.0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut s = ParamStore::new();
        let l = layer_with(Tensor::zeros(&[3, 2]), Tensor::zeros(&[1, 2]), Activation::Linear, &mut s, "l");
        let err = dense_forward(&l, &s, &Tensor::zeros(&[1, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn mlp_compositions() {
        let mut s = ParamStore::new();
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(mlp_forward(&[], &s, &x).unwrap(), x);

        let a = layer_with(Tensor::identity(2), Tensor::zeros(&[1, 2]), Activation::Linear, &mut s, "a");
        let b = layer_with(Tensor::identity(2), Tensor::zeros(&[1, 2]), Activation::Linear, &mut s, "b");
        assert_eq!(mlp_forward(&[a.clone(), b], &s, &x).unwrap(), x);
        assert_eq!(
            mlp_forward(std::slice::from_ref(&a), &s, &x).unwrap(),
            dense_forward(&a, &s, &x).unwrap()
        );
    }

    #[test]
    fn chain_mismatch_names_layer() {
        let mut s = ParamStore::new();
        let a = layer_with(Tensor::zeros(&[2, 3]), Tensor::zeros(&[1, 3]), Activation::Relu, &mut s, "a");
        let b = layer_with(Tensor::zeros(&[2, 1]), Tensor::zeros(&[1, 1]), Activation::Linear, &mut s, "b");
        let err = mlp_forward(&[a, b], &s, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, NumericsError::LayerChain { index: 1, .. }));
    }

    #[test]
    fn graph_and_direct_forward_agree() {
        let mut s = ParamStore::new();
        let mlp = Mlp::new("m", 3, &[5, 4], 2, Activation::Linear);
        mlp.init(&mut s, Init::HeXavierUniform, &mut Rng::new(1)).unwrap();
        let mut r = Rng::new(2);
        let x = Tensor::matrix(4, 3, r.normal_vec(12)).unwrap();
        let direct = mlp_forward(&mlp.layers, &s, &x).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = mlp.forward(&mut g, &s, xv).unwrap();
        assert_eq!(g.value(y).unwrap(), &direct);
    }

    #[test]
    fn init_bounds() {
        let mut s = ParamStore::new();
        let relu = DenseLayer::new("r", 24, 10, Activation::Relu);
        let lin = DenseLayer::new("l", 24, 10, Activation::Linear);
        let mut rng = Rng::new(3);
        relu.init(&mut s, Init::HeXavierUniform, &mut rng).unwrap();
        lin.init(&mut s, Init::HeXavierUniform, &mut rng).unwrap();
        let he = (6.0f64 / 24.0).sqrt();
        let xavier = (6.0f64 / 34.0).sqrt();
        assert!(s.value("r.w").unwrap().data().iter().all(|v| v.abs() <= he));
        assert!(s.value("l.w").unwrap().data().iter().all(|v| v.abs() <= xavier));
        assert!(s.value("r.b").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
