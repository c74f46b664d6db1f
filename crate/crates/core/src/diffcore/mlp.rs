//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! An [`Mlp`] is a stack of affine layers `z = W a + b`. The hidden activation
//! is applied after every layer except the last, whose output is linear.
//! Weights are stored row-major with shape `(out, in)`.
//!
//! Besides the plain batched path, an MLP can be evaluated over node pairs
//! ([`Mlp::forward_pairs`]). The first layer's input is then the concatenation
//! `[left_i, right_j, edge_p, context]`, and the first affine map is split by
//! column block so node terms are computed once per node instead of once per
//! pair. The result is identical to evaluating the concatenated input.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for both
    /// weights and bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..=bound));
        Self { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
}

/// Intermediate values of a taped batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input of every layer, `inputs[0]` being the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

/// Node/edge inputs for a pairwise evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs<'a> {
    pub left: ArrayView2<'a, f64>,
    pub right: ArrayView2<'a, f64>,
    pub pairs: &'a [(usize, usize)],
    pub edge: ArrayView2<'a, f64>,
    pub context: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct PairTape {
    pre_first: Array2<f64>,
    tail: Option<MlpTape>,
}

/// Input gradients of a pairwise evaluation.
#[derive(Debug, Clone)]
pub struct PairGrads {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub edge: Array2<f64>,
    pub context: Array1<f64>,
}

impl Mlp {
    /// Builds a randomly initialized MLP with layer widths `dims`
    /// (`dims[0]` is the input width).
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, hidden }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("MLP without layers"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "layer {k}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(format!(
                    "layer {k}: in dim {} does not chain with previous out dim {}",
                    layer.in_dim(),
                    layers[k - 1].out_dim()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(Self { layers, hidden })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim(), l.out_dim())).collect(),
            hidden: self.hidden,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    /// Multiplies the last layer's weights and bias by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("nonempty");
        last.weight *= factor;
        last.bias *= factor;
    }

    fn activation_after(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.hidden
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input length {} != MLP input dim {}",
                input.len(),
                self.in_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Batched forward pass, one sample per row. No tape is kept.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            let act = self.activation_after(k);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_taped(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpTape)> {
        self.check_batch(x)?;
        Ok(self.forward_from(0, x.to_owned()))
    }

    fn check_batch(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(format!(
                "batch width {} != MLP input dim {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn forward_from(&self, start: usize, x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let mut tape = MlpTape { inputs: Vec::new(), pre: Vec::new() };
        let mut a = x;
        for k in start..self.layers.len() {
            let layer = &self.layers[k];
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            tape.inputs.push(a);
            let act = self.activation_after(k);
            a = if act == Activation::Identity {
                if k + 1 != self.layers.len() {
                    tape.pre.push(z.clone());
                }
                z
            } else {
                let out = z.mapv(|v| act.apply(v));
                tape.pre.push(z);
                out
            };
        }
        (a, tape)
    }

    /// Back-propagates `upstream` (one row per sample) through a taped pass,
    /// accumulating parameter gradients into `grads` and returning the
    /// gradient with respect to the batch input.
    pub fn backward(&self, tape: &MlpTape, upstream: ArrayView2<f64>, grads: &mut Mlp) -> Array2<f64> {
        self.backward_from(0, tape, upstream.to_owned(), grads)
    }

    fn backward_from(&self, start: usize, tape: &MlpTape, upstream: Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let mut g = upstream;
        for k in (start..self.layers.len()).rev() {
            let local = k - start;
            if k + 1 != self.layers.len() {
                let act = self.hidden;
                if act != Activation::Identity {
                    g.zip_mut_with(&tape.pre[local], |gv, &z| *gv *= act.derivative(z));
                }
            }
            let layer = &self.layers[k];
            let input = &tape.inputs[local];
            let gl = &mut grads.layers[k];
            gl.weight += &g.t().dot(input);
            gl.bias += &g.sum_axis(Axis(0));
            g = g.dot(&layer.weight);
        }
        g
    }

    /// Gradient of `<upstream, f(input)>` with respect to parameters and input.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        if upstream.len() != self.out_dim() {
            return Err(Error::shape(format!(
                "upstream length {} != MLP output dim {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        if input.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input length {} != MLP input dim {}",
                input.len(),
                self.in_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("contiguous");
        let (_, tape) = self.forward_taped(x)?;
        let mut grads = self.zeros_like();
        let gin = self.backward(&tape, up, &mut grads);
        Ok((grads, gin.into_raw_vec_and_offset().0))
    }

    fn split_first(&self, inputs: &PairInputs) -> Result<[usize; 4]> {
        let widths = [
            inputs.left.ncols(),
            inputs.right.ncols(),
            inputs.edge.ncols(),
            inputs.context.len(),
        ];
        let total: usize = widths.iter().sum();
        if total != self.in_dim() {
            return Err(Error::shape(format!(
                "pair input widths {widths:?} sum to {total}, MLP expects {}",
                self.in_dim()
            )));
        }
        if inputs.edge.nrows() != inputs.pairs.len() {
            return Err(Error::shape(format!(
                "{} edge rows for {} pairs",
                inputs.edge.nrows(),
                inputs.pairs.len()
            )));
        }
        Ok(widths)
    }

    fn first_layer_blocks(&self, widths: [usize; 4]) -> [ArrayView2<'_, f64>; 4] {
        let w = &self.layers[0].weight;
        let mut offset = 0;
        let mut out = Vec::with_capacity(4);
        for width in widths {
            out.push(w.slice(s![.., offset..offset + width]));
            offset += width;
        }
        [out[0], out[1], out[2], out[3]]
    }

    fn pair_pre_first(&self, inputs: &PairInputs, widths: [usize; 4]) -> Array2<f64> {
        let [wl, wr, we, wc] = self.first_layer_blocks(widths);
        let ul = inputs.left.dot(&wl.t());
        let ur = inputs.right.dot(&wr.t());
        let mut shared = wc.dot(&inputs.context);
        shared += &self.layers[0].bias;
        let mut pre = inputs.edge.dot(&we.t());
        for (mut row, &(i, j)) in pre.outer_iter_mut().zip(inputs.pairs) {
            row += &ul.row(i);
            row += &ur.row(j);
            row += &shared;
        }
        pre
    }

    /// Forward pass over pairs without a tape.
    pub fn forward_pairs(&self, inputs: &PairInputs) -> Result<Array2<f64>> {
        let widths = self.split_first(inputs)?;
        let pre = self.pair_pre_first(inputs, widths);
        if self.layers.len() == 1 {
            return Ok(pre);
        }
        let act = self.hidden;
        let mut a = pre.mapv(|v| act.apply(v));
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            let act = self.activation_after(k);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_pairs_taped(&self, inputs: &PairInputs) -> Result<(Array2<f64>, PairTape)> {
        let widths = self.split_first(inputs)?;
        let pre = self.pair_pre_first(inputs, widths);
        if self.layers.len() == 1 {
            return Ok((pre.clone(), PairTape { pre_first: pre, tail: None }));
        }
        let act = self.hidden;
        let a = pre.mapv(|v| act.apply(v));
        let (out, tail) = self.forward_from(1, a);
        Ok((out, PairTape { pre_first: pre, tail: Some(tail) }))
    }

    /// Backward pass for [`Mlp::forward_pairs_taped`].
    pub fn backward_pairs(
        &self,
        inputs: &PairInputs,
        tape: &PairTape,
        upstream: ArrayView2<f64>,
        grads: &mut Mlp,
    ) -> PairGrads {
        let widths = self.split_first(inputs).expect("validated in forward");
        let g_pre = match &tape.tail {
            None => upstream.to_owned(),
            Some(tail) => {
                let g_a = self.backward_from(1, tail, upstream.to_owned(), grads);
                let act = self.hidden;
                let mut g = g_a;
                g.zip_mut_with(&tape.pre_first, |gv, &z| *gv *= act.derivative(z));
                g
            }
        };

        let hidden = self.layers[0].out_dim();
        let mut g_ul = Array2::<f64>::zeros((inputs.left.nrows(), hidden));
        let mut g_ur = Array2::<f64>::zeros((inputs.right.nrows(), hidden));
        for (row, &(i, j)) in g_pre.outer_iter().zip(inputs.pairs) {
            let mut l = g_ul.row_mut(i);
            l += &row;
            let mut r = g_ur.row_mut(j);
            r += &row;
        }
        let g_shared = g_pre.sum_axis(Axis(0));

        let [wl, wr, we, wc] = self.first_layer_blocks(widths);
        let left = g_ul.dot(&wl);
        let right = g_ur.dot(&wr);
        let edge = g_pre.dot(&we);
        let context = g_shared.dot(&wc);

        let [dl, dr, de, _] = widths;
        let gw = &mut grads.layers[0].weight;
        {
            let mut b = gw.slice_mut(s![.., 0..dl]);
            b += &g_ul.t().dot(&inputs.left);
        }
        {
            let mut b = gw.slice_mut(s![.., dl..dl + dr]);
            b += &g_ur.t().dot(&inputs.right);
        }
        {
            let mut b = gw.slice_mut(s![.., dl + dr..dl + dr + de]);
            b += &g_pre.t().dot(&inputs.edge);
        }
        {
            let mut b = gw.slice_mut(s![.., dl + dr + de..]);
            let outer = g_shared
                .view()
                .insert_axis(Axis(1))
                .dot(&inputs.context.insert_axis(Axis(0)));
            b += &outer;
        }
        grads.layers[0].bias += &g_shared;

        PairGrads { left, right, edge, context }
    }
}

impl ParamSet for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, layer) in self.layers.iter().enumerate() {
            f(
                &format!("{prefix}.l{k}.weight"),
                layer.weight.shape(),
                layer.weight.as_slice().expect("standard layout"),
            );
            f(
                &format!("{prefix}.l{k}.bias"),
                layer.bias.shape(),
                layer.bias.as_slice().expect("standard layout"),
            );
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let shape = layer.weight.shape().to_vec();
            f(
                &format!("{prefix}.l{k}.weight"),
                &shape,
                layer.weight.as_slice_mut().expect("standard layout"),
            );
            let shape = layer.bias.shape().to_vec();
            f(
                &format!("{prefix}.l{k}.bias"),
                &shape,
                layer.bias.as_slice_mut().expect("standard layout"),
            );
        }
    }
}
