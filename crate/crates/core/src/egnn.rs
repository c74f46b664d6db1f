//! E(n)-equivariant message passing over the joint ligand/receptor graph and
//! the conditional noise estimator built from it.
//!
//! Every layer is fully connected over ordered pairs `i ≠ j`:
//!
//! ```text
//! m_ij = φ_e(h_i, h_j, ‖x_i − x_j‖², te)
//! m_i  = Σ_j sigmoid(φ_a(m_ij)) · m_ij
//! x_i ← x_i + Σ_j (x_i − x_j) / (‖x_i − x_j‖ + 1) · φ_x(m_ij)     (unfrozen i only)
//! h_i ← h_i + φ_h(h_i, m_i)
//! ```
//!
//! Sums are multiplied by a fixed aggregation scale (1 by default).

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, time_encoding, Activation, Mlp, MlpTape, PairInputs, PairTape, ParamSet, DEFAULT_TIME_DIM};
use crate::diffusion::DiffusionState;
use crate::error::{Error, Result};
use crate::geometry::AtomCloud;

/// Length of the role one-hot appended to projected node features.
pub const ROLE_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Ligand,
    Receptor,
}

impl Role {
    pub fn one_hot(self) -> [f64; ROLE_DIM] {
        match self {
            Role::Ligand => [1.0, 0.0],
            Role::Receptor => [0.0, 1.0],
        }
    }
}

/// Nodes of the joint graph. Receptor nodes are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGraph {
    pub positions: Array2<f64>,
    pub features: Array2<f64>,
    pub roles: Vec<Role>,
    pub frozen: Vec<bool>,
}

impl JointGraph {
    pub fn new(positions: Array2<f64>, features: Array2<f64>, roles: Vec<Role>) -> Result<Self> {
        let n = roles.len();
        if positions.dim() != (n, 3) || features.nrows() != n {
            return Err(Error::shape(format!(
                "graph with {n} roles got positions {:?} and features {:?}",
                positions.shape(),
                features.shape()
            )));
        }
        if !roles.contains(&Role::Ligand) {
            return Err(Error::invalid("joint graph needs at least one ligand node"));
        }
        let frozen = roles.iter().map(|r| *r == Role::Receptor).collect();
        Ok(Self { positions, features, roles, frozen })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnLayer {
    pub phi_e: Mlp,
    pub phi_a: Mlp,
    pub phi_x: Mlp,
    pub phi_h: Mlp,
}

/// Intermediate values of one layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pairs: Vec<(usize, usize)>,
    features: Array2<f64>,
    d2: Array2<f64>,
    diff: Array2<f64>,
    dist: Array1<f64>,
    messages: Array2<f64>,
    edge_tape: PairTape,
    gate: Array1<f64>,
    gate_tape: MlpTape,
    coord: Array1<f64>,
    coord_tape: MlpTape,
    update_tape: MlpTape,
    frozen: Vec<bool>,
    te: Array1<f64>,
}

impl EgnnLayer {
    pub fn new<R: Rng + ?Sized>(node_dim: usize, hidden: usize, time_dim: usize, rng: &mut R) -> Self {
        let phi_e = Mlp::new(&[2 * node_dim + 1 + time_dim, hidden, hidden], Activation::Silu, rng);
        let phi_a = Mlp::new(&[hidden, 1], Activation::Silu, rng);
        let mut phi_x = Mlp::new(&[hidden, hidden, 1], Activation::Silu, rng);
        phi_x.scale_output(1e-3);
        let phi_h = Mlp::new(&[node_dim + hidden, hidden, node_dim], Activation::Silu, rng);
        Self { phi_e, phi_a, phi_x, phi_h }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi_e: self.phi_e.zeros_like(),
            phi_a: self.phi_a.zeros_like(),
            phi_x: self.phi_x.zeros_like(),
            phi_h: self.phi_h.zeros_like(),
        }
    }

    pub fn node_dim(&self) -> usize {
        self.phi_h.out_dim()
    }

    fn hidden(&self) -> usize {
        self.phi_e.out_dim()
    }

    /// Applies the layer to a graph.
    pub fn apply(&self, graph: &JointGraph, te: &[f64], scale: f64) -> Result<JointGraph> {
        let (x, h, _) = self.forward_taped(graph.positions.view(), graph.features.view(), &graph.frozen, te, scale)?;
        Ok(JointGraph { positions: x, features: h, roles: graph.roles.clone(), frozen: graph.frozen.clone() })
    }

    pub fn forward_taped(
        &self,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        frozen: &[bool],
        te: &[f64],
        scale: f64,
    ) -> Result<(Array2<f64>, Array2<f64>, LayerTape)> {
        let n = x.nrows();
        if h.ncols() != self.node_dim() {
            return Err(Error::shape(format!("node width {} != layer width {}", h.ncols(), self.node_dim())));
        }
        let pairs = ordered_pairs(n);
        let p = pairs.len();
        let mut diff = Array2::zeros((p, 3));
        let mut d2 = Array2::zeros((p, 1));
        let mut dist = Array1::zeros(p);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let mut sq = 0.0;
            for c in 0..3 {
                let v = x[[i, c]] - x[[j, c]];
                diff[[k, c]] = v;
                sq += v * v;
            }
            d2[[k, 0]] = sq;
            dist[k] = sq.sqrt();
        }
        let te_arr = Array1::from(te.to_vec());
        let inputs = PairInputs { left: h, right: h, pairs: &pairs, edge: d2.view(), context: te_arr.view() };
        let (messages, edge_tape) = self.phi_e.forward_pairs_taped(&inputs)?;
        let (gate_logit, gate_tape) = self.phi_a.forward_taped(messages.view())?;
        let gate = gate_logit.column(0).mapv(sigmoid);
        let (coord_out, coord_tape) = self.phi_x.forward_taped(messages.view())?;
        let coord = coord_out.column(0).to_owned();

        let hidden = self.hidden();
        let mut agg = Array2::<f64>::zeros((n, hidden));
        let mut x_new = x.to_owned();
        for (k, &(i, _)) in pairs.iter().enumerate() {
            agg.row_mut(i).scaled_add(scale * gate[k], &messages.row(k));
            if !frozen[i] {
                let c = scale * coord[k] / (dist[k] + 1.0);
                for a in 0..3 {
                    x_new[[i, a]] += c * diff[[k, a]];
                }
            }
        }
        let update_in = concatenate(Axis(1), &[h, agg.view()]).expect("row counts match");
        let (dh, update_tape) = self.phi_h.forward_taped(update_in.view())?;
        let h_new = &h + &dh;
        let tape = LayerTape {
            pairs,
            features: h.to_owned(),
            d2,
            diff,
            dist,
            messages,
            edge_tape,
            gate,
            gate_tape,
            coord,
            coord_tape,
            update_tape,
            frozen: frozen.to_vec(),
            te: te_arr,
        };
        Ok((x_new, h_new, tape))
    }

    /// Returns gradients with respect to the layer's input positions and features.
    pub fn backward(
        &self,
        tape: &LayerTape,
        g_x_out: ArrayView2<f64>,
        g_h_out: ArrayView2<f64>,
        scale: f64,
        grads: &mut EgnnLayer,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = self.node_dim();
        let g_update_in = self.phi_h.backward(&tape.update_tape, g_h_out, &mut grads.phi_h);
        let mut g_h = g_h_out.to_owned();
        g_h += &g_update_in.slice(s![.., ..d]);
        let g_agg = g_update_in.slice(s![.., d..]);

        let mut g_x = g_x_out.to_owned();
        let p = tape.pairs.len();
        let mut g_messages = Array2::<f64>::zeros(tape.messages.raw_dim());
        let mut g_gate_logit = Array2::<f64>::zeros((p, 1));
        let mut g_coord = Array2::<f64>::zeros((p, 1));
        let mut g_diff = Array2::<f64>::zeros((p, 3));
        for (k, &(i, _)) in tape.pairs.iter().enumerate() {
            let gi = g_agg.row(i);
            let m = tape.messages.row(k);
            let g_gate = scale * gi.dot(&m);
            g_gate_logit[[k, 0]] = g_gate * tape.gate[k] * (1.0 - tape.gate[k]);
            g_messages.row_mut(k).scaled_add(scale * tape.gate[k], &gi);
            if !tape.frozen[i] {
                let gx = g_x_out.row(i);
                let diff = tape.diff.row(k);
                let r = tape.dist[k];
                let denom = r + 1.0;
                let g_dot_diff = gx.dot(&diff);
                g_coord[[k, 0]] = scale * g_dot_diff / denom;
                let c = scale * tape.coord[k] / denom;
                // derivative of diff / (‖diff‖ + 1) through the norm
                let radial = if r > 0.0 { -scale * tape.coord[k] * g_dot_diff / (denom * denom * r) } else { 0.0 };
                for a in 0..3 {
                    g_diff[[k, a]] += c * gx[a] + radial * diff[a];
                }
            }
        }
        g_messages += &self.phi_a.backward(&tape.gate_tape, g_gate_logit.view(), &mut grads.phi_a);
        g_messages += &self.phi_x.backward(&tape.coord_tape, g_coord.view(), &mut grads.phi_x);

        let inputs = PairInputs {
            left: tape.features.view(),
            right: tape.features.view(),
            pairs: &tape.pairs,
            edge: tape.d2.view(),
            context: tape.te.view(),
        };
        let pg = self.phi_e.backward_pairs(&inputs, &tape.edge_tape, g_messages.view(), &mut grads.phi_e);
        g_h += &pg.left;
        g_h += &pg.right;
        for (k, &(i, j)) in tape.pairs.iter().enumerate() {
            let ge = pg.edge[[k, 0]];
            for a in 0..3 {
                let g = g_diff[[k, a]] + 2.0 * ge * tape.diff[[k, a]];
                g_x[[i, a]] += g;
                g_x[[j, a]] -= g;
            }
        }
        (g_x, g_h)
    }
}

impl ParamSet for EgnnLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.phi_e.visit(&format!("{prefix}.phi_e"), f);
        self.phi_a.visit(&format!("{prefix}.phi_a"), f);
        self.phi_x.visit(&format!("{prefix}.phi_x"), f);
        self.phi_h.visit(&format!("{prefix}.phi_h"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.phi_e.visit_mut(&format!("{prefix}.phi_e"), f);
        self.phi_a.visit_mut(&format!("{prefix}.phi_a"), f);
        self.phi_x.visit_mut(&format!("{prefix}.phi_x"), f);
        self.phi_h.visit_mut(&format!("{prefix}.phi_h"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    /// Common width that ligand and receptor features are projected to.
    pub width: usize,
    /// Message width inside each layer.
    pub hidden: usize,
    pub time_dim: usize,
    pub ligand_channels: usize,
    pub receptor_features: usize,
    /// Largest diffusion time the encoder accepts.
    pub max_time: usize,
    pub aggregation_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 256,
            hidden: 256,
            time_dim: DEFAULT_TIME_DIM,
            ligand_channels: 4,
            receptor_features: 256,
            max_time: crate::diffusion::DEFAULT_STEPS,
            aggregation_scale: 1.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.hidden == 0 || self.ligand_channels == 0 {
            return Err(Error::Config("denoiser layers, widths and channels must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even and positive, got {}", self.time_dim)));
        }
        if !(self.aggregation_scale.is_finite() && self.aggregation_scale > 0.0) {
            return Err(Error::Config("aggregation_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Noise estimator over ligand atoms conditioned on a (virtual) receptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub ligand_in: Mlp,
    pub receptor_in: Mlp,
    pub layers: Vec<EgnnLayer>,
    pub head: Mlp,
}

/// Tape of a full denoiser pass.
#[derive(Debug, Clone)]
pub struct DenoiserTape {
    n_ligand: usize,
    ligand_features: Array2<f64>,
    receptor_features: Array2<f64>,
    layer_tapes: Vec<LayerTape>,
    head_tape: MlpTape,
}

/// Gradients of a scalar objective with respect to a denoiser pass.
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub params: Denoiser,
    pub ligand_positions: Array2<f64>,
    pub ligand_features: Array2<f64>,
    pub receptor_positions: Array2<f64>,
    pub receptor_features: Array2<f64>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let node_dim = config.width + ROLE_DIM;
        let ligand_in = Mlp::new(&[config.ligand_channels, config.width], Activation::Identity, rng);
        let receptor_in = Mlp::new(&[config.receptor_features, config.width], Activation::Identity, rng);
        let layers = (0..config.layers)
            .map(|_| EgnnLayer::new(node_dim, config.hidden, config.time_dim, rng))
            .collect();
        let head = Mlp::new(&[node_dim, config.ligand_channels], Activation::Identity, rng);
        Ok(Self { config, ligand_in, receptor_in, layers, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            ligand_in: self.ligand_in.zeros_like(),
            receptor_in: self.receptor_in.zeros_like(),
            layers: self.layers.iter().map(EgnnLayer::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Projects both node sets to the common width, appends role one-hots
    /// and stacks ligand nodes first.
    pub fn build_graph(&self, z_t: &DiffusionState, receptor: &AtomCloud) -> Result<JointGraph> {
        if z_t.channels() != self.config.ligand_channels {
            return Err(Error::shape(format!(
                "ligand has {} channels, denoiser expects {}",
                z_t.channels(),
                self.config.ligand_channels
            )));
        }
        if receptor.feature_dim() != self.config.receptor_features {
            return Err(Error::shape(format!(
                "receptor features have width {}, denoiser expects {}",
                receptor.feature_dim(),
                self.config.receptor_features
            )));
        }
        let lig = self.ligand_in.forward_batch(z_t.features.view())?;
        let rec = self.receptor_in.forward_batch(receptor.features().view())?;
        if lig.ncols() != rec.ncols() {
            return Err(Error::shape("projected ligand and receptor widths differ"));
        }
        let (n, m) = (z_t.n_atoms(), receptor.len());
        let mut roles = vec![Role::Ligand; n];
        roles.extend(std::iter::repeat_n(Role::Receptor, m));
        let role_cols = Array2::from_shape_fn((n + m, ROLE_DIM), |(i, k)| roles[i].one_hot()[k]);
        let proj = concatenate(Axis(0), &[lig.view(), rec.view()]).expect("same width");
        let features = concatenate(Axis(1), &[proj.view(), role_cols.view()]).expect("same rows");
        let positions = concatenate(Axis(0), &[z_t.positions.view(), receptor.positions().view()]).expect("3 columns");
        JointGraph::new(positions, features, roles)
    }

    pub fn time_features(&self, t: usize) -> Result<Vec<f64>> {
        time_encoding(t, self.config.max_time, self.config.time_dim)
    }

    /// Noise estimate for the ligand part of `z_t`.
    pub fn forward(&self, z_t: &DiffusionState, receptor: &AtomCloud, t: usize) -> Result<DiffusionState> {
        Ok(self.forward_taped(z_t, receptor, t)?.0)
    }

    pub fn forward_taped(
        &self,
        z_t: &DiffusionState,
        receptor: &AtomCloud,
        t: usize,
    ) -> Result<(DiffusionState, DenoiserTape)> {
        let graph = self.build_graph(z_t, receptor)?;
        let te = self.time_features(t)?;
        let n = z_t.n_atoms();
        let mut x = graph.positions;
        let mut h = graph.features;
        let mut layer_tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (x2, h2, tape) = layer.forward_taped(x.view(), h.view(), &graph.frozen, &te, self.config.aggregation_scale)?;
            x = x2;
            h = h2;
            layer_tapes.push(tape);
        }
        let eps_x = &x.slice(s![..n, ..]) - &z_t.positions;
        let (eps_h, head_tape) = self.head.forward_taped(h.slice(s![..n, ..]))?;
        let out = DiffusionState { positions: eps_x, features: eps_h };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at t={t}")));
        }
        let tape = DenoiserTape {
            n_ligand: n,
            ligand_features: z_t.features.clone(),
            receptor_features: receptor.features().to_owned(),
            layer_tapes,
            head_tape,
        };
        Ok((out, tape))
    }

    /// Back-propagates `upstream`, the gradient of a scalar objective with
    /// respect to the noise estimate.
    pub fn backward(&self, tape: &DenoiserTape, upstream: &DiffusionState) -> DenoiserGrads {
        let mut grads = self.zeros_like();
        let n = tape.n_ligand;
        let total = n + tape.receptor_features.nrows();
        let node_dim = self.config.width + ROLE_DIM;
        let scale = self.config.aggregation_scale;

        let mut g_x = Array2::<f64>::zeros((total, 3));
        let mut g_h = Array2::<f64>::zeros((total, node_dim));
        g_x.slice_mut(s![..n, ..]).assign(&upstream.positions);
        let g_head_in = self.head.backward(&tape.head_tape, upstream.features.view(), &mut grads.head);
        g_h.slice_mut(s![..n, ..]).assign(&g_head_in);

        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (gx, gh) = layer.backward(&tape.layer_tapes[k], g_x.view(), g_h.view(), scale, &mut grads.layers[k]);
            g_x = gx;
            g_h = gh;
        }
        // eps_x = x_out − x_in subtracts the ligand input positions once more
        let mut ligand_positions = g_x.slice(s![..n, ..]).to_owned();
        ligand_positions -= &upstream.positions;
        let receptor_positions = g_x.slice(s![n.., ..]).to_owned();

        let width = self.config.width;
        let g_lig_proj = g_h.slice(s![..n, ..width]);
        let g_rec_proj = g_h.slice(s![n.., ..width]);
        let ligand_features = backward_linear(&self.ligand_in, tape.ligand_features.view(), g_lig_proj, &mut grads.ligand_in);
        let receptor_features =
            backward_linear(&self.receptor_in, tape.receptor_features.view(), g_rec_proj, &mut grads.receptor_in);

        DenoiserGrads { params: grads, ligand_positions, ligand_features, receptor_positions, receptor_features }
    }
}

/// Backward through a one-layer (affine) MLP without a tape.
fn backward_linear(mlp: &Mlp, input: ArrayView2<f64>, upstream: ArrayView2<f64>, grads: &mut Mlp) -> Array2<f64> {
    let layer = &mlp.layers()[0];
    let g = &mut grads.layers_mut()[0];
    g.weight += &upstream.t().dot(&input);
    g.bias += &upstream.sum_axis(Axis(0));
    upstream.dot(&layer.weight)
}

impl ParamSet for Denoiser {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.ligand_in.visit(&format!("{prefix}.ligand_in"), f);
        self.receptor_in.visit(&format!("{prefix}.receptor_in"), f);
        self.layers.visit(&format!("{prefix}.layers"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.ligand_in.visit_mut(&format!("{prefix}.ligand_in"), f);
        self.receptor_in.visit_mut(&format!("{prefix}.receptor_in"), f);
        self.layers.visit_mut(&format!("{prefix}.layers"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}
