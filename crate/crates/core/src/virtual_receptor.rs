//! Virtual receptor: a learned convex compression of the receptor.
//!
//! Each virtual atom is a convex combination of true atoms, `x̃ = A X`,
//! `h̃ = A ξ_h(H)`, with row-stochastic weights
//!
//! ```text
//! q_jk      = ξ_q(‖x_j − x_k‖, h_j, h_k)        averaged over k
//! (b_j, b̄_j) = SPLIT(ξ_b(q̄_j))                 b̄^av = mean_j b̄_j
//! Â_{:j}     = ξ_a(b_j, b̄^av, ξ_k(h_j), ζ(t))
//! A_{i:}     = softmax_j(Â_ij + P_ij)
//! ```
//!
//! The trainable prior `P` realizes farthest-point initialization. In the
//! encoder `P_ij = β_i [j = anchor_i]` where `anchor_i` is the i-th
//! farthest-point sample of the input cloud. In the decoder `P` is a free
//! `n × ñ` bias over virtual-atom slots, started at `β [j = i mod ñ]`. The decoder uses the same
//! network with its own parameters and maps `ñ` virtual atoms back to `n`
//! reconstructed positions. By default it sees geometry only: its per-atom
//! feature input is the constant 1, so feature channels never influence the
//! reconstruction objective. With `decoder_features` set it reads the
//! virtual features instead and gradients flow back into ξ_h.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    accumulate, derived_rng, time_encoding, Activation, Mlp, MlpTape, OptState, OptimizerConfig, PairInputs, PairTape,
    ParamSet, DEFAULT_TIME_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{fps_positions, AtomCloud, DEFAULT_POCKET_SIZE};
use crate::matching::{bipartite_loss_positions, gradient_for_assignment};

pub const DEFAULT_VIRTUAL_ATOMS: usize = 30;
pub const DEFAULT_PRIOR_STRENGTH: f64 = 8.0;

/// Row-stochastic weight matrix, rows = outputs, columns = inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VrWeights {
    pub matrix: Array2<f64>,
}

impl VrWeights {
    /// Largest violation of nonnegativity or unit row sums.
    pub fn convexity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for row in self.matrix.outer_iter() {
            let sum: f64 = row.sum();
            worst = worst.max((sum - 1.0).abs());
            for &v in row {
                worst = worst.max(-v);
            }
        }
        worst
    }
}

/// Trainable bias added to the logits before the softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Row `i` gets `β_i` on the i-th farthest-point sample of its input
    /// cloud, so the bias follows geometry rather than atom order.
    Anchored(Array1<f64>),
    /// A free bias over a fixed number of ordered input slots.
    Slots(Array2<f64>),
}

impl Prior {
    pub fn anchored(rows: usize, strength: f64) -> Self {
        Prior::Anchored(Array1::from_elem(rows, strength))
    }

    /// Slot bias with `strength` on entry `(i, i mod slots)`.
    pub fn cyclic(rows: usize, slots: usize, strength: f64) -> Self {
        Prior::Slots(Array2::from_shape_fn((rows, slots), |(i, j)| if i % slots == j { strength } else { 0.0 }))
    }

    fn zeros_like(&self) -> Self {
        match self {
            Prior::Anchored(b) => Prior::Anchored(Array1::zeros(b.len())),
            Prior::Slots(b) => Prior::Slots(Array2::zeros(b.raw_dim())),
        }
    }

    fn anchors(&self, positions: ArrayView2<f64>, rows: usize) -> Result<Vec<usize>> {
        let n = positions.nrows();
        match self {
            Prior::Anchored(_) => {
                if rows > n {
                    return Err(Error::invalid(format!("{rows} virtual atoms requested from {n} receptor atoms")));
                }
                fps_positions(positions, rows)
            }
            Prior::Slots(b) => {
                if b.ncols() != n {
                    return Err(Error::shape(format!("slot bias expects {} inputs, got {n}", b.ncols())));
                }
                Ok(Vec::new())
            }
        }
    }

    fn apply(&self, logits: &mut Array2<f64>, anchors: &[usize]) {
        match self {
            Prior::Anchored(b) => {
                for (i, &j) in anchors.iter().enumerate() {
                    logits[[i, j]] += b[i];
                }
            }
            Prior::Slots(b) => *logits += b,
        }
    }

    fn backward(&mut self, g_logits: &Array2<f64>, anchors: &[usize]) {
        match self {
            Prior::Anchored(b) => {
                for (i, &j) in anchors.iter().enumerate() {
                    b[i] += g_logits[[i, j]];
                }
            }
            Prior::Slots(b) => *b += g_logits,
        }
    }
}

impl ParamSet for Prior {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Prior::Anchored(b) => b.visit(prefix, f),
            Prior::Slots(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        match self {
            Prior::Anchored(b) => b.visit_mut(prefix, f),
            Prior::Slots(b) => b.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetDims {
    pub input_features: usize,
    pub rows: usize,
    pub hidden: usize,
    pub q_dim: usize,
    /// Size of each SPLIT half.
    pub b_half: usize,
    pub k_dim: usize,
    pub time_dim: usize,
}

/// The network producing `A` from an input cloud (ξ_q, ξ_b, ξ_k, ξ_a, prior).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNet {
    pub xi_q: Mlp,
    pub xi_b: Mlp,
    pub xi_k: Mlp,
    pub xi_a: Mlp,
    pub prior: Prior,
}

#[derive(Debug, Clone)]
pub struct WeightTape {
    pairs: Vec<(usize, usize)>,
    features: Array2<f64>,
    diff: Array2<f64>,
    dist: Array2<f64>,
    q_tape: PairTape,
    b_tape: MlpTape,
    k_tape: MlpTape,
    a_tape: MlpTape,
    anchors: Vec<usize>,
    te: Array1<f64>,
    pub weights: Array2<f64>,
}

impl WeightNet {
    pub fn new<R: Rng + ?Sized>(dims: &WeightNetDims, prior: Prior, rng: &mut R) -> Self {
        let f = dims.input_features;
        let h = dims.hidden;
        let xi_q = Mlp::new(&[1 + 2 * f, h, dims.q_dim], Activation::Silu, rng);
        let xi_b = Mlp::new(&[dims.q_dim, h, 2 * dims.b_half], Activation::Silu, rng);
        let xi_k = Mlp::new(&[f, h, dims.k_dim], Activation::Silu, rng);
        let mut xi_a = Mlp::new(&[2 * dims.b_half + dims.k_dim + dims.time_dim, h, dims.rows], Activation::Silu, rng);
        xi_a.scale_output(1e-2);
        Self { xi_q, xi_b, xi_k, xi_a, prior }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            xi_q: self.xi_q.zeros_like(),
            xi_b: self.xi_b.zeros_like(),
            xi_k: self.xi_k.zeros_like(),
            xi_a: self.xi_a.zeros_like(),
            prior: self.prior.zeros_like(),
        }
    }

    pub fn rows(&self) -> usize {
        self.xi_a.out_dim()
    }

    pub fn input_features(&self) -> usize {
        self.xi_k.in_dim()
    }

    fn b_half(&self) -> usize {
        self.xi_b.out_dim() / 2
    }

    pub fn compute(&self, positions: ArrayView2<f64>, features: ArrayView2<f64>, te: &[f64]) -> Result<VrWeights> {
        Ok(VrWeights { matrix: self.forward_taped(positions, features, te)?.weights })
    }

    pub fn forward_taped(
        &self,
        positions: ArrayView2<f64>,
        features: ArrayView2<f64>,
        te: &[f64],
    ) -> Result<WeightTape> {
        let n = positions.nrows();
        if n == 0 {
            return Err(Error::invalid("virtual receptor input is empty"));
        }
        if features.nrows() != n || features.ncols() != self.input_features() {
            return Err(Error::shape(format!(
                "weight net expects {} features per atom, got {:?}",
                self.input_features(),
                features.shape()
            )));
        }
        let anchors = self.prior.anchors(positions, self.rows())?;

        let mut pairs = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                pairs.push((j, k));
            }
        }
        let mut diff = Array2::zeros((n * n, 3));
        let mut dist = Array2::zeros((n * n, 1));
        for (p, &(j, k)) in pairs.iter().enumerate() {
            let mut sq = 0.0;
            for a in 0..3 {
                let v = positions[[j, a]] - positions[[k, a]];
                diff[[p, a]] = v;
                sq += v * v;
            }
            dist[[p, 0]] = sq.sqrt();
        }
        let empty = Array1::<f64>::zeros(0);
        let inputs = PairInputs { left: features, right: features, pairs: &pairs, edge: dist.view(), context: empty.view() };
        let (q, q_tape) = self.xi_q.forward_pairs_taped(&inputs)?;
        let qbar = q.into_shape_with_order((n, n, self.xi_q.out_dim())).expect("pairs are row-major").mean_axis(Axis(1)).expect("n > 0");

        let (b_out, b_tape) = self.xi_b.forward_taped(qbar.view())?;
        let half = self.b_half();
        let b_av = b_out.slice(s![.., half..]).mean_axis(Axis(0)).expect("n > 0");
        let (k_out, k_tape) = self.xi_k.forward_taped(features)?;

        let te_arr = Array1::from(te.to_vec());
        let b_av_rows = b_av.broadcast((n, half)).expect("broadcast");
        let te_rows = te_arr.broadcast((n, te.len())).expect("broadcast");
        let a_in = concatenate(Axis(1), &[b_out.slice(s![.., ..half]), b_av_rows, k_out.view(), te_rows])
            .map_err(|_| Error::shape("weight net input concat"))?;
        let (a_out, a_tape) = self.xi_a.forward_taped(a_in.view())?;

        let mut logits = a_out.reversed_axes();
        self.prior.apply(&mut logits, &anchors);
        let weights = softmax_rows(logits);
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("virtual receptor weights".into()));
        }
        Ok(WeightTape {
            pairs,
            features: features.to_owned(),
            diff,
            dist,
            q_tape,
            b_tape,
            k_tape,
            a_tape,
            anchors,
            te: te_arr,
            weights,
        })
    }

    /// Back-propagates a gradient on `A`; returns gradients with respect to
    /// input positions and features.
    pub fn backward(&self, tape: &WeightTape, g_weights: ArrayView2<f64>, grads: &mut WeightNet) -> (Array2<f64>, Array2<f64>) {
        let a = &tape.weights;
        let n = a.ncols();
        // softmax: g_logit = A ⊙ (g − rowsum(A ⊙ g))
        let mut g_logits = Array2::<f64>::zeros(a.raw_dim());
        for ((mut gl, ar), gr) in g_logits.outer_iter_mut().zip(a.outer_iter()).zip(g_weights.outer_iter()) {
            let inner = ar.dot(&gr);
            for k in 0..n {
                gl[k] = ar[k] * (gr[k] - inner);
            }
        }
        grads.prior.backward(&g_logits, &tape.anchors);
        let g_a_out = g_logits.reversed_axes();
        let g_a_in = self.xi_a.backward(&tape.a_tape, g_a_out.view(), &mut grads.xi_a);

        let half = self.b_half();
        let k_dim = self.xi_k.out_dim();
        let mut g_b_out = Array2::<f64>::zeros((n, 2 * half));
        g_b_out.slice_mut(s![.., ..half]).assign(&g_a_in.slice(s![.., ..half]));
        let g_b_av = g_a_in.slice(s![.., half..2 * half]).sum_axis(Axis(0)) / n as f64;
        for mut row in g_b_out.slice_mut(s![.., half..]).outer_iter_mut() {
            row.assign(&g_b_av);
        }
        let g_k_out = g_a_in.slice(s![.., 2 * half..2 * half + k_dim]);

        let mut g_features = self.xi_k.backward(&tape.k_tape, g_k_out, &mut grads.xi_k);
        let g_qbar = self.xi_b.backward(&tape.b_tape, g_b_out.view(), &mut grads.xi_b);

        let q_dim = self.xi_q.out_dim();
        let mut g_q = Array2::<f64>::zeros((n * n, q_dim));
        for (p, &(j, _)) in tape.pairs.iter().enumerate() {
            g_q.row_mut(p).scaled_add(1.0 / n as f64, &g_qbar.row(j));
        }
        let empty = Array1::<f64>::zeros(0);
        let inputs = PairInputs {
            left: tape.features.view(),
            right: tape.features.view(),
            pairs: &tape.pairs,
            edge: tape.dist.view(),
            context: empty.view(),
        };
        let pg = self.xi_q.backward_pairs(&inputs, &tape.q_tape, g_q.view(), &mut grads.xi_q);
        g_features += &pg.left;
        g_features += &pg.right;

        let mut g_positions = Array2::<f64>::zeros((n, 3));
        for (p, &(j, k)) in tape.pairs.iter().enumerate() {
            let r = tape.dist[[p, 0]];
            if r <= 0.0 {
                continue;
            }
            let c = pg.edge[[p, 0]] / r;
            for ax in 0..3 {
                let g = c * tape.diff[[p, ax]];
                g_positions[[j, ax]] += g;
                g_positions[[k, ax]] -= g;
            }
        }
        let _ = &tape.te;
        (g_positions, g_features)
    }
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

impl ParamSet for WeightNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.xi_q.visit(&format!("{prefix}.xi_q"), f);
        self.xi_b.visit(&format!("{prefix}.xi_b"), f);
        self.xi_k.visit(&format!("{prefix}.xi_k"), f);
        self.xi_a.visit(&format!("{prefix}.xi_a"), f);
        self.prior.visit(&format!("{prefix}.prior"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.xi_q.visit_mut(&format!("{prefix}.xi_q"), f);
        self.xi_b.visit_mut(&format!("{prefix}.xi_b"), f);
        self.xi_k.visit_mut(&format!("{prefix}.xi_k"), f);
        self.xi_a.visit_mut(&format!("{prefix}.xi_a"), f);
        self.prior.visit_mut(&format!("{prefix}.prior"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VrConfig {
    /// ñ^r
    pub virtual_atoms: usize,
    /// n^r, the number of atoms the decoder reconstructs.
    pub pocket_atoms: usize,
    /// Width of the receptor features fed to the encoder.
    pub receptor_features: usize,
    /// Output width of ξ_h, i.e. the virtual atom feature width.
    pub feature_width: usize,
    pub hidden: usize,
    pub q_dim: usize,
    pub b_half: usize,
    pub k_dim: usize,
    pub time_dim: usize,
    pub max_time: usize,
    pub prior_strength: f64,
    /// Initial anchor strength of the decoder.
    pub decoder_prior: f64,
    pub decoder_features: bool,
}

impl Default for VrConfig {
    fn default() -> Self {
        Self {
            virtual_atoms: DEFAULT_VIRTUAL_ATOMS,
            pocket_atoms: DEFAULT_POCKET_SIZE,
            receptor_features: 256,
            feature_width: 256,
            hidden: 64,
            q_dim: 32,
            b_half: 16,
            k_dim: 16,
            time_dim: DEFAULT_TIME_DIM,
            max_time: crate::diffusion::DEFAULT_STEPS,
            prior_strength: DEFAULT_PRIOR_STRENGTH,
            decoder_prior: DEFAULT_PRIOR_STRENGTH,
            decoder_features: false,
        }
    }
}

impl VrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.virtual_atoms == 0 || self.pocket_atoms == 0 {
            return Err(Error::Config("virtual and pocket atom counts must be positive".into()));
        }
        if self.virtual_atoms > self.pocket_atoms {
            return Err(Error::Config(format!(
                "virtual atom count {} exceeds pocket size {}",
                self.virtual_atoms, self.pocket_atoms
            )));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        if [self.receptor_features, self.feature_width, self.hidden, self.q_dim, self.b_half, self.k_dim].contains(&0) {
            return Err(Error::Config("virtual receptor widths must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self, input_features: usize, rows: usize) -> WeightNetDims {
        WeightNetDims {
            input_features,
            rows,
            hidden: self.hidden,
            q_dim: self.q_dim,
            b_half: self.b_half,
            k_dim: self.k_dim,
            time_dim: self.time_dim,
        }
    }
}

/// Encoder weights, ξ_h, and decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualReceptor {
    pub config: VrConfig,
    pub encoder: WeightNet,
    pub xi_h: Mlp,
    pub decoder: WeightNet,
}

#[derive(Debug, Clone)]
pub struct EncodeTape {
    pub weights: WeightTape,
    positions: Array2<f64>,
    h_tape: MlpTape,
    projected: Array2<f64>,
}

/// Gradients with respect to an encoder pass.
#[derive(Debug, Clone)]
pub struct EncodeGrads {
    pub positions: Array2<f64>,
    pub features: Array2<f64>,
}

impl VirtualReceptor {
    pub fn new<R: Rng + ?Sized>(config: VrConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = WeightNet::new(
            &config.dims(config.receptor_features, config.virtual_atoms),
            Prior::anchored(config.virtual_atoms, config.prior_strength),
            rng,
        );
        let xi_h = Mlp::new(&[config.receptor_features, config.hidden, config.feature_width], Activation::Silu, rng);
        let dec_in = if config.decoder_features { config.feature_width } else { 1 };
        let decoder = WeightNet::new(
            &config.dims(dec_in, config.pocket_atoms),
            Prior::cyclic(config.pocket_atoms, config.virtual_atoms, config.decoder_prior),
            rng,
        );
        Ok(Self { config, encoder, xi_h, decoder })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            xi_h: self.xi_h.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn time_features(&self, t: usize) -> Result<Vec<f64>> {
        time_encoding(t, self.config.max_time, self.config.time_dim)
    }

    pub fn compute_weights(&self, receptor: &AtomCloud, t: usize) -> Result<VrWeights> {
        let te = self.time_features(t)?;
        self.encoder.compute(receptor.positions(), receptor.features(), &te)
    }

    pub fn encode(&self, receptor: &AtomCloud, t: usize) -> Result<AtomCloud> {
        Ok(self.encode_taped(receptor, t)?.0)
    }

    pub fn encode_taped(&self, receptor: &AtomCloud, t: usize) -> Result<(AtomCloud, EncodeTape)> {
        let te = self.time_features(t)?;
        let weights = self.encoder.forward_taped(receptor.positions(), receptor.features(), &te)?;
        let (projected, h_tape) = self.xi_h.forward_taped(receptor.features())?;
        let a = &weights.weights;
        let cloud = AtomCloud::new(a.dot(&receptor.positions()), a.dot(&projected))?;
        let tape = EncodeTape { weights, positions: receptor.positions().to_owned(), h_tape, projected };
        Ok((cloud, tape))
    }

    /// Gradients of a scalar objective given its gradient on the virtual
    /// positions and features. Parameter gradients accumulate into
    /// `grads.encoder` and `grads.xi_h`.
    pub fn encode_backward(
        &self,
        tape: &EncodeTape,
        g_positions: ArrayView2<f64>,
        g_features: ArrayView2<f64>,
        grads: &mut VirtualReceptor,
    ) -> EncodeGrads {
        let a = &tape.weights.weights;
        let mut g_a = g_positions.dot(&tape.positions.t());
        g_a += &g_features.dot(&tape.projected.t());
        let g_proj = a.t().dot(&g_features);
        let mut features = self.xi_h.backward(&tape.h_tape, g_proj.view(), &mut grads.xi_h);
        let (g_pos_w, g_feat_w) = self.encoder.backward(&tape.weights, g_a.view(), &mut grads.encoder);
        let mut positions = a.t().dot(&g_positions);
        positions += &g_pos_w;
        features += &g_feat_w;
        EncodeGrads { positions, features }
    }

    /// Reconstructs `pocket_atoms` positions from a virtual cloud.
    pub fn decode(&self, virtual_cloud: &AtomCloud, t: usize) -> Result<Array2<f64>> {
        let te = self.time_features(t)?;
        let feats = self.decoder_inputs(virtual_cloud);
        let w = self.decoder.compute(virtual_cloud.positions(), feats.view(), &te)?;
        Ok(w.matrix.dot(&virtual_cloud.positions()))
    }

    fn decoder_inputs(&self, virtual_cloud: &AtomCloud) -> Array2<f64> {
        if self.config.decoder_features {
            virtual_cloud.features().to_owned()
        } else {
            Array2::ones((virtual_cloud.len(), 1))
        }
    }

    /// Autoencoder loss at `t = 0` for one pocket, with gradients
    /// accumulated into `grads`.
    pub fn reconstruction_step(&self, pocket: &AtomCloud, grads: &mut VirtualReceptor) -> Result<f64> {
        if pocket.len() != self.config.pocket_atoms {
            return Err(Error::invalid(format!(
                "pocket has {} atoms, autoencoder reconstructs {}",
                pocket.len(),
                self.config.pocket_atoms
            )));
        }
        let te = self.time_features(0)?;
        let (virt, enc_tape) = self.encode_taped(pocket, 0)?;
        let feats = self.decoder_inputs(&virt);
        let dec_tape = self.decoder.forward_taped(virt.positions(), feats.view(), &te)?;
        let recon = dec_tape.weights.dot(&virt.positions());
        let (loss, assignment) = bipartite_loss_positions(pocket.positions(), recon.view())?;
        let n = pocket.len() as f64;
        let g_recon = gradient_for_assignment(pocket.positions(), recon.view(), &assignment) / n;

        let g_dec_w = g_recon.dot(&virt.positions().t());
        let (g_virt_pos_w, g_virt_feat) = self.decoder.backward(&dec_tape, g_dec_w.view(), &mut grads.decoder);
        let mut g_virt_pos = dec_tape.weights.t().dot(&g_recon);
        g_virt_pos += &g_virt_pos_w;
        let g_feat = if self.config.decoder_features {
            g_virt_feat
        } else {
            Array2::<f64>::zeros(virt.features().raw_dim())
        };
        self.encode_backward(&enc_tape, g_virt_pos.view(), g_feat.view(), grads);
        Ok(loss / n)
    }

    /// Per-atom mean squared reconstruction error under optimal matching.
    pub fn reconstruction_loss(&self, pocket: &AtomCloud) -> Result<f64> {
        let virt = self.encode(pocket, 0)?;
        let recon = self.decode(&virt, 0)?;
        let (loss, _) = bipartite_loss_positions(pocket.positions(), recon.view())?;
        Ok(loss / pocket.len() as f64)
    }
}

impl ParamSet for VirtualReceptor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.xi_h.visit(&format!("{prefix}.xi_h"), f);
        self.decoder.visit(&format!("{prefix}.decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.xi_h.visit_mut(&format!("{prefix}.xi_h"), f);
        self.decoder.visit_mut(&format!("{prefix}.decoder"), f);
    }
}

/// Farthest-point anchors for a receptor, the rows the encoder starts on.
pub fn fps_init(receptor: &AtomCloud, virtual_atoms: usize) -> Result<Vec<usize>> {
    if virtual_atoms > receptor.len() {
        return Err(Error::invalid(format!(
            "{virtual_atoms} virtual atoms requested from {} receptor atoms",
            receptor.len()
        )));
    }
    crate::geometry::farthest_point_sample(receptor, virtual_atoms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, learning_rate: 1e-3, seed: 0 }
    }
}

/// Mean loss over a batch and the averaged gradient, summed in batch order.
pub fn batch_gradient(model: &VirtualReceptor, pockets: &[&AtomCloud]) -> Result<(f64, VirtualReceptor)> {
    let parts: Vec<Result<(f64, VirtualReceptor)>> = pockets
        .par_iter()
        .map(|p| {
            let mut g = model.zeros_like();
            let loss = model.reconstruction_step(p, &mut g)?;
            Ok((loss, g))
        })
        .collect();
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / pockets.len() as f64;
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        accumulate(&mut total, &g, scale);
    }
    Ok((loss, total))
}

/// Trains encoder and decoder jointly on the reconstruction loss. Returns
/// the per-step batch loss.
pub fn pretrain_autoencoder(model: &mut VirtualReceptor, pockets: &[AtomCloud], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if pockets.is_empty() {
        return Err(Error::invalid("autoencoder pretraining needs at least one pocket"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = OptState::new(OptimizerConfig::new(cfg.learning_rate, cfg.steps), model)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derived_rng(cfg.seed, step as u64);
        let batch: Vec<&AtomCloud> = if cfg.batch >= pockets.len() {
            pockets.iter().collect()
        } else {
            rand::seq::index::sample(&mut rng, pockets.len(), cfg.batch).iter().map(|i| &pockets[i]).collect()
        };
        let (loss, grads) = batch_gradient(model, &batch)?;
        opt.step(model, &grads)?;
        log::debug!("pretrain step {step}: loss {loss:.5}");
        curve.push(loss);
    }
    Ok(curve)
}
