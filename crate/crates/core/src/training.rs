//! Denoiser training: complex preparation, the noise-prediction loss, and a
//! resumable optimization loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataio::{AminoAcid, ComplexRecord};
use crate::diffcore::{accumulate, derived_rng, Checkpoint, Linear, OptState, OptimizerConfig, ParamSet};
use crate::diffusion::{forward_sample, DiffusionState, NoisePredictor, NoiseSchedule, FEATURE_SCALE};
use crate::egnn::{Denoiser, DenoiserConfig};
use crate::embeddings::{assemble_receptor_features, one_hot_fallback, EmbeddingTable};
use crate::error::{Error, Result};
use crate::geometry::{center_complex, select_pocket, AtomCloud, Vec3};
use crate::virtual_receptor::{VirtualReceptor, VrConfig};

/// Where receptor features come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Projected residue-type one-hots (20 → width).
    OneHot(&'a Linear),
    /// Projected per-residue embeddings.
    Embeddings(&'a EmbeddingTable, &'a Linear),
}

/// A complex in model coordinates: the pocket centroid sits at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedComplex {
    pub id: String,
    pub pocket: AtomCloud,
    /// Clean ligand: centered positions and scaled one-hot types.
    pub ligand: DiffusionState,
    /// Pocket centroid in the input frame.
    pub origin: Vec3,
}

/// Residue types of the pocket atoms, looked up through residue indices.
fn pocket_types(record: &ComplexRecord, pocket: &AtomCloud) -> Result<Vec<AminoAcid>> {
    let all = record.residue_index();
    let idx = pocket.residue_index().ok_or_else(|| Error::invalid("pocket lost its residue indices"))?;
    idx.iter()
        .map(|r| {
            all.iter()
                .position(|a| a == r)
                .map(|k| record.residue_types[k])
                .ok_or_else(|| Error::MissingResidues(vec![*r]))
        })
        .collect()
}

/// Selects the `pocket_size` Cα atoms nearest the ligand centroid, attaches
/// features and moves everything into the pocket-centroid frame.
pub fn prepare_complex(record: &ComplexRecord, pocket_size: usize, features: FeatureSource) -> Result<PreparedComplex> {
    if record.receptor.len() < pocket_size {
        return Err(Error::invalid(format!(
            "{}: receptor has {} atoms, pocket needs {pocket_size}",
            record.id,
            record.receptor.len()
        )));
    }
    let pocket = select_pocket(&record.receptor, record.ligand_centroid(), pocket_size)?;
    let pocket = match features {
        FeatureSource::OneHot(proj) => one_hot_fallback(&pocket, &pocket_types(record, &pocket)?, proj)?,
        FeatureSource::Embeddings(table, proj) => assemble_receptor_features(&pocket, table, proj)?,
    };
    let (pocket, ligand, origin) = center_complex(&pocket, &record.ligand_cloud()?)?;
    let types = ligand.features().mapv(|v| v * FEATURE_SCALE);
    let ligand = DiffusionState::new(ligand.positions().to_owned(), types)?;
    Ok(PreparedComplex { id: record.id.clone(), pocket, ligand, origin })
}

/// Virtual-receptor encoder plus denoiser. The autoencoder's decoder is
/// carried along for checkpointing but is not trained here.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModel {
    pub vr: VirtualReceptor,
    pub denoiser: Denoiser,
}

impl ConditionalModel {
    pub fn new<R: Rng + ?Sized>(vr: VrConfig, denoiser: DenoiserConfig, rng: &mut R) -> Result<Self> {
        if vr.feature_width != denoiser.receptor_features {
            return Err(Error::Config(format!(
                "virtual features have width {}, denoiser expects {}",
                vr.feature_width, denoiser.receptor_features
            )));
        }
        Ok(Self { vr: VirtualReceptor::new(vr, rng)?, denoiser: Denoiser::new(denoiser, rng)? })
    }

    pub fn zeros_like(&self) -> Self {
        Self { vr: self.vr.zeros_like(), denoiser: self.denoiser.zeros_like() }
    }

    /// Loss of one noised example with gradients accumulated into `grads`
    /// scaled by `weight`.
    pub fn example_step(
        &self,
        pocket: &AtomCloud,
        z_t: &DiffusionState,
        eps: &DiffusionState,
        t: usize,
        weight: f64,
        grads: &mut ConditionalModel,
    ) -> Result<f64> {
        let (virt, enc_tape) = self.vr.encode_taped(pocket, t)?;
        let (eps_hat, tape) = self.denoiser.forward_taped(z_t, &virt, t)?;
        let (loss, upstream) = noise_loss(&eps_hat, eps)?;
        let upstream = upstream.combine(weight, &upstream, 0.0);
        let g = self.denoiser.backward(&tape, &upstream);
        accumulate(&mut grads.denoiser, &g.params, 1.0);
        self.vr.encode_backward(&enc_tape, g.receptor_positions.view(), g.receptor_features.view(), &mut grads.vr);
        Ok(loss)
    }
}

impl NoisePredictor for ConditionalModel {
    type Context = AtomCloud;

    fn predict_noise(&self, pocket: &AtomCloud, z_t: &DiffusionState, t: usize) -> Result<DiffusionState> {
        let virt = self.vr.encode(pocket, t)?;
        self.denoiser.forward(z_t, &virt, t)
    }
}

/// Trainable blocks only: encoder, ξ_h and denoiser.
impl ParamSet for ConditionalModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.vr.encoder.visit(&format!("{prefix}.vr.encoder"), f);
        self.vr.xi_h.visit(&format!("{prefix}.vr.xi_h"), f);
        self.denoiser.visit(&format!("{prefix}.denoiser"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.vr.encoder.visit_mut(&format!("{prefix}.vr.encoder"), f);
        self.vr.xi_h.visit_mut(&format!("{prefix}.vr.xi_h"), f);
        self.denoiser.visit_mut(&format!("{prefix}.denoiser"), f);
    }
}

/// Mean squared error over all components and its gradient with respect to
/// the prediction.
pub fn noise_loss(eps_hat: &DiffusionState, eps: &DiffusionState) -> Result<(f64, DiffusionState)> {
    if eps_hat.positions.shape() != eps.positions.shape() || eps_hat.features.shape() != eps.features.shape() {
        return Err(Error::shape("noise estimate and target differ in shape"));
    }
    let n = eps.len().max(1) as f64;
    let diff = eps_hat.combine(1.0, eps, -1.0);
    let loss = diff.squared_norm() / n;
    Ok((loss, diff.combine(2.0 / n, &diff, 0.0)))
}

/// One noised draw per batch element: `t ~ U{1..T}` and `ε ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub z_t: DiffusionState,
    pub eps: DiffusionState,
}

pub fn draw_noise<R: Rng + ?Sized>(ligand: &DiffusionState, schedule: &NoiseSchedule, rng: &mut R) -> Result<NoiseDraw> {
    let t = rng.random_range(1..=schedule.steps());
    let (z_t, eps) = forward_sample(ligand, t, schedule, rng)?;
    Ok(NoiseDraw { t, z_t, eps })
}

/// Batch-mean noise-prediction loss and its gradient. Draws for each element
/// come from `rng` in batch order; the per-element work runs in parallel and
/// is reduced in batch order.
pub fn denoising_loss<R: Rng + ?Sized>(
    model: &ConditionalModel,
    batch: &[&PreparedComplex],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, ConditionalModel)> {
    if batch.is_empty() {
        return Err(Error::invalid("denoising loss needs a nonempty batch"));
    }
    let draws = batch.iter().map(|ex| draw_noise(&ex.ligand, schedule, rng)).collect::<Result<Vec<_>>>()?;
    let weight = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, ConditionalModel)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(ex, d)| {
            let mut g = model.zeros_like();
            let loss = model.example_step(&ex.pocket, &d.z_t, &d.eps, d.t, weight, &mut g)?;
            Ok((loss, g))
        })
        .collect();
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l * weight;
        accumulate(&mut total, &g, 1.0);
    }
    Ok((loss, total))
}

/// Mean loss over `draws` fresh noise draws per complex, without gradients.
pub fn evaluate_noise_loss(
    model: &ConditionalModel,
    data: &[PreparedComplex],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let per = (0..data.len() * draws)
        .into_par_iter()
        .map(|k| {
            let ex = &data[k / draws];
            let mut rng = derived_rng(seed, k as u64);
            let d = draw_noise(&ex.ligand, schedule, &mut rng)?;
            let eps_hat = model.predict_noise(&ex.pocket, &d.z_t, d.t)?;
            Ok(noise_loss(&eps_hat, &d.eps)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, learning_rate: 1e-3, seed: 0 }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ConditionalModel,
    pub opt: OptState,
    pub config: TrainConfig,
    /// Per-step batch losses so far.
    pub curve: Vec<f64>,
}

impl TrainState {
    pub fn new(model: ConditionalModel, config: TrainConfig) -> Result<Self> {
        if config.batch == 0 || config.steps == 0 {
            return Err(Error::Config("training needs positive steps and batch size".into()));
        }
        let opt = OptState::new(OptimizerConfig::new(config.learning_rate, config.steps), &model)?;
        Ok(Self { model, opt, config, curve: Vec::new() })
    }

    pub fn step(&self) -> usize {
        self.opt.step
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.config.steps
    }

    /// Runs one optimization step and returns its batch loss.
    pub fn advance(&mut self, data: &[PreparedComplex], schedule: &NoiseSchedule) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let step = self.opt.step;
        let mut rng = derived_rng(self.config.seed, step as u64);
        let batch: Vec<&PreparedComplex> = if self.config.batch >= data.len() {
            data.iter().collect()
        } else {
            rand::seq::index::sample(&mut rng, data.len(), self.config.batch).iter().map(|i| &data[i]).collect()
        };
        let (loss, grads) = denoising_loss(&self.model, &batch, schedule, &mut rng)?;
        self.opt.step(&mut self.model, &grads)?;
        log::debug!("train step {step}: loss {loss:.5}");
        self.curve.push(loss);
        Ok(loss)
    }

    /// Advances until `until` steps are done (or the schedule ends), calling
    /// `on_step` after every step.
    pub fn run(
        &mut self,
        data: &[PreparedComplex],
        schedule: &NoiseSchedule,
        until: usize,
        mut on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while self.opt.step < until.min(self.config.steps) {
            self.advance(data, schedule)?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, provenance: Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(json!({
            "kind": "denoiser",
            "vr_config": self.model.vr.config,
            "denoiser_config": self.model.denoiser.config,
            "train_config": self.config,
            "optimizer": self.opt.config,
            "step": self.opt.step,
            "curve": self.curve,
            "provenance": provenance,
        }));
        ck.add_params("vr", &self.model.vr);
        ck.add_params("denoiser", &self.model.denoiser);
        let n = self.opt.first_moment.len();
        ck.add_block("opt.first_moment", &[n], &self.opt.first_moment);
        ck.add_block("opt.second_moment", &[n], &self.opt.second_moment);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(Value::as_str) != Some("denoiser") {
            return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
        }
        let field = |name: &str| meta.get(name).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {name}")));
        let vr_config: VrConfig = serde_json::from_value(field("vr_config")?)?;
        let den_config: DenoiserConfig = serde_json::from_value(field("denoiser_config")?)?;
        let config: TrainConfig = serde_json::from_value(field("train_config")?)?;
        let opt_config: OptimizerConfig = serde_json::from_value(field("optimizer")?)?;
        let step: usize = serde_json::from_value(field("step")?)?;
        let curve: Vec<f64> = serde_json::from_value(field("curve")?)?;

        // parameter values come from the blocks; the seed only shapes the skeleton
        let mut rng = derived_rng(0, 0);
        let mut model = ConditionalModel::new(vr_config, den_config, &mut rng)?;
        ck.load_params("vr", &mut model.vr)?;
        ck.load_params("denoiser", &mut model.denoiser)?;
        let mut opt = OptState::new(opt_config, &model)?;
        let expected = opt.first_moment.len();
        let moments = |name: &str| -> Result<Vec<f64>> {
            let b = ck.get(name).ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
            if b.data.len() != expected {
                return Err(Error::Checkpoint(format!("{name} has {} entries, model has {expected}", b.data.len())));
            }
            Ok(b.data.clone())
        };
        opt.first_moment = moments("opt.first_moment")?;
        opt.second_moment = moments("opt.second_moment")?;
        opt.step = step;
        Ok(Self { model, opt, config, curve })
    }
}

/// Ligand sizes and type counts, for comparing samples against data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LigandStats {
    pub atoms: usize,
    /// Counts per type in C, N, O, F order.
    pub type_counts: [usize; 4],
}

impl LigandStats {
    pub fn from_classes(classes: &[usize]) -> Self {
        let mut type_counts = [0; 4];
        for &c in classes {
            type_counts[c.min(3)] += 1;
        }
        Self { atoms: classes.len(), type_counts }
    }

    pub fn from_state(state: &DiffusionState) -> Self {
        Self::from_classes(&crate::diffusion::decode_classes(&state.features))
    }
}
