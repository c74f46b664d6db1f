//! Dataset generation, autoencoder pretraining, denoiser training and sampling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vrdiff::dataio::{filter_records, load_dataset, save_dataset, synth_generate, AtomType, ComplexRecord};
use vrdiff::diffcore::{derived_rng, write_atomic, Checkpoint};
use vrdiff::diffusion::{sample, GeneratedLigand, NoisePredictor, NoiseSchedule};
use vrdiff::geometry::AtomCloud;
use vrdiff::training::{evaluate_noise_loss, ConditionalModel, PreparedComplex, TrainConfig, TrainState};
use vrdiff::virtual_receptor::{pretrain_autoencoder, PretrainConfig, VirtualReceptor, VrConfig};

use crate::config::{curve_path, provenance, RunConfig};
use crate::error::{CliError, CliResult};
use crate::features::{FeatureSpec, ReceptorFeatures};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 500;
/// Noise draws per complex when scoring a trained denoiser.
const EVAL_DRAWS: usize = 16;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Loads a dataset and drops records the filter rejects.
pub fn load_records(path: &Path) -> CliResult<Vec<ComplexRecord>> {
    let outcome = filter_records(load_dataset(path)?);
    for (r, why) in &outcome.rejected {
        log::warn!("skipping {}: {why}", r.id);
    }
    if outcome.kept.is_empty() {
        return Err(CliError::Validation(format!("dataset {} has no usable complexes", path.display())));
    }
    Ok(outcome.kept)
}

fn steps_for(epochs: usize, records: usize, batch: usize) -> usize {
    epochs * records.div_ceil(batch)
}

pub fn synth(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.out()?.to_path_buf();
    let seed = cfg.seed()?;
    let synth = cfg.synth.clone().unwrap_or_default();
    let records = synth_generate(&synth, seed)?;
    save_dataset(&out, &records)?;
    log::info!("wrote {} synthetic complexes to {}", records.len(), out.display());
    Ok(out)
}

fn vr_checkpoint(vr: &VirtualReceptor, spec: &FeatureSpec, summary: Value, prov: Value) -> Checkpoint {
    let mut ck = Checkpoint::new(json!({
        "kind": "vr",
        "vr_config": vr.config,
        "features": spec,
        "summary": summary,
        "provenance": prov,
    }));
    ck.add_params("vr", vr);
    ck
}

/// Reads a pretrained virtual receptor and the features it was trained on.
pub fn load_vr_checkpoint(path: &Path) -> CliResult<(VirtualReceptor, FeatureSpec)> {
    let ck = Checkpoint::read(path)?;
    if ck.metadata.get("kind").and_then(Value::as_str) != Some("vr") {
        return Err(vrdiff::Error::Checkpoint(format!("{} is not a virtual receptor checkpoint", path.display())).into());
    }
    let vr_config: VrConfig = serde_json::from_value(ck.metadata["vr_config"].clone())
        .map_err(|e| vrdiff::Error::Checkpoint(format!("vr_config: {e}")))?;
    let mut vr = VirtualReceptor::new(vr_config, &mut derived_rng(0, 0))?;
    ck.load_params("vr", &mut vr)?;
    Ok((vr, FeatureSpec::from_metadata(&ck.metadata)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub steps: usize,
    /// Mean reconstruction loss over the dataset before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

fn mean_reconstruction_loss(vr: &VirtualReceptor, pockets: &[AtomCloud]) -> CliResult<f64> {
    let losses = pockets.par_iter().map(|p| vr.reconstruction_loss(p)).collect::<vrdiff::Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains the autoencoder. Outputs are written either way; the command
/// fails if the final loss is not below the initial one.
pub fn pretrain_vr(cfg: &RunConfig) -> CliResult<PretrainOutcome> {
    let dataset = cfg.dataset()?;
    let emb_path = cfg.embeddings()?;
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let vr_cfg = cfg.vr_config()?;
    let batch = cfg.batch(DEFAULT_BATCH)?;
    let epochs = cfg.epochs(DEFAULT_EPOCHS)?;
    let lr = cfg.learning_rate(DEFAULT_LEARNING_RATE)?;

    let records = load_records(dataset)?;
    let features = ReceptorFeatures::load(emb_path, &records)?;
    let spec = features.spec();
    let prepared = features.prepare(&records, &spec, vr_cfg.pocket_atoms, vr_cfg.receptor_features)?;
    let pockets: Vec<AtomCloud> = prepared.into_iter().map(|p| p.pocket).collect();

    let steps = steps_for(epochs, pockets.len(), batch);
    let pre = PretrainConfig { steps, batch, learning_rate: lr, seed };
    let mut vr = VirtualReceptor::new(vr_cfg.clone(), &mut derived_rng(seed, u64::MAX))?;
    let initial_loss = mean_reconstruction_loss(&vr, &pockets)?;
    log::info!("pretraining on {} pockets for {steps} steps; initial loss {initial_loss:.4}", pockets.len());
    let curve = pretrain_autoencoder(&mut vr, &pockets, &pre)?;
    let final_loss = mean_reconstruction_loss(&vr, &pockets)?;
    log::info!("final loss {final_loss:.4} ({:.3} of initial)", final_loss / initial_loss);

    let prov = provenance("pretrain-vr", cfg, json!({ "vr": vr_cfg, "pretrain": pre, "features": spec }));
    let summary = json!({ "initial_loss": initial_loss, "final_loss": final_loss, "steps": steps });
    vr_checkpoint(&vr, &spec, summary, prov.clone()).write(out)?;
    let curve_file = curve_path(out);
    write_json(
        &curve_file,
        &json!({ "provenance": prov, "initial_loss": initial_loss, "final_loss": final_loss, "losses": curve }),
    )?;
    let outcome = PretrainOutcome { steps, initial_loss, final_loss, checkpoint: out.to_path_buf(), curve: curve_file };
    if final_loss.partial_cmp(&initial_loss) != Some(std::cmp::Ordering::Less) {
        return Err(CliError::Runtime(format!(
            "reconstruction loss did not improve: initial {initial_loss:.6}, final {final_loss:.6}"
        )));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Mean noise loss over fresh draws after training.
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

fn denoiser_checkpoint(state: &TrainState, spec: &FeatureSpec, prov: &Value) -> CliResult<Checkpoint> {
    let mut ck = state.to_checkpoint(prov.clone())?;
    if let Value::Object(map) = &mut ck.metadata {
        map.insert("features".into(), serde_json::to_value(spec)?);
    }
    Ok(ck)
}

/// Reads a denoiser checkpoint with its training state and feature spec.
pub fn load_denoiser_checkpoint(path: &Path) -> CliResult<(TrainState, FeatureSpec)> {
    let ck = Checkpoint::read(path)?;
    let state = TrainState::from_checkpoint(&ck)?;
    Ok((state, FeatureSpec::from_metadata(&ck.metadata)?))
}

fn check_matches<T: PartialEq + std::fmt::Debug>(what: &str, requested: Option<T>, stored: T) -> CliResult<()> {
    match requested {
        Some(r) if r != stored => Err(vrdiff::Error::Checkpoint(format!(
            "{what} {r:?} requested but the checkpoint was built with {stored:?}"
        ))
        .into()),
        _ => Ok(()),
    }
}

/// Trains the denoiser and fine-tunes the encoder. Starts from a pretrained
/// virtual receptor unless `from_scratch` is set, or continues a previous
/// run from `resume`.
pub fn train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let dataset = cfg.dataset()?;
    let emb_path = cfg.embeddings()?;
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    if let Some(p) = &cfg.resume {
        crate::config::require_file("resume checkpoint", p)?;
    } else if !cfg.from_scratch.unwrap_or(false) {
        let p = cfg
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config("train needs --checkpoint (a pretrained VR) or --from-scratch".into()))?;
        crate::config::require_file("checkpoint", p)?;
    }
    let records = load_records(dataset)?;
    let features = ReceptorFeatures::load(emb_path, &records)?;
    let spec = features.spec();

    let mut state = if let Some(p) = &cfg.resume {
        let (state, stored) = load_denoiser_checkpoint(p)?;
        stored.ensure_compatible(&spec)?;
        log::info!("resuming at step {} of {}", state.step(), state.config.steps);
        state
    } else {
        let vr_cfg = match (&cfg.checkpoint, cfg.from_scratch.unwrap_or(false)) {
            (Some(p), false) => {
                let (vr, stored) = load_vr_checkpoint(p)?;
                stored.ensure_compatible(&spec)?;
                Some(vr)
            }
            _ => None,
        };
        let (vr_config, pretrained) = match vr_cfg {
            Some(vr) => {
                check_matches("virtual atoms", cfg.virtual_atoms, vr.config.virtual_atoms)?;
                check_matches("pocket atoms", cfg.pocket_atoms, vr.config.pocket_atoms)?;
                check_matches("diffusion steps", cfg.diffusion_steps, vr.config.max_time)?;
                (vr.config.clone(), Some(vr))
            }
            None => (cfg.vr_config()?, None),
        };
        let den_cfg = cfg.denoiser_config(&vr_config)?;
        let mut model = ConditionalModel::new(vr_config, den_cfg, &mut derived_rng(seed, u64::MAX))?;
        if let Some(vr) = pretrained {
            model.vr = vr;
        }
        let batch = cfg.batch(DEFAULT_BATCH)?;
        let steps = steps_for(cfg.epochs(DEFAULT_EPOCHS)?, records.len(), batch);
        let tc = TrainConfig { steps, batch, learning_rate: cfg.learning_rate(DEFAULT_LEARNING_RATE)?, seed };
        TrainState::new(model, tc)?
    };
    let vr_config = state.model.vr.config.clone();
    let data = features.prepare(&records, &spec, vr_config.pocket_atoms, vr_config.receptor_features)?;
    let schedule = NoiseSchedule::polynomial(vr_config.max_time)?;
    let every = cfg.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY).max(1);
    let prov = provenance(
        "train",
        cfg,
        json!({ "vr": vr_config, "denoiser": state.model.denoiser.config, "train": state.config, "features": spec }),
    );

    let total = state.config.steps;
    let until = cfg.stop_after.map_or(total, |n| n.min(total));
    if until <= state.step() {
        log::warn!("checkpoint is already at step {}; nothing to train", state.step());
    }
    state.run(&data, &schedule, until, |s| {
        let step = s.step();
        if step % 10 == 0 || step == total {
            log::info!("step {step}/{total}: loss {:.5}", s.curve.last().copied().unwrap_or(f64::NAN));
        }
        if step % every == 0 && step < until {
            let ck = denoiser_checkpoint(s, &spec, &prov).map_err(|e| vrdiff::Error::Checkpoint(e.to_string()))?;
            ck.write(out)?;
        }
        Ok(())
    })?;
    denoiser_checkpoint(&state, &spec, &prov)?.write(out)?;
    let final_loss = evaluate_noise_loss(&state.model, &data, &schedule, EVAL_DRAWS, seed)?;
    log::info!("evaluated noise loss {final_loss:.5}");
    let curve_file = curve_path(out);
    write_json(&curve_file, &json!({ "provenance": prov, "final_loss": final_loss, "losses": state.curve }))?;
    Ok(TrainOutcome { steps: state.step(), final_loss, checkpoint: out.to_path_buf(), curve: curve_file })
}

/// One generated molecule in the input frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledLigand {
    pub index: usize,
    pub positions: Vec<[f64; 3]>,
    pub atom_types: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub provenance: Value,
    pub complex: String,
    pub n_atoms: usize,
    pub ligands: Vec<SampledLigand>,
}

/// Runs `count` independent chains; molecule `k` draws from stream `k`
/// of `seed`, so results do not depend on scheduling.
pub fn sample_ligands<P>(
    predictor: &P,
    pocket: &AtomCloud,
    count: usize,
    n_atoms: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> CliResult<Vec<(GeneratedLigand, f64)>>
where
    P: NoisePredictor<Context = AtomCloud> + Sync,
{
    let channels = AtomType::ALL.len();
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = derived_rng(seed, k as u64);
            let start = Instant::now();
            let lig = sample(predictor, pocket, n_atoms, channels, schedule, &mut rng)?;
            Ok((lig, start.elapsed().as_secs_f64()))
        })
        .collect()
}

/// Converts sampler output back to the input frame with element symbols.
pub fn to_sampled(index: usize, lig: &GeneratedLigand, origin: [f64; 3], wall_time_s: f64) -> SampledLigand {
    let positions = lig.positions.outer_iter().map(|r| [r[0] + origin[0], r[1] + origin[1], r[2] + origin[2]]).collect();
    let atom_types = lig
        .atom_classes
        .iter()
        .map(|&c| AtomType::from_index(c).expect("decoded class indexes an atom type").symbol().to_string())
        .collect();
    SampledLigand { index, positions, atom_types, wall_time_s }
}

fn pick_complex<'a>(data: &'a [PreparedComplex], id: Option<&str>) -> CliResult<&'a PreparedComplex> {
    match id {
        None => Ok(&data[0]),
        Some(id) => data
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| CliError::Config(format!("complex {id} is not in the dataset"))),
    }
}

pub fn sample_cmd(cfg: &RunConfig) -> CliResult<SampleReport> {
    let dataset = cfg.dataset()?;
    let emb_path = cfg.embeddings()?;
    let out = cfg.out()?;
    let seed = cfg.seed()?;
    let ck_path = cfg.checkpoint.as_deref().ok_or_else(|| CliError::Config("sample needs --checkpoint".into()))?;
    crate::config::require_file("checkpoint", ck_path)?;
    let count = cfg.samples.unwrap_or(DEFAULT_SAMPLES);
    if count == 0 {
        return Err(CliError::Config("sample count must be positive".into()));
    }
    if cfg.ligand_atoms == Some(0) {
        return Err(CliError::Config("ligand atom count must be positive".into()));
    }

    let records = load_records(dataset)?;
    let features = ReceptorFeatures::load(emb_path, &records)?;
    let spec = features.spec();
    let (state, stored) = load_denoiser_checkpoint(ck_path)?;
    stored.ensure_compatible(&spec)?;
    let model = state.model;
    check_matches("diffusion steps", cfg.diffusion_steps, model.vr.config.max_time)?;

    let data = features.prepare(&records, &spec, model.vr.config.pocket_atoms, model.vr.config.receptor_features)?;
    let target = pick_complex(&data, cfg.complex.as_deref())?;
    let n_atoms = cfg.ligand_atoms.unwrap_or(target.ligand.n_atoms());
    let schedule = NoiseSchedule::polynomial(model.vr.config.max_time)?;
    log::info!("sampling {count} ligands of {n_atoms} atoms for {}", target.id);
    let generated = sample_ligands(&model, &target.pocket, count, n_atoms, &schedule, seed)?;
    let ligands = generated.iter().enumerate().map(|(k, (lig, secs))| to_sampled(k, lig, target.origin, *secs)).collect();
    let prov = provenance("sample", cfg, json!({ "features": spec, "checkpoint_step": state.opt.step }));
    let report = SampleReport { provenance: prov, complex: target.id.clone(), n_atoms, ligands };
    write_json(out, &report)?;
    Ok(report)
}
