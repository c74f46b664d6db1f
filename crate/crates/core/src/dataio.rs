//! Complex datasets: the line-delimited JSON format, the ligand filter and
//! a synthetic generator.
//!
//! Each line of a dataset file is one object:
//!
//! ```json
//! {"id": "cx0001",
//!  "receptor": {"positions": [[x, y, z], ...],
//!               "residue_index": [12, 13, ...],
//!               "residue_type": ["ALA", "GLY", ...]},
//!  "ligand": {"positions": [[x, y, z], ...],
//!             "atom_types": ["C", "N", ...]}}
//! ```
//!
//! Receptor nodes are Cα atoms, one per residue. Blank lines are skipped.
//! Coordinates are in Å.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{centroid, AtomCloud, RigidTransform, Vec3};

/// Ligand elements kept by the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtomType {
    C,
    N,
    O,
    F,
}

impl AtomType {
    pub const ALL: [AtomType; 4] = [AtomType::C, AtomType::N, AtomType::O, AtomType::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            AtomType::C => "C",
            AtomType::N => "N",
            AtomType::O => "O",
            AtomType::F => "F",
        }
    }
}

impl FromStr for AtomType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C" => Ok(AtomType::C),
            "N" => Ok(AtomType::N),
            "O" => Ok(AtomType::O),
            "F" => Ok(AtomType::F),
            _ => Err(Error::UnknownAtomType(s.to_string())),
        }
    }
}

impl fmt::Display for AtomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// The twenty standard amino acids, in alphabetical order of one-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AminoAcid {
    Ala,
    Cys,
    Asp,
    Glu,
    Phe,
    Gly,
    His,
    Ile,
    Lys,
    Leu,
    Met,
    Asn,
    Pro,
    Gln,
    Arg,
    Ser,
    Thr,
    Val,
    Trp,
    Tyr,
}

const AMINO_CODES: [(char, &str); 20] = [
    ('A', "ALA"),
    ('C', "CYS"),
    ('D', "ASP"),
    ('E', "GLU"),
    ('F', "PHE"),
    ('G', "GLY"),
    ('H', "HIS"),
    ('I', "ILE"),
    ('K', "LYS"),
    ('L', "LEU"),
    ('M', "MET"),
    ('N', "ASN"),
    ('P', "PRO"),
    ('Q', "GLN"),
    ('R', "ARG"),
    ('S', "SER"),
    ('T', "THR"),
    ('V', "VAL"),
    ('W', "TRP"),
    ('Y', "TYR"),
];

impl AminoAcid {
    pub const COUNT: usize = 20;

    pub const ALL: [AminoAcid; 20] = [
        AminoAcid::Ala,
        AminoAcid::Cys,
        AminoAcid::Asp,
        AminoAcid::Glu,
        AminoAcid::Phe,
        AminoAcid::Gly,
        AminoAcid::His,
        AminoAcid::Ile,
        AminoAcid::Lys,
        AminoAcid::Leu,
        AminoAcid::Met,
        AminoAcid::Asn,
        AminoAcid::Pro,
        AminoAcid::Gln,
        AminoAcid::Arg,
        AminoAcid::Ser,
        AminoAcid::Thr,
        AminoAcid::Val,
        AminoAcid::Trp,
        AminoAcid::Tyr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        AMINO_CODES[self.index()].1
    }

    pub fn letter(self) -> char {
        AMINO_CODES[self.index()].0
    }

    pub fn from_letter(c: char) -> Result<Self> {
        let up = c.to_ascii_uppercase();
        AMINO_CODES
            .iter()
            .position(|(l, _)| *l == up)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| Error::UnknownResidue(c.to_string()))
    }
}

impl FromStr for AminoAcid {
    type Err = Error;

    /// Accepts three-letter codes or single letters, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Self::from_letter(c);
        }
        let up = t.to_ascii_uppercase();
        AMINO_CODES
            .iter()
            .position(|(_, code)| *code == up)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| Error::UnknownResidue(s.to_string()))
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One receptor-ligand complex.
///
/// Ligand elements are kept as written so unsupported elements survive
/// loading and are reported by [`filter_records`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRecord {
    pub id: String,
    /// Cα positions with residue indices; no features.
    pub receptor: AtomCloud,
    pub residue_types: Vec<AminoAcid>,
    pub ligand_positions: Array2<f64>,
    pub ligand_elements: Vec<String>,
}

impl ComplexRecord {
    pub fn new(
        id: String,
        receptor: AtomCloud,
        residue_types: Vec<AminoAcid>,
        ligand_positions: Array2<f64>,
        ligand_elements: Vec<String>,
    ) -> Result<Self> {
        if receptor.is_empty() {
            return Err(Error::invalid(format!("{id}: receptor is empty")));
        }
        if receptor.residue_index().is_none() {
            return Err(Error::invalid(format!("{id}: receptor lacks residue indices")));
        }
        if residue_types.len() != receptor.len() {
            return Err(Error::invalid(format!(
                "{id}: {} residue types for {} receptor atoms",
                residue_types.len(),
                receptor.len()
            )));
        }
        if ligand_elements.is_empty() {
            return Err(Error::invalid(format!("{id}: ligand has no atoms")));
        }
        if ligand_positions.dim() != (ligand_elements.len(), 3) {
            return Err(Error::invalid(format!(
                "{id}: {} ligand positions for {} atom types",
                ligand_positions.nrows(),
                ligand_elements.len()
            )));
        }
        if receptor.positions().iter().chain(ligand_positions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{id}: coordinates")));
        }
        Ok(Self { id, receptor, residue_types, ligand_positions, ligand_elements })
    }

    pub fn residue_index(&self) -> &[i64] {
        self.receptor.residue_index().expect("checked at construction")
    }

    pub fn ligand_types(&self) -> Result<Vec<AtomType>> {
        self.ligand_elements.iter().map(|e| e.parse()).collect()
    }

    /// Ligand as a cloud with one-hot features over [`AtomType::ALL`].
    pub fn ligand_cloud(&self) -> Result<AtomCloud> {
        let types = self.ligand_types()?;
        let mut features = Array2::zeros((types.len(), AtomType::ALL.len()));
        for (i, t) in types.iter().enumerate() {
            features[[i, t.index()]] = 1.0;
        }
        AtomCloud::new(self.ligand_positions.clone(), features)
    }

    pub fn ligand_centroid(&self) -> Vec3 {
        centroid(self.ligand_positions.view())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReceptorJson {
    positions: Vec<[f64; 3]>,
    residue_index: Vec<i64>,
    residue_type: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LigandJson {
    positions: Vec<[f64; 3]>,
    atom_types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    id: String,
    receptor: ReceptorJson,
    ligand: LigandJson,
}

fn rows_to_array(rows: &[[f64; 3]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), 3), |(i, a)| rows[i][a])
}

fn array_to_rows(a: &Array2<f64>) -> Vec<[f64; 3]> {
    a.outer_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

impl RecordJson {
    fn into_record(self) -> Result<ComplexRecord> {
        let n = self.receptor.positions.len();
        if self.receptor.residue_index.len() != n || self.receptor.residue_type.len() != n {
            return Err(Error::invalid(format!(
                "{}: receptor fields have unequal lengths ({n} positions, {} indices, {} types)",
                self.id,
                self.receptor.residue_index.len(),
                self.receptor.residue_type.len()
            )));
        }
        let residue_types = self.receptor.residue_type.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
        let receptor = AtomCloud::with_residues(
            rows_to_array(&self.receptor.positions),
            Array2::zeros((n, 0)),
            Some(self.receptor.residue_index),
        )?;
        ComplexRecord::new(
            self.id,
            receptor,
            residue_types,
            rows_to_array(&self.ligand.positions),
            self.ligand.atom_types,
        )
    }

    fn from_record(r: &ComplexRecord) -> Self {
        RecordJson {
            id: r.id.clone(),
            receptor: ReceptorJson {
                positions: array_to_rows(&r.receptor.positions().to_owned()),
                residue_index: r.residue_index().to_vec(),
                residue_type: r.residue_types.iter().map(|a| a.code().to_string()).collect(),
            },
            ligand: LigandJson {
                positions: array_to_rows(&r.ligand_positions),
                atom_types: r.ligand_elements.clone(),
            },
        }
    }
}

/// Parses a dataset from any reader. Errors carry 1-based line numbers.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<ComplexRecord>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line: k + 1, reason };
        let json: RecordJson = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(json.into_record().map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<ComplexRecord>> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file))
}

pub fn dataset_to_string(records: &[ComplexRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&RecordJson::from_record(r))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes records atomically, one per line.
pub fn save_dataset(path: &Path, records: &[ComplexRecord]) -> Result<()> {
    write_atomic(path, dataset_to_string(records)?.as_bytes())
}

/// Why a record was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    TooManyAtoms { count: usize, max: usize },
    AtomType(String),
    DuplicateVertex { first: usize, second: usize },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::TooManyAtoms { count, max } => write!(f, "atom count {count} exceeds {max}"),
            RejectReason::AtomType(e) => write!(f, "atom type {e} not allowed"),
            RejectReason::DuplicateVertex { first, second } => {
                write!(f, "duplicate vertex: atoms {first} and {second} coincide")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRules {
    pub max_atoms: usize,
    /// Two ligand atoms closer than this count as duplicates.
    pub min_separation: f64,
    /// Docking-score filtering; not implemented.
    pub vina_in_distribution: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self { max_atoms: 30, min_separation: 1e-3, vina_in_distribution: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ComplexRecord>,
    pub rejected: Vec<(ComplexRecord, RejectReason)>,
}

pub fn check_record(record: &ComplexRecord, rules: &FilterRules) -> Option<RejectReason> {
    let n = record.ligand_elements.len();
    if n > rules.max_atoms {
        return Some(RejectReason::TooManyAtoms { count: n, max: rules.max_atoms });
    }
    if let Some(bad) = record.ligand_elements.iter().find(|e| e.parse::<AtomType>().is_err()) {
        return Some(RejectReason::AtomType(bad.clone()));
    }
    let p = &record.ligand_positions;
    let min2 = rules.min_separation * rules.min_separation;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..3).map(|a| (p[[i, a]] - p[[j, a]]).powi(2)).sum();
            if d2 < min2 {
                return Some(RejectReason::DuplicateVertex { first: i, second: j });
            }
        }
    }
    None
}

/// Splits records into kept and rejected using the default rules.
pub fn filter_records(records: Vec<ComplexRecord>) -> FilterOutcome {
    filter_records_with(records, &FilterRules::default()).expect("default rules are implemented")
}

pub fn filter_records_with(records: Vec<ComplexRecord>, rules: &FilterRules) -> Result<FilterOutcome> {
    if rules.vina_in_distribution {
        return Err(Error::Unsupported("docking-score filter rule".into()));
    }
    let mut out = FilterOutcome::default();
    for r in records {
        match check_record(&r, rules) {
            None => out.kept.push(r),
            Some(reason) => out.rejected.push((r, reason)),
        }
    }
    Ok(out)
}

/// Parameters of the synthetic complex generator.
///
/// Complexes come in families: each family is one receptor template (a
/// thick shell of Cα-like points around a cavity), and every complex in a
/// family docks a fresh ligand into a jittered copy of it under a random
/// rigid pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    /// Number of receptor templates; complex `k` uses template `k mod families`.
    pub families: usize,
    /// Cα atoms per template.
    pub receptor_atoms: usize,
    /// Radius of the empty cavity (Å).
    pub cavity_radius: f64,
    /// Outer radius of the receptor shell (Å).
    pub receptor_radius: f64,
    /// Minimum Cα–Cα spacing in a template (Å).
    pub spacing: f64,
    /// Isotropic noise (Å) applied to each copy of a template.
    pub jitter: f64,
    pub ligand_mean: f64,
    pub ligand_std: f64,
    pub ligand_min: usize,
    pub ligand_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 32,
            families: 8,
            receptor_atoms: 160,
            cavity_radius: 7.5,
            receptor_radius: 16.0,
            spacing: 3.4,
            jitter: 0.3,
            ligand_mean: 19.0,
            ligand_std: 6.8,
            ligand_min: 4,
            ligand_max: 30,
        }
    }
}

const BOND_LENGTH: f64 = 1.5;
const MIN_LIGAND_SEPARATION: f64 = 1.2;
/// Element frequencies for C, N, O, F.
const ELEMENT_WEIGHTS: [f64; 4] = [0.70, 0.12, 0.15, 0.03];

/// Ligand size: a normal draw rounded and clipped to `[min, max]`.
pub fn sample_ligand_size<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> usize {
    let normal = Normal::new(cfg.ligand_mean, cfg.ligand_std).expect("positive std");
    let x: f64 = normal.sample(rng);
    (x.round().max(cfg.ligand_min as f64).min(cfg.ligand_max as f64)) as usize
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vec3 {
    let n = Normal::new(0.0, sigma).expect("nonnegative sigma");
    [n.sample(rng), n.sample(rng), n.sample(rng)]
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = gaussian3(rng, 1.0);
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Grows a branched random walk of `n` atoms with bond length 1.5 Å,
/// every pair at least 1.2 Å apart, inside a ball of radius `limit`.
fn grow_ligand<R: Rng + ?Sized>(n: usize, limit: f64, rng: &mut R) -> Vec<Vec3> {
    let mut atoms: Vec<Vec3> = vec![[0.0; 3]];
    while atoms.len() < n {
        let parent = atoms[rng.random_range(0..atoms.len())];
        let dir = random_unit(rng);
        let cand = [parent[0] + BOND_LENGTH * dir[0], parent[1] + BOND_LENGTH * dir[1], parent[2] + BOND_LENGTH * dir[2]];
        let r2 = cand.iter().map(|v| v * v).sum::<f64>();
        if r2 > limit * limit {
            continue;
        }
        let clear = atoms.iter().all(|a| {
            let d2: f64 = (0..3).map(|k| (a[k] - cand[k]).powi(2)).sum();
            d2 >= MIN_LIGAND_SEPARATION * MIN_LIGAND_SEPARATION
        });
        if clear {
            atoms.push(cand);
        }
    }
    atoms
}

fn weighted_element<R: Rng + ?Sized>(rng: &mut R) -> AtomType {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, w) in AtomType::ALL.iter().zip(ELEMENT_WEIGHTS) {
        acc += w;
        if u < acc {
            return *t;
        }
    }
    AtomType::C
}

struct Template {
    points: Vec<Vec3>,
    residue_start: i64,
    residue_types: Vec<AminoAcid>,
}

/// Rejection-samples `cfg.receptor_atoms` points uniformly in the shell
/// between the cavity and outer radius, keeping the minimum spacing.
fn synth_template<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Template> {
    let (r0, r1) = (cfg.cavity_radius, cfg.receptor_radius);
    let min2 = cfg.spacing * cfg.spacing;
    let budget = 500 * cfg.receptor_atoms;
    let mut points: Vec<Vec3> = Vec::with_capacity(cfg.receptor_atoms);
    let mut tries = 0;
    while points.len() < cfg.receptor_atoms {
        tries += 1;
        if tries > budget {
            return Err(Error::Config(format!(
                "cannot place {} atoms {} Å apart in a {r0}-{r1} Å shell",
                cfg.receptor_atoms, cfg.spacing
            )));
        }
        // radius with density ∝ r² on [r0, r1]
        let u: f64 = rng.random();
        let r = (r0.powi(3) + u * (r1.powi(3) - r0.powi(3))).cbrt();
        let d = random_unit(rng);
        let cand = [r * d[0], r * d[1], r * d[2]];
        let clear = points.iter().all(|p| (0..3).map(|k| (p[k] - cand[k]).powi(2)).sum::<f64>() >= min2);
        if clear {
            points.push(cand);
        }
    }
    let residue_start = rng.random_range(1..400);
    let residue_types = (0..points.len()).map(|_| *AminoAcid::ALL.choose(rng).expect("nonempty")).collect();
    Ok(Template { points, residue_start, residue_types })
}

fn synth_one<R: Rng + ?Sized>(cfg: &SynthConfig, template: &Template, id: String, rng: &mut R) -> Result<ComplexRecord> {
    let pose = RigidTransform::random(rng, false, 0.0);
    let offset = gaussian3(rng, 20.0);
    let points: Vec<Vec3> = template
        .points
        .iter()
        .map(|p| {
            let j = gaussian3(rng, cfg.jitter);
            [p[0] + j[0], p[1] + j[1], p[2] + j[2]]
        })
        .collect();
    let residue_index: Vec<i64> = (0..points.len() as i64).map(|k| template.residue_start + k).collect();

    let size = sample_ligand_size(cfg, rng);
    let limit = (cfg.cavity_radius - 3.0).max(2.0);
    let mut ligand = grow_ligand(size, limit, rng);
    let shift = gaussian3(rng, 0.5);
    for a in ligand.iter_mut() {
        for k in 0..3 {
            a[k] += shift[k];
        }
    }
    let elements = (0..size).map(|_| weighted_element(rng).symbol().to_string()).collect();

    let place = |p: &Vec3| {
        let q = pose.apply_point(*p);
        [q[0] + offset[0], q[1] + offset[1], q[2] + offset[2]]
    };
    let rec_pos: Vec<Vec3> = points.iter().map(place).collect();
    let lig_pos: Vec<Vec3> = ligand.iter().map(place).collect();
    let receptor = AtomCloud::with_residues(
        crate::geometry::points_to_array(&rec_pos),
        Array2::zeros((rec_pos.len(), 0)),
        Some(residue_index),
    )?;
    ComplexRecord::new(id, receptor, template.residue_types.clone(), crate::geometry::points_to_array(&lig_pos), elements)
}

/// Deterministic synthetic complexes drawn from `cfg.families` receptor
/// templates.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<ComplexRecord>> {
    if cfg.receptor_atoms == 0 || cfg.families == 0 || cfg.ligand_min == 0 || cfg.ligand_min > cfg.ligand_max {
        return Err(Error::Config(
            "synthetic generator needs receptor atoms, at least one family and 1 <= ligand_min <= ligand_max".into(),
        ));
    }
    if !(cfg.cavity_radius > 0.0 && cfg.cavity_radius < cfg.receptor_radius && cfg.spacing >= 0.0 && cfg.jitter >= 0.0) {
        return Err(Error::Config("invalid synthetic receptor geometry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let families = cfg.families.min(cfg.count.max(1));
    let templates = (0..families).map(|_| synth_template(cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
    (0..cfg.count)
        .map(|k| synth_one(cfg, &templates[k % families], format!("synth{k:05}"), &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> Vec<ComplexRecord> {
        synth_generate(&SynthConfig { count, ..SynthConfig::default() }, 7).unwrap()
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse_dataset("".as_bytes()).unwrap().is_empty());
        assert!(parse_dataset("\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn save_load_roundtrip() {
        let recs = small(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &recs).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), recs);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = dataset_to_string(&small(2)).unwrap();
        text.push_str("{\"id\": \"broken\"}\n");
        match parse_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_residue_label_is_a_parse_error() {
        let text = dataset_to_string(&small(1)).unwrap().replacen("\"ALA\"", "\"XYZ\"", 1);
        let text = if text.contains("XYZ") { text } else { text.replacen("\"GLY\"", "\"XYZ\"", 1) };
        assert!(matches!(parse_dataset(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    fn with_elements(mut r: ComplexRecord, n: usize, f: impl Fn(usize) -> String) -> ComplexRecord {
        r.ligand_positions = Array2::from_shape_fn((n, 3), |(i, a)| if a == 0 { 1.5 * i as f64 } else { 0.0 });
        r.ligand_elements = (0..n).map(f).collect();
        r
    }

    #[test]
    fn boundary_and_element_rules() {
        let base = small(1).remove(0);
        let thirty = with_elements(base.clone(), 30, |i| AtomType::ALL[i % 4].symbol().into());
        let thirty_one = with_elements(base.clone(), 31, |_| "C".into());
        let phosphorus = with_elements(base.clone(), 5, |i| if i == 2 { "P".into() } else { "C".into() });
        let out = filter_records(vec![thirty.clone(), thirty_one, phosphorus]);
        assert_eq!(out.kept, vec![thirty]);
        assert!(matches!(out.rejected[0].1, RejectReason::TooManyAtoms { count: 31, max: 30 }));
        assert_eq!(out.rejected[1].1, RejectReason::AtomType("P".into()));
        assert!(out.rejected[1].1.to_string().contains("atom type"));
    }

    #[test]
    fn duplicate_vertex_rejected() {
        let mut r = small(1).remove(0);
        let row = r.ligand_positions.row(0).to_owned();
        r.ligand_positions.row_mut(1).assign(&row);
        let out = filter_records(vec![r]);
        assert!(matches!(out.rejected[0].1, RejectReason::DuplicateVertex { first: 0, second: 1 }));
    }

    #[test]
    fn docking_rule_reported_unimplemented() {
        let rules = FilterRules { vina_in_distribution: true, ..FilterRules::default() };
        assert!(matches!(filter_records_with(small(1), &rules), Err(Error::Unsupported(_))));
    }

    #[test]
    fn filter_is_idempotent_and_accepts_generated_records() {
        let recs = small(40);
        let once = filter_records(recs.clone());
        assert_eq!(once.kept, recs);
        let twice = filter_records(once.kept.clone());
        assert_eq!(twice.kept, once.kept);
        assert!(twice.rejected.is_empty());
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let cfg = SynthConfig { count: 5, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 3).unwrap());
        assert_ne!(synth_generate(&cfg, 3).unwrap(), synth_generate(&cfg, 4).unwrap());
    }

    #[test]
    fn ligand_sits_inside_receptor_without_clashes() {
        let cfg = SynthConfig::default();
        for r in small(30) {
            let rec = r.receptor.positions();
            let c = r.receptor.centroid();
            let dist = |p: ndarray::ArrayView1<f64>, q: &[f64]| {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            };
            let max_r = rec.outer_iter().map(|p| dist(p, &c)).fold(0.0, f64::max);
            let l = r.ligand_centroid();
            let d = dist(ndarray::aview1(&l), &c);
            assert!(d < max_r, "{}: centroid distance {d} vs radius {max_r}", r.id);
            for lig in r.ligand_positions.outer_iter() {
                let q = [lig[0], lig[1], lig[2]];
                let nearest = rec.outer_iter().map(|p| dist(p, &q)).fold(f64::INFINITY, f64::min);
                assert!(nearest > cfg.cavity_radius - 3.0 - 2.0 * cfg.jitter - 2.0, "{}: clash at {nearest}", r.id);
            }
        }
    }

    #[test]
    fn complexes_in_a_family_share_their_receptor_template() {
        let cfg = SynthConfig { count: 6, families: 3, ..SynthConfig::default() };
        let recs = synth_generate(&cfg, 5).unwrap();
        assert_eq!(recs[0].residue_types, recs[3].residue_types);
        assert_eq!(recs[0].receptor.residue_index(), recs[3].receptor.residue_index());
        assert_ne!(recs[0].residue_types, recs[1].residue_types);
        // same template up to a rigid motion and jitter: pairwise distances agree
        let d = |r: &ComplexRecord, i: usize, j: usize| {
            let p = r.receptor.positions();
            (0..3).map(|k| (p[[i, k]] - p[[j, k]]).powi(2)).sum::<f64>().sqrt()
        };
        for (i, j) in [(0, 1), (5, 90), (17, 150)] {
            assert!((d(&recs[0], i, j) - d(&recs[3], i, j)).abs() < 12.0 * cfg.jitter);
        }
    }

    #[test]
    fn impossible_packing_is_a_config_error() {
        let cfg = SynthConfig { count: 1, receptor_atoms: 200, receptor_radius: 9.0, ..SynthConfig::default() };
        assert!(matches!(synth_generate(&cfg, 0), Err(Error::Config(_))));
    }

    /// Mass of N(mean, sd) on [a, b] by composite Simpson integration.
    fn normal_mass(mean: f64, sd: f64, a: f64, b: f64) -> f64 {
        let pdf = |x: f64| (-(x - mean).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let n = 2000;
        let h = (b - a) / n as f64;
        let mut acc = pdf(a) + pdf(b);
        for k in 1..n {
            acc += pdf(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn ligand_size_mean_matches_clipped_normal() {
        let cfg = SynthConfig::default();
        let (lo, hi) = (cfg.ligand_min as f64, cfg.ligand_max as f64);
        let (m, sd) = (cfg.ligand_mean, cfg.ligand_std);
        let far = 12.0 * sd;
        let mut expected = lo * normal_mass(m, sd, m - far, lo + 0.5) + hi * normal_mass(m, sd, hi - 0.5, m + far);
        for k in cfg.ligand_min + 1..cfg.ligand_max {
            expected += k as f64 * normal_mass(m, sd, k as f64 - 0.5, k as f64 + 0.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_ligand_size(&cfg, &mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 19.0).abs() < 0.3, "sample mean {mean}");
        assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt(), "sample mean {mean}, expected {expected}");
        assert!(draws.iter().all(|&k| (lo..=hi).contains(&k)));
    }

    #[test]
    fn amino_acid_codes() {
        assert_eq!("ALA".parse::<AminoAcid>().unwrap(), AminoAcid::Ala);
        assert_eq!("w".parse::<AminoAcid>().unwrap(), AminoAcid::Trp);
        assert!("XAA".parse::<AminoAcid>().is_err());
        assert!("X".parse::<AminoAcid>().is_err());
        for aa in AminoAcid::ALL {
            assert_eq!(aa.code().parse::<AminoAcid>().unwrap(), aa);
            assert_eq!(AminoAcid::from_letter(aa.letter()).unwrap(), aa);
        }
    }
}
