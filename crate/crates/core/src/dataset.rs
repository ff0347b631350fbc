//! Multi-fidelity datasets: construction from the PDE solvers, alignment to
//! the finest grid, joint standardization, slice extraction and the
//! `manifest.json` + `ex_<idx>.f32` on-disk format.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SolutionField;
use crate::pde::{sample_params, PdeSpec};
use crate::score_net::{ConditionInfo, Fidelity, FidelityMode};
use crate::seed;
use crate::trainer::TrainingExample;

pub const SCHEMA_VERSION: u32 = 1;

/// `m(s) = (s − s0)/(s1 − s0)`.
pub fn normalize_fidelity(s: usize, s0: usize, s1: usize) -> Result<f64> {
    if s0 >= s1 {
        return Err(Error::Domain(format!("fidelity range needs s0 < s1, got ({s0}, {s1})")));
    }
    if s < s0 || s > s1 {
        return Err(Error::Domain(format!("mesh size {s} outside [{s0}, {s1}]")));
    }
    Ok((s - s0) as f64 / (s1 - s0) as f64)
}

/// Bilinear resampling of every slice onto an `n × n` node grid, treating
/// node `i` of an `s`-node axis as position `i/(s−1)`.
pub fn resample(field: &SolutionField, n: usize) -> SolutionField {
    let (rows, cols, depth) = field.shape();
    if rows == n && cols == n {
        return field.clone();
    }
    // source coordinate of target node k on an axis with `src` nodes, split
    // exactly into cell index and fraction
    let axis = |src: usize| -> Vec<(usize, f64)> {
        (0..n)
            .map(|k| {
                if n == 1 || src == 1 {
                    return (0, 0.0);
                }
                let num = k * (src - 1);
                let (mut i, mut rem) = (num / (n - 1), num % (n - 1));
                if i == src - 1 {
                    i -= 1;
                    rem = n - 1;
                }
                (i, rem as f64 / (n - 1) as f64)
            })
            .collect()
    };
    let (ax_r, ax_c) = (axis(rows), axis(cols));
    let mut out = SolutionField::zeros_3d(n, n, depth);
    for (r, &(i, fr)) in ax_r.iter().enumerate() {
        for (c, &(j, fc)) in ax_c.iter().enumerate() {
            for k in 0..depth {
                let at = |a: usize, b: usize| {
                    let a = a.min(rows - 1);
                    let b = b.min(cols - 1);
                    field.data()[(a * cols + b) * depth + k]
                };
                let v = (1.0 - fr) * ((1.0 - fc) * at(i, j) + fc * at(i, j + 1))
                    + fr * ((1.0 - fc) * at(i + 1, j) + fc * at(i + 1, j + 1));
                out.data_mut()[(r * n + c) * depth + k] = v;
            }
        }
    }
    out
}

/// Interpolates a coarse field up to the `big_s × big_s` grid.
pub fn align(field: &SolutionField, big_s: usize) -> Result<SolutionField> {
    let (rows, cols, _) = field.shape();
    if rows != cols {
        return Err(Error::Contract(format!("non-square field {rows}x{cols}")));
    }
    if rows > big_s {
        return Err(Error::Contract(format!("cannot align a {rows}-node field down to {big_s}")));
    }
    Ok(resample(field, big_s))
}

/// Scalar standardization statistics plus the encodings the model needs to
/// turn user-facing inputs into conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// Parameter box; when present, `x` is mapped affinely to `[0, 1]`.
    #[serde(default)]
    pub param_domain: Option<Vec<(f64, f64)>>,
    /// Mesh sizes of the fidelity levels, lowest first.
    #[serde(default)]
    pub fidelities: Vec<usize>,
    /// Raw slice-coordinate range mapped to `[0, 1]`.
    #[serde(default)]
    pub tau_range: Option<(f64, f64)>,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            param_domain: None,
            fidelities: Vec::new(),
            tau_range: None,
        }
    }

    pub fn standardize_value(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize_value(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn destandardize(&self, field: &SolutionField) -> SolutionField {
        field.map(|z| self.destandardize_value(z))
    }

    pub fn encode_params(&self, x: &[f64]) -> Vec<f64> {
        match &self.param_domain {
            Some(dom) if dom.len() == x.len() => x
                .iter()
                .zip(dom)
                .map(|(&v, &(lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect(),
            _ => x.to_vec(),
        }
    }

    pub fn encode_tau(&self, tau: f64) -> f64 {
        match self.tau_range {
            Some((lo, hi)) if hi > lo => (tau - lo) / (hi - lo),
            _ => 0.0,
        }
    }

    /// Fidelity conditioning for a mesh size in the given mode.
    pub fn encode_fidelity(&self, mesh_size: usize, mode: FidelityMode) -> Result<Fidelity> {
        let index = self.fidelities.iter().position(|&s| s == mesh_size);
        match mode {
            FidelityMode::Discrete { .. } => index.map(Fidelity::Discrete).ok_or_else(|| {
                Error::Contract(format!(
                    "mesh size {mesh_size} is not one of the trained fidelities {:?}",
                    self.fidelities
                ))
            }),
            FidelityMode::Continuous => {
                let (s0, s1) = match (self.fidelities.first(), self.fidelities.last()) {
                    (Some(&a), Some(&b)) => (a, b),
                    _ => return Err(Error::Contract("no fidelity levels recorded".into())),
                };
                if s0 == s1 {
                    return if mesh_size == s1 {
                        Ok(Fidelity::Continuous(1.0))
                    } else {
                        Err(Error::Domain(format!("mesh size {mesh_size} differs from the only fidelity {s1}")))
                    };
                }
                Ok(Fidelity::Continuous(normalize_fidelity(mesh_size, s0, s1)?))
            }
        }
    }

    pub fn condition(&self, x: &[f64], mesh_size: usize, mode: FidelityMode, tau: Option<f64>) -> Result<ConditionInfo> {
        Ok(ConditionInfo {
            x: self.encode_params(x),
            fidelity: self.encode_fidelity(mesh_size, mode)?,
            tau: tau.map(|t| self.encode_tau(t)),
        })
    }
}

/// Mean and (population) std over all entries of all fields, and the
/// standardized fields.
pub fn standardize(fields: &[SolutionField]) -> Result<(f64, f64, Vec<SolutionField>)> {
    let n: usize = fields.iter().map(|f| f.len()).sum();
    if n == 0 {
        return Err(Error::Degenerate("no values to standardize".into()));
    }
    let mean = fields.iter().flat_map(|f| f.data()).sum::<f64>() / n as f64;
    let var = fields
        .iter()
        .flat_map(|f| f.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Degenerate(format!("data has zero or non-finite spread (std = {std})")));
    }
    let out = fields.iter().map(|f| f.map(|v| (v - mean) / std)).collect();
    Ok((mean, std, out))
}

/// Pairs each slice of a `d1 × d2 × d3` tensor with its coordinate mapped to
/// `[0, 1]`.
pub fn extract_slices(tensor: &SolutionField, tau_grid: &[f64]) -> Result<Vec<(f64, SolutionField)>> {
    if tau_grid.len() != tensor.depth() || tau_grid.is_empty() {
        return Err(Error::Contract(format!(
            "tau grid has {} entries for a tensor of depth {}",
            tau_grid.len(),
            tensor.depth()
        )));
    }
    let lo = tau_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tau_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    tau_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let hat = if hi > lo { (t - lo) / (hi - lo) } else { 0.0 };
            Ok((hat, tensor.slice(k)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub x: Vec<f64>,
    /// Index into the manifest's fidelity list.
    pub fidelity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub pde: String,
    /// Mesh sizes, lowest first.
    pub fidelities: Vec<usize>,
    pub counts: Vec<usize>,
    pub seed: u64,
    /// Side length `S` of every stored field.
    pub grid: usize,
    pub mean: f64,
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_domain: Option<Vec<(f64, f64)>>,
    pub examples: Vec<ExampleMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub fidelity: usize,
    /// Aligned field in physical units, `S × S` (× slices).
    pub field: SolutionField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiFidelityDataset {
    pub manifest: Manifest,
    pub examples: Vec<Example>,
}

fn round_to_f32(field: SolutionField) -> SolutionField {
    field.map(|v| v as f32 as f64)
}

/// Solves `counts[i]` random problems at mesh `fidelities[i]`, aligns them to
/// the finest mesh and records joint standardization statistics. Values are
/// rounded to `f32`, the storage precision, so that persistence is exact.
pub fn build_dataset(spec: &PdeSpec, fidelities: &[usize], counts: &[usize], seed: u64) -> Result<MultiFidelityDataset> {
    spec.validate()?;
    if fidelities.is_empty() || fidelities.len() != counts.len() {
        return Err(Error::Config(format!(
            "{} fidelities but {} counts",
            fidelities.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Config(format!("every count must be >= 1, got {counts:?}")));
    }
    if fidelities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("fidelities must be strictly increasing, got {fidelities:?}")));
    }
    let big_s = *fidelities.last().unwrap();
    let mut jobs = Vec::new();
    for (level, (&s, &count)) in fidelities.iter().zip(counts).enumerate() {
        let mut rng = seed::rng(seed::sub_seed(seed, seed::stream::DATA), level as u64);
        for x in sample_params(spec, &mut rng, count) {
            jobs.push((level, s, x));
        }
    }
    let examples: Vec<Example> = jobs
        .into_par_iter()
        .map(|(level, s, x)| {
            let raw = spec.solve(&x, s).map_err(|e| match e {
                Error::Solver(msg) => Error::Solver(format!("{msg} (x = {x:?})")),
                other => Error::Solver(format!("{other} (x = {x:?})")),
            })?;
            let field = round_to_f32(align(&raw, big_s)?);
            Ok(Example {
                x,
                fidelity: level,
                field,
            })
        })
        .collect::<Result<_>>()?;
    let fields: Vec<SolutionField> = examples.iter().map(|e| e.field.clone()).collect();
    let (mean, std, _) = standardize(&fields)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        pde: spec.kind.name().to_string(),
        fidelities: fidelities.to_vec(),
        counts: counts.to_vec(),
        seed,
        grid: big_s,
        mean,
        std,
        tau_grid: None,
        param_domain: Some(spec.param_domain.clone()),
        examples: examples
            .iter()
            .map(|e| ExampleMeta {
                x: e.x.clone(),
                fidelity: e.fidelity,
            })
            .collect(),
    };
    Ok(MultiFidelityDataset { manifest, examples })
}

impl MultiFidelityDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.manifest.grid
    }

    pub fn param_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    pub fn depth(&self) -> usize {
        self.manifest.tau_grid.as_ref().map_or(1, |t| t.len())
    }

    pub fn norm_stats(&self) -> NormStats {
        let tau_range = self.manifest.tau_grid.as_ref().map(|t| {
            let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        });
        NormStats {
            mean: self.manifest.mean,
            std: self.manifest.std,
            param_domain: self.manifest.param_domain.clone(),
            fidelities: self.manifest.fidelities.clone(),
            tau_range,
        }
    }

    /// Discrete mode over this dataset's fidelity levels.
    pub fn discrete_mode(&self) -> FidelityMode {
        FidelityMode::Discrete {
            levels: self.manifest.fidelities.len(),
        }
    }

    /// Keeps only examples of the given fidelity levels (indices), with the
    /// normalization statistics recomputed over what remains.
    pub fn subset(&self, levels: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = levels.to_vec();
        let mut fidelities = Vec::new();
        let mut counts = Vec::new();
        for &l in &keep {
            let s = *self.manifest.fidelities.get(l).ok_or_else(|| {
                Error::Contract(format!("fidelity index {l} out of range"))
            })?;
            fidelities.push(s);
            counts.push(self.manifest.counts[l]);
        }
        let examples: Vec<Example> = self
            .examples
            .iter()
            .filter_map(|e| {
                keep.iter().position(|&l| l == e.fidelity).map(|new| Example {
                    fidelity: new,
                    ..e.clone()
                })
            })
            .collect();
        let fields: Vec<SolutionField> = examples.iter().map(|e| e.field.clone()).collect();
        let (mean, std, _) = standardize(&fields)?;
        let manifest = Manifest {
            fidelities,
            counts,
            mean,
            std,
            examples: examples
                .iter()
                .map(|e| ExampleMeta {
                    x: e.x.clone(),
                    fidelity: e.fidelity,
                })
                .collect(),
            ..self.manifest.clone()
        };
        Ok(Self { manifest, examples })
    }

    /// Standardized training examples; sliced datasets contribute one example
    /// per slice.
    pub fn training_examples(&self, mode: FidelityMode) -> Result<Vec<TrainingExample>> {
        let norm = self.norm_stats();
        let mut out = Vec::new();
        for e in &self.examples {
            let s = self.manifest.fidelities[e.fidelity];
            let fidelity = norm.encode_fidelity(s, mode)?;
            let x = norm.encode_params(&e.x);
            let z = |f: &SolutionField| f.data().iter().map(|&v| norm.standardize_value(v)).collect();
            match &self.manifest.tau_grid {
                Some(taus) => {
                    for (tau, slice) in extract_slices(&e.field, taus)? {
                        out.push(TrainingExample {
                            cond: ConditionInfo {
                                x: x.clone(),
                                fidelity,
                                tau: Some(tau),
                            },
                            z0: z(&slice),
                        });
                    }
                }
                None => out.push(TrainingExample {
                    cond: ConditionInfo::new(x.clone(), fidelity),
                    z0: z(&e.field),
                }),
            }
        }
        Ok(out)
    }

    fn example_path(dir: &Path, idx: usize) -> PathBuf {
        dir.join(format!("ex_{idx}.f32"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
        fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        for (i, e) in self.examples.iter().enumerate() {
            write_f32(&Self::example_path(dir, i), e.field.data())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::integrity(
                &manifest_path,
                format!(
                    "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                    manifest.schema_version
                ),
            ));
        }
        if manifest.fidelities.len() != manifest.counts.len() {
            return Err(Error::integrity(&manifest_path, "fidelities and counts differ in length"));
        }
        let mut seen = vec![0usize; manifest.counts.len()];
        for (i, ex) in manifest.examples.iter().enumerate() {
            match seen.get_mut(ex.fidelity) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::integrity(
                        &manifest_path,
                        format!("example {i} has fidelity index {} out of range", ex.fidelity),
                    ))
                }
            }
        }
        if seen != manifest.counts {
            return Err(Error::integrity(
                &manifest_path,
                format!("per-fidelity example counts {seen:?} do not match manifest counts {:?}", manifest.counts),
            ));
        }
        let depth = manifest.tau_grid.as_ref().map_or(1, |t| t.len());
        let s = manifest.grid;
        let examples = manifest
            .examples
            .iter()
            .enumerate()
            .map(|(i, meta)| {
                let path = Self::example_path(dir, i);
                let data = read_f32(&path, s * s * depth)?;
                Ok(Example {
                    x: meta.x.clone(),
                    fidelity: meta.fidelity,
                    field: SolutionField::from_vec_3d(s, s, depth, data)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, examples })
    }
}

/// Raw little-endian `f32` values.
pub fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` little-endian `f32` values.
pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * expected {
        return Err(Error::integrity(
            path,
            format!("expected {} bytes ({expected} values), found {}", 4 * expected, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}
