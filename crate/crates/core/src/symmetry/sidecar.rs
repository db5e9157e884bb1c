//! Precomputed per-tuple generators (`KFS1` files).
//!
//! Records follow dataset order. A `kfc` record is the `N²` entries of
//! `σ_a` row-major; a `kfcpp` record is `U` then `U⁻¹`, each `N²` complex
//! values stored as interleaved `(re, im)` pairs, row-major. An all-zero
//! record marks a tuple whose generator was unavailable.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{AugmentConfig, AugmentMode};
use super::generator::{GeneratorCache, SymmetryGenerator};
use crate::container::{self, SIDECAR_MAGIC};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;
use crate::linalg::{fro_norm_c, EigOptions};

/// Tuples per resumable chunk.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarHeader {
    pub mode: AugmentMode,
    pub latent_dim: usize,
    pub count: usize,
    pub seed: u64,
    pub config: AugmentConfig,
}

impl SidecarHeader {
    pub fn record_len(&self) -> usize {
        let nn = self.latent_dim * self.latent_dim;
        match self.mode {
            AugmentMode::Kfc => nn,
            _ => 4 * nn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SidecarRecord {
    Generator(Arc<SymmetryGenerator>),
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub header: SidecarHeader,
    pub records: Vec<SidecarRecord>,
}

/// Outcome of a precompute pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarSummary {
    pub count: usize,
    pub fallbacks: usize,
    pub resumed_from: usize,
    /// 50th, 90th and 99th percentile of the per-record residual
    /// (commutator for `kfc`, `‖UU⁻¹ − I‖` for `kfcpp`).
    pub residual_percentiles: [f64; 3],
}

fn encode_record(mode: AugmentMode, n: usize, g: Option<&SymmetryGenerator>) -> Vec<f64> {
    let nn = n * n;
    match (mode, g) {
        (AugmentMode::Kfc, Some(SymmetryGenerator::Commutant { sigma, .. })) => {
            crate::linalg::to_row_major(sigma)
        }
        (AugmentMode::Kfc, _) => vec![0.0; nn],
        (_, Some(SymmetryGenerator::Eigenspace { u, u_inv, .. })) => {
            let mut out = Vec::with_capacity(4 * nn);
            for m in [u, u_inv] {
                for r in 0..n {
                    for c in 0..n {
                        out.push(m[(r, c)].re);
                        out.push(m[(r, c)].im);
                    }
                }
            }
            out
        }
        _ => vec![0.0; 4 * nn],
    }
}

fn decode_record(mode: AugmentMode, n: usize, vals: &[f64]) -> Result<SidecarRecord> {
    if vals.iter().all(|x| *x == 0.0) {
        return Ok(SidecarRecord::Fallback);
    }
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sidecar record".into()));
    }
    let nn = n * n;
    match mode {
        AugmentMode::Kfc => {
            let sigma = DMatrix::from_row_slice(n, n, vals);
            Ok(SidecarRecord::Generator(Arc::new(SymmetryGenerator::Commutant {
                sigma,
                residual: f64::NAN,
                degraded: false,
            })))
        }
        _ => {
            let cm = |off: usize| {
                DMatrix::from_fn(n, n, |r, c| {
                    let k = off + 2 * (r * n + c);
                    Complex64::new(vals[k], vals[k + 1])
                })
            };
            let u = cm(0);
            let u_inv = cm(2 * nn);
            let inverse_residual =
                fro_norm_c(&(&u * &u_inv - DMatrix::<Complex64>::identity(n, n)));
            let sv = nalgebra::SVD::new(u.clone(), false, false).singular_values;
            let condition = sv.max() / sv.min();
            // Eigenvalues are not stored. Only their conjugate pairing is
            // read downstream, and paired columns of U are exact conjugates.
            let mut ev: Vec<Complex64> =
                (0..n).map(|j| Complex64::new(j as f64, 0.0)).collect();
            for j in 1..n {
                let paired = ev[j - 1].im == 0.0
                    && (0..n).any(|r| u[(r, j)].im != 0.0)
                    && (0..n).all(|r| u[(r, j)] == u[(r, j - 1)].conj());
                if paired {
                    ev[j - 1] = Complex64::new(j as f64, 1.0);
                    ev[j] = ev[j - 1].conj();
                }
            }
            Ok(SidecarRecord::Generator(Arc::new(SymmetryGenerator::Eigenspace {
                u,
                u_inv,
                eigenvalues: ev,
                inverse_residual,
                condition,
            })))
        }
    }
}

fn sidecar_mode(cfg: &AugmentConfig) -> Result<AugmentMode> {
    match cfg.mode {
        AugmentMode::Kfc => Ok(AugmentMode::Kfc),
        AugmentMode::Kfcpp | AugmentMode::KfcppPrediction => Ok(AugmentMode::Kfcpp),
        m => Err(Error::Config(format!("no sidecar for mode {m}"))),
    }
}

fn record_residual(g: &SymmetryGenerator) -> f64 {
    match g {
        SymmetryGenerator::Commutant { residual, .. } => *residual,
        SymmetryGenerator::Eigenspace {
            inverse_residual, ..
        } => *inverse_residual,
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Generator (or fallback) for every tuple in `range`, computed in parallel
/// and returned in index order.
fn compute_chunk(
    model: &KoopmanForwardModel,
    dataset: &Dataset,
    mode: AugmentMode,
    opts: EigOptions,
    range: std::ops::Range<usize>,
) -> Result<Vec<Option<SymmetryGenerator>>> {
    let idx: Vec<usize> = range.collect();
    idx.par_chunks(128)
        .map(|sub| {
            let mut cache = GeneratorCache::new(opts);
            sub.iter()
                .map(|&i| {
                    let a = dataset.action(i);
                    let g = match mode {
                        AugmentMode::Kfc => cache.commutant(model, a)?,
                        _ => cache.eigen(model, a)?,
                    };
                    Ok(g.map(|g| (*g).clone()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Streams generators for every tuple of `dataset` into `path`.
///
/// With `resume`, an existing file with an identical header keeps its
/// complete records and only the remainder is computed.
pub fn precompute_sidecar(
    model: &KoopmanForwardModel,
    dataset: &Dataset,
    cfg: &AugmentConfig,
    path: impl AsRef<Path>,
    resume: bool,
) -> Result<SidecarSummary> {
    cfg.validate()?;
    let path = path.as_ref();
    if dataset.state_dim != model.state_dim || dataset.action_dim != model.action_dim {
        return Err(Error::DimensionMismatch("dataset and model dimensions differ".into()));
    }
    let mode = sidecar_mode(cfg)?;
    let header = SidecarHeader {
        mode,
        latent_dim: model.latent_dim,
        count: dataset.len(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let rec_len = header.record_len();
    let rec_bytes = (rec_len * 8) as u64;

    let mut start = 0usize;
    let mut file = None;
    if resume && path.exists() {
        let mut f = OpenOptions::new().read(true).write(true).open(path)?;
        let parsed: Result<(SidecarHeader, u64)> =
            container::read_preamble(&mut BufReader::new(&mut f), SIDECAR_MAGIC);
        if let Ok((existing, preamble)) = parsed {
            if existing == header {
                let len = f.metadata()?.len();
                let done = ((len.saturating_sub(preamble)) / rec_bytes) as usize;
                start = done.min(header.count);
                f.set_len(preamble + start as u64 * rec_bytes)?;
                f.seek(SeekFrom::End(0))?;
                file = Some(f);
            }
        }
    }
    let mut w = match file {
        Some(f) => BufWriter::new(f),
        None => {
            let mut w = BufWriter::new(File::create(path)?);
            container::write_preamble(&mut w, SIDECAR_MAGIC, &header)?;
            w
        }
    };

    let opts = EigOptions {
        condition_threshold: cfg.condition_threshold,
    };
    let mut fallbacks = 0;
    let mut residuals = Vec::with_capacity(dataset.len() - start);
    let mut chunk_start = start;
    while chunk_start < dataset.len() {
        let end = (chunk_start + CHUNK).min(dataset.len());
        let gens = compute_chunk(model, dataset, mode, opts, chunk_start..end)?;
        for (offset, g) in gens.iter().enumerate() {
            match g {
                Some(g) => residuals.push(record_residual(g)),
                None => fallbacks += 1,
            }
            let vals = encode_record(mode, model.latent_dim, g.as_ref());
            container::write_f64s(&mut w, &vals).map_err(|e| match e {
                Error::Io(source) => Error::TupleIo {
                    index: chunk_start + offset,
                    source,
                },
                other => other,
            })?;
        }
        w.flush().map_err(|source| Error::TupleIo {
            index: end - 1,
            source,
        })?;
        chunk_start = end;
    }
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(SidecarSummary {
        count: dataset.len(),
        fallbacks,
        resumed_from: start,
        residual_percentiles: [
            percentile(&residuals, 0.5),
            percentile(&residuals, 0.9),
            percentile(&residuals, 0.99),
        ],
    })
}

impl Sidecar {
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (header, _): (SidecarHeader, u64) = container::read_preamble(r, SIDECAR_MAGIC)?;
        if !matches!(header.mode, AugmentMode::Kfc | AugmentMode::Kfcpp) {
            return Err(Error::Header(format!("sidecar mode {}", header.mode)));
        }
        let len = header.record_len();
        let mut records = Vec::with_capacity(header.count);
        for i in 0..header.count {
            let vals = container::read_f64s(r, len, &format!("record {i}"))?;
            records.push(decode_record(header.mode, header.latent_dim, &vals)?);
        }
        container::expect_eof(r)?;
        Ok(Self { header, records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Largest `‖UU⁻¹ − I‖_F / condition` over eigenspace records.
    pub fn max_relative_inverse_residual(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| match r {
                SidecarRecord::Generator(g) => match g.as_ref() {
                    SymmetryGenerator::Eigenspace {
                        inverse_residual,
                        condition,
                        ..
                    } => Some(inverse_residual / condition.max(1.0)),
                    _ => None,
                },
                SidecarRecord::Fallback => None,
            })
            .fold(0.0, f64::max)
    }
}
