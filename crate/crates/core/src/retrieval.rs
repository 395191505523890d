//! Proponent and opponent lookup over precomputed sketched gradients.
//!
//! Each training example is stored as the concatenation over selected
//! checkpoints of `sqrt(weight_i) * sketch_i`, so one inner product with a test
//! vector built the same way equals the weighted TracInCP sum.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::influence::{rank_examples, CheckpointSelection, GradientView, TracInCp};
use crate::model::{dot, Example, ExampleId, LayerId};
use crate::sketch::{SketchMode, SketchSpec};
use crate::training::Checkpoint;

pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Proponents,
    Opponents,
}

/// Everything a query vector must agree with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexProvenance {
    pub spec: SketchSpec,
    pub steps: Vec<u64>,
    pub weights: Vec<f64>,
    pub layer: Option<LayerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceIndex {
    pub provenance: IndexProvenance,
    pub ids: Vec<ExampleId>,
    /// Row-major, `ids.len()` rows of `k * d`.
    vectors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub provenance: IndexProvenance,
    pub values: Vec<f64>,
}

fn concatenated(features: Vec<Vec<f64>>, weights: &[f64]) -> Vec<f64> {
    features
        .into_iter()
        .zip(weights)
        .flat_map(|(f, w)| {
            let s = w.sqrt();
            f.into_iter().map(move |x| s * x)
        })
        .collect()
}

fn scorer<'a>(
    checkpoints: &'a [Checkpoint],
    selection: &CheckpointSelection,
    spec: SketchSpec,
    layer: Option<LayerId>,
) -> Result<TracInCp<'a>> {
    let view = GradientView {
        layer,
        sketch: Some(spec),
        train_loss_scale: 1.0,
    };
    TracInCp::new(selection, checkpoints, view)
}

/// One `k * d` vector per training example.
pub fn build_index(
    dataset: &[Example],
    checkpoints: &[Checkpoint],
    selection: &CheckpointSelection,
    spec: SketchSpec,
    layer: Option<LayerId>,
) -> Result<InfluenceIndex> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot index an empty dataset"));
    }
    let tracin = scorer(checkpoints, selection, spec, layer)?;
    let rows = dataset
        .par_iter()
        .map(|z| Ok(concatenated(tracin.features(z)?, selection.weights())))
        .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceIndex {
        provenance: IndexProvenance {
            spec,
            steps: selection.steps().to_vec(),
            weights: selection.weights().to_vec(),
            layer,
        },
        ids: dataset.iter().map(|z| z.id).collect(),
        vectors: rows.concat(),
    })
}

impl InfluenceIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.provenance.steps.len() * self.provenance.spec.d
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.vectors[i * w..(i + 1) * w]
    }

    pub fn selection(&self) -> Result<CheckpointSelection> {
        CheckpointSelection::new(
            self.provenance.steps.clone(),
            self.provenance.weights.clone(),
        )
    }

    /// Builds the query vector for `z_test` from the same checkpoints.
    pub fn query_vector(
        &self,
        checkpoints: &[Checkpoint],
        z_test: &Example,
    ) -> Result<QueryVector> {
        let selection = self.selection()?;
        let tracin = scorer(
            checkpoints,
            &selection,
            self.provenance.spec,
            self.provenance.layer,
        )?;
        Ok(QueryVector {
            provenance: self.provenance.clone(),
            values: concatenated(tracin.features(z_test)?, &self.provenance.weights),
        })
    }

    /// Inner products with every indexed example, in index order.
    pub fn scores(&self, query: &QueryVector) -> Result<Vec<(ExampleId, f64)>> {
        if query.provenance != self.provenance {
            return Err(Error::SketchMismatch(format!(
                "query built with {:?} but index uses {:?}",
                query.provenance, self.provenance
            )));
        }
        if query.values.len() != self.width() {
            return Err(Error::shape("query vector length does not match the index"));
        }
        Ok(self
            .ids
            .par_iter()
            .enumerate()
            .map(|(i, &id)| (id, dot(self.vector(i), &query.values)))
            .collect())
    }

    /// Top `k` by inner product (or bottom `k` for opponents) by exact scan.
    pub fn search(
        &self,
        query: &QueryVector,
        k: usize,
        direction: Direction,
    ) -> Result<Vec<(ExampleId, f64)>> {
        let scores = self.scores(query)?;
        let lookup: std::collections::HashMap<ExampleId, f64> = scores.iter().copied().collect();
        let order = rank_examples(&scores, direction == Direction::Proponents, None)?;
        Ok(order
            .into_iter()
            .take(k)
            .map(|id| (id, lookup[&id]))
            .collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let p = &self.provenance;
        w.write_all(b"TIDX")?;
        binio::put_u32(w, INDEX_VERSION)?;
        binio::put_u32(w, p.steps.len() as u32)?;
        binio::put_u32(w, p.spec.d as u32)?;
        binio::put_u64(w, p.spec.seed)?;
        binio::put_u32(w, p.spec.mode.code())?;
        binio::put_u32(w, layer_code(p.layer))?;
        for (&s, &wt) in p.steps.iter().zip(&p.weights) {
            binio::put_u64(w, s)?;
            binio::put_f64(w, wt)?;
        }
        binio::put_u64(w, self.ids.len() as u64)?;
        for (i, &id) in self.ids.iter().enumerate() {
            binio::put_u32(w, id)?;
            for &x in self.vector(i) {
                binio::put_f32(w, x as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let provenance = read_header(&mut r)?;
        let n = r.u64()? as usize;
        let width = provenance.steps.len() * provenance.spec.d;
        let mut ids = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * width);
        for _ in 0..n {
            ids.push(r.u32()?);
            for _ in 0..width {
                vectors.push(r.f32()? as f64);
            }
        }
        r.expect_eof()?;
        Ok(Self {
            provenance,
            ids,
            vectors,
        })
    }

    /// Writes the index, refusing to replace a file built with other settings.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.exists() {
            let mut r = ByteReader::new(BufReader::new(File::open(path)?));
            let existing = read_header(&mut r)?;
            if existing != self.provenance {
                return Err(Error::Provenance(format!(
                    "{} holds an index built with {:?}; remove it to rebuild with {:?}",
                    path.display(),
                    existing,
                    self.provenance
                )));
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Convenience wrapper: query vector plus search.
pub fn query(
    index: &InfluenceIndex,
    checkpoints: &[Checkpoint],
    z_test: &Example,
    k: usize,
    direction: Direction,
) -> Result<Vec<(ExampleId, f64)>> {
    let q = index.query_vector(checkpoints, z_test)?;
    index.search(&q, k, direction)
}

const LAYER_ALL: u32 = u32::MAX;
const LAYER_LAST: u32 = u32::MAX - 1;

fn layer_code(layer: Option<LayerId>) -> u32 {
    match layer {
        None => LAYER_ALL,
        Some(LayerId::Last) => LAYER_LAST,
        Some(LayerId::Index(i)) => i as u32,
    }
}

fn read_header<R: Read>(r: &mut ByteReader<R>) -> Result<IndexProvenance> {
    r.magic(b"TIDX")?;
    let at = r.offset();
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported index version {version}"),
        });
    }
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let seed = r.u64()?;
    let at = r.offset();
    let mode = SketchMode::from_code(r.u32()?).ok_or_else(|| Error::Parse {
        offset: at,
        msg: "unknown sketch mode".into(),
    })?;
    let layer = match r.u32()? {
        LAYER_ALL => None,
        LAYER_LAST => Some(LayerId::Last),
        i => Some(LayerId::Index(i as usize)),
    };
    let mut steps = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        steps.push(r.u64()?);
        weights.push(r.f64()?);
    }
    Ok(IndexProvenance {
        spec: SketchSpec { d, seed, mode },
        steps,
        weights,
        layer,
    })
}
