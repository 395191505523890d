//! Random-projection sketches of gradients.
//!
//! A dense sketch multiplies a gradient by `G` with i.i.d. `N(0, 1/d)` entries
//! so that `E[G^T G] = I` and the inner product of two sketches is an unbiased
//! estimate of the inner product of the gradients. `G` is never stored: row `r`
//! is regenerated from a ChaCha stream keyed by `(seed, r)`, with Box-Muller
//! turning its uniforms into normals.
//!
//! For a fully connected layer the weight gradient is the outer product
//! `out_grad * in_act^T`; [`rank1_dot`] uses that to take exact dot products in
//! `O(m + n)` and [`rank1_project`] sketches it with two small matrices.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::model::{self, dot, Example, ExampleId, GradientVector, LayerId, ModelState};

/// Upper bound on `d * p` for a materialized projection.
const MAX_PROJECTION_ENTRIES: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchMode {
    DenseGaussian,
    Rank1Pair,
    /// `G = I` (requires `d == p`); exact dot products, used to isolate sketch noise.
    Identity,
}

impl SketchMode {
    pub(crate) fn code(self) -> u32 {
        match self {
            SketchMode::DenseGaussian => 0,
            SketchMode::Rank1Pair => 1,
            SketchMode::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(SketchMode::DenseGaussian),
            1 => Some(SketchMode::Rank1Pair),
            2 => Some(SketchMode::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchSpec {
    pub d: usize,
    pub seed: u64,
    pub mode: SketchMode,
}

impl SketchSpec {
    pub fn dense(d: usize, seed: u64) -> Self {
        Self {
            d,
            seed,
            mode: SketchMode::DenseGaussian,
        }
    }

    pub fn rank1(d: usize, seed: u64) -> Self {
        Self {
            d,
            seed,
            mode: SketchMode::Rank1Pair,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            d,
            seed: 0,
            mode: SketchMode::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("sketch dimension must be at least 1"));
        }
        if self.mode == SketchMode::Rank1Pair && self.side() * self.side() != self.d {
            return Err(Error::invalid(format!(
                "rank-1 sketches need a perfect-square dimension, got {}",
                self.d
            )));
        }
        Ok(())
    }

    /// `sqrt(d)` rounded down.
    pub fn side(&self) -> usize {
        let mut s = (self.d as f64).sqrt() as usize;
        while s * s > self.d {
            s -= 1;
        }
        while (s + 1) * (s + 1) <= self.d {
            s += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchedGradient {
    values: Vec<f64>,
    spec: SketchSpec,
    /// Factor already folded into `values` (e.g. a step size).
    scale: f64,
}

impl SketchedGradient {
    pub fn from_values(values: Vec<f64>, spec: SketchSpec) -> Result<Self> {
        if values.len() != spec.d {
            return Err(Error::shape(format!(
                "{} sketch values for d = {}",
                values.len(),
                spec.d
            )));
        }
        Ok(Self {
            values,
            spec,
            scale: 1.0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= c);
        self.scale *= c;
        self
    }
}

/// `len` i.i.d. normals with standard deviation `std` for row `row` of the
/// matrix keyed by `seed`.
pub(crate) fn gaussian_row(seed: u64, row: u64, len: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row);
    let mut out = Vec::with_capacity(len + 1);
    while out.len() < len {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        out.push(std * r * theta.cos());
        out.push(std * r * theta.sin());
    }
    out.truncate(len);
    out
}

/// Materialized dense projection for gradients of one length.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: SketchSpec,
    input_len: usize,
    rows: Vec<Vec<f64>>,
}

impl Projector {
    pub fn new(spec: SketchSpec, input_len: usize) -> Result<Self> {
        spec.validate()?;
        match spec.mode {
            SketchMode::DenseGaussian => {
                if spec
                    .d
                    .checked_mul(input_len)
                    .is_none_or(|n| n > MAX_PROJECTION_ENTRIES)
                {
                    return Err(Error::invalid(format!(
                        "projection of {input_len} coordinates into {} dimensions is too large",
                        spec.d
                    )));
                }
                let std = 1.0 / (spec.d as f64).sqrt();
                let rows = (0..spec.d)
                    .map(|r| gaussian_row(spec.seed, r as u64, input_len, std))
                    .collect();
                Ok(Self {
                    spec,
                    input_len,
                    rows,
                })
            }
            SketchMode::Identity => {
                if spec.d != input_len {
                    return Err(Error::shape(format!(
                        "identity sketch needs d = p, got d = {} and p = {input_len}",
                        spec.d
                    )));
                }
                Ok(Self {
                    spec,
                    input_len,
                    rows: Vec::new(),
                })
            }
            SketchMode::Rank1Pair => Err(Error::Unsupported(
                "rank-1 sketches project layer factors, use rank1_project".into(),
            )),
        }
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Row `r` of `G`; empty in identity mode.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r]
    }

    pub fn project_slice(&self, g: &[f64]) -> Result<SketchedGradient> {
        if g.len() != self.input_len {
            return Err(Error::shape(format!(
                "projector built for length {}, got {}",
                self.input_len,
                g.len()
            )));
        }
        let values = match self.spec.mode {
            SketchMode::Identity => g.to_vec(),
            _ => self.rows.iter().map(|row| dot(row, g)).collect(),
        };
        SketchedGradient::from_values(values, self.spec)
    }

    pub fn project(&self, g: &GradientVector) -> Result<SketchedGradient> {
        self.project_slice(g.values())
    }
}

/// `G g` for a dense Gaussian (or identity) sketch.
pub fn project(g: &GradientVector, spec: &SketchSpec) -> Result<SketchedGradient> {
    Projector::new(*spec, g.len())?.project(g)
}

pub fn sketched_dot(a: &SketchedGradient, b: &SketchedGradient) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::SketchMismatch(format!(
            "{:?} vs {:?}",
            a.spec, b.spec
        )));
    }
    Ok(dot(&a.values, &b.values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Gradient {
    pub layer: usize,
    /// Loss gradient w.r.t. the layer's pre-activations.
    pub out_grad: Vec<f64>,
    /// Input activations feeding the layer.
    pub in_act: Vec<f64>,
}

impl Rank1Gradient {
    /// Materialized weight gradient, row-major `(out, in)`.
    pub fn outer(&self) -> Vec<f64> {
        self.out_grad
            .iter()
            .flat_map(|o| self.in_act.iter().map(move |x| o * x))
            .collect()
    }
}

pub fn rank1_components(
    state: &ModelState,
    example: &Example,
    layer: LayerId,
) -> Result<Rank1Gradient> {
    let index = state.layout().layer(layer)?.index;
    // Validates shapes and surfaces overflow the same way the loss does.
    model::loss(state, example)?;
    let fwd = model::forward(state, &example.features)?;
    let mut deltas = model::backward_deltas(state, &fwd, example.label);
    Ok(Rank1Gradient {
        layer: index,
        out_grad: std::mem::take(&mut deltas[index]),
        in_act: fwd.acts[index].clone(),
    })
}

pub fn rank1_dot(a: &Rank1Gradient, b: &Rank1Gradient) -> Result<f64> {
    if a.layer != b.layer
        || a.out_grad.len() != b.out_grad.len()
        || a.in_act.len() != b.in_act.len()
    {
        return Err(Error::shape(format!(
            "rank-1 factors of layers {} and {} do not match",
            a.layer, b.layer
        )));
    }
    Ok(dot(&a.out_grad, &b.out_grad) * dot(&a.in_act, &b.in_act))
}

/// Flattened `G1 out_grad (G2 in_act)^T`, with `G1` keyed by `seed` and `G2`
/// by `seed + 1`, entries `N(0, 1/sqrt(d))`.
pub fn rank1_project(a: &Rank1Gradient, spec: &SketchSpec) -> Result<SketchedGradient> {
    spec.validate()?;
    if spec.mode != SketchMode::Rank1Pair {
        return Err(Error::SketchMismatch(format!(
            "rank1_project needs a rank1_pair spec, got {:?}",
            spec.mode
        )));
    }
    let side = spec.side();
    let std = 1.0 / (side as f64).sqrt();
    let left: Vec<f64> = (0..side)
        .map(|r| {
            dot(
                &gaussian_row(spec.seed, r as u64, a.out_grad.len(), std),
                &a.out_grad,
            )
        })
        .collect();
    let right: Vec<f64> = (0..side)
        .map(|r| {
            dot(
                &gaussian_row(spec.seed.wrapping_add(1), r as u64, a.in_act.len(), std),
                &a.in_act,
            )
        })
        .collect();
    let values = left
        .iter()
        .flat_map(|l| right.iter().map(move |r| l * r))
        .collect();
    SketchedGradient::from_values(values, *spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchRecord {
    pub id: ExampleId,
    pub step: u64,
    pub values: Vec<f32>,
}

/// Persisted sketches: header (magic `SKCH`, d u32, seed u64, mode u32,
/// count u64) followed by `(id u32, step u64, d x f32)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchStore {
    pub spec: SketchSpec,
    pub records: Vec<SketchRecord>,
}

impl SketchStore {
    pub fn new(spec: SketchSpec) -> Self {
        Self {
            spec,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: ExampleId, step: u64, sketch: &SketchedGradient) -> Result<()> {
        if sketch.spec != self.spec {
            return Err(Error::SketchMismatch(
                "sketch does not match the store".into(),
            ));
        }
        self.records.push(SketchRecord {
            id,
            step,
            values: sketch.values.iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SKCH")?;
        binio::put_u32(w, self.spec.d as u32)?;
        binio::put_u64(w, self.spec.seed)?;
        binio::put_u32(w, self.spec.mode.code())?;
        binio::put_u64(w, self.records.len() as u64)?;
        for rec in &self.records {
            binio::put_u32(w, rec.id)?;
            binio::put_u64(w, rec.step)?;
            for &v in &rec.values {
                binio::put_f32(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(b"SKCH")?;
        let d = r.u32()? as usize;
        let seed = r.u64()?;
        let code = r.u32()?;
        let mode = SketchMode::from_code(code)
            .ok_or_else(|| r.parse_error(format!("unknown sketch mode {code}")))?;
        let count = r.u64()?;
        let spec = SketchSpec { d, seed, mode };
        let mut records = Vec::new();
        for _ in 0..count {
            let id = r.u32()?;
            let step = r.u64()?;
            let values = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.push(SketchRecord { id, step, values });
        }
        r.expect_eof()?;
        Ok(Self { spec, records })
    }
}
