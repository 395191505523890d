//! Synthetic datasets, file formats and fingerprints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::model::{Example, Target};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    TwoMoons,
    SyntheticRegression,
    IdxPair,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Gaussian clusters; the closest pair of centers is `separation` standard
    /// deviations apart.
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "one")]
        std: f64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
    },
    /// Clustered inputs with a linear (or smooth nonlinear) noisy target.
    SyntheticRegression {
        n: usize,
        dim: usize,
        clusters: usize,
        noise: f64,
        #[serde(default)]
        nonlinear: bool,
    },
}

fn one() -> f64 {
    1.0
}

impl Generator {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Generator::Blobs { .. } => DatasetKind::Blobs,
            Generator::TwoMoons { .. } => DatasetKind::TwoMoons,
            Generator::SyntheticRegression { .. } => DatasetKind::SyntheticRegression,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            Generator::Blobs { n, .. }
            | Generator::TwoMoons { n, .. }
            | Generator::SyntheticRegression { n, .. } => n,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::invalid("dataset size must be positive"));
        }
        match *self {
            Generator::Blobs {
                classes,
                dim,
                separation,
                std,
                ..
            } => {
                if classes < 2 || dim == 0 {
                    return Err(Error::invalid(
                        "blobs need at least 2 classes and 1 dimension",
                    ));
                }
                if !(separation >= 0.0 && std > 0.0) {
                    return Err(Error::invalid("blobs need separation >= 0 and std > 0"));
                }
            }
            Generator::TwoMoons { noise, .. } => {
                if noise.is_nan() || noise < 0.0 {
                    return Err(Error::invalid("noise must be nonnegative"));
                }
            }
            Generator::SyntheticRegression {
                dim,
                clusters,
                noise,
                ..
            } => {
                if dim == 0 || clusters == 0 || noise.is_nan() || noise < 0.0 {
                    return Err(Error::invalid(
                        "regression data needs dim >= 1, clusters >= 1 and noise >= 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Cluster centers: signed axes first (adjacent ones `r sqrt 2` apart), then
/// seeded random directions.
fn blob_centers(classes: usize, dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            if dim == 1 {
                return vec![radius * c as f64 * std::f64::consts::SQRT_2];
            }
            if c < 2 * dim {
                let mut v = vec![0.0; dim];
                let axis = c % dim;
                v[axis] = if c < dim { radius } else { -radius };
                v
            } else {
                let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                raw.into_iter().map(|x| radius * x / norm).collect()
            }
        })
        .collect()
}

/// Deterministic dataset with ids `0..n`.
pub fn generate(generator: &Generator, seed: u64) -> Result<Vec<Example>> {
    generator.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = match *generator {
        Generator::Blobs {
            n,
            classes,
            dim,
            separation,
            std,
        } => {
            let radius = separation * std / std::f64::consts::SQRT_2;
            let centers = blob_centers(classes, dim, radius, &mut rng);
            let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            (0..n)
                .map(|i| {
                    let c = i % classes;
                    let x = centers[c]
                        .iter()
                        .map(|m| m + noise.sample(&mut rng))
                        .collect();
                    Example::classified(i as u32, x, c)
                })
                .collect()
        }
        Generator::TwoMoons { n, noise } => (0..n)
            .map(|i| {
                let c = i % 2;
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                Example::classified(i as u32, vec![x + noise * ex, y + noise * ey], c)
            })
            .collect(),
        Generator::SyntheticRegression {
            n,
            dim,
            clusters,
            noise,
            nonlinear,
        } => {
            let centers: Vec<Vec<f64>> = (0..clusters)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let w: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
                .collect();
            (0..n)
                .map(|i| {
                    let c = &centers[i % clusters];
                    let x: Vec<f64> = c
                        .iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let lin: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                    let clean = if nonlinear {
                        lin.sin() + 0.1 * x.iter().map(|v| v * v).sum::<f64>() / dim as f64
                    } else {
                        lin
                    };
                    let y = clean + noise * rng.sample::<f64, _>(StandardNormal);
                    Example::new(i as u32, x, Target::Value(y))
                })
                .collect()
        }
    };
    Ok(examples)
}

/// Deterministic split into `(first, rest)` with `first` holding
/// `round(fraction * n)` examples.
pub fn split(
    dataset: &[Example],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("split fraction must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let cut = (fraction * dataset.len() as f64).round() as usize;
    let mut first: Vec<usize> = order[..cut].to_vec();
    let mut rest: Vec<usize> = order[cut..].to_vec();
    first.sort_unstable();
    rest.sort_unstable();
    Ok((
        first.into_iter().map(|i| dataset[i].clone()).collect(),
        rest.into_iter().map(|i| dataset[i].clone()).collect(),
    ))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Fnv(u64);

impl Fnv {
    fn feed(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv(FNV_OFFSET);
    h.feed(bytes);
    h.0
}

/// FNV-1a over ids, labels and feature bit patterns.
pub fn fingerprint(dataset: &[Example]) -> u64 {
    let mut h = Fnv(FNV_OFFSET);
    h.feed(&(dataset.len() as u64).to_le_bytes());
    for z in dataset {
        h.feed(&z.id.to_le_bytes());
        match z.label {
            Target::Class(c) => {
                h.feed(&[0]);
                h.feed(&(c as u64).to_le_bytes());
            }
            Target::Value(v) => {
                h.feed(&[1]);
                h.feed(&v.to_bits().to_le_bytes());
            }
        }
        h.feed(&z.true_label.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        h.feed(&(z.features.len() as u64).to_le_bytes());
        for x in &z.features {
            h.feed(&x.to_bits().to_le_bytes());
        }
    }
    h.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    /// `None` for regression targets.
    pub classes: Option<usize>,
    pub seed: Option<u64>,
    /// 16 hex digits.
    pub fingerprint: String,
}

impl DatasetManifest {
    pub fn describe(name: &str, kind: DatasetKind, seed: Option<u64>, dataset: &[Example]) -> Self {
        let classes = dataset
            .iter()
            .map(|z| z.label.class())
            .collect::<Option<Vec<usize>>>()
            .map(|cs| {
                cs.into_iter()
                    .chain(dataset.iter().filter_map(|z| z.true_label))
                    .max()
                    .map_or(0, |m| m + 1)
            });
        Self {
            name: name.to_string(),
            kind,
            n: dataset.len(),
            dim: dataset.first().map_or(0, |z| z.features.len()),
            classes,
            seed,
            fingerprint: format!("{:016x}", fingerprint(dataset)),
        }
    }

    pub fn matches(&self, dataset: &[Example]) -> bool {
        self.fingerprint == format!("{:016x}", fingerprint(dataset))
    }
}

fn parse_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

fn read_idx_header<R: Read>(r: &mut ByteReader<R>, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let got = r.u32_be()?;
    if got != magic {
        return Err(parse_err(
            0,
            format!("bad IDX magic {got:#010x}, expected {magic:#010x}"),
        ));
    }
    (0..dims).map(|_| Ok(r.u32_be()? as usize)).collect()
}

/// Images scaled to `[0, 1]` paired with class labels; ids follow file order.
pub fn read_idx<R1: Read, R2: Read>(images: R1, labels: R2) -> Result<Vec<Example>> {
    let mut ri = ByteReader::new(images);
    let dims = read_idx_header(&mut ri, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let mut rl = ByteReader::new(labels);
    let n_labels = read_idx_header(&mut rl, IDX_LABELS_MAGIC, 1)?[0];
    if n != n_labels {
        return Err(Error::invalid(format!(
            "IDX image file has {n} entries but label file has {n_labels}"
        )));
    }
    let pixels = rows * cols;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let raw = ri.bytes(pixels)?;
        let label = rl.bytes(1)?[0] as usize;
        let features = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        out.push(Example::classified(i as u32, features, label));
    }
    ri.expect_eof()?;
    rl.expect_eof()?;
    Ok(out)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Example>> {
    read_idx(
        BufReader::new(File::open(images_path)?),
        BufReader::new(File::open(labels_path)?),
    )
}

/// Writes features as `round(255 x)`; exact for features on the `k/255` grid.
pub fn write_idx<W1: Write, W2: Write>(
    dataset: &[Example],
    rows: usize,
    cols: usize,
    images: &mut W1,
    labels: &mut W2,
) -> Result<()> {
    images.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [dataset.len(), rows, cols] {
        images.write_all(&(d as u32).to_be_bytes())?;
    }
    labels.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&(dataset.len() as u32).to_be_bytes())?;
    for z in dataset {
        if z.features.len() != rows * cols {
            return Err(Error::shape(format!(
                "example {} has {} features, expected {}",
                z.id,
                z.features.len(),
                rows * cols
            )));
        }
        let bytes: Vec<u8> = z
            .features
            .iter()
            .map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        images.write_all(&bytes)?;
        let c = z
            .label
            .class()
            .filter(|&c| c < 256)
            .ok_or_else(|| Error::invalid("IDX labels must be classes below 256"))?;
        labels.write_all(&[c as u8])?;
    }
    Ok(())
}

pub fn save_idx(
    dataset: &[Example],
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let mut wi = BufWriter::new(File::create(images_path)?);
    let mut wl = BufWriter::new(File::create(labels_path)?);
    write_idx(dataset, rows, cols, &mut wi, &mut wl)?;
    wi.flush()?;
    wl.flush()?;
    Ok(())
}

/// CSV with header `id,label[,true_label],f0..`. Labels that all parse as
/// nonnegative integers are read as classes, otherwise as regression targets.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 2 || names[0] != "id" || names[1] != "label" {
        return Err(parse_err(0, "missing `id,label,...` header row"));
    }
    let has_true = names.get(2) == Some(&"true_label");
    let first_feature = if has_true { 3 } else { 2 };
    for (j, name) in names[first_feature..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(
                0,
                format!("expected column `f{j}`, found `{name}`"),
            ));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let at = rec.position().map_or(0, |p| p.byte());
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| {
                parse_err(
                    at,
                    format!("non-numeric cell `{}` in column {}", &rec[i], names[i]),
                )
            })
        };
        let id = rec[0]
            .trim()
            .parse::<u32>()
            .map_err(|_| parse_err(at, format!("bad id `{}`", &rec[0])))?;
        let true_label = if has_true && !rec[2].trim().is_empty() {
            Some(
                rec[2]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(at, format!("bad true_label `{}`", &rec[2])))?,
            )
        } else {
            None
        };
        let features = (first_feature..rec.len())
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        let label_raw = rec[1].trim().to_string();
        num(1)?;
        rows.push((id, label_raw, true_label, features));
    }
    let classes = rows.iter().all(|r| r.1.parse::<usize>().is_ok());
    Ok(rows
        .into_iter()
        .map(|(id, label, true_label, features)| {
            let target = if classes {
                Target::Class(label.parse().expect("checked"))
            } else {
                Target::Value(label.parse().expect("checked"))
            };
            Example {
                id,
                features,
                label: target,
                true_label,
            }
        })
        .collect())
}

pub fn write_csv<W: Write>(dataset: &[Example], w: W) -> Result<()> {
    let dim = dataset.first().map_or(0, |z| z.features.len());
    let has_true = dataset.iter().any(|z| z.true_label.is_some());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "label".to_string()];
    if has_true {
        header.push("true_label".into());
    }
    header.extend((0..dim).map(|j| format!("f{j}")));
    out.write_record(&header)?;
    for z in dataset {
        if z.features.len() != dim {
            return Err(Error::shape(format!(
                "example {} has a different feature count",
                z.id
            )));
        }
        let mut row = vec![
            z.id.to_string(),
            match z.label {
                Target::Class(c) => c.to_string(),
                Target::Value(v) => format!("{v:?}"),
            },
        ];
        if has_true {
            row.push(z.true_label.map_or(String::new(), |t| t.to_string()));
        }
        row.extend(z.features.iter().map(|x| format!("{x:?}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Vec<Example>> {
    read_csv(BufReader::new(File::open(path)?))
}

pub fn save_csv(dataset: &[Example], path: &Path) -> Result<()> {
    write_csv(dataset, BufWriter::new(File::create(path)?))
}
