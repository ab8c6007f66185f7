//! Datasets: IDX and CSV ingestion, the synthetic grating set, reduction and
//! train/validation splitting.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            images,
            labels,
            class_count,
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.class_count,
            });
        }
        if let Some(first) = self.images.first() {
            if self
                .images
                .iter()
                .any(|im| (im.height, im.width, im.channels) != (first.height, first.width, first.channels))
            {
                return Err(Error::InvalidDataset("images differ in shape".into()));
            }
        }
        if self.images.iter().any(|im| im.pixels.iter().any(|p| !(0.0..=1.0).contains(p))) {
            return Err(Error::InvalidDataset("pixel outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn subset(&self, name: &str, idx: &[usize]) -> Dataset {
        Dataset {
            name: name.to_string(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }
}

const IDX_IMAGES_3D: u32 = 0x0000_0803;
const IDX_IMAGES_4D: u32 = 0x0000_0804;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

/// Loads an IDX image file (3 or 4 dimensions, unsigned bytes) and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read_bytes(images_path)?;
    let magic = be_u32(&ib, 0, images_path)?;
    let dims = match magic {
        IDX_IMAGES_3D => 3,
        IDX_IMAGES_4D => 4,
        other => return Err(idx_err(images_path, format!("bad magic {other:#010x}"))),
    };
    let shape: Vec<usize> = (0..dims)
        .map(|d| be_u32(&ib, 4 + 4 * d, images_path).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let c = if dims == 4 { shape[3] } else { 1 };
    let header = 4 + 4 * dims;
    let per = h * w * c;
    if per == 0 {
        return Err(Error::EmptyImage);
    }
    let body = &ib[header..];
    if body.len() != n * per {
        return Err(idx_err(
            images_path,
            format!("expected {} pixel bytes, found {}", n * per, body.len()),
        ));
    }
    let lb = read_bytes(labels_path)?;
    let lmagic = be_u32(&lb, 0, labels_path)?;
    if lmagic != IDX_LABELS {
        return Err(idx_err(labels_path, format!("bad magic {lmagic:#010x}")));
    }
    let ln = be_u32(&lb, 4, labels_path)? as usize;
    let lbody = &lb[8..];
    if lbody.len() != ln {
        return Err(idx_err(labels_path, format!("expected {ln} labels, found {}", lbody.len())));
    }
    if ln != n {
        return Err(Error::InvalidDataset(format!("{n} images but {ln} labels")));
    }
    let images = body
        .chunks(per)
        .map(|px| Image::new(h, w, c, px.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lbody.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(
        images_path
            .file_stem()
            .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()),
        images,
        labels,
        classes,
    )?;
    ds.provenance.source = images_path.display().to_string();
    Ok(ds)
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes images and labels as IDX files. Pixels are quantized to bytes.
pub fn export_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.class_count > 256 {
        return Err(Error::InvalidDataset("IDX labels hold at most 256 classes".into()));
    }
    let first = ds.images.first();
    let (h, w, c) = first.map_or((0, 0, 1), |im| (im.height, im.width, im.channels));
    let mut out = Vec::with_capacity(20 + ds.len() * h * w * c);
    if c == 1 {
        out.extend_from_slice(&IDX_IMAGES_3D.to_be_bytes());
    } else {
        out.extend_from_slice(&IDX_IMAGES_4D.to_be_bytes());
    }
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    if c != 1 {
        out.extend_from_slice(&(c as u32).to_be_bytes());
    }
    for im in &ds.images {
        out.extend(im.pixels.iter().map(|&p| to_byte(p)));
    }
    std::fs::write(images_path, out).map_err(|e| Error::io(images_path, e))?;
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Loads `label,pixel,...` rows (pixels 0..=255, square grayscale images).
/// A header row is skipped when its first field is not a number.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?;
    let mut images = vec![];
    let mut labels = vec![];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?;
        let mut fields = rec.iter();
        let Some(first) = fields.next() else { continue };
        let Ok(label) = first.trim().parse::<usize>() else {
            if row == 0 {
                continue;
            }
            return Err(Error::InvalidDataset(format!("row {}: bad label `{first}`", row + 1)));
        };
        let px = fields
            .map(|f| match f.trim().parse::<u8>() {
                Ok(v) => Ok(f64::from(v) / 255.0),
                Err(_) => Err(Error::InvalidDataset(format!("row {}: bad pixel `{f}`", row + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        let side = (px.len() as f64).sqrt().round() as usize;
        if side * side != px.len() || side == 0 {
            return Err(Error::InvalidDataset(format!(
                "row {}: {} pixels is not a square image",
                row + 1,
                px.len()
            )));
        }
        images.push(Image::new(side, side, 1, px)?);
        labels.push(label);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(
        path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        images,
        labels,
        classes,
    )?;
    ds.provenance.source = path.display().to_string();
    Ok(ds)
}

/// Train (and optional test) data resolved from a `--dataset` argument.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub const TRAIN_IMAGES: &str = "train-images.idx";
pub const TRAIN_LABELS: &str = "train-labels.idx";
pub const TEST_IMAGES: &str = "test-images.idx";
pub const TEST_LABELS: &str = "test-labels.idx";

/// A directory with `train-{images,labels}.idx` (and optionally `test-*`),
/// or a single CSV file.
pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    if path.is_file() {
        return Ok(DatasetBundle {
            train: load_csv(path)?,
            test: None,
        });
    }
    if !path.is_dir() {
        return Err(Error::InvalidDataset(format!("{} does not exist", path.display())));
    }
    let mut train = load_idx(&path.join(TRAIN_IMAGES), &path.join(TRAIN_LABELS))?;
    if let Some(p) = read_provenance(path)? {
        train.provenance = p;
    }
    let test = if path.join(TEST_IMAGES).exists() {
        Some(load_idx(&path.join(TEST_IMAGES), &path.join(TEST_LABELS))?)
    } else {
        None
    };
    Ok(DatasetBundle { train, test })
}

pub const PROVENANCE_FILE: &str = "provenance.json";

pub fn write_provenance(dir: &Path, p: &Provenance) -> Result<()> {
    let path = dir.join(PROVENANCE_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(serde_json::to_string_pretty(p)?.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

pub fn read_provenance(dir: &Path) -> Result<Option<Provenance>> {
    let path = dir.join(PROVENANCE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&s)?))
}

/// Writes a dataset bundle as an IDX directory plus provenance sidecar.
pub fn write_dataset_dir(dir: &Path, train: &Dataset, test: Option<&Dataset>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS)];
    export_idx(train, &written[0], &written[1])?;
    if let Some(t) = test {
        export_idx(t, &dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
        written.push(dir.join(TEST_IMAGES));
        written.push(dir.join(TEST_LABELS));
    }
    write_provenance(dir, &train.provenance)?;
    written.push(dir.join(PROVENANCE_FILE));
    Ok(written)
}

/// Generator settings for [`synth_rotor_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotorConfig {
    /// Grating periods in pixels for class 0 and class 1.
    pub periods: (f64, f64),
    /// Relative jitter applied to each period.
    pub period_jitter: f64,
    /// Orientations are uniform in `[-h, h]` degrees.
    pub orientation_halfwidth: f64,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for RotorConfig {
    fn default() -> Self {
        Self {
            periods: (5.2, 4.2),
            period_jitter: 0.08,
            orientation_halfwidth: 90.0,
            amplitude: 0.25,
            noise: 0.3,
        }
    }
}

/// Two-class sinusoidal gratings in a soft circular aperture over a
/// mid-gray background. The class sets the spatial period; orientation and
/// phase are random, so rotations about the center preserve the class and,
/// with the default full orientation range, the distribution.
pub fn synth_rotor(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    synth_rotor_with(n, size, seed, &RotorConfig::default())
}

pub fn synth_rotor_with(n: usize, size: usize, seed: u64, cfg: &RotorConfig) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::InvalidConfig(format!("synth_rotor needs size >= 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("positive std");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let center = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 2.0 - 0.5;
    for i in 0..n {
        let label = i % 2;
        let base = if label == 0 { cfg.periods.0 } else { cfg.periods.1 };
        let period = base * (1.0 + rng.gen_range(-cfg.period_jitter..=cfg.period_jitter));
        let half = cfg.orientation_halfwidth;
        let theta = rng.gen_range(-half..=half).to_radians();
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - center, y as f64 - center);
                let r = (dx * dx + dy * dy).sqrt();
                let window = (radius + 0.5 - r).clamp(0.0, 1.0);
                let v = 0.5 + window * cfg.amplitude * (2.0 * PI * (dx * c + dy * s) / period + phase).sin();
                px.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        images.push(Image::new(size, size, 1, px)?);
        labels.push(label);
    }
    let mut ds = Dataset::new("synth_rotor", images, labels, 2)?;
    ds.provenance = Provenance {
        source: "synth_rotor".into(),
        seed: Some(seed),
        parent: None,
        note: Some(format!("n={n} size={size}")),
    };
    Ok(ds)
}

fn content_order(a: (&Image, usize), b: (&Image, usize)) -> Ordering {
    a.1.cmp(&b.1).then_with(|| {
        a.0.pixels
            .iter()
            .zip(&b.0.pixels)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.0.pixels.len().cmp(&b.0.pixels.len()))
    })
}

/// Class-stratified subsample of `n_reduced` items split into two disjoint
/// halves. Per-class quotas use largest remainders; within each class the
/// extra item of an odd count alternates between the halves. The result
/// does not depend on the input order.
pub fn reduce_and_split(ds: &Dataset, n_reduced: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_reduced > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot reduce {} items to {n_reduced}",
            ds.len()
        )));
    }
    if n_reduced < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 items, got {n_reduced}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| content_order((&ds.images[a], ds.labels[a]), (&ds.images[b], ds.labels[b])));
    let counts = ds.class_counts();
    let total = ds.len() as f64;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * n_reduced as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n_reduced - quota.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &cls in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        if quota[cls] < counts[cls] {
            quota[cls] += 1;
            rest -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (vec![], vec![]);
    let mut odd_to_train = true;
    for (cls, &q) in quota.iter().enumerate() {
        let mut members: Vec<usize> = order.iter().copied().filter(|&i| ds.labels[i] == cls).collect();
        members.shuffle(&mut rng);
        members.truncate(q);
        let mut half = q / 2;
        if q % 2 == 1 {
            if odd_to_train {
                half += 1;
            }
            odd_to_train = !odd_to_train;
        }
        train.extend_from_slice(&members[..half]);
        val.extend_from_slice(&members[half..]);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    let mut tr = ds.subset(&format!("{}-train", ds.name), &train);
    let mut va = ds.subset(&format!("{}-val", ds.name), &val);
    for (d, part) in [(&mut tr, "train"), (&mut va, "val")] {
        d.provenance = Provenance {
            source: ds.provenance.source.clone(),
            seed: Some(seed),
            parent: Some(ds.name.clone()),
            note: Some(format!("reduced to {n_reduced}, {part} half")),
        };
    }
    Ok((tr, va))
}
