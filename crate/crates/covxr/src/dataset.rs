//! Manifest ingestion, class balancing, patient-disjoint splitting, and
//! seeded batch streaming.
//!
//! The on-disk manifest is a UTF-8 CSV with header
//! `image_path,label,patient_id,view` (the last two columns optional).
//! Labels are the literal `0` (negative) or `1` (positive).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imagebuf::{stack_batch, ImageBuffer};
use crate::util::derive_seed;

/// Binary class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_str(s: &str) -> Option<Self> {
        match s.trim() {
            "0" => Some(Label::Negative),
            "1" => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }
}

/// Radiographic projection of the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum View {
    Pa,
    Ap,
    #[default]
    Unknown,
}

impl View {
    fn from_field(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PA" => Some(View::Pa),
            "AP" => Some(View::Ap),
            "" => Some(View::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Pa => "PA",
            View::Ap => "AP",
            View::Unknown => "",
        }
    }
}

/// One labeled scan reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: Label,
    pub patient_id: String,
    pub view: View,
}

/// An ordered collection of records with a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub source_tag: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("invalid label {value:?} at row {row} (expected 0 or 1)")]
    InvalidLabel { row: usize, value: String },
    #[error("duplicate image path in manifest: {0}")]
    DuplicatePath(PathBuf),
    #[error("class {0:?} has no records")]
    EmptyClass(Label),
    #[error("train fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("preprocessing failed for {path}: {reason}")]
    Preprocess { path: PathBuf, reason: String },
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, source_tag: impl Into<String>) -> Self {
        Self {
            records,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Exact record count for one class.
    pub fn class_count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn patient_ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }
}

/// Fallback patient identity when the source column is empty: the file stem.
fn synthesize_patient_id(image_path: &Path) -> String {
    image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_path.to_string_lossy().into_owned())
}

/// Load a manifest CSV. The header must start with `image_path,label`;
/// `patient_id` and `view` columns are optional.
pub fn load_manifest(csv_path: &Path) -> Result<DatasetManifest, DatasetError> {
    if !csv_path.exists() {
        return Err(DatasetError::MissingFile(csv_path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(csv_path)
        .map_err(|e| DatasetError::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRow {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let expected = ["image_path", "label", "patient_id", "view"];
    if headers.len() < 2 || headers.len() > 4 {
        return Err(DatasetError::MalformedRow {
            row: 0,
            reason: format!("header must list 2-4 of {expected:?}, got {headers:?}"),
        });
    }
    for (i, name) in headers.iter().enumerate() {
        if name.trim() != expected[i] {
            return Err(DatasetError::MalformedRow {
                row: 0,
                reason: format!("header column {i} is {name:?}, expected {:?}", expected[i]),
            });
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, result) in reader.records().enumerate() {
        let row = i + 1; // 1-based data row
        let record = result.map_err(|e| DatasetError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(DatasetError::MalformedRow {
                row,
                reason: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let path_field = record.get(0).unwrap_or("").trim();
        if path_field.is_empty() {
            return Err(DatasetError::MalformedRow {
                row,
                reason: "empty image_path".into(),
            });
        }
        let image_path = PathBuf::from(path_field);
        if !seen.insert(image_path.clone()) {
            return Err(DatasetError::DuplicatePath(image_path));
        }
        let label_field = record.get(1).unwrap_or("");
        let label = Label::from_str(label_field).ok_or_else(|| DatasetError::InvalidLabel {
            row,
            value: label_field.to_string(),
        })?;
        let patient_field = record.get(2).unwrap_or("").trim().to_string();
        let patient_id = if patient_field.is_empty() {
            synthesize_patient_id(&image_path)
        } else {
            patient_field
        };
        let view_field = record.get(3).unwrap_or("");
        let view = View::from_field(view_field).ok_or_else(|| DatasetError::MalformedRow {
            row,
            reason: format!("invalid view {view_field:?} (expected PA, AP, or empty)"),
        })?;
        records.push(SampleRecord {
            image_path,
            label,
            patient_id,
            view,
        });
    }

    let tag = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    Ok(DatasetManifest::new(records, tag))
}

/// Write a manifest CSV with the full four-column header.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    writer
        .write_record(["image_path", "label", "patient_id", "view"])
        .and_then(|()| {
            manifest.records.iter().try_for_each(|r| {
                writer.write_record([
                    r.image_path.to_string_lossy().as_ref(),
                    &r.label.as_u8().to_string(),
                    &r.patient_id,
                    r.view.as_str(),
                ])
            })
        })
        .and_then(|()| writer.flush().map_err(csv::Error::from))
        .map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

/// Undersample the majority class to the minority count.
///
/// The minority class is kept whole; the majority class is sampled
/// uniformly without replacement, and the combined output order is
/// shuffled. Both draws use the given seed.
pub fn balance_classes(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    let mut positives: Vec<&SampleRecord> = Vec::new();
    let mut negatives: Vec<&SampleRecord> = Vec::new();
    for r in &manifest.records {
        match r.label {
            Label::Positive => positives.push(r),
            Label::Negative => negatives.push(r),
        }
    }
    if positives.is_empty() {
        return Err(DatasetError::EmptyClass(Label::Positive));
    }
    if negatives.is_empty() {
        return Err(DatasetError::EmptyClass(Label::Negative));
    }
    let target = positives.len().min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let sample = |records: &mut Vec<&SampleRecord>, rng: &mut ChaCha8Rng| {
        records.shuffle(rng);
        records.truncate(target);
    };
    sample(&mut negatives, &mut rng);
    sample(&mut positives, &mut rng);
    let mut combined: Vec<SampleRecord> = negatives
        .into_iter()
        .chain(positives)
        .cloned()
        .collect();
    combined.shuffle(&mut rng);
    Ok(DatasetManifest::new(combined, manifest.source_tag.clone()))
}

/// Split into train/validation subsets that are patient-disjoint.
///
/// Records are grouped by `patient_id`; whole groups are assigned greedily
/// (in seeded shuffled order) toward per-class targets of
/// `round(train_fraction * class_count)`. Patient grouping takes precedence
/// over exact stratification, so per-class counts can drift from the target
/// by up to the largest group size.
pub fn split_train_val(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }

    // BTreeMap gives a stable group order before the seeded shuffle.
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.patient_id.as_str()).or_default().push(i);
    }
    let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    group_list.shuffle(&mut rng);

    let n_pos = manifest.class_count(Label::Positive);
    let n_neg = manifest.class_count(Label::Negative);
    let target_train = [
        (train_fraction * n_neg as f64).round() as usize,
        (train_fraction * n_pos as f64).round() as usize,
    ];
    let target_val = [n_neg - target_train[0], n_pos - target_train[1]];

    let mut train_idx: Vec<usize> = Vec::new();
    let mut val_idx: Vec<usize> = Vec::new();
    let mut assigned_train = [0usize; 2];
    let mut assigned_val = [0usize; 2];

    for group in group_list {
        let mut hist = [0usize; 2];
        for &i in &group {
            hist[manifest.records[i].label.as_u8() as usize] += 1;
        }
        let overshoot = |assigned: &[usize; 2], target: &[usize; 2]| -> usize {
            (0..2)
                .map(|c| (assigned[c] + hist[c]).saturating_sub(target[c]))
                .sum()
        };
        let cost_train = overshoot(&assigned_train, &target_train);
        let cost_val = overshoot(&assigned_val, &target_val);
        let to_train = match cost_train.cmp(&cost_val) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => {
                // tie: fill the side with the larger remaining deficit
                let deficit_train: usize = (0..2)
                    .map(|c| target_train[c].saturating_sub(assigned_train[c]))
                    .sum();
                let deficit_val: usize = (0..2)
                    .map(|c| target_val[c].saturating_sub(assigned_val[c]))
                    .sum();
                deficit_train >= deficit_val
            }
        };
        if to_train {
            for c in 0..2 {
                assigned_train[c] += hist[c];
            }
            train_idx.extend(group);
        } else {
            for c in 0..2 {
                assigned_val[c] += hist[c];
            }
            val_idx.extend(group);
        }
    }

    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let collect = |idx: &[usize]| -> Vec<SampleRecord> {
        idx.iter().map(|&i| manifest.records[i].clone()).collect()
    };
    Ok((
        DatasetManifest::new(collect(&train_idx), "train"),
        DatasetManifest::new(collect(&val_idx), "val"),
    ))
}

/// A decoded, preprocessed mini-batch in model input layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (N, C, H, W) image tensor.
    pub images: Array4<f64>,
    /// One 0/1 target per image.
    pub labels: Array1<f64>,
    /// Source path of each image, aligned with the batch rows.
    pub paths: Vec<PathBuf>,
}

/// Preprocessing hook applied to each decoded image. The second argument is
/// a per-record seed derived from (stream seed, epoch, record index);
/// deterministic pipelines may ignore it.
pub type Pipeline<'a> = dyn Fn(&ImageBuffer, u64) -> Result<ImageBuffer, String> + Sync + 'a;

/// Stream one epoch of shuffled batches.
///
/// The shuffle order is a function of `(seed, epoch)`, every record appears
/// exactly once, and the final batch may be short. Images within a batch
/// are decoded and preprocessed in parallel but delivered in order.
pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    pipeline: &'a Pipeline<'a>,
) -> Result<BatchStream<'a>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatchSize);
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, epoch as u64]));
    order.shuffle(&mut rng);
    Ok(BatchStream {
        manifest,
        order,
        batch_size,
        seed,
        epoch,
        cursor: 0,
        pipeline,
    })
}

/// Iterator over one epoch of batches. See [`batches`].
pub struct BatchStream<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    cursor: usize,
    pipeline: &'a Pipeline<'a>,
}

impl BatchStream<'_> {
    /// Number of batches this epoch will yield.
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = &self.order[self.cursor..end];
        self.cursor = end;

        let results: Vec<Result<(ImageBuffer, f64), DatasetError>> = indices
            .par_iter()
            .map(|&idx| {
                let record = &self.manifest.records[idx];
                let img = ImageBuffer::from_file(&record.image_path).map_err(|e| {
                    DatasetError::UnreadableImage {
                        path: record.image_path.clone(),
                        reason: e.to_string(),
                    }
                })?;
                let record_seed = derive_seed(self.seed, &[4, self.epoch as u64, idx as u64]);
                let processed = (self.pipeline)(&img, record_seed).map_err(|reason| {
                    DatasetError::Preprocess {
                        path: record.image_path.clone(),
                        reason,
                    }
                })?;
                Ok((processed, record.label.as_f64()))
            })
            .collect();

        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for r in results {
            match r {
                Ok((img, label)) => {
                    images.push(img);
                    labels.push(label);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        let paths = indices
            .iter()
            .map(|&idx| self.manifest.records[idx].image_path.clone())
            .collect();
        Some(Ok(Batch {
            images: stack_batch(&images),
            labels: Array1::from_vec(labels),
            paths,
        }))
    }
}
