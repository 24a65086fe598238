//! Sample records, label vocabularies, dataset manifests, LOSO splits,
//! hard-sample auditing and the synthetic generator.

pub mod labels;
pub mod synth;
pub mod tensor_file;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MednError, Result};
use crate::tensor::Tensor;

pub use labels::{map_emotion, EmotionLabel, TaskScheme};
pub use synth::{generate_synthetic, SynthConfig, SynthSummary};
pub use tensor_file::{read_tensor, write_tensor, DType};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Binary AU activations, ordered like the manifest vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuVector {
    bits: Vec<bool>,
}

impl AuVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Parses a string such as `"0101"`.
    pub fn parse(s: &str, vocab_len: usize) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(MednError::InvalidConfig(format!(
                    "AU bit string {s:?} contains {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.len() != vocab_len {
            return Err(MednError::ShapeMismatch(format!(
                "AU bit string {s:?} has {} entries, vocabulary has {vocab_len}",
                bits.len()
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Flow of every sampled frame against the first one: `[T-1, 2, H, W]`,
/// channel 0 horizontal and channel 1 vertical displacement in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence(Tensor);

impl FlowSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 || t.shape()[1] != 2 {
            return Err(MednError::ShapeMismatch(format!(
                "flow must be [T-1, 2, H, W], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shape against the manifest dims and that every value is finite.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        validate_flow_tensor(&self.0, dims)
    }
}

pub(crate) fn validate_flow_tensor(t: &Tensor, dims: &Dims) -> Result<()> {
    let expected = dims.flow_shape();
    if t.shape() != expected {
        return Err(MednError::ShapeMismatch(format!(
            "flow shape {:?} does not match manifest {:?}",
            t.shape(),
            expected
        )));
    }
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(MednError::NonFiniteValues(format!(
            "flow element {i} is {}",
            t.data()[i]
        )));
    }
    Ok(())
}

/// Tensor dims declared by a manifest. `t` counts sampled frames, so flow
/// tensors carry `t - 1` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn flow_shape(&self) -> [usize; 4] {
        [self.t.saturating_sub(1), self.c, self.h, self.w]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub sample_id: String,
    pub subject_id: String,
    /// Tensor file, relative to the manifest directory.
    pub path: String,
    pub emotion_raw: String,
    pub au_bits: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub task_scheme: TaskScheme,
    pub dims: Dims,
    pub au_vocabulary: Vec<String>,
    pub records: Vec<RecordHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSummary>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(MednError::InvalidConfig(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.dims.t < 2 || self.dims.c != 2 || self.dims.h == 0 || self.dims.w == 0 {
            return Err(MednError::InvalidConfig(format!(
                "bad manifest dims {:?}",
                self.dims
            )));
        }
        let mut seen = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.subject_id.is_empty() {
                return Err(MednError::InvalidConfig(format!(
                    "record {} has an empty subject id",
                    r.sample_id
                )));
            }
            if seen.insert(r.sample_id.as_str(), i).is_some() {
                return Err(MednError::InvalidConfig(format!(
                    "duplicate sample id {}",
                    r.sample_id
                )));
            }
            map_emotion(&r.emotion_raw, self.task_scheme)?;
            AuVector::parse(&r.au_bits, self.au_vocabulary.len())?;
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| map_emotion(&r.emotion_raw, self.task_scheme))
            .collect()
    }

    pub fn au_vectors(&self) -> Result<Vec<AuVector>> {
        self.records
            .iter()
            .map(|r| AuVector::parse(&r.au_bits, self.au_vocabulary.len()))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| MednError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub flow: FlowSequence,
    pub emotion: EmotionLabel,
    pub au: AuVector,
}

/// A manifest with every sample tensor loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    /// Pairs a manifest with flow tensors given in record order.
    pub fn from_parts(manifest: DatasetManifest, flows: Vec<Tensor>) -> Result<Self> {
        manifest.validate()?;
        if flows.len() != manifest.records.len() {
            return Err(MednError::ShapeMismatch(format!(
                "{} flow tensors for {} records",
                flows.len(),
                manifest.records.len()
            )));
        }
        let samples = manifest
            .records
            .iter()
            .zip(flows)
            .map(|(r, t)| {
                validate_flow_tensor(&t, &manifest.dims)?;
                Ok(SampleRecord {
                    sample_id: r.sample_id.clone(),
                    subject_id: r.subject_id.clone(),
                    flow: FlowSequence::new(t)?,
                    emotion: EmotionLabel::new(&r.emotion_raw, manifest.task_scheme)?,
                    au: AuVector::parse(&r.au_bits, manifest.au_vocabulary.len())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    /// Loads `manifest.json` (or the given file) and every tensor it lists.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = manifest_path(path);
        let manifest = DatasetManifest::read(&manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let flows = manifest
            .records
            .iter()
            .map(|r| read_tensor(&root.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, flows)
    }

    /// Writes the manifest and one f32 tensor file per record under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (r, s) in self.manifest.records.iter().zip(&self.samples) {
            let path = dir.join(&r.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_tensor(&path, s.flow.tensor(), DType::F32)?;
        }
        self.manifest.write(&dir.join(MANIFEST_FILE))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.task_scheme.num_classes()
    }

    pub fn num_aus(&self) -> usize {
        self.manifest.au_vocabulary.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.emotion.class_id).collect()
    }
}

/// Accepts either a dataset directory or a manifest file path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// One LOSO fold: record indices for training and for the held-out subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, in sorted subject order.
pub fn loso_splits(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_subject.entry(r.subject_id.as_str()).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(MednError::DegenerateDataset(format!(
            "LOSO needs at least two subjects, found {}",
            by_subject.len()
        )));
    }
    Ok(by_subject
        .into_iter()
        .map(|(subject, test)| Fold {
            subject: subject.to_string(),
            train: (0..manifest.records.len())
                .filter(|i| manifest.records[*i].subject_id != subject)
                .collect(),
            test,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardSampleAudit {
    pub total: usize,
    pub hard_count: usize,
    pub proportion: f64,
    /// Per-record flag in manifest order.
    pub hard: Vec<bool>,
}

/// A sample is hard when another sample has the exact same AU vector but a
/// different class.
pub fn hard_sample_audit(manifest: &DatasetManifest) -> Result<HardSampleAudit> {
    let classes = manifest.class_ids()?;
    let aus = manifest.au_vectors()?;
    hard_flags(&aus, &classes)
}

pub(crate) fn hard_flags(aus: &[AuVector], classes: &[usize]) -> Result<HardSampleAudit> {
    let mut classes_per_au: HashMap<&AuVector, Vec<usize>> = HashMap::new();
    for (au, &c) in aus.iter().zip(classes) {
        let seen = classes_per_au.entry(au).or_default();
        if !seen.contains(&c) {
            seen.push(c);
        }
    }
    let hard: Vec<bool> = aus.iter().map(|au| classes_per_au[au].len() > 1).collect();
    let total = hard.len();
    let hard_count = hard.iter().filter(|&&h| h).count();
    Ok(HardSampleAudit {
        total,
        hard_count,
        proportion: if total == 0 {
            0.0
        } else {
            hard_count as f64 / total as f64
        },
        hard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(rows: &[(&str, &str, &str)]) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            task_scheme: TaskScheme::ThreeClass,
            dims: Dims {
                t: 3,
                c: 2,
                h: 2,
                w: 2,
            },
            au_vocabulary: vec!["AU4".into(), "AU12".into()],
            records: rows
                .iter()
                .enumerate()
                .map(|(i, (subj, emo, au))| RecordHeader {
                    sample_id: format!("s{i}"),
                    subject_id: subj.to_string(),
                    path: format!("s{i}.bin"),
                    emotion_raw: emo.to_string(),
                    au_bits: au.to_string(),
                })
                .collect(),
            synthetic: None,
        }
    }

    #[test]
    fn loso_three_subjects() {
        let m = manifest(&[
            ("b", "happiness", "01"),
            ("a", "anger", "10"),
            ("c", "surprise", "11"),
            ("a", "fear", "10"),
        ]);
        let folds = loso_splits(&m).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].subject, "a");
        assert_eq!(folds[0].test, vec![1, 3]);
        assert_eq!(folds[0].train, vec![0, 2]);
    }

    #[test]
    fn loso_single_subject_is_degenerate() {
        let m = manifest(&[("a", "anger", "10"), ("a", "fear", "10")]);
        assert_eq!(loso_splits(&m).unwrap_err().kind(), "DegenerateDataset");
    }

    #[test]
    fn loso_casme_scale() {
        let rows: Vec<(String, &str, &str)> = (0..145)
            .map(|i| (format!("sub{:02}", i % 26), "anger", "10"))
            .collect();
        let refs: Vec<(&str, &str, &str)> =
            rows.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect();
        let folds = loso_splits(&manifest(&refs)).unwrap();
        assert_eq!(folds.len(), 26);
        assert_eq!(folds.iter().map(|f| f.test.len()).sum::<usize>(), 145);
    }

    #[test]
    fn audit_examples() {
        let m = manifest(&[("a", "anger", "10"), ("b", "happiness", "10")]);
        let a = hard_sample_audit(&m).unwrap();
        assert_eq!((a.total, a.hard_count, a.proportion), (2, 2, 1.0));
        let m = manifest(&[
            ("a", "anger", "10"),
            ("b", "happiness", "01"),
            ("b", "fear", "10"),
        ]);
        assert_eq!(hard_sample_audit(&m).unwrap().hard_count, 0);
    }

    #[test]
    fn manifest_rejects_unknown_fields_and_labels() {
        let m = manifest(&[("a", "anger", "10")]);
        let mut v = serde_json::to_value(&m).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<DatasetManifest>(v).is_err());
        let bad = manifest(&[("a", "joyful", "10")]);
        assert_eq!(bad.validate().unwrap_err().kind(), "UnknownLabel");
        let bad = manifest(&[("a", "anger", "1")]);
        assert_eq!(bad.validate().unwrap_err().kind(), "ShapeMismatch");
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let m = manifest(&[("a", "anger", "10"), ("b", "surprise", "01")]);
        let flows: Vec<Tensor> = (0..2)
            .map(|i| {
                Tensor::from_vec(
                    &[2, 2, 2, 2],
                    (0..16).map(|v| (v + i) as f64 * 0.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::from_parts(m, flows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.labels(), vec![0, 2]);
    }

    #[test]
    fn flow_validation() {
        let dims = Dims {
            t: 8,
            c: 2,
            h: 4,
            w: 4,
        };
        assert!(validate_flow_tensor(&Tensor::zeros(&[7, 2, 4, 4]), &dims).is_ok());
        assert_eq!(
            validate_flow_tensor(&Tensor::zeros(&[8, 2, 4, 4]), &dims)
                .unwrap_err()
                .kind(),
            "ShapeMismatch"
        );
        let mut t = Tensor::zeros(&[7, 2, 4, 4]);
        t.data_mut()[5] = f64::NAN;
        assert_eq!(
            validate_flow_tensor(&t, &dims).unwrap_err().kind(),
            "NonFiniteValues"
        );
    }

    proptest! {
        #[test]
        fn loso_partitions_and_audit_is_symmetric(
            rows in proptest::collection::vec((0usize..4, 0usize..3, 0usize..3), 2..40)
        ) {
            let subj = ["a", "b", "c", "d"];
            let emo = ["anger", "happiness", "surprise"];
            let au = ["10", "01", "11"];
            let spec: Vec<(&str, &str, &str)> =
                rows.iter().map(|&(s, e, a)| (subj[s], emo[e], au[a])).collect();
            let m = manifest(&spec);
            if let Ok(folds) = loso_splits(&m) {
                let mut seen = vec![0; spec.len()];
                for f in &folds {
                    for &i in &f.test { seen[i] += 1; }
                    prop_assert!(f.train.iter().all(|i| !f.test.contains(i)));
                    prop_assert_eq!(f.train.len() + f.test.len(), spec.len());
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
            }
            let audit = hard_sample_audit(&m).unwrap();
            for i in 0..spec.len() {
                for j in 0..spec.len() {
                    if spec[i].2 == spec[j].2 && spec[i].1 != spec[j].1 {
                        prop_assert!(audit.hard[i] && audit.hard[j]);
                    }
                }
            }
        }
    }
}
