//! Confusion matrices, UF1/UAR, the LOSO harness and feature export.

mod export;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{hard_sample_audit, loso_splits, Dataset};
use crate::error::{MednError, Result};
use crate::model::{Model, ModelConfig};
use crate::motion_branch::BackboneFactory;
use crate::params::ParamStore;
use crate::training::{
    argmax, derive_seed, new_graph, save_metrics, train_on, Checkpoint, EpochMetrics, FlowStats,
    Prepared,
};

pub use export::{export_features, write_features_csv, FeatureRow};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        assert!(
            counts.iter().all(|r| r.len() == counts.len()),
            "confusion matrix must be square"
        );
        Self { counts }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn tp_fp_fn(&self, i: usize) -> (u64, u64, u64) {
        let tp = self.counts[i][i];
        let row: u64 = self.counts[i].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[i]).sum();
        (tp, col - tp, row - tp)
    }
}

/// Unweighted mean of per-class F1; a class with no true, predicted or
/// missed samples scores 0.
pub fn uf1(cm: &ConfusionMatrix) -> f64 {
    let c = cm.num_classes();
    (0..c)
        .map(|i| {
            let (tp, fp, fn_) = cm.tp_fp_fn(i);
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / c as f64
}

/// Unweighted mean of per-class recall; classes without samples score 0.
pub fn uar(cm: &ConfusionMatrix) -> f64 {
    let c = cm.num_classes();
    (0..c)
        .map(|i| {
            let n: u64 = cm.counts[i].iter().sum();
            if n == 0 {
                0.0
            } else {
                cm.counts[i][i] as f64 / n as f64
            }
        })
        .sum::<f64>()
        / c as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub subject_id: String,
    pub fold: usize,
    pub true_class: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
    pub hard: bool,
}

/// Class probabilities for the given records, in the given order.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    stats: &FlowStats,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Vec<(usize, Vec<f64>)> {
    let prepared = Prepared::new_subset(dataset, stats, indices);
    let c = model.num_classes;
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices.chunks(batch_size.max(1)) {
        let g = new_graph(&model.config);
        let p = params.bind_frozen(&g);
        let logits = model.forward(&p, g.constant(prepared.batch(idx))).logits;
        let probs = logits.softmax().value();
        for row in probs.data().chunks(c) {
            out.push((argmax(row), row.to_vec()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub subject: String,
    pub n_train: usize,
    pub n_test: usize,
    pub uf1: f64,
    pub uar: f64,
    pub final_epoch: Option<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardMetrics {
    pub count: usize,
    pub uf1: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub uf1: f64,
    pub uar: f64,
    pub hard: HardMetrics,
    pub confusion: ConfusionMatrix,
    pub folds: Vec<FoldSummary>,
    pub predictions: Vec<Prediction>,
    pub config: ModelConfig,
    pub seed: u64,
}

impl EvalReport {
    /// Scores the concatenated predictions of all folds at once.
    pub fn from_predictions(
        num_classes: usize,
        folds: Vec<FoldSummary>,
        predictions: Vec<Prediction>,
        config: ModelConfig,
        seed: u64,
    ) -> Self {
        let confusion = ConfusionMatrix::from_pairs(
            num_classes,
            predictions.iter().map(|p| (p.true_class, p.pred)),
        );
        let hard_cm = ConfusionMatrix::from_pairs(
            num_classes,
            predictions
                .iter()
                .filter(|p| p.hard)
                .map(|p| (p.true_class, p.pred)),
        );
        Self {
            uf1: uf1(&confusion),
            uar: uar(&confusion),
            hard: HardMetrics {
                count: predictions.iter().filter(|p| p.hard).count(),
                uf1: uf1(&hard_cm),
                uar: uar(&hard_cm),
            },
            confusion,
            folds,
            predictions,
            config,
            seed,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_predictions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let c = self.confusion.num_classes();
        let mut header = vec![
            "sample_id".to_string(),
            "subject_id".into(),
            "fold".into(),
            "true".into(),
            "pred".into(),
            "hard".into(),
        ];
        header.extend((0..c).map(|i| format!("p{i}")));
        out.write_record(&header)?;
        for p in &self.predictions {
            let mut row = vec![
                p.sample_id.clone(),
                p.subject_id.clone(),
                p.fold.to_string(),
                p.true_class.to_string(),
                p.pred.to_string(),
                u8::from(p.hard).to_string(),
            ];
            row.extend(p.probs.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_confusion_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let c = self.confusion.num_classes();
        let mut header = vec!["true".to_string()];
        header.extend((0..c).map(|i| format!("pred{i}")));
        out.write_record(&header)?;
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let mut r = vec![i.to_string()];
            r.extend(row.iter().map(u64::to_string));
            out.write_record(&r)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Default)]
pub struct LosoOptions {
    /// Folds trained concurrently; 0 or 1 runs them one after another.
    pub jobs: usize,
    /// Where fold checkpoints and metric logs are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Loads an existing fold checkpoint instead of retraining.
    pub reuse_checkpoints: bool,
    /// Runs only these fold indices.
    pub folds: Option<Vec<usize>>,
    /// Distinguishes ablation cells when deriving fold seeds.
    pub cell: u64,
    pub external: Option<BackboneFactory>,
}

struct FoldResult {
    summary: FoldSummary,
    predictions: Vec<Prediction>,
}

/// Leave-one-subject-out: one model per held-out subject, metrics on the
/// pooled predictions.
pub fn run_loso(
    dataset: &Dataset,
    cfg: &ModelConfig,
    seed: u64,
    opts: &LosoOptions,
) -> Result<EvalReport> {
    let folds = loso_splits(&dataset.manifest)?;
    let audit = hard_sample_audit(&dataset.manifest)?;
    let selected: Vec<usize> = match &opts.folds {
        Some(f) => {
            if let Some(&bad) = f.iter().find(|&&i| i >= folds.len()) {
                return Err(MednError::InvalidConfig(format!(
                    "fold {bad} does not exist ({} folds)",
                    folds.len()
                )));
            }
            f.clone()
        }
        None => (0..folds.len()).collect(),
    };
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let labels = dataset.labels();
    let run_fold = |fi: usize| -> Result<FoldResult> {
        let fold = &folds[fi];
        let wrap = |e: MednError| MednError::Fold {
            fold: fi,
            subject: fold.subject.clone(),
            source: Box::new(e),
        };
        let ckpt_path = opts
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("fold_{fi:02}.ckpt")));
        let (ckpt, final_epoch) = match &ckpt_path {
            Some(path) if opts.reuse_checkpoints && path.exists() => {
                (Checkpoint::load(path).map_err(wrap)?, None)
            }
            _ => {
                let fold_seed = derive_seed(seed, fi as u64, opts.cell);
                let outcome =
                    train_on(dataset, &fold.train, cfg, fold_seed, opts.external.as_ref())
                        .map_err(wrap)?;
                if let (Some(path), Some(dir)) = (&ckpt_path, &opts.checkpoint_dir) {
                    outcome.checkpoint.save(path).map_err(wrap)?;
                    save_metrics(
                        &dir.join(format!("fold_{fi:02}_metrics.csv")),
                        &outcome.metrics,
                    )
                    .map_err(wrap)?;
                }
                let last = outcome.metrics.last().cloned();
                (outcome.checkpoint, last)
            }
        };
        ckpt.check_dataset(dataset).map_err(wrap)?;
        let model = ckpt.model(opts.external.as_ref()).map_err(wrap)?;
        let probs = predict(
            &model,
            &ckpt.params,
            &ckpt.stats,
            dataset,
            &fold.test,
            cfg.optim.batch_size,
        );
        let predictions: Vec<Prediction> = fold
            .test
            .iter()
            .zip(probs)
            .map(|(&i, (pred, probs))| Prediction {
                sample_id: dataset.samples[i].sample_id.clone(),
                subject_id: dataset.samples[i].subject_id.clone(),
                fold: fi,
                true_class: labels[i],
                pred,
                probs,
                hard: audit.hard[i],
            })
            .collect();
        let cm = ConfusionMatrix::from_pairs(
            dataset.num_classes(),
            predictions.iter().map(|p| (p.true_class, p.pred)),
        );
        Ok(FoldResult {
            summary: FoldSummary {
                fold: fi,
                subject: fold.subject.clone(),
                n_train: fold.train.len(),
                n_test: fold.test.len(),
                uf1: uf1(&cm),
                uar: uar(&cm),
                final_epoch,
            },
            predictions,
        })
    };
    let results: Vec<Result<FoldResult>> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| MednError::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| selected.par_iter().map(|&fi| run_fold(fi)).collect())
    } else {
        selected.iter().map(|&fi| run_fold(fi)).collect()
    };
    let mut summaries = Vec::new();
    let mut predictions = Vec::new();
    for r in results {
        let r = r?;
        summaries.push(r.summary);
        predictions.extend(r.predictions);
    }
    Ok(EvalReport::from_predictions(
        dataset.num_classes(),
        summaries,
        predictions,
        cfg.clone(),
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 0, 0], vec![0, 0, 2], vec![0, 0, 3]]);
        assert!((uf1(&cm) - 1.75 / 3.0).abs() < 1e-12);
        assert!((uar(&cm) - 2.0 / 3.0).abs() < 1e-12);
        let perfect = ConfusionMatrix::from_counts(vec![vec![4, 0], vec![0, 9]]);
        assert_eq!((uf1(&perfect), uar(&perfect)), (1.0, 1.0));
    }

    #[test]
    fn aggregate_differs_from_fold_average() {
        // Fold A: one class-0 sample, correct. Fold B: three samples, one wrong.
        let a = [(0, 0)];
        let b = [(1, 1), (1, 0), (0, 0)];
        let pooled = ConfusionMatrix::from_pairs(2, a.iter().chain(&b).copied());
        let fa = uf1(&ConfusionMatrix::from_pairs(2, a));
        let fb = uf1(&ConfusionMatrix::from_pairs(2, b));
        let report = EvalReport::from_predictions(
            2,
            Vec::new(),
            a.iter()
                .chain(&b)
                .enumerate()
                .map(|(i, &(t, p))| Prediction {
                    sample_id: format!("{i}"),
                    subject_id: String::new(),
                    fold: usize::from(i > 0),
                    true_class: t,
                    pred: p,
                    probs: vec![],
                    hard: false,
                })
                .collect(),
            ModelConfig::default(),
            0,
        );
        assert_eq!(report.uf1, uf1(&pooled));
        assert!((report.uf1 - (fa + fb) / 2.0).abs() > 1e-3);
    }

    fn permuted(cm: &ConfusionMatrix, perm: &[usize]) -> ConfusionMatrix {
        let c = cm.num_classes();
        let mut out = ConfusionMatrix::new(c);
        for i in 0..c {
            for j in 0..c {
                out.counts[perm[i]][perm[j]] = cm.counts[i][j];
            }
        }
        out
    }

    #[test]
    fn diagonal_matrices_score_one() {
        let cm = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 1, 0], vec![0, 0, 9]]);
        assert_eq!((uf1(&cm), uar(&cm)), (1.0, 1.0));
        let off = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 1, 0], vec![0, 1, 9]]);
        assert!(uf1(&off) < 1.0 && uar(&off) < 1.0);
        // A class with no samples cannot be recalled, so the score stays below one.
        let empty = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 0, 0], vec![0, 0, 9]]);
        assert!(uf1(&empty) < 1.0 && uar(&empty) < 1.0);
    }

    proptest! {
        #[test]
        fn bounded_and_permutation_invariant(counts in proptest::collection::vec(0u64..20, 9)) {
            let cm = ConfusionMatrix::from_counts(counts.chunks(3).map(<[u64]>::to_vec).collect());
            let (f, r) = (uf1(&cm), uar(&cm));
            prop_assert!((0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&r));
            let p = permuted(&cm, &[2, 0, 1]);
            prop_assert!((uf1(&p) - f).abs() < 1e-12);
            prop_assert!((uar(&p) - r).abs() < 1e-12);
        }
    }
}
