//! Synthetic micro-expression datasets with controllable hard-sample rate.
//!
//! Every AU owns a fixed displacement blob. A sample's flow is the sum of the
//! blobs of its active AUs, scaled over time by a class envelope, plus
//! Gaussian noise. Class envelopes are cyclic shifts of one bump, so they
//! have identical temporal means: samples sharing an AU vector cannot be
//! told apart from time-averaged motion, only from temporal dynamics.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::TaskScheme;
use super::{hard_flags, AuVector, Dataset, DatasetManifest, Dims, RecordHeader, MANIFEST_VERSION};
use crate::error::{MednError, Result};
use crate::tensor::Tensor;

const AU_CODES: &[&str] = &[
    "AU1", "AU2", "AU4", "AU5", "AU6", "AU7", "AU9", "AU10", "AU12", "AU14", "AU15", "AU17",
    "AU20", "AU23", "AU24", "AU25",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub task_scheme: TaskScheme,
    pub num_aus: usize,
    /// Distinct AU vectors in use.
    pub num_patterns: usize,
    pub hard_proportion: f64,
    /// Sampled frames; flow tensors have `frames - 1` steps.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Peak displacement of one AU blob, in pixels.
    pub amplitude: f64,
    pub noise_std: f64,
    /// Width of the temporal bump, in frames.
    pub envelope_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            samples_per_subject: 50,
            task_scheme: TaskScheme::ThreeClass,
            num_aus: 6,
            num_patterns: 4,
            hard_proportion: 0.8,
            frames: 8,
            height: 16,
            width: 16,
            amplitude: 1.0,
            noise_std: 0.1,
            envelope_width: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSummary {
    pub seed: u64,
    pub requested_hard_proportion: f64,
    pub realized_hard_proportion: f64,
    pub hard_count: usize,
    pub noise_std: f64,
}

/// Pattern and class bookkeeping decided before any tensor is drawn.
struct Plan {
    shared: usize,
    classes: Vec<usize>,
    patterns: Vec<usize>,
}

fn plan(cfg: &SynthConfig) -> Result<Plan> {
    let n = cfg.subjects * cfg.samples_per_subject;
    let c = cfg.task_scheme.num_classes();
    let p = cfg.hard_proportion;
    let infeasible = |msg: String| Err(MednError::InfeasibleConfig(msg));
    if !(0.0..=1.0).contains(&p) {
        return Err(MednError::InvalidConfig(format!(
            "hard proportion {p} is outside [0, 1]"
        )));
    }
    if cfg.subjects == 0
        || cfg.samples_per_subject == 0
        || cfg.frames < 2
        || cfg.height == 0
        || cfg.width == 0
    {
        return Err(MednError::InvalidConfig(
            "synthetic dims and counts must be positive (frames >= 2)".into(),
        ));
    }
    if cfg.num_aus == 0 || cfg.num_aus >= usize::BITS as usize {
        return Err(MednError::InvalidConfig(format!(
            "unsupported AU count {}",
            cfg.num_aus
        )));
    }
    if cfg.num_patterns > (1usize << cfg.num_aus) - 1 {
        return infeasible(format!(
            "{} AUs allow at most {} distinct non-empty patterns",
            cfg.num_aus,
            (1usize << cfg.num_aus) - 1
        ));
    }
    // Bresenham-style interleave so hard samples spread evenly across subjects.
    let is_hard: Vec<bool> = (0..n)
        .map(|g| ((g + 1) as f64 * p).floor() > (g as f64 * p).floor())
        .collect();
    let n_hard = is_hard.iter().filter(|&&h| h).count();
    let n_easy = n - n_hard;
    if n_hard > 0 && c < 2 {
        return infeasible("hard samples need at least two classes".into());
    }
    if n_hard == 1 {
        return infeasible(format!(
            "proportion {p} of {n} samples yields a single hard sample"
        ));
    }
    // Exclusive patterns: one per class, needed only if easy samples exist.
    let exclusive = if n_easy > 0 { c } else { 0 };
    if cfg.num_patterns < exclusive + usize::from(n_hard > 0) {
        return infeasible(format!(
            "{} patterns cannot provide {} class-exclusive patterns plus a shared one",
            cfg.num_patterns, exclusive
        ));
    }
    let shared = if n_hard > 0 {
        (cfg.num_patterns - exclusive).min(n_hard / 2)
    } else {
        0
    };
    let (mut hi, mut ei) = (0usize, 0usize);
    let mut classes = Vec::with_capacity(n);
    let mut patterns = Vec::with_capacity(n);
    for &h in &is_hard {
        if h {
            patterns.push(hi % shared);
            classes.push((hi / shared) % c);
            hi += 1;
        } else {
            let class = ei % c;
            classes.push(class);
            patterns.push(cfg.num_patterns - exclusive + class);
            ei += 1;
        }
    }
    Ok(Plan {
        shared,
        classes,
        patterns,
    })
}

fn au_vocabulary(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            AU_CODES
                .get(i)
                .map_or_else(|| format!("AU{}", 100 + i), |s| s.to_string())
        })
        .collect()
}

/// Temporal envelope of `class`: a circular bump shifted by
/// `round(class * steps / classes)` frames.
pub fn class_envelope(class: usize, classes: usize, steps: usize, width: f64) -> Vec<f64> {
    let shift = ((class * steps) as f64 / classes as f64).round() as usize;
    let center = 1 % steps;
    (0..steps)
        .map(|t| {
            let d = (t + steps - shift % steps + steps - center) % steps;
            let d = d.min(steps - d) as f64;
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Builds a dataset in memory; pure in `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let plan = plan(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, steps) = (cfg.height, cfg.width, cfg.frames - 1);
    let c = cfg.task_scheme.num_classes();

    let mut codes = HashSet::new();
    let mut pattern_bits = Vec::with_capacity(cfg.num_patterns);
    while pattern_bits.len() < cfg.num_patterns {
        let code = rng.random_range(1..(1u64 << cfg.num_aus));
        if codes.insert(code) {
            pattern_bits.push(AuVector::new(
                (0..cfg.num_aus).map(|a| code >> a & 1 == 1).collect(),
            ));
        }
    }

    let sigma = 0.15 * h.min(w) as f64 + 0.5;
    let blobs: Vec<Vec<f64>> = (0..cfg.num_aus)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8) * h as f64;
            let cx = rng.random_range(0.2..0.8) * w as f64;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let mut field = vec![0.0; 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let g = cfg.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    field[y * w + x] = g * theta.cos();
                    field[h * w + y * w + x] = g * theta.sin();
                }
            }
            field
        })
        .collect();
    let templates: Vec<Vec<f64>> = pattern_bits
        .iter()
        .map(|bits| {
            let mut t = vec![0.0; 2 * h * w];
            for (a, _) in bits.bits().iter().enumerate().filter(|(_, &on)| on) {
                t.iter_mut().zip(&blobs[a]).for_each(|(v, b)| *v += b);
            }
            t
        })
        .collect();
    let envelopes: Vec<Vec<f64>> = (0..c)
        .map(|k| class_envelope(k, c, steps, cfg.envelope_width))
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| MednError::InvalidConfig(e.to_string()))?;
    let mut records = Vec::new();
    let mut flows = Vec::new();
    for (g, (&class, &pattern)) in plan.classes.iter().zip(&plan.patterns).enumerate() {
        let subject = g / cfg.samples_per_subject;
        let k = g % cfg.samples_per_subject;
        let sample_id = format!("sub{subject:02}_{k:04}");
        let raw = cfg.task_scheme.raw_names(class);
        let mut data = Vec::with_capacity(steps * 2 * h * w);
        for &e in &envelopes[class] {
            for &v in &templates[pattern] {
                let x = e * v + noise.sample(&mut rng);
                data.push(x as f32 as f64);
            }
        }
        flows.push(Tensor::from_vec(&[steps, 2, h, w], data)?);
        records.push(RecordHeader {
            path: format!("tensors/{sample_id}.bin"),
            sample_id,
            subject_id: format!("sub{subject:02}"),
            emotion_raw: raw[k % raw.len()].to_string(),
            au_bits: pattern_bits[pattern].to_bit_string(),
        });
    }

    let aus: Vec<AuVector> = plan
        .patterns
        .iter()
        .map(|&p| pattern_bits[p].clone())
        .collect();
    let audit = hard_flags(&aus, &plan.classes)?;
    debug_assert!(plan.shared == 0 || audit.hard_count > 0);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        task_scheme: cfg.task_scheme,
        dims: Dims {
            t: cfg.frames,
            c: 2,
            h,
            w,
        },
        au_vocabulary: au_vocabulary(cfg.num_aus),
        records,
        synthetic: Some(SynthSummary {
            seed,
            requested_hard_proportion: cfg.hard_proportion,
            realized_hard_proportion: audit.proportion,
            hard_count: audit.hard_count,
            noise_std: cfg.noise_std,
        }),
    };
    Dataset::from_parts(manifest, flows)
}
