use std::io::Write;

use crate::data_model::Dataset;
use crate::error::{MednError, Result};
use crate::motion_branch::BackboneFactory;
use crate::training::{new_graph, Checkpoint, Prepared};

/// Per-sample features for external plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub class: usize,
    pub motion_perp: Vec<f64>,
    pub emotion_perp: Vec<f64>,
    pub fusion: Vec<f64>,
    pub alpha: f64,
}

pub fn export_features(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    external: Option<&BackboneFactory>,
) -> Result<Vec<FeatureRow>> {
    ckpt.check_dataset(dataset)?;
    if !ckpt.config.components.emotion_branch {
        return Err(MednError::ShapeMismatch(
            "checkpoint has no emotion branch, so there are no decoupled features".into(),
        ));
    }
    let model = ckpt.model(external)?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let prepared = Prepared::new(dataset, &ckpt.stats);
    let d = ckpt.config.feature_dim;
    let mut rows = Vec::with_capacity(dataset.len());
    for idx in indices.chunks(ckpt.config.optim.batch_size.max(1)) {
        let g = new_graph(&ckpt.config);
        let p = ckpt.params.bind_frozen(&g);
        let out = model.forward(&p, g.constant(prepared.batch(idx)));
        let dec = out.decoupled.expect("emotion branch present");
        let (mp, ep, fu, al) = (
            dec.motion_perp.value(),
            dec.emotion_perp.value(),
            out.head_input.value(),
            dec.alpha.value(),
        );
        for (k, &i) in idx.iter().enumerate() {
            let s = &dataset.samples[i];
            rows.push(FeatureRow {
                sample_id: s.sample_id.clone(),
                class: s.emotion.class_id,
                motion_perp: mp.data()[k * d..(k + 1) * d].to_vec(),
                emotion_perp: ep.data()[k * d..(k + 1) * d].to_vec(),
                fusion: fu.data()[k * d..(k + 1) * d].to_vec(),
                alpha: al.data()[k],
            });
        }
    }
    Ok(rows)
}

/// Columns: `sample_id, class, m_perp_*, e_perp_*, fusion_*`.
pub fn write_features_csv<W: Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = rows.first().map_or(0, |r| r.fusion.len());
    let mut header = vec!["sample_id".to_string(), "class".to_string()];
    for prefix in ["m_perp", "e_perp", "fusion"] {
        header.extend((0..d).map(|i| format!("{prefix}_{i}")));
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone(), r.class.to_string()];
        for v in r.motion_perp.iter().chain(&r.emotion_perp).chain(&r.fusion) {
            rec.push(v.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
