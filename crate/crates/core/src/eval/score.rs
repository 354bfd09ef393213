//! Scoring and feature export from a saved checkpoint.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{Manifest, ProtocolSplit, SplitPart};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::trainer::{load_examples, score_examples, Checkpoint, Model};

use super::metrics::{ScoreEntry, ScoreSet};

fn prepare(checkpoint: &Checkpoint, manifest: &Manifest, execution: Execution) -> Result<Model> {
    if checkpoint.data != manifest.generator_config {
        return Err(Error::Contract("checkpoint was trained on a different generator config".into()));
    }
    let mut model = checkpoint.model()?;
    model.config.execution = execution;
    Ok(model)
}

/// Live scores for every sample of one split part, in split order.
pub fn score_split(
    checkpoint: &Checkpoint,
    manifest: &Manifest,
    split: &ProtocolSplit,
    part: SplitPart,
    execution: Execution,
) -> Result<ScoreSet> {
    let model = prepare(checkpoint, manifest, execution)?;
    let examples = load_examples(manifest, split.part(part), &model.config)?;
    Ok(score_examples(&model, &checkpoint.params, &examples)?.0)
}

impl ScoreSet {
    /// Tab-separated `sample_id label live_score` with labels as `1`/`0`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("sample_id\tlabel\tlive_score\n");
        for ScoreEntry { sample_id, label, live_score } in &self.entries {
            writeln!(s, "{sample_id}\t{}\t{live_score:.17e}", u8::from(*label)).expect("string write");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// One exported image feature.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub label: crate::dataset::Label,
    /// `live`, `physical`, `adversarial` or `deepfake`.
    pub kind: String,
    pub feature: Vec<f64>,
}

/// Image features `f_v` of one split part.
pub fn export_embeddings(
    checkpoint: &Checkpoint,
    manifest: &Manifest,
    split: &ProtocolSplit,
    part: SplitPart,
    execution: Execution,
) -> Result<Vec<EmbeddingRow>> {
    let model = prepare(checkpoint, manifest, execution)?;
    let ids = split.part(part);
    let examples = load_examples(manifest, ids, &model.config)?;
    let index = manifest.index();
    let cf = model.class_features(&checkpoint.params)?;
    parallel::map(execution, &examples, |ex| -> Result<EmbeddingRow> {
        let (f, _) = model.predict(&checkpoint.params, &cf, &ex.patches)?;
        let d = index[ex.sample_id.as_str()];
        Ok(EmbeddingRow {
            sample_id: ex.sample_id.clone(),
            label: ex.label,
            kind: d.attack.kind().as_str().to_string(),
            feature: f.into_vec(),
        })
    })
    .into_iter()
    .collect()
}

/// Tab-separated rows: `sample_id label kind f0 … f{d-1}`.
pub fn embeddings_to_text(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.feature.len());
    let mut s = String::from("sample_id\tlabel\tkind");
    for j in 0..width {
        write!(s, "\tf{j}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{}\t{}\t{}", r.sample_id, u8::from(r.label), r.kind).expect("string write");
        for v in &r.feature {
            write!(s, "\t{v:.17e}").expect("string write");
        }
        s.push('\n');
    }
    s
}
