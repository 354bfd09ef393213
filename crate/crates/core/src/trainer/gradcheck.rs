//! Central finite differences against backprop, per parameter group.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::model::{Example, Model};
use super::load_examples;
use crate::autograd::{Graph, ParamId, ParamStore};
use crate::dataset::{build_manifest, AttackMethod, SynthConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const STEP: f64 = 1e-3;
/// Logit temperature of the check point. A soft temperature keeps the
/// truncation error of [`STEP`] well below the tolerance.
pub const TEMPERATURE: f64 = 1.0;
pub const COORDINATES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// The head alone under a linear objective.
    Head,
    StudentContext,
    TextTower,
    Fusion,
    Projector,
    VisionTower,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Head,
        Component::StudentContext,
        Component::TextTower,
        Component::Fusion,
        Component::Projector,
        Component::VisionTower,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Head => "head",
            Component::StudentContext => "student_context",
            Component::TextTower => "text_tower",
            Component::Fusion => "fusion",
            Component::Projector => "projector",
            Component::VisionTower => "vision_tower",
        }
    }

    fn params(self, model: &Model) -> Vec<ParamId> {
        match self {
            Component::Head => model.head.params(),
            Component::StudentContext => vec![model.student.context],
            Component::TextTower => model.text.params(),
            Component::Fusion => model.fusion.params(),
            Component::Projector => model.vision.projector.params(),
            Component::VisionTower => model.vision.tower_params(),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown component `{s}`")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Default full model at `seed` and a two-image batch (one live, one print).
pub fn fixture(seed: u64, temperature: f64) -> Result<(Model, ParamStore, Vec<Example>)> {
    let config = TrainConfig { seed, temperature, ..Default::default() };
    let synth = SynthConfig {
        num_ids: 1,
        frames_per_video: 1,
        seed,
        methods: vec![AttackMethod::None, AttackMethod::PrintIndoor],
        ..Default::default()
    };
    let manifest = build_manifest(&synth)?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.sample_id.clone()).collect();
    let examples = load_examples(&manifest, &ids, &config)?;
    let (model, store) = Model::new(&config, synth.image_size)?;
    Ok((model, store, examples))
}

/// Samples `COORDINATES` coordinates of `component` and compares central
/// differences of step [`STEP`] with backprop; returns the worst relative error.
pub fn gradcheck(component: Component, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(component, seed, STEP, TEMPERATURE)
}

/// Teacher anchors are held at their values at the check point, matching the
/// stop-gradient used in training.
pub fn gradcheck_with(component: Component, seed: u64, step: f64, temperature: f64) -> Result<GradcheckReport> {
    let (model, store, examples) = fixture(seed, temperature)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);

    // the head is checked in isolation against a fixed linear objective
    let student = crate::text::encode_student(&model.student, &store, &model.text)?;
    let weights = Matrix::randn(2, model.config.width, 1.0, &mut rng);
    let head_objective = |s: &ParamStore| -> f64 {
        let out = crate::text::apply_head(&student, s.get(model.head.mix), s.get(model.head.bias)).expect("head shapes");
        out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
    };

    let analytic = if component == Component::Head {
        let mut g = Graph::new(&store);
        let s = g.constant(student.clone());
        let out = model.head.forward(&mut g, s);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w);
        let total = g.sum_all(prod);
        let bp = g.backward(&[(total, Matrix::scalar(1.0))]);
        g.param_grads(&bp)
    } else {
        model.batch(&store, &batch)?.grads
    };
    let anchors = model.teacher_anchors(&store)?;
    let objective = |s: &ParamStore| -> Result<f64> {
        if component == Component::Head {
            Ok(head_objective(s))
        } else {
            model.batch_objective(s, &batch, anchors.as_deref())
        }
    };

    let params = component.params(&model);
    let sizes: Vec<usize> = params.iter().map(|&p| store.get(p).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probes = Vec::with_capacity(COORDINATES);
    let mut work = store.clone();
    for _ in 0..COORDINATES {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = params[which];
        let cols = store.get(id).cols();
        let (row, col) = (k / cols, k % cols);
        let original = store.get(id).get(row, col);
        work.get_mut(id).set(row, col, original + step);
        let plus = objective(&work)?;
        work.get_mut(id).set(row, col, original - step);
        let minus = objective(&work)?;
        work.get_mut(id).set(row, col, original);
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get(id).map_or(0.0, |g| g.get(row, col));
        probes.push(Probe {
            param: store.name(id).to_string(),
            row,
            col,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { component, max_rel_error, probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_matches_finite_differences() {
        for c in Component::ALL {
            let r = gradcheck(c, 11).unwrap();
            for p in &r.probes {
                eprintln!("{c} {} ({},{}) a={:.6e} n={:.6e} rel={:.2e}", p.param, p.row, p.col, p.analytic, p.numeric, p.rel_error);
            }
            let bound = if c == Component::Head { 1e-8 } else { 1e-4 };
            assert!(r.max_rel_error < bound, "{c}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn training_temperature_matches_at_a_finer_step() {
        for c in [Component::StudentContext, Component::Fusion, Component::VisionTower] {
            let r = gradcheck_with(c, 5, 1e-5, 0.07).unwrap();
            assert!(r.max_rel_error < 1e-4, "{c}: {}", r.max_rel_error);
        }
    }
}
