//! Variant-dependent wiring of the text branch, knowledge mining block and
//! vision branch, plus one batch of forward/backward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::{check_norms, cosine_logits};
use crate::autograd::{softmax_rows, Gradients, Graph, ParamId, ParamStore, Var};
use crate::dataset::synth::mix_seed;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Matrix;
use crate::text::{
    encode_teacher, encode_teacher_graph, LightweightHead, StudentPromptSet, TeacherPromptGroup, TextEncoder, TextEncoderConfig, Vocabulary,
    SPECIFIC_CLASSES, UNIFIED_CLASSES,
};
use crate::ukm::{concat_complete_graph, ufm_loss_graph, FusionBlock};
use crate::vision::{VisionConfig, VisualEncoder};

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub student: StudentPromptSet,
    pub head: LightweightHead,
    pub teacher: TeacherPromptGroup,
    pub fusion: FusionBlock,
    pub vision: VisualEncoder,
}

/// Text-side graph outputs of one step.
pub struct TextOutputs {
    /// `[c_u × d]`, the labelled features images are compared against.
    pub class_features: Var,
    pub ufm: Option<Var>,
}

/// One training example, already patchified.
#[derive(Clone, Debug)]
pub struct Example {
    pub sample_id: String,
    pub label: crate::dataset::Label,
    pub patches: Matrix,
}

#[derive(Debug)]
pub struct BatchOutput {
    /// Mean cross-entropy over the batch.
    pub cls: f64,
    /// UFM value, `0` when the variant has no UFM term.
    pub ufm: f64,
    pub correct: usize,
    pub grads: Gradients,
}

impl Model {
    /// Every module is always allocated so that one seed gives the same
    /// initial values to the parameters shared by all variants.
    pub fn new(config: &TrainConfig, image_size: usize) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, INIT_STREAM]));
        let mut store = ParamStore::new();
        let vocab = Vocabulary::standard();
        let d = config.width;
        let text_cfg = TextEncoderConfig {
            width: d,
            embed_dim: d,
            layers: config.layers,
            heads: config.heads,
            context_len: config.context_len,
        };
        let text = TextEncoder::new(&mut store, vocab.len(), text_cfg, &mut rng);
        let classes: &[&str] =
            if config.variant.uses_head() || !config.variant.uses_student() { &SPECIFIC_CLASSES } else { &UNIFIED_CLASSES };
        let student = StudentPromptSet::new(&mut store, config.num_context, d, classes, &vocab, &mut rng)?;
        let head = LightweightHead::new(&mut store, UNIFIED_CLASSES.len(), SPECIFIC_CLASSES.len(), d);
        let teacher = TeacherPromptGroup::first(config.num_teachers)?;
        let fusion = FusionBlock::new(&mut store, d, d, &mut rng);
        let vision_cfg = VisionConfig {
            image_size,
            patch_size: config.patch_size,
            width: d,
            layers: config.layers,
            heads: config.heads,
            embed_dim: d,
            prompt_slots: config.num_context,
        };
        let vision = VisualEncoder::new(&mut store, vision_cfg, d, &mut rng)?;
        let model = Self { config: config.clone(), vocab, text, student, head, teacher, fusion, vision };
        Ok((model, store))
    }

    pub fn text_params(&self) -> Vec<ParamId> {
        self.text.params()
    }

    /// Builds the text side: class features and, when wired, the UFM term.
    pub fn text_forward(&self, g: &mut Graph) -> Result<TextOutputs> {
        self.text_forward_with(g, None)
    }

    /// Teacher anchors as plain matrices, `None` when the variant has none.
    pub fn teacher_anchors(&self, store: &ParamStore) -> Result<Option<Vec<Matrix>>> {
        if !self.config.variant.uses_teacher() {
            return Ok(None);
        }
        encode_teacher(&self.teacher, store, &self.text, &self.vocab).map(Some)
    }

    /// As [`text_forward`](Self::text_forward), optionally with the teacher
    /// anchors supplied from outside instead of encoded on this tape. Anchors
    /// are constants either way.
    pub fn text_forward_with(&self, g: &mut Graph, fixed_anchors: Option<&[Matrix]>) -> Result<TextOutputs> {
        let v = self.config.variant;
        let teacher_means = |g: &mut Graph, anchors: &[Var]| {
            let means: Vec<Var> = anchors.iter().map(|&a| g.mean_rows(a)).collect();
            g.concat_rows(&means)
        };
        let anchors = match (v.uses_teacher(), fixed_anchors) {
            (false, _) => None,
            (true, Some(fixed)) => Some(fixed.iter().map(|a| g.constant(a.clone())).collect::<Vec<_>>()),
            (true, None) => {
                let raw = encode_teacher_graph(g, &self.teacher, &self.text, &self.vocab)?;
                Some(raw.into_iter().map(|a| g.detach(a)).collect())
            }
        };
        if !v.uses_student() {
            let anchors = anchors.expect("teacher-only wiring has anchors");
            return Ok(TextOutputs { class_features: teacher_means(g, &anchors), ufm: None });
        }
        let student = self.student.encode_graph(g, &self.text)?;
        if !v.uses_head() {
            return Ok(TextOutputs { class_features: student, ufm: None });
        }
        let head_out = self.head.forward(g, student);
        match (&anchors, v.uses_ufm()) {
            (Some(anchors), true) => {
                let complete = concat_complete_graph(g, anchors, head_out)?;
                let fused = self.fusion.forward(g, &complete);
                check_norms(g.value(fused), "fused feature")?;
                let ufm = ufm_loss_graph(g, fused, anchors);
                Ok(TextOutputs { class_features: head_out, ufm: Some(ufm) })
            }
            (Some(anchors), false) => {
                let means = teacher_means(g, anchors);
                Ok(TextOutputs { class_features: g.add(head_out, means), ufm: None })
            }
            (None, _) => Ok(TextOutputs { class_features: head_out, ufm: None }),
        }
    }

    /// Class features as a plain `[c_u × d]` matrix.
    pub fn class_features(&self, store: &ParamStore) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let out = self.text_forward(&mut g)?;
        Ok(g.value(out.class_features).clone())
    }

    /// `[1 × d]` image feature of one patchified example.
    pub fn image_feature(&self, g: &mut Graph, patches: &Matrix) -> Var {
        let ctx = self.config.variant.uses_visual_prompts().then(|| g.param(self.student.context));
        self.vision.forward_patches(g, patches.clone(), ctx)
    }

    /// `(f_v, logits)` for one example against fixed class features.
    pub fn predict(&self, store: &ParamStore, class_features: &Matrix, patches: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new(store);
        let f = self.image_feature(&mut g, patches);
        check_norms(g.value(f), "image feature")?;
        let c = g.constant(class_features.clone());
        let logits = cosine_logits(&mut g, f, c, self.config.temperature);
        Ok((g.value(f).clone(), g.value(logits).clone()))
    }

    /// Live-class softmax probability.
    pub fn live_score(logits: &Matrix) -> f64 {
        softmax_rows(logits).get(0, 0)
    }

    /// Loss and gradients of `cls + λ·ufm` over one batch.
    ///
    /// The text side runs once; each example gets its own vision tape with the
    /// class features as a constant leaf, and the summed gradient with respect
    /// to that leaf is fed back into the text tape as a seed.
    pub fn batch(&self, store: &ParamStore, batch: &[&Example]) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut text_graph = Graph::new(store);
        let text = self.text_forward(&mut text_graph)?;
        let class_features = text_graph.value(text.class_features).clone();
        check_norms(&class_features, "class feature")?;
        let scale = 1.0 / batch.len() as f64;
        let temperature = self.config.temperature;

        let per_sample = parallel::map(self.config.execution, batch, |ex| -> Result<_> {
            let mut g = Graph::new(store);
            let f = self.image_feature(&mut g, &ex.patches);
            check_norms(g.value(f), &format!("image feature of {}", ex.sample_id))?;
            let c = g.constant(class_features.clone());
            let logits = cosine_logits(&mut g, f, c, temperature);
            let y = super::loss::class_index(ex.label);
            let loss = g.cross_entropy(logits, &[y]);
            let l = g.value(logits);
            let predicted = if l.get(0, 0) >= l.get(0, 1) { 0 } else { 1 };
            let bp = g.backward(&[(loss, Matrix::scalar(scale))]);
            let cf_grad = bp.grad(c).cloned().unwrap_or_else(|| Matrix::zeros(class_features.rows(), class_features.cols()));
            Ok((g.value(loss).get(0, 0), predicted == y, g.param_grads(&bp), cf_grad))
        });

        let mut grads = Gradients::new(store.len());
        let mut cf_grad = Matrix::zeros(class_features.rows(), class_features.cols());
        let mut cls = 0.0;
        let mut correct = 0;
        for r in per_sample {
            let (loss, ok, g, c) = r?;
            cls += loss * scale;
            correct += ok as usize;
            grads.merge(&g);
            cf_grad.add_assign(&c);
        }

        let mut seeds = vec![(text.class_features, cf_grad)];
        let mut ufm = 0.0;
        if let Some(u) = text.ufm {
            ufm = text_graph.value(u).get(0, 0);
            seeds.push((u, Matrix::scalar(self.config.lambda)));
        }
        let bp = text_graph.backward(&seeds);
        grads.merge(&text_graph.param_grads(&bp));
        Ok(BatchOutput { cls, ufm, correct, grads })
    }

    /// `cls + λ·ufm` without gradients; `anchors` as in
    /// [`text_forward_with`](Self::text_forward_with).
    pub fn batch_objective(&self, store: &ParamStore, batch: &[&Example], anchors: Option<&[Matrix]>) -> Result<f64> {
        let mut g = Graph::new(store);
        let text = self.text_forward_with(&mut g, anchors)?;
        let cf = g.value(text.class_features).clone();
        let ufm = text.ufm.map_or(0.0, |u| g.value(u).get(0, 0));
        let mut cls = 0.0;
        for ex in batch {
            let (_, logits) = self.predict(store, &cf, &ex.patches)?;
            let y = super::loss::class_index(ex.label);
            let m = logits.row(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.row(0).iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            cls += lse - logits.get(0, y);
        }
        Ok(super::loss::total_loss(cls / batch.len() as f64, ufm, self.config.lambda))
    }
}
