//! Text branch: vocabulary, teacher/student prompts, the text transformer and
//! the lightweight head that maps specific-class features to unified classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, LayerNorm, TransformerBlock};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Initial standard deviation of token, positional and context vectors.
pub const EMBED_STD: f64 = 0.5;

/// Manual templates; `{}` marks the class-name slot.
pub const TEACHER_TEMPLATES: [&str; 8] = [
    "This photo contains {}.",
    "There is a {} in this photo.",
    "{} is in this photo.",
    "A photo of a {}.",
    "This is an example of a {}.",
    "This is how a {} looks like.",
    "This is an image of {}.",
    "The picture is a {}.",
];

/// Unified classes, live first. Class index 0 is the live class throughout.
pub const UNIFIED_CLASSES: [&str; 2] = ["live face", "spoof face"];
pub const SPECIFIC_CLASSES: [&str; 3] = ["real face", "digital attack", "physical attack"];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over every template and class-name word.
    pub fn standard() -> Self {
        let mut texts: Vec<String> = TEACHER_TEMPLATES.iter().map(|t| t.replace("{}", "")).collect();
        texts.extend(UNIFIED_CLASSES.iter().chain(&SPECIFIC_CLASSES).map(|s| s.to_string()));
        Self::from_texts(texts.iter().map(String::as_str))
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let token_to_id = set.into_iter().enumerate().map(|(i, w)| (w, i + 3)).collect();
        Self { token_to_id }
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.token_to_id.get(word).copied().ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    /// Word ids without specials or padding.
    pub fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// `[BOS, ids…, EOS]` padded with `PAD` to `context_len`.
    pub fn tokenize(&self, text: &str, context_len: usize) -> Result<Vec<usize>> {
        let ids = self.word_ids(text)?;
        if ids.len() + 2 > context_len {
            return Err(Error::Length { len: ids.len() + 2, max: context_len });
        }
        let mut out = Vec::with_capacity(context_len);
        out.push(BOS);
        out.extend(ids);
        out.push(EOS);
        out.resize(context_len, PAD);
        Ok(out)
    }

    /// `token<TAB>id` lines sorted by token.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, id) in [("<bos>", BOS), ("<eos>", EOS), ("<pad>", PAD)] {
            writeln!(s, "{t}\t{id}").unwrap();
        }
        for (t, id) in &self.token_to_id {
            writeln!(s, "{t}\t{id}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut token_to_id = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (tok, id) =
                line.split_once('\t').ok_or_else(|| Error::Format(format!("bad vocabulary line `{line}`")))?;
            let id: usize = id.trim().parse().map_err(|_| Error::Format(format!("bad id in `{line}`")))?;
            if !tok.starts_with('<') {
                token_to_id.insert(tok.to_string(), id);
            }
        }
        let mut ids: Vec<usize> = token_to_id.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id != i + 3) {
            return Err(Error::Format("vocabulary ids are not dense".into()));
        }
        Ok(Self { token_to_id })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherPromptGroup {
    pub templates: Vec<String>,
    pub unified_classes: Vec<String>,
    /// `rendered[g][c]`.
    pub rendered: Vec<Vec<String>>,
}

impl TeacherPromptGroup {
    pub fn new(templates: Vec<String>, unified_classes: Vec<String>) -> Result<Self> {
        if templates.is_empty() || templates.len() > TEACHER_TEMPLATES.len() {
            return Err(Error::Config(format!("{} teacher templates; expected 1..=8", templates.len())));
        }
        let rendered = templates
            .iter()
            .map(|t| {
                unified_classes
                    .iter()
                    .map(|c| {
                        if t.contains("{}") {
                            Ok(t.replace("{}", c))
                        } else {
                            Err(Error::Config(format!("template `{t}` has no class slot")))
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { templates, unified_classes, rendered })
    }

    /// The first `g` templates (T1..Tg) over the unified classes.
    pub fn first(g: usize) -> Result<Self> {
        if g == 0 || g > TEACHER_TEMPLATES.len() {
            return Err(Error::Config(format!("{g} teacher templates; expected 1..=8")));
        }
        Self::new(
            TEACHER_TEMPLATES[..g].iter().map(|s| s.to_string()).collect(),
            UNIFIED_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn num_groups(&self) -> usize {
        self.templates.len()
    }

    pub fn num_classes(&self) -> usize {
        self.unified_classes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { width: 64, embed_dim: 64, layers: 2, heads: 4, context_len: 16 }
    }
}

/// Causal transformer over token embeddings; the feature is the projected
/// output at the EOS position.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub projection: ParamId,
    pub config: TextEncoderConfig,
    mask: Matrix,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let w = config.width;
        // embedding tables start at unit-ish scale; the pre-norm blocks make
        // the absolute scale immaterial to the forward pass
        let token_embedding = store.insert("text.token_embedding", Matrix::randn(vocab_size, w, EMBED_STD, rng));
        let positional = store.insert("text.positional", Matrix::randn(config.context_len, w, EMBED_STD, rng));
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), w, config.heads, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", w);
        let projection = store.insert(
            "text.projection",
            Matrix::randn(w, config.embed_dim, 1.0 / (w as f64).sqrt(), rng),
        );
        let mask = causal_mask(config.context_len);
        Self { token_embedding, positional, blocks, ln_final, projection, config, mask }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.token_embedding, self.positional];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_final.params());
        p.push(self.projection);
        p
    }

    /// Runs the transformer on a full `[context_len × width]` embedding
    /// sequence and returns the `[1 × embed_dim]` feature at `eos`.
    pub fn encode_embeddings(&self, g: &mut Graph, embeddings: Var, eos: usize) -> Var {
        debug_assert_eq!(g.value(embeddings).rows(), self.config.context_len);
        let pos = g.param(self.positional);
        let mut x = g.add(embeddings, pos);
        let mask = g.constant(self.mask.clone());
        for b in &self.blocks {
            x = b.forward(g, x, Some(mask));
        }
        let x = g.slice_rows(x, eos, 1);
        let x = self.ln_final.forward(g, x);
        let proj = g.param(self.projection);
        g.matmul(x, proj)
    }

    pub fn encode_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        let eos = tokens.iter().position(|&t| t == EOS).expect("tokenized sequence has EOS");
        let table = g.param(self.token_embedding);
        let emb = g.gather(table, tokens);
        self.encode_embeddings(g, emb, eos)
    }
}

/// Teacher features as graph nodes: one `[G × d]` node per unified class.
pub fn encode_teacher_graph(
    g: &mut Graph,
    group: &TeacherPromptGroup,
    encoder: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<Vec<Var>> {
    let mut per_class = Vec::with_capacity(group.num_classes());
    for c in 0..group.num_classes() {
        let mut rows = Vec::with_capacity(group.num_groups());
        for prompts in &group.rendered {
            let tokens = vocab.tokenize(&prompts[c], encoder.config.context_len)?;
            rows.push(encoder.encode_tokens(g, &tokens));
        }
        per_class.push(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) });
    }
    Ok(per_class)
}

/// Teacher features `f_tc[c]` of shape `[G × d]` for each unified class `c`.
pub fn encode_teacher(
    group: &TeacherPromptGroup,
    store: &ParamStore,
    encoder: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<Vec<Matrix>> {
    let mut g = Graph::new(store);
    let vars = encode_teacher_graph(&mut g, group, encoder, vocab)?;
    Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Learnable context shared by every specific class.
#[derive(Clone, Debug)]
pub struct StudentPromptSet {
    pub context: ParamId,
    pub class_names: Vec<String>,
    class_tokens: Vec<Vec<usize>>,
}

impl StudentPromptSet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_context: usize,
        width: usize,
        class_names: &[&str],
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        if num_context < 1 {
            return Err(Error::Config("student prompts need at least one context vector".into()));
        }
        let context = store.insert("student.context", Matrix::randn(num_context, width, EMBED_STD, rng));
        let class_tokens = class_names.iter().map(|c| vocab.word_ids(c)).collect::<Result<_>>()?;
        Ok(Self { context, class_names: class_names.iter().map(|s| s.to_string()).collect(), class_tokens })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[c_s × d]`: each row encodes `[BOS, p_1..p_N, class words, EOS]`.
    pub fn encode_graph(&self, g: &mut Graph, encoder: &TextEncoder) -> Result<Var> {
        let n = g.store().get(self.context).rows();
        let len = encoder.config.context_len;
        let ctx = g.param(self.context);
        let table = g.param(encoder.token_embedding);
        let mut rows = Vec::with_capacity(self.class_tokens.len());
        for tokens in &self.class_tokens {
            let used = 1 + n + tokens.len() + 1;
            if used > len {
                return Err(Error::Length { len: used, max: len });
            }
            let bos = g.gather(table, &[BOS]);
            let mut tail: Vec<usize> = tokens.clone();
            tail.push(EOS);
            tail.resize(len - 1 - n, PAD);
            let tail = g.gather(table, &tail);
            let seq = g.concat_rows(&[bos, ctx, tail]);
            rows.push(encoder.encode_embeddings(g, seq, used - 1));
        }
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }
}

pub fn encode_student(set: &StudentPromptSet, store: &ParamStore, encoder: &TextEncoder) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let v = set.encode_graph(&mut g, encoder)?;
    Ok(g.value(v).clone())
}

/// `H: R^{c_s × d} → R^{c_u × d}` realised as class-axis mixing plus bias.
#[derive(Clone, Debug)]
pub struct LightweightHead {
    pub mix: ParamId,
    pub bias: ParamId,
}

impl LightweightHead {
    /// Starts as the natural selector: real face → live, both attack
    /// families → spoof.
    pub fn new(store: &mut ParamStore, unified: usize, specific: usize, dim: usize) -> Self {
        let mut mix = Matrix::zeros(unified, specific);
        if unified == 2 && specific == 3 {
            mix.set(0, 0, 1.0);
            mix.set(1, 1, 0.5);
            mix.set(1, 2, 0.5);
        } else {
            for i in 0..unified.min(specific) {
                mix.set(i, i, 1.0);
            }
        }
        Self {
            mix: store.insert("head.mix", mix),
            bias: store.insert("head.bias", Matrix::zeros(unified, dim)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.mix, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, student: Var) -> Var {
        let mix = g.param(self.mix);
        let mixed = g.matmul(mix, student);
        let bias = g.param(self.bias);
        g.add(mixed, bias)
    }
}

/// `out[u] = bias[u] + Σ_s mix[u][s] · student[s]`.
pub fn apply_head(student: &Matrix, mix: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if mix.cols() != student.rows() || bias.shape() != (mix.rows(), student.cols()) {
        return Err(Error::Contract(format!(
            "head shapes: student {:?}, mix {:?}, bias {:?}",
            student.shape(),
            mix.shape(),
            bias.shape()
        )));
    }
    let mut out = mix.matmul(student);
    out.add_assign(bias);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, TextEncoder, Vocabulary) {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, vocab.len(), TextEncoderConfig::default(), &mut rng);
        (store, enc, vocab)
    }

    #[test]
    fn tokenize_empty_and_determinism() {
        let v = Vocabulary::standard();
        let t = v.tokenize("", 16).unwrap();
        assert_eq!(&t[..3], &[BOS, EOS, PAD]);
        assert!(t[2..].iter().all(|&x| x == PAD));
        assert_eq!(v.tokenize("a photo of a spoof face", 16).unwrap(), v.tokenize("a photo of a spoof face", 16).unwrap());
    }

    #[test]
    fn t4_live_prompt_token_count_is_frozen() {
        let v = Vocabulary::standard();
        let group = TeacherPromptGroup::first(4).unwrap();
        let t = v.tokenize(&group.rendered[3][0], 16).unwrap();
        let used = t.iter().filter(|&&x| x != PAD).count();
        // BOS a photo of a live face EOS
        assert_eq!(used, 8);
    }

    #[test]
    fn out_of_vocabulary_word_is_named() {
        let err = Vocabulary::standard().tokenize("a photo of a cat", 16).unwrap_err();
        assert_eq!(err.to_string(), "vocabulary error: unknown word `cat`");
    }

    #[test]
    fn vocabulary_covers_prompts_and_is_dense() {
        let v = Vocabulary::standard();
        for g in &TeacherPromptGroup::first(8).unwrap().rendered {
            for p in g {
                v.tokenize(p, 16).unwrap();
            }
        }
        for c in SPECIFIC_CLASSES {
            v.word_ids(c).unwrap();
        }
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn overlong_prompt_is_length_error() {
        let v = Vocabulary::standard();
        let err = v.tokenize("this is how a live face looks like", 8).unwrap_err();
        assert_eq!(err.kind(), "length");
    }

    #[test]
    fn rendered_prompt_replaces_slot() {
        let g = TeacherPromptGroup::first(8).unwrap();
        assert_eq!(g.rendered[0][1], "This photo contains spoof face.");
        assert_eq!(g.rendered[3][0], "A photo of a live face.");
        assert!(TeacherPromptGroup::first(9).is_err());
    }

    #[test]
    fn teacher_shapes_duplicates_and_permutation() {
        let (store, enc, vocab) = setup();
        let one = encode_teacher(&TeacherPromptGroup::first(1).unwrap(), &store, &enc, &vocab).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].shape(), (1, 64));

        let t: Vec<String> = TEACHER_TEMPLATES.iter().map(|s| s.to_string()).collect();
        let classes: Vec<String> = UNIFIED_CLASSES.iter().map(|s| s.to_string()).collect();
        let dup = TeacherPromptGroup::new(vec![t[3].clone(), t[0].clone(), t[3].clone()], classes.clone()).unwrap();
        let f = encode_teacher(&dup, &store, &enc, &vocab).unwrap();
        for c in 0..2 {
            assert_eq!(f[c].row(0), f[c].row(2));
            assert!(f[c].row(0).iter().any(|v| *v != 0.0) && f[c].is_finite());
        }
        let perm = TeacherPromptGroup::new(vec![t[0].clone(), t[3].clone(), t[3].clone()], classes).unwrap();
        let fp = encode_teacher(&perm, &store, &enc, &vocab).unwrap();
        for c in 0..2 {
            assert_eq!(fp[c].row(0), f[c].row(1));
            assert_eq!(fp[c].row(1), f[c].row(0));
        }
    }

    #[test]
    fn student_shape_and_determinism() {
        let (mut store, enc, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = StudentPromptSet::new(&mut store, 8, 64, &SPECIFIC_CLASSES, &vocab, &mut rng).unwrap();
        *store.get_mut(set.context) = Matrix::zeros(8, 64);
        let a = encode_student(&set, &store, &enc).unwrap();
        let b = encode_student(&set, &store, &enc).unwrap();
        assert_eq!(a.shape(), (3, 64));
        assert_eq!(a, b);
    }

    #[test]
    fn student_context_gradient_matches_finite_difference() {
        let (mut store, enc, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = StudentPromptSet::new(&mut store, 8, 64, &SPECIFIC_CLASSES, &vocab, &mut rng).unwrap();
        // scalar: weighted sum of all student features
        let weights = Matrix::randn(3, 64, 1.0, &mut rng);
        let objective = |s: &ParamStore| {
            let f = encode_student(&set, s, &enc).unwrap();
            f.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new(&store);
        let f = set.encode_graph(&mut g, &enc).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(f, w);
        let out = g.sum_all(prod);
        let bp = g.backward(&[(out, Matrix::scalar(1.0))]);
        let analytic = g.param_grads(&bp).get(set.context).unwrap().get(0, 0);
        let h = 1e-3;
        let mut plus = store.clone();
        plus.get_mut(set.context).as_mut_slice()[0] += h;
        let mut minus = store.clone();
        minus.get_mut(set.context).as_mut_slice()[0] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(rel < 1e-4, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn head_selector_zero_and_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Matrix::randn(3, 5, 1.0, &mut rng);
        let sel = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let zero_bias = Matrix::zeros(2, 5);
        assert_eq!(apply_head(&f, &sel, &zero_bias).unwrap(), f.slice_rows(0, 2));
        let bias = Matrix::randn(2, 5, 1.0, &mut rng);
        assert_eq!(apply_head(&f, &Matrix::zeros(2, 3), &bias).unwrap(), bias);

        let h = Matrix::randn(2, 3, 1.0, &mut rng);
        let out = apply_head(&f, &h, &bias).unwrap();
        for j in 0..5 {
            let expected = bias.get(0, j) + h.get(0, 0) * f.get(0, j) + h.get(0, 1) * f.get(1, j) + h.get(0, 2) * f.get(2, j);
            assert!((out.get(0, j) - expected).abs() < 1e-12);
        }
        assert_eq!(apply_head(&f.slice_rows(0, 2), &h, &bias).unwrap_err().kind(), "contract");
    }
}
