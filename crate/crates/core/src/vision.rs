//! Vision branch: patch embedding, the prompt projector that injects student
//! context into the visual token stream, and a small vision transformer.
//!
//! Token order is `[class, patches.., prompts..]`; every slot has its own
//! positional embedding.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::tensor::Matrix;
use crate::text::EMBED_STD;

#[derive(Clone, Debug, PartialEq)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Prompt slots reserved in the positional table.
    pub prompt_slots: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 8, width: 64, layers: 2, heads: 4, embed_dim: 64, prompt_slots: 8 }
    }
}

impl VisionConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Contract(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} does not split into {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Non-overlapping `p × p` patches in row-major grid order; each row is the
/// patch flattened channel, then row, then column.
pub fn patchify(image: &Image, patch: usize) -> Result<Matrix> {
    let s = image.size();
    if patch == 0 || s % patch != 0 {
        return Err(Error::Contract(format!("image size {s} is not divisible by patch size {patch}")));
    }
    let side = s / patch;
    let mut out = Matrix::zeros(side * side, 3 * patch * patch);
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = image.get(c, py * patch + dy, px * patch + dx);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub projection: Linear,
    /// `[(1 + m + prompt_slots) × d_v]`
    pub positional: ParamId,
    pub class_token: ParamId,
    pub patch_size: usize,
    pub num_patches: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VisionConfig, rng: &mut R) -> Self {
        let m = cfg.num_patches();
        Self {
            projection: Linear::new(store, "vision.patch", cfg.patch_dim(), cfg.width, true, rng),
            positional: store.insert("vision.positional", Matrix::randn(1 + m + cfg.prompt_slots, cfg.width, EMBED_STD, rng)),
            class_token: store.insert("vision.class_token", Matrix::randn(1, cfg.width, EMBED_STD, rng)),
            patch_size: cfg.patch_size,
            num_patches: m,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.projection.params();
        p.extend([self.positional, self.class_token]);
        p
    }

    /// `[m × d_v]` patch tokens with their positional embeddings added.
    pub fn forward(&self, g: &mut Graph, patches: Var) -> Var {
        let tokens = self.projection.forward(g, patches);
        let pos = g.param(self.positional);
        let pos = g.slice_rows(pos, 1, self.num_patches);
        g.add(tokens, pos)
    }
}

/// Patch tokens of one image as a plain matrix.
pub fn patch_embed(image: &Image, embed: &PatchEmbed, store: &ParamStore) -> Result<Matrix> {
    let patches = patchify(image, embed.patch_size)?;
    if patches.rows() != embed.num_patches {
        return Err(Error::Contract(format!(
            "image gives {} patches, embedding expects {}",
            patches.rows(),
            embed.num_patches
        )));
    }
    let mut g = Graph::new(store);
    let x = g.constant(patches);
    let v = embed.forward(&mut g, x);
    Ok(g.value(v).clone())
}

/// One affine map shared by every prompt token: `[N × d_p] → [N × d_v]`.
#[derive(Clone, Debug)]
pub struct InteractionProjector {
    pub linear: Linear,
}

impl InteractionProjector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prompt_dim: usize, width: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "vision.projector", prompt_dim, width, true, rng) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }

    pub fn forward(&self, g: &mut Graph, context: Var) -> Var {
        self.linear.forward(g, context)
    }
}

pub fn project_prompts(context: &Matrix, projector: &InteractionProjector, store: &ParamStore) -> Matrix {
    let mut g = Graph::new(store);
    let x = g.constant(context.clone());
    let v = projector.forward(&mut g, x);
    g.value(v).clone()
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub embed: PatchEmbed,
    pub projector: InteractionProjector,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub projection: ParamId,
    pub config: VisionConfig,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: VisionConfig,
        prompt_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let embed = PatchEmbed::new(store, &config, rng);
        let projector = InteractionProjector::new(store, prompt_dim, w, rng);
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("vision.block{i}"), w, config.heads, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "vision.ln_final", w);
        let projection = store.insert(
            "vision.projection",
            Matrix::randn(w, config.embed_dim, 1.0 / (w as f64).sqrt(), rng),
        );
        Ok(Self { embed, projector, blocks, ln_final, projection, config })
    }

    /// Everything except the projector, which belongs to the prompt coupling.
    pub fn tower_params(&self) -> Vec<ParamId> {
        let mut p = self.embed.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_final.params());
        p.push(self.projection);
        p
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.tower_params();
        p.extend(self.projector.params());
        p
    }

    /// Transformer over `[class, V_E, V_P]`; returns the `[1 × d]` feature
    /// projected from the class-token output. `prompts` may be `None` (no
    /// prompt tokens).
    pub fn encode(&self, g: &mut Graph, patch_tokens: Var, prompts: Option<Var>) -> Var {
        let m = self.embed.num_patches;
        let pos = g.param(self.embed.positional);
        let cls = g.param(self.embed.class_token);
        let cls_pos = g.slice_rows(pos, 0, 1);
        let cls = g.add(cls, cls_pos);
        let mut parts = vec![cls, patch_tokens];
        if let Some(p) = prompts {
            let n = g.value(p).rows();
            if n > 0 {
                assert!(n <= self.config.prompt_slots, "{n} prompt tokens exceed {} slots", self.config.prompt_slots);
                let p_pos = g.slice_rows(pos, 1 + m, n);
                parts.push(g.add(p, p_pos));
            }
        }
        let mut x = g.concat_rows(&parts);
        for b in &self.blocks {
            x = b.forward(g, x, None);
        }
        let x = g.slice_rows(x, 0, 1);
        let x = self.ln_final.forward(g, x);
        let proj = g.param(self.projection);
        g.matmul(x, proj)
    }

    /// Image to `[1 × d]` feature; `context` is the student context node, or
    /// `None` to run without prompt tokens.
    pub fn forward_image(&self, g: &mut Graph, image: &Image, context: Option<Var>) -> Result<Var> {
        let patches = patchify(image, self.config.patch_size)?;
        if patches.rows() != self.embed.num_patches {
            return Err(Error::Contract(format!(
                "image size {} does not match encoder size {}",
                image.size(),
                self.config.image_size
            )));
        }
        Ok(self.forward_patches(g, patches, context))
    }

    /// As [`forward_image`](Self::forward_image) on an already patchified image.
    pub fn forward_patches(&self, g: &mut Graph, patches: Matrix, context: Option<Var>) -> Var {
        let x = g.constant(patches);
        let v_e = self.embed.forward(g, x);
        let v_p = context.map(|c| self.projector.forward(g, c));
        self.encode(g, v_e, v_p)
    }
}

/// `f_v` for one image as a plain row vector.
pub fn encode_visual(
    image: &Image,
    context: Option<&Matrix>,
    encoder: &VisualEncoder,
    store: &ParamStore,
) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let ctx = context.map(|c| g.constant(c.clone()));
    let v = encoder.forward_image(&mut g, image, ctx)?;
    Ok(g.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
        let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
        Image::new(size, data).unwrap()
    }

    fn setup(seed: u64) -> (ParamStore, VisualEncoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, VisionConfig::default(), 64, &mut rng).unwrap();
        (store, enc, rng)
    }

    #[test]
    fn sixteen_patches_and_zero_image_gives_positions() {
        let (mut store, enc, _) = setup(0);
        assert_eq!(enc.config.num_patches(), 16);
        *store.get_mut(enc.embed.projection.bias.unwrap()) = Matrix::zeros(1, 64);
        let tokens = patch_embed(&Image::zeros(32), &enc.embed, &store).unwrap();
        assert_eq!(tokens.shape(), (16, 64));
        assert_eq!(tokens, store.get(enc.embed.positional).slice_rows(1, 16));
    }

    #[test]
    fn indivisible_size_is_contract_error() {
        let err = patchify(&Image::zeros(30), 8).unwrap_err();
        assert_eq!(err.kind(), "contract");
        let cfg = VisionConfig { image_size: 30, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_five_matches_hand_unrolled_projection() {
        let (store, enc, mut rng) = setup(1);
        let img = random_image(32, &mut rng);
        let tokens = patch_embed(&img, &enc.embed, &store).unwrap();
        let w = store.get(enc.embed.projection.weight);
        let b = store.get(enc.embed.projection.bias.unwrap());
        let pos = store.get(enc.embed.positional);
        // patch 5 sits at grid row 1, column 1
        let (y0, x0) = (8, 8);
        for j in 0..64 {
            let mut acc = b.get(0, j) + pos.get(1 + 5, j);
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..8 {
                    for dx in 0..8 {
                        acc += img.get(c, y0 + dy, x0 + dx) * w.get(k, j);
                        k += 1;
                    }
                }
            }
            assert!((tokens.get(5, j) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_zero_projector_cases() {
        let (mut store, enc, mut rng) = setup(2);
        let p = &enc.projector.linear;
        *store.get_mut(p.weight) = Matrix::identity(64);
        *store.get_mut(p.bias.unwrap()) = Matrix::zeros(1, 64);
        let ctx = Matrix::randn(8, 64, 1.0, &mut rng);
        assert_eq!(project_prompts(&ctx, &enc.projector, &store), ctx);

        let bias = Matrix::randn(1, 64, 1.0, &mut rng);
        *store.get_mut(p.bias.unwrap()) = bias.clone();
        let out = project_prompts(&Matrix::zeros(8, 64), &enc.projector, &store);
        for r in 0..8 {
            assert_eq!(out.row(r), bias.row(0));
        }
    }

    #[test]
    fn projector_first_order_perturbation() {
        let (store, enc, mut rng) = setup(3);
        let ctx = Matrix::randn(8, 64, 1.0, &mut rng);
        let eps = 1e-6;
        let mut bumped = ctx.clone();
        bumped.set(0, 0, ctx.get(0, 0) + eps);
        let a = project_prompts(&ctx, &enc.projector, &store);
        let b = project_prompts(&bumped, &enc.projector, &store);
        let w = store.get(enc.projector.linear.weight);
        for j in 0..64 {
            let delta = (b.get(0, j) - a.get(0, j)) / eps;
            assert!((delta - w.get(0, j)).abs() < 1e-8);
        }
        for r in 1..8 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn output_shape_determinism_and_no_prompt_path() {
        let (store, enc, mut rng) = setup(4);
        let img = random_image(32, &mut rng);
        let ctx = Matrix::randn(8, 64, 0.1, &mut rng);
        let a = encode_visual(&img, Some(&ctx), &enc, &store).unwrap();
        assert_eq!(a.shape(), (1, 64));
        assert_eq!(a, encode_visual(&img, Some(&ctx), &enc, &store).unwrap());
        let plain = encode_visual(&img, None, &enc, &store).unwrap();
        assert_eq!(plain.shape(), (1, 64));
        assert!(plain.is_finite());
        assert_ne!(plain, a);
    }

    #[test]
    fn permuting_prompt_rows_changes_output() {
        let (store, enc, mut rng) = setup(5);
        let img = random_image(32, &mut rng);
        let ctx = Matrix::randn(8, 64, 0.5, &mut rng);
        let mut swapped = ctx.clone();
        let (r0, r1) = (ctx.row(0).to_vec(), ctx.row(1).to_vec());
        swapped.row_mut(0).copy_from_slice(&r1);
        swapped.row_mut(1).copy_from_slice(&r0);
        let a = encode_visual(&img, Some(&ctx), &enc, &store).unwrap();
        let b = encode_visual(&img, Some(&swapped), &enc, &store).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn squared_norm_gradient_flows_into_context() {
        let (mut store, enc, mut rng) = setup(6);
        let img = random_image(32, &mut rng);
        let ctx_id = store.insert("student.context", Matrix::randn(8, 64, 0.5, &mut rng));
        let objective = |s: &ParamStore| encode_visual(&img, Some(s.get(ctx_id)), &enc, s).unwrap().frobenius_sq();
        let mut g = Graph::new(&store);
        let c = g.param(ctx_id);
        let f = enc.forward_image(&mut g, &img, Some(c)).unwrap();
        let sq = g.mul(f, f);
        let out = g.sum_all(sq);
        let bp = g.backward(&[(out, Matrix::scalar(1.0))]);
        let grads = g.param_grads(&bp);
        let analytic = grads.get(ctx_id).unwrap().clone();
        assert!(analytic.frobenius_sq() > 0.0);
        for &(r, col) in &[(0, 0), (3, 17), (7, 63)] {
            let h = 1e-4;
            let mut plus = store.clone();
            let v = plus.get(ctx_id).get(r, col);
            plus.get_mut(ctx_id).set(r, col, v + h);
            let mut minus = store.clone();
            minus.get_mut(ctx_id).set(r, col, v - h);
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic.get(r, col);
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-12);
            assert!(rel < 1e-4, "({r},{col}): numeric {numeric} analytic {a}");
        }
    }
}
