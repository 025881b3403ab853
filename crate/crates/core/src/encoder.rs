//! Tiny prompt-augmented vision transformer.
//!
//! Token layout for one image is `[class; prompt; patches]`. Class and patch
//! tokens carry positional embeddings `0` and `1..=L_e`; prompt tokens carry
//! none, so a forward pass with no prompt is exactly the plain model. Blocks
//! are pre-norm (`x + attn(ln(x))`, `x + mlp(ln(x))`) and the feature vector
//! is the class-token output of the last block after a final layer norm.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{PaintError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            channels: 1,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            classes: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PaintError::EncoderConfig(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(PaintError::PatchGeometry {
                height: self.image_side,
                width: self.image_side,
                patch: self.patch,
            });
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.classes < 2 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("classes >= 2, channels >= 1 and mlp_ratio >= 1 required");
        }
        Ok(())
    }

    /// `L_e`, the number of patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// `H × W × C` image, row-major with channels innermost, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(PaintError::Dimension {
                expected: height * width * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Patch tokens `E_i`, shape `[L_e, D_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub qkv: Tensor,
    pub qkv_bias: Tensor,
    pub attn_out: Tensor,
    pub attn_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.in.weight",
    "mlp.in.bias",
    "mlp.out.weight",
    "mlp.out.bias",
];

impl BlockParams {
    fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden_dim();
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            qkv: xavier(rng, d, 3 * d),
            qkv_bias: Tensor::zeros(&[3 * d]),
            attn_out: xavier(rng, d, d),
            attn_out_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            mlp_in: xavier(rng, d, h),
            mlp_in_bias: Tensor::zeros(&[h]),
            mlp_out: xavier(rng, h, d),
            mlp_out_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.qkv,
            &self.qkv_bias,
            &self.attn_out,
            &self.attn_out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv,
            &mut self.qkv_bias,
            &mut self.attn_out,
            &mut self.attn_out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// All parameters of the encoder `F` and head `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_projection: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
    /// Number of leading blocks (`S`) updated during adaptation.
    pub trainable_blocks: usize,
}

/// Which parameters become gradient leaves when binding to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Blocks with index below the count; everything else frozen.
    ShallowBlocks(usize),
    Everything,
}

impl Trainable {
    fn block(self, index: usize) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::ShallowBlocks(s) => index < s,
            Trainable::Everything => true,
        }
    }

    fn rest(self) -> bool {
        matches!(self, Trainable::Everything)
    }
}

impl EncoderParams {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(&config, rng))
            .collect();
        Ok(Self {
            patch_projection: xavier(rng, config.patch_dim(), d),
            patch_bias: Tensor::zeros(&[d]),
            class_token: normal(rng, &[d], 0.02),
            positional: normal(rng, &[1 + config.num_patches(), d], 0.02),
            blocks,
            final_norm_gain: Tensor::filled(&[d], 1.0),
            final_norm_bias: Tensor::zeros(&[d]),
            head: xavier(rng, d, config.classes),
            head_bias: Tensor::zeros(&[config.classes]),
            trainable_blocks: config.depth.min(3),
            config,
        })
    }

    /// Every tensor with a stable dotted name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (
                "patch_projection.weight".to_string(),
                &self.patch_projection,
            ),
            ("patch_projection.bias".to_string(), &self.patch_bias),
            ("class_token".to_string(), &self.class_token),
            ("positional".to_string(), &self.positional),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{field}"), t));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm_gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm_bias));
        out.push(("head.weight".to_string(), &self.head));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_projection,
            &mut self.patch_bias,
            &mut self.class_token,
            &mut self.positional,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    /// Hex SHA-256 over all tensor bytes in checkpoint order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> EncoderVars {
        let mut leaf = |t: &Tensor, grad: bool| g.leaf(t.clone(), grad);
        let rest = trainable.rest();
        let patch_projection = leaf(&self.patch_projection, rest);
        let patch_bias = leaf(&self.patch_bias, rest);
        let class_token = leaf(&self.class_token, rest);
        let positional = leaf(&self.positional, rest);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let grad = trainable.block(i);
                let t = b.tensors();
                BlockVars {
                    ln1_gain: leaf(t[0], grad),
                    ln1_bias: leaf(t[1], grad),
                    qkv: leaf(t[2], grad),
                    qkv_bias: leaf(t[3], grad),
                    attn_out: leaf(t[4], grad),
                    attn_out_bias: leaf(t[5], grad),
                    ln2_gain: leaf(t[6], grad),
                    ln2_bias: leaf(t[7], grad),
                    mlp_in: leaf(t[8], grad),
                    mlp_in_bias: leaf(t[9], grad),
                    mlp_out: leaf(t[10], grad),
                    mlp_out_bias: leaf(t[11], grad),
                }
            })
            .collect();
        EncoderVars {
            config: self.config.clone(),
            patch_projection,
            patch_bias,
            class_token,
            positional,
            blocks,
            final_norm_gain: leaf(&self.final_norm_gain, rest),
            final_norm_bias: leaf(&self.final_norm_bias, rest),
            head: leaf(&self.head, rest),
            head_bias: leaf(&self.head_bias, rest),
        }
    }

    /// Single-image patch embedding.
    pub fn embed_patches(&self, image: &Image) -> Result<PatchEmbedding> {
        let pixels = patchify(std::slice::from_ref(image), &self.config)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::Nothing);
        let px = g.constant(pixels);
        let emb = vars.embed(&mut g, px, 1)?;
        let tokens = g
            .value(emb)
            .clone()
            .reshaped(&[self.config.num_patches(), self.config.dim])?;
        Ok(PatchEmbedding { tokens })
    }

    /// `f_i = F([P; E_i])`, `p_i = H(f_i)` for one embedded image.
    pub fn forward_prompted(
        &self,
        embedding: &PatchEmbedding,
        prompt: Option<&Tensor>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::Nothing);
        let emb =
            g.constant(
                embedding
                    .tokens
                    .clone()
                    .reshaped(&[1, cfg.num_patches(), cfg.dim])?,
            );
        let p = prompt.map(|p| g.constant(p.clone()));
        let out = vars.forward_embedded(&mut g, emb, p)?;
        Ok((
            g.value(out.features).data().to_vec(),
            g.value(out.probs).data().to_vec(),
        ))
    }

    /// Frozen query `q_i = F(E_i)`: class-token features without a prompt.
    pub fn extract_query(&self, embedding: &PatchEmbedding) -> Result<Vec<f64>> {
        Ok(self.forward_prompted(embedding, None)?.0)
    }

    /// Batched inference. Returns `([B, D_f] features, [B, K] probabilities)`.
    pub fn infer(&self, images: &[Image], prompt: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::Nothing);
        let px = g.constant(patchify(images, &self.config)?);
        let p = prompt.map(|p| g.constant(p.clone()));
        let out = vars.forward_images(&mut g, px, images.len(), p)?;
        Ok((g.value(out.features).clone(), g.value(out.probs).clone()))
    }

    /// Frozen query features for a batch, `[B, D_f]`.
    pub fn queries(&self, images: &[Image]) -> Result<Tensor> {
        Ok(self.infer(images, None)?.0)
    }
}

/// Deep copy of the pre-adaptation model used as the frozen query extractor.
pub fn snapshot_source(params: &EncoderParams) -> EncoderParams {
    params.clone()
}

/// Flattens a batch of images into `[B * L_e, patch_dim]` patch rows, patches
/// in row-major grid order and pixels row-major within a patch.
pub fn patchify(images: &[Image], cfg: &EncoderConfig) -> Result<Tensor> {
    let p = cfg.patch;
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * pd);
    for img in images {
        if img.height % p != 0
            || img.width % p != 0
            || img.height != cfg.image_side
            || img.width != cfg.image_side
        {
            return Err(PaintError::PatchGeometry {
                height: img.height,
                width: img.width,
                patch: p,
            });
        }
        if img.channels != cfg.channels {
            return Err(PaintError::ChannelCount {
                expected: cfg.channels,
                got: img.channels,
            });
        }
        if let Some(&value) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PaintError::PixelRange { value });
        }
        for py in 0..img.height / p {
            for px in 0..img.width / p {
                for y in 0..p {
                    let row = (py * p + y) * img.width + px * p;
                    data.extend_from_slice(&img.data[row * img.channels..(row + p) * img.channels]);
                }
            }
        }
    }
    Ok(Tensor::new(
        vec![images.len() * cfg.num_patches(), pd],
        data,
    )?)
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub qkv: Var,
    pub qkv_bias: Var,
    pub attn_out: Var,
    pub attn_out_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_in: Var,
    pub mlp_in_bias: Var,
    pub mlp_out: Var,
    pub mlp_out_bias: Var,
}

impl BlockVars {
    /// Inverse of [`BlockVars::all`]; `vars` must hold 12 handles in that order.
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            ln1_gain: vars[0],
            ln1_bias: vars[1],
            qkv: vars[2],
            qkv_bias: vars[3],
            attn_out: vars[4],
            attn_out_bias: vars[5],
            ln2_gain: vars[6],
            ln2_bias: vars[7],
            mlp_in: vars[8],
            mlp_in_bias: vars[9],
            mlp_out: vars[10],
            mlp_out_bias: vars[11],
        }
    }

    /// Handles in checkpoint field order.
    pub fn all(&self) -> [Var; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.qkv,
            self.qkv_bias,
            self.attn_out,
            self.attn_out_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.mlp_in,
            self.mlp_in_bias,
            self.mlp_out,
            self.mlp_out_bias,
        ]
    }
}

/// Graph handles for an [`EncoderParams`] bound with [`EncoderParams::bind`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub config: EncoderConfig,
    pub patch_projection: Var,
    pub patch_bias: Var,
    pub class_token: Var,
    pub positional: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub head: Var,
    pub head_bias: Var,
}

pub struct ForwardOutput {
    /// `[B, D_f]`
    pub features: Var,
    /// `[B, K]`
    pub logits: Var,
    /// `[B, K]`
    pub probs: Var,
}

impl EncoderVars {
    /// Vars in checkpoint order, matching [`EncoderParams::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_projection,
            self.patch_bias,
            self.class_token,
            self.positional,
        ];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.extend([
            self.final_norm_gain,
            self.final_norm_bias,
            self.head,
            self.head_bias,
        ]);
        out
    }

    /// Patch rows `[B * L_e, patch_dim]` to embeddings `[B, L_e, D_e]`.
    pub fn embed(&self, g: &mut Graph, pixels: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let tokens = g.linear(pixels, self.patch_projection, self.patch_bias)?;
        Ok(g.reshape(tokens, &[batch, cfg.num_patches(), cfg.dim])?)
    }

    pub fn forward_images(
        &self,
        g: &mut Graph,
        pixels: Var,
        batch: usize,
        prompt: Option<Var>,
    ) -> Result<ForwardOutput> {
        let emb = self.embed(g, pixels, batch)?;
        self.forward_embedded(g, emb, prompt)
    }

    /// Token sequence `[class; prompt; patches]` of shape `[B, 1 + L_p + L_e, D_e]`.
    pub fn assemble_tokens(
        &self,
        g: &mut Graph,
        embeddings: Var,
        prompt: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.dim;
        let le = cfg.num_patches();
        let shape = g.shape(embeddings).to_vec();
        if shape.len() != 3 || shape[1] != le || shape[2] != d {
            return Err(PaintError::Dimension {
                expected: le * d,
                got: shape.iter().skip(1).product(),
            });
        }
        let batch = shape[0];

        let pos_cls = g.slice(self.positional, 0, 0, 1)?;
        let cls_row = g.reshape(self.class_token, &[1, d])?;
        let cls = g.add(cls_row, pos_cls)?;
        let cls = g.repeat_rows(cls, batch)?;
        let cls = g.reshape(cls, &[batch, 1, d])?;

        let pos_patch = g.slice(self.positional, 0, 1, 1 + le)?;
        let pos_patch = g.repeat_rows(pos_patch, batch)?;
        let pos_patch = g.reshape(pos_patch, &[batch, le, d])?;
        let patches = g.add(embeddings, pos_patch)?;

        let mut parts = vec![cls];
        if let Some(p) = prompt {
            let ps = g.shape(p).to_vec();
            let width = *ps.last().unwrap_or(&0);
            if ps.len() != 2 || width != d {
                return Err(PaintError::PromptWidth {
                    expected: d,
                    got: width,
                });
            }
            let lp = ps[0];
            if lp > 0 {
                let rows = g.repeat_rows(p, batch)?;
                parts.push(g.reshape(rows, &[batch, lp, d])?);
            }
        }
        parts.push(patches);
        Ok(g.concat(&parts, 1)?)
    }

    /// Runs `[class; prompt; patches]` through every block and the head.
    pub fn forward_embedded(
        &self,
        g: &mut Graph,
        embeddings: Var,
        prompt: Option<Var>,
    ) -> Result<ForwardOutput> {
        let d = self.config.dim;
        let batch = g.shape(embeddings)[0];
        let mut x = self.assemble_tokens(g, embeddings, prompt)?;
        for block in &self.blocks {
            x = self.block_forward(g, block, x)?;
        }

        let cls_out = g.slice(x, 1, 0, 1)?;
        let cls_out = g.reshape(cls_out, &[batch, d])?;
        let features = g.layer_norm(cls_out, self.final_norm_gain, self.final_norm_bias)?;
        let logits = g.linear(features, self.head, self.head_bias)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardOutput {
            features,
            logits,
            probs,
        })
    }

    fn block_forward(&self, g: &mut Graph, b: &BlockVars, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        let (batch, seq, d) = (shape[0], shape[1], shape[2]);
        let dh = cfg.head_dim();
        let rows = batch * seq;

        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
        let h = g.reshape(h, &[rows, d])?;
        let qkv = g.linear(h, b.qkv, b.qkv_bias)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn: Option<Var> = None;
        for head in 0..cfg.heads {
            let lo = head * dh;
            let q = g.slice(qkv, 1, lo, lo + dh)?;
            let k = g.slice(qkv, 1, d + lo, d + lo + dh)?;
            let v = g.slice(qkv, 1, 2 * d + lo, 2 * d + lo + dh)?;
            let q = g.reshape(q, &[batch, seq, dh])?;
            let k = g.reshape(k, &[batch, seq, dh])?;
            let v = g.reshape(v, &[batch, seq, dh])?;
            let scores = g.matmul_ext(q, k, true)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores)?;
            let ctx = g.matmul(weights, v)?;
            let ctx = g.reshape(ctx, &[rows, dh])?;
            let w_o = g.slice(b.attn_out, 0, lo, lo + dh)?;
            let part = g.matmul(ctx, w_o)?;
            attn = Some(match attn {
                Some(acc) => g.add(acc, part)?,
                None => part,
            });
        }
        let attn = attn.expect("at least one head");
        let bias = g.repeat_rows(b.attn_out_bias, rows)?;
        let attn = g.add(attn, bias)?;
        let attn = g.reshape(attn, &[batch, seq, d])?;
        let x = g.add(x, attn)?;

        let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
        let h = g.reshape(h, &[rows, d])?;
        let h = g.linear(h, b.mlp_in, b.mlp_in_bias)?;
        let h = g.gelu(h);
        let h = g.linear(h, b.mlp_out, b.mlp_out_bias)?;
        let h = g.reshape(h, &[batch, seq, d])?;
        Ok(g.add(x, h)?)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
