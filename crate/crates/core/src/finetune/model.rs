//! Toy text-to-image cross-attention stack with exact reverse-mode
//! gradients.
//!
//! Text states start as word-embedding rows and pass through `n_layers`
//! cross-attention blocks that attend over frozen patch features of the
//! image. Each block's attention is reduced to class heatmaps exactly as the
//! `heatmap` module reduces recorded attention.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mat::Mat;
use super::FinetuneError;
use crate::heatmap::ClassHeatmap;
use crate::numeric::softmax_into;
use crate::tensor_io::{LabelMask, PromptManifest, RasterImage};

pub(crate) const EMBEDDINGS: usize = 0;
pub(crate) const IMAGE_PROJ: usize = 1;
pub(crate) const IMAGE_POS: usize = 2;
const LAYER_BASE: usize = 3;
const PER_LAYER: usize = 8;
const W_Q: usize = 0;
const B_Q: usize = 1;
const W_K: usize = 2;
const B_K: usize = 3;
const W_V: usize = 4;
const B_V: usize = 5;
const W_O: usize = 6;
const B_O: usize = 7;
const LAYER_PARAM_NAMES: [&str; PER_LAYER] =
    ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"];

/// Colour channels plus a constant input to the frozen patch projection.
const PATCH_INPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            grid: 16,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.grid == 0 {
            return Err(FinetuneError::BadConfig("all sizes must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FinetuneError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.grid * self.grid > u16::MAX as usize || self.n_heads > u8::MAX as usize {
            return Err(FinetuneError::BadConfig(
                "grid or head count too large".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn as_mat(&self) -> Mat {
        Mat::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }
}

/// Token ids and include flags of one class prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub tokens: Vec<usize>,
    pub include: Vec<bool>,
}

/// One prompt per class, in class-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub classes: Vec<PromptTokens>,
}

impl Prompts {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Whitespace/punctuation word vocabulary with `[CLS]` = 0 and `[SEP]` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

pub const CLS_TOKEN: usize = 0;
pub const SEP_TOKEN: usize = 1;

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocab {
    /// Sorted vocabulary over every prompt in the manifest.
    pub fn from_manifest(manifest: &PromptManifest) -> Self {
        let set: BTreeSet<String> = manifest
            .classes
            .iter()
            .flat_map(|c| &c.prompts)
            .flat_map(|p| words(&p.prompt_text))
            .collect();
        let mut all = vec!["[CLS]".to_string(), "[SEP]".to_string()];
        all.extend(set);
        Self { words: all }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// `[CLS] words… [SEP]`, with only the words included in heatmaps.
    pub fn encode(&self, text: &str) -> Result<PromptTokens, FinetuneError> {
        let mut tokens = vec![CLS_TOKEN];
        for w in words(text) {
            let id = self.words[2..]
                .binary_search(&w)
                .map_err(|_| FinetuneError::UnknownWord(w.clone()))?;
            tokens.push(id + 2);
        }
        if tokens.len() == 1 {
            return Err(FinetuneError::UnknownWord(text.to_string()));
        }
        tokens.push(SEP_TOKEN);
        let mut include = vec![true; tokens.len()];
        include[0] = false;
        *include.last_mut().unwrap() = false;
        Ok(PromptTokens { tokens, include })
    }

    /// Encodes each class's first prompt.
    pub fn prompts_for(&self, manifest: &PromptManifest) -> Result<Prompts, FinetuneError> {
        let classes = manifest
            .classes
            .iter()
            .map(|c| self.encode(&c.prompts[0].prompt_text))
            .collect::<Result<_, _>>()?;
        Ok(Prompts { classes })
    }
}

/// Activations of one layer kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    h_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, rows × patches.
    attn: Vec<Mat>,
    o: Mat,
    /// Winning head per (row, patch).
    argmax_head: Vec<u8>,
}

/// Text rows of all prompts stacked together.
#[derive(Debug, Clone)]
pub(crate) struct RowLayout {
    token: Vec<usize>,
    class: Vec<usize>,
    included: Vec<bool>,
    included_per_class: Vec<usize>,
}

impl RowLayout {
    fn new(prompts: &Prompts, vocab_size: usize) -> Result<Self, FinetuneError> {
        let mut layout = RowLayout {
            token: Vec::new(),
            class: Vec::new(),
            included: Vec::new(),
            included_per_class: Vec::new(),
        };
        for (c, p) in prompts.classes.iter().enumerate() {
            if p.tokens.len() != p.include.len() {
                return Err(FinetuneError::BadPrompt(format!(
                    "class {c}: {} tokens, {} include flags",
                    p.tokens.len(),
                    p.include.len()
                )));
            }
            let count = p.include.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(FinetuneError::BadPrompt(format!(
                    "class {c} includes no token"
                )));
            }
            for (&t, &inc) in p.tokens.iter().zip(&p.include) {
                if t >= vocab_size {
                    return Err(FinetuneError::TokenOutOfVocab {
                        token: t,
                        vocab: vocab_size,
                    });
                }
                layout.token.push(t);
                layout.class.push(c);
                layout.included.push(inc);
            }
            layout.included_per_class.push(count);
        }
        Ok(layout)
    }

    fn rows(&self) -> usize {
        self.token.len()
    }
}

/// Result of a forward pass: raw class heatmaps `[layer][class]` plus the
/// activations needed to differentiate them.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub heatmaps: Vec<Vec<ClassHeatmap>>,
    pub(crate) caches: Vec<LayerCache>,
    pub(crate) layout: RowLayout,
    pub(crate) features: Mat,
}

impl ForwardPass {
    /// Attention of `head` at `layer` from text row `row` over the patches.
    pub fn attention_row(&self, layer: usize, head: usize, row: usize) -> &[f64] {
        self.caches[layer].attn[head].row(row)
    }

    /// Winning head per (row, patch) at each computed layer.
    pub fn head_choices(&self) -> Vec<Vec<u8>> {
        self.caches.iter().map(|c| c.argmax_head.clone()).collect()
    }
}

/// Gradients aligned with the model's parameter list; `None` for frozen
/// tensors. Frozen embedding rows hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let (Some(a), Some(b)) = (a, b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Which parameter groups are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    EmbeddingsAndLayers,
    EmbeddingsOnly,
    LayersOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    vocab_size: usize,
    params: Vec<ParamTensor>,
    trainable_layers: BTreeSet<usize>,
    trainable_rows: BTreeSet<usize>,
}

impl ToyModel {
    /// Seeded random initialization; nothing is trainable until
    /// [`ToyModel::set_trainable`] is called.
    pub fn new(config: ToyModelConfig, vocab_size: usize) -> Result<Self, FinetuneError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(FinetuneError::BadConfig("empty vocabulary".into()));
        }
        let d = config.d_model;
        let p2 = config.grid * config.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let mut params = vec![
            ParamTensor {
                name: "embeddings".into(),
                shape: vec![vocab_size, d],
                data: normal(vocab_size * d, 1.0),
            },
            ParamTensor {
                name: "image.proj".into(),
                shape: vec![PATCH_INPUTS, d],
                data: normal(PATCH_INPUTS * d, 1.0),
            },
            ParamTensor {
                name: "image.pos".into(),
                shape: vec![p2, d],
                data: normal(p2 * d, 0.1),
            },
        ];
        let w_std = 0.25 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            for (k, name) in LAYER_PARAM_NAMES.iter().enumerate() {
                let (shape, data) = if k % 2 == 0 {
                    (vec![d, d], normal(d * d, w_std))
                } else {
                    (vec![d], vec![0.0; d])
                };
                params.push(ParamTensor {
                    name: format!("layer{l}.{name}"),
                    shape,
                    data,
                });
            }
        }
        Ok(Self {
            config,
            vocab_size,
            params,
            trainable_layers: BTreeSet::new(),
            trainable_rows: BTreeSet::new(),
        })
    }

    /// Rebuilds a model from a named parameter list.
    pub fn from_params(
        config: ToyModelConfig,
        vocab_size: usize,
        named: Vec<ParamTensor>,
    ) -> Result<Self, FinetuneError> {
        let mut model = Self::new(config, vocab_size)?;
        for tensor in named {
            let slot = model
                .params
                .iter_mut()
                .find(|p| p.name == tensor.name)
                .ok_or_else(|| {
                    FinetuneError::Checkpoint(format!("unknown tensor {}", tensor.name))
                })?;
            if slot.shape != tensor.shape {
                return Err(FinetuneError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    tensor.name, tensor.shape, slot.shape
                )));
            }
            slot.data = tensor.data;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn trainable_layers(&self) -> &BTreeSet<usize> {
        &self.trainable_layers
    }

    pub fn trainable_rows(&self) -> &BTreeSet<usize> {
        &self.trainable_rows
    }

    /// Marks the embedding rows used by `prompts` and/or every parameter of
    /// `layers` as trainable, replacing earlier flags.
    pub fn set_trainable(
        &mut self,
        prompts: &Prompts,
        layers: &[usize],
        scope: TrainScope,
    ) -> Result<(), FinetuneError> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(FinetuneError::LayerOutOfRange {
                layer: bad,
                layers: self.config.n_layers,
            });
        }
        self.trainable_rows = if scope == TrainScope::LayersOnly {
            BTreeSet::new()
        } else {
            prompts
                .classes
                .iter()
                .flat_map(|p| p.tokens.iter().copied())
                .collect()
        };
        self.trainable_layers = if scope == TrainScope::EmbeddingsOnly {
            BTreeSet::new()
        } else {
            layers.iter().copied().collect()
        };
        Ok(())
    }

    pub(crate) fn restore_trainable_layers(
        &mut self,
        layers: &[usize],
    ) -> Result<(), FinetuneError> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(FinetuneError::LayerOutOfRange {
                layer: bad,
                layers: self.config.n_layers,
            });
        }
        self.trainable_layers = layers.iter().copied().collect();
        Ok(())
    }

    /// Index of a layer parameter in the parameter list.
    pub(crate) fn layer_param(layer: usize, which: usize) -> usize {
        LAYER_BASE + PER_LAYER * layer + which
    }

    /// Layer owning parameter `index`, if any.
    pub(crate) fn layer_of(index: usize) -> Option<usize> {
        (index >= LAYER_BASE).then(|| (index - LAYER_BASE) / PER_LAYER)
    }

    /// Whether `(tensor, element)` is updated during training.
    pub fn is_trainable(&self, tensor: usize, element: usize) -> bool {
        match tensor {
            EMBEDDINGS => self
                .trainable_rows
                .contains(&(element / self.config.d_model)),
            IMAGE_PROJ | IMAGE_POS => false,
            t => Self::layer_of(t).is_some_and(|l| self.trainable_layers.contains(&l)),
        }
    }

    fn tensor_trainable(&self, tensor: usize) -> bool {
        match tensor {
            EMBEDDINGS => !self.trainable_rows.is_empty(),
            IMAGE_PROJ | IMAGE_POS => false,
            t => Self::layer_of(t).is_some_and(|l| self.trainable_layers.contains(&l)),
        }
    }

    /// Frozen patch features of an image: mean colour per grid cell pushed
    /// through a fixed random projection plus a positional term.
    pub fn image_features(&self, image: &RasterImage) -> Result<Mat, FinetuneError> {
        let grid = self.config.grid;
        if image.height < grid || image.width < grid {
            return Err(FinetuneError::ImageTooSmall {
                height: image.height,
                width: image.width,
                grid,
            });
        }
        let d = self.config.d_model;
        let proj = &self.params[IMAGE_PROJ].data;
        let pos = &self.params[IMAGE_POS].data;
        let mut features = Mat::zeros(grid * grid, d);
        for gy in 0..grid {
            let (y0, y1) = (gy * image.height / grid, (gy + 1) * image.height / grid);
            for gx in 0..grid {
                let (x0, x1) = (gx * image.width / grid, (gx + 1) * image.width / grid);
                let mut mean = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (m, v) in mean.iter_mut().zip(image.unit_rgb(y, x)) {
                            *m += v;
                        }
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let input = [mean[0] / count, mean[1] / count, mean[2] / count, 1.0];
                let p = gy * grid + gx;
                let row = features.row_mut(p);
                row.copy_from_slice(&pos[p * d..(p + 1) * d]);
                for (i, &x) in input.iter().enumerate() {
                    for (r, w) in row.iter_mut().zip(&proj[i * d..(i + 1) * d]) {
                        *r += x * w;
                    }
                }
            }
        }
        Ok(features)
    }

    /// Runs the first `depth` layers.
    pub fn forward(
        &self,
        features: &Mat,
        prompts: &Prompts,
        depth: usize,
    ) -> Result<ForwardPass, FinetuneError> {
        let cfg = &self.config;
        if depth > cfg.n_layers {
            return Err(FinetuneError::LayerOutOfRange {
                layer: depth.saturating_sub(1),
                layers: cfg.n_layers,
            });
        }
        let (d, grid) = (cfg.d_model, cfg.grid);
        let p2 = grid * grid;
        if features.rows != p2 || features.cols != d {
            return Err(FinetuneError::BadConfig(format!(
                "features are {}x{}, expected {p2}x{d}",
                features.rows, features.cols
            )));
        }
        let layout = RowLayout::new(prompts, self.vocab_size)?;
        let rows = layout.rows();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let emb = &self.params[EMBEDDINGS].data;
        let mut h = Mat::zeros(rows, d);
        for (r, &t) in layout.token.iter().enumerate() {
            h.row_mut(r).copy_from_slice(&emb[t * d..(t + 1) * d]);
        }

        let mut caches = Vec::with_capacity(depth);
        let mut heatmaps = Vec::with_capacity(depth);
        let mut scores = vec![0.0; p2];
        for l in 0..depth {
            let param = |which: usize| &self.params[Self::layer_param(l, which)];
            let mut q = h.matmul(&param(W_Q).as_mat());
            q.add_row_vector(&param(B_Q).data);
            let mut k = features.matmul(&param(W_K).as_mat());
            k.add_row_vector(&param(B_K).data);
            let mut v = features.matmul(&param(W_V).as_mat());
            v.add_row_vector(&param(B_V).data);

            let mut attn = Vec::with_capacity(cfg.n_heads);
            let mut o = Mat::zeros(rows, d);
            for head in 0..cfg.n_heads {
                let q_h = q.columns(head * dh, dh);
                let k_h = k.columns(head * dh, dh);
                let v_h = v.columns(head * dh, dh);
                let mut a = q_h.matmul_t(&k_h);
                for r in 0..rows {
                    for (s, &x) in scores.iter_mut().zip(a.row(r)) {
                        *s = x * scale;
                    }
                    softmax_into(&scores, a.row_mut(r));
                }
                o.add_columns(head * dh, &a.matmul(&v_h));
                attn.push(a);
            }

            let mut argmax_head = vec![0u8; rows * p2];
            let mut maps: Vec<Vec<f64>> = vec![vec![0.0; p2]; prompts.n_classes()];
            for r in 0..rows {
                for x in 0..p2 {
                    let mut best = 0;
                    let mut best_value = attn[0].at(r, x);
                    for (head, a) in attn.iter().enumerate().skip(1) {
                        if a.at(r, x) > best_value {
                            best = head;
                            best_value = a.at(r, x);
                        }
                    }
                    argmax_head[r * p2 + x] = best as u8;
                    if layout.included[r] {
                        maps[layout.class[r]][x] += best_value;
                    }
                }
            }
            let layer_maps = maps
                .into_iter()
                .enumerate()
                .map(|(c, mut values)| {
                    let n = layout.included_per_class[c] as f64;
                    values.iter_mut().for_each(|v| *v /= n);
                    ClassHeatmap {
                        layer: l,
                        class_id: c,
                        height: grid,
                        width: grid,
                        values,
                    }
                })
                .collect();
            heatmaps.push(layer_maps);

            let mut h_next = h.clone();
            let mut proj = o.matmul(&param(W_O).as_mat());
            proj.add_row_vector(&param(B_O).data);
            h_next.add_assign(&proj);
            caches.push(LayerCache {
                h_in: std::mem::replace(&mut h, h_next),
                q,
                k,
                v,
                attn,
                o,
                argmax_head,
            });
        }
        Ok(ForwardPass {
            heatmaps,
            caches,
            layout,
            features: features.clone(),
        })
    }

    /// Raw class heatmaps of every layer for one image.
    pub fn heatmaps(
        &self,
        image: &RasterImage,
        prompts: &Prompts,
    ) -> Result<Vec<Vec<ClassHeatmap>>, FinetuneError> {
        let features = self.image_features(image)?;
        Ok(self
            .forward(&features, prompts, self.config.n_layers)?
            .heatmaps)
    }

    fn check_top_k(&self, top_k: &[usize]) -> Result<usize, FinetuneError> {
        if top_k.is_empty() {
            return Err(FinetuneError::EmptyTopK);
        }
        let mut seen = BTreeSet::new();
        for &l in top_k {
            if l >= self.config.n_layers {
                return Err(FinetuneError::LayerOutOfRange {
                    layer: l,
                    layers: self.config.n_layers,
                });
            }
            if !seen.insert(l) {
                return Err(FinetuneError::BadConfig(format!(
                    "layer {l} repeated in top-k"
                )));
            }
        }
        Ok(*seen.last().unwrap() + 1)
    }

    fn check_mask(
        &self,
        mask: &LabelMask,
        n_classes: usize,
        ignore: u8,
    ) -> Result<usize, FinetuneError> {
        let grid = self.config.grid;
        if mask.height != grid || mask.width != grid {
            return Err(FinetuneError::MaskDims {
                height: mask.height,
                width: mask.width,
                grid,
            });
        }
        let mut valid = 0;
        for &v in &mask.data {
            if v == ignore {
                continue;
            }
            if usize::from(v) >= n_classes {
                return Err(FinetuneError::LabelOutOfRange(v));
            }
            valid += 1;
        }
        if valid == 0 {
            return Err(FinetuneError::AllPixelsIgnored);
        }
        Ok(valid)
    }

    /// Mean per-pixel cross-entropy of the top-K ensemble on one example.
    pub fn loss(
        &self,
        image: &RasterImage,
        prompts: &Prompts,
        mask: &LabelMask,
        top_k: &[usize],
        ignore: u8,
    ) -> Result<f64, FinetuneError> {
        let features = self.image_features(image)?;
        Ok(self
            .loss_and_grad(&features, prompts, mask, top_k, ignore, false)?
            .0)
    }

    /// Loss and exact gradients for every trainable parameter.
    pub fn backward(
        &self,
        image: &RasterImage,
        prompts: &Prompts,
        mask: &LabelMask,
        top_k: &[usize],
        ignore: u8,
    ) -> Result<(f64, Gradients), FinetuneError> {
        let features = self.image_features(image)?;
        let (loss, grads) = self.loss_and_grad(&features, prompts, mask, top_k, ignore, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    pub(crate) fn loss_and_grad(
        &self,
        features: &Mat,
        prompts: &Prompts,
        mask: &LabelMask,
        top_k: &[usize],
        ignore: u8,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>), FinetuneError> {
        let n = prompts.n_classes();
        if n < 2 {
            return Err(FinetuneError::SingleClass);
        }
        let depth = self.check_top_k(top_k)?;
        let valid = self.check_mask(mask, n, ignore)? as f64;
        let pass = self.forward(features, prompts, depth)?;

        let p2 = self.config.grid * self.config.grid;
        let k = top_k.len() as f64;
        let mut logits = vec![0.0; n];
        let mut probs = vec![0.0; n];
        // d loss / d (ensembled logit), class-major.
        let mut d_logits = vec![0.0; n * p2];
        let mut loss = 0.0;
        for x in 0..p2 {
            let label = mask.data[x];
            if label == ignore {
                continue;
            }
            for (c, z) in logits.iter_mut().enumerate() {
                *z = top_k
                    .iter()
                    .map(|&l| pass.heatmaps[l][c].values[x])
                    .sum::<f64>()
                    / k;
            }
            softmax_into(&logits, &mut probs);
            let y = usize::from(label);
            loss -= probs[y].ln();
            for c in 0..n {
                let target = if c == y { 1.0 } else { 0.0 };
                d_logits[c * p2 + x] = (probs[c] - target) / valid;
            }
        }
        loss /= valid;
        if !loss.is_finite() {
            return Err(FinetuneError::NonFinite("loss".into()));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        Ok((loss, Some(self.backprop(&pass, &d_logits, top_k))))
    }

    fn backprop(&self, pass: &ForwardPass, d_logits: &[f64], top_k: &[usize]) -> Gradients {
        let cfg = &self.config;
        let (d, dh, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
        let p2 = cfg.grid * cfg.grid;
        let scale = 1.0 / (dh as f64).sqrt();
        let layout = &pass.layout;
        let rows = layout.rows();
        let k = top_k.len() as f64;

        let mut tensors: Vec<Option<Vec<f64>>> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| self.tensor_trainable(i).then(|| vec![0.0; p.data.len()]))
            .collect();

        // Gradient with respect to the text states entering the next layer.
        let mut d_h = Mat::zeros(rows, d);
        for l in (0..pass.caches.len()).rev() {
            let cache = &pass.caches[l];
            let param = |which: usize| &self.params[Self::layer_param(l, which)];
            let trainable = self.trainable_layers.contains(&l);

            let mut d_attn: Vec<Mat> = (0..heads).map(|_| Mat::zeros(rows, p2)).collect();
            if top_k.contains(&l) {
                for r in (0..rows).filter(|&r| layout.included[r]) {
                    let c = layout.class[r];
                    let weight = 1.0 / (k * layout.included_per_class[c] as f64);
                    for x in 0..p2 {
                        let head = usize::from(cache.argmax_head[r * p2 + x]);
                        d_attn[head].data[r * p2 + x] += d_logits[c * p2 + x] * weight;
                    }
                }
            }

            let w_o = param(W_O).as_mat();
            if trainable {
                let g = cache.o.t_matmul(&d_h);
                add_into(&mut tensors[Self::layer_param(l, W_O)], &g.data);
                add_into(&mut tensors[Self::layer_param(l, B_O)], &d_h.col_sums());
            }
            let d_o = d_h.matmul_t(&w_o);

            let mut d_q = Mat::zeros(rows, d);
            let mut d_k = Mat::zeros(p2, d);
            let mut d_v = Mat::zeros(p2, d);
            for (head, d_a) in d_attn.iter_mut().enumerate() {
                let cols = head * dh;
                let a = &cache.attn[head];
                let d_o_h = d_o.columns(cols, dh);
                d_a.add_assign(&d_o_h.matmul_t(&cache.v.columns(cols, dh)));
                d_v.add_columns(cols, &a.t_matmul(&d_o_h));

                let mut d_s = Mat::zeros(rows, p2);
                for r in 0..rows {
                    let (a_row, g_row) = (a.row(r), d_a.row(r));
                    let dot: f64 = a_row.iter().zip(g_row).map(|(x, y)| x * y).sum();
                    for ((s, &ax), &gx) in d_s.row_mut(r).iter_mut().zip(a_row).zip(g_row) {
                        *s = ax * (gx - dot) * scale;
                    }
                }
                d_q.add_columns(cols, &d_s.matmul(&cache.k.columns(cols, dh)));
                d_k.add_columns(cols, &d_s.t_matmul(&cache.q.columns(cols, dh)));
            }

            if trainable {
                let pairs = [
                    (W_Q, cache.h_in.t_matmul(&d_q).data),
                    (B_Q, d_q.col_sums()),
                    (W_K, pass.features.t_matmul(&d_k).data),
                    (B_K, d_k.col_sums()),
                    (W_V, pass.features.t_matmul(&d_v).data),
                    (B_V, d_v.col_sums()),
                ];
                for (which, g) in pairs {
                    add_into(&mut tensors[Self::layer_param(l, which)], &g);
                }
            }
            // Residual path plus the query projection.
            d_h.add_assign(&d_q.matmul_t(&param(W_Q).as_mat()));
        }

        if let Some(g) = tensors[EMBEDDINGS].as_mut() {
            for (r, &t) in layout.token.iter().enumerate() {
                if self.trainable_rows.contains(&t) {
                    for (a, b) in g[t * d..(t + 1) * d].iter_mut().zip(d_h.row(r)) {
                        *a += b;
                    }
                }
            }
        }
        Gradients { tensors }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, values: &[f64]) {
    if let Some(g) = slot.as_mut() {
        g.iter_mut().zip(values).for_each(|(a, b)| *a += b);
    }
}
