//! Class heatmaps from raw attention: head-max, included-token mean,
//! related-prompt max, and a softmax across classes.

use crate::numeric::softmax_into;
use crate::tensor_io::{read_attention, AttentionStack, FormatError, PromptManifest};

#[derive(Debug, thiserror::Error)]
pub enum HeatmapError {
    #[error("layer {layer} out of range for a {layers}-layer stack")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("token include mask selects no token")]
    EmptyIncludeMask,
    #[error("token include mask has length {got}, stack has {expected} tokens")]
    IncludeMaskLength { expected: usize, got: usize },
    #[error("heatmap dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("class softmax needs at least two classes")]
    SingleClass,
    #[error("no prompt heatmaps given for a class")]
    EmptyPromptSet,
    #[error("invalid probability map: {0}")]
    InvalidProbMap(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Raw (unnormalized) heatmap of one class at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHeatmap {
    pub layer: usize,
    pub class_id: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ClassHeatmap {
    pub fn new(
        layer: usize,
        class_id: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, HeatmapError> {
        if values.len() != height * width {
            return Err(HeatmapError::DimMismatch(format!(
                "{height}x{width} heatmap with {} values",
                values.len()
            )));
        }
        Ok(Self {
            layer,
            class_id,
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    fn same_dims(&self, other: &ClassHeatmap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel class distribution, stored class-major (`[class][row][col]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    n_classes: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    /// Builds a map, checking that every pixel lies on the simplex to 1e-6.
    pub fn new(
        n_classes: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, HeatmapError> {
        if n_classes == 0 || values.len() != n_classes * height * width {
            return Err(HeatmapError::InvalidProbMap(format!(
                "{n_classes} classes of {height}x{width} with {} values",
                values.len()
            )));
        }
        let map = Self {
            n_classes,
            height,
            width,
            values,
        };
        for p in 0..height * width {
            let mut total = 0.0;
            for c in 0..n_classes {
                let v = map.values[c * height * width + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(HeatmapError::InvalidProbMap(format!(
                        "value {v} at class {c}, pixel {p}"
                    )));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(HeatmapError::InvalidProbMap(format!(
                    "pixel {p} sums to {total}"
                )));
            }
        }
        Ok(map)
    }

    /// Per-pixel softmax of class-major logits.
    pub(crate) fn from_logits(
        n_classes: usize,
        height: usize,
        width: usize,
        logits: &[f64],
    ) -> Self {
        let plane = height * width;
        let mut values = vec![0.0; n_classes * plane];
        let mut z = vec![0.0; n_classes];
        let mut p = vec![0.0; n_classes];
        for i in 0..plane {
            for c in 0..n_classes {
                z[c] = logits[c * plane + i];
            }
            softmax_into(&z, &mut p);
            for c in 0..n_classes {
                values[c * plane + i] = p[c];
            }
        }
        Self {
            n_classes,
            height,
            width,
            values,
        }
    }

    /// Wraps class-major values the caller has already normalized.
    pub(crate) fn from_values_unchecked(
        n_classes: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(values.len(), n_classes * height * width);
        Self {
            n_classes,
            height,
            width,
            values,
        }
    }

    /// Uniform distribution at every pixel.
    pub fn uniform(n_classes: usize, height: usize, width: usize) -> Self {
        Self {
            n_classes,
            height,
            width,
            values: vec![1.0 / n_classes as f64; n_classes * height * width],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.values[(class * self.height + row) * self.width + col]
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[class * n..(class + 1) * n]
    }

    /// Class distribution at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.n_classes).map(|c| self.get(c, row, col)).collect()
    }
}

/// Heatmap of one prompt at one layer: max over heads, then the mean over
/// the tokens selected by `include_mask`.
pub fn prompt_heatmap(
    stack: &AttentionStack,
    layer: usize,
    include_mask: &[bool],
    class_id: usize,
) -> Result<ClassHeatmap, HeatmapError> {
    if layer >= stack.layers() {
        return Err(HeatmapError::LayerOutOfRange {
            layer,
            layers: stack.layers(),
        });
    }
    if include_mask.len() != stack.tokens() {
        return Err(HeatmapError::IncludeMaskLength {
            expected: stack.tokens(),
            got: include_mask.len(),
        });
    }
    let included: Vec<usize> = (0..stack.tokens()).filter(|&t| include_mask[t]).collect();
    if included.is_empty() {
        return Err(HeatmapError::EmptyIncludeMask);
    }
    let grid = stack.grid();
    let mut values = vec![0.0; grid * grid];
    for &t in &included {
        let mut head_max = stack.slice(layer, 0, t).to_vec();
        for h in 1..stack.heads() {
            for (m, &v) in head_max.iter_mut().zip(stack.slice(layer, h, t)) {
                *m = m.max(v);
            }
        }
        for (acc, m) in values.iter_mut().zip(head_max) {
            *acc += f64::from(m);
        }
    }
    let count = included.len() as f64;
    values.iter_mut().for_each(|v| *v /= count);
    ClassHeatmap::new(layer, class_id, grid, grid, values)
}

/// Elementwise max over the heatmaps of a class's related prompts.
pub fn class_heatmap(prompt_maps: &[ClassHeatmap]) -> Result<ClassHeatmap, HeatmapError> {
    let (first, rest) = prompt_maps
        .split_first()
        .ok_or(HeatmapError::EmptyPromptSet)?;
    let mut out = first.clone();
    for map in rest {
        if !map.same_dims(first) || map.layer != first.layer {
            return Err(HeatmapError::DimMismatch(format!(
                "prompt map {}x{} at layer {} vs {}x{} at layer {}",
                map.height, map.width, map.layer, first.height, first.width, first.layer
            )));
        }
        for (o, &v) in out.values.iter_mut().zip(&map.values) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Softmax across classes at every pixel, temperature 1.
pub fn class_softmax(raw: &[ClassHeatmap]) -> Result<ProbMap, HeatmapError> {
    class_softmax_with_temperature(raw, 1.0)
}

pub fn class_softmax_with_temperature(
    raw: &[ClassHeatmap],
    temperature: f64,
) -> Result<ProbMap, HeatmapError> {
    if raw.len() < 2 {
        return Err(HeatmapError::SingleClass);
    }
    let first = &raw[0];
    if let Some(bad) = raw.iter().find(|m| !m.same_dims(first)) {
        return Err(HeatmapError::DimMismatch(format!(
            "class {} is {}x{}, class {} is {}x{}",
            bad.class_id, bad.height, bad.width, first.class_id, first.height, first.width
        )));
    }
    let logits: Vec<f64> = raw
        .iter()
        .flat_map(|m| m.values.iter().map(|v| v / temperature))
        .collect();
    Ok(ProbMap::from_logits(
        raw.len(),
        first.height,
        first.width,
        &logits,
    ))
}

/// Attention of one prompt together with its token include mask.
#[derive(Debug, Clone)]
pub struct PromptAttention {
    pub stack: AttentionStack,
    pub include_mask: Vec<bool>,
}

/// All prompt attention for one image, grouped by class id.
#[derive(Debug, Clone)]
pub struct ImageAttention {
    pub classes: Vec<Vec<PromptAttention>>,
}

impl ImageAttention {
    /// Reads the ATNS files of image `index`. With `multi_prompt` off only
    /// each class's first prompt is used. Normalized stacks are checked to
    /// sum to one per slice within 1e-3.
    pub fn load(
        manifest: &PromptManifest,
        index: usize,
        multi_prompt: bool,
    ) -> Result<Self, HeatmapError> {
        let image = &manifest.images[index];
        let mut classes = Vec::with_capacity(manifest.n_classes());
        for class in &manifest.classes {
            let take = if multi_prompt { class.prompts.len() } else { 1 };
            let mut prompts = Vec::with_capacity(take);
            for prompt in class.prompts.iter().take(take) {
                let path = &image.attn_paths[&prompt.prompt_text];
                let stack = read_attention(path)?;
                if image.normalized {
                    stack.check_normalized(1e-3)?;
                }
                prompts.push(PromptAttention {
                    stack,
                    include_mask: prompt.token_include_mask.clone(),
                });
            }
            classes.push(prompts);
        }
        Ok(Self { classes })
    }

    /// In-memory stacks, one per class in class-id order, paired with each
    /// class's first prompt.
    pub fn from_stacks(
        manifest: &PromptManifest,
        stacks: Vec<AttentionStack>,
    ) -> Result<Self, HeatmapError> {
        if stacks.len() != manifest.n_classes() {
            return Err(HeatmapError::DimMismatch(format!(
                "{} stacks for {} classes",
                stacks.len(),
                manifest.n_classes()
            )));
        }
        let classes = stacks
            .into_iter()
            .zip(&manifest.classes)
            .map(|(stack, class)| {
                vec![PromptAttention {
                    stack,
                    include_mask: class.prompts[0].token_include_mask.clone(),
                }]
            })
            .collect();
        Ok(Self { classes })
    }

    /// Layer count shared by every stack.
    pub fn layers(&self) -> Result<usize, HeatmapError> {
        let mut stacks = self.classes.iter().flatten().map(|p| &p.stack);
        let first = stacks.next().ok_or(HeatmapError::EmptyPromptSet)?;
        for s in stacks {
            if s.layers() != first.layers() || s.grid() != first.grid() {
                return Err(HeatmapError::DimMismatch(format!(
                    "stack {}x{} vs {}x{} (layers x grid)",
                    s.layers(),
                    s.grid(),
                    first.layers(),
                    first.grid()
                )));
            }
        }
        Ok(first.layers())
    }
}

/// Raw class heatmaps indexed `[layer][class]`.
pub fn raw_class_heatmaps(image: &ImageAttention) -> Result<Vec<Vec<ClassHeatmap>>, HeatmapError> {
    let layers = image.layers()?;
    (0..layers)
        .map(|layer| {
            image
                .classes
                .iter()
                .enumerate()
                .map(|(class_id, prompts)| {
                    let maps = prompts
                        .iter()
                        .map(|p| prompt_heatmap(&p.stack, layer, &p.include_mask, class_id))
                        .collect::<Result<Vec<_>, _>>()?;
                    class_heatmap(&maps)
                })
                .collect()
        })
        .collect()
}

/// One probability map per layer for a single image.
pub fn per_layer_probmaps(image: &ImageAttention) -> Result<Vec<ProbMap>, HeatmapError> {
    if image.classes.len() < 2 {
        return Err(HeatmapError::SingleClass);
    }
    raw_class_heatmaps(image)?
        .iter()
        .map(|maps| class_softmax(maps))
        .collect()
}
