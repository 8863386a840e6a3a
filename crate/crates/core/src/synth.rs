//! Seeded synthetic datasets: flat-coloured rectangles on a background, with
//! attention dumps whose sharpness per layer is set explicitly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{
    io_err, save_manifest, write_attention, write_mask, write_raster, AttentionStack, ClassEntry,
    FormatError, ImageEntry, LabelMask, PromptEntry, PromptManifest, RasterImage,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fixture spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    /// Including the background class 0.
    pub n_classes: usize,
    pub n_images: usize,
    pub heads: usize,
    pub tokens: usize,
    pub grid: usize,
    /// Mass each layer puts inside the class regions; its length is the
    /// layer count.
    pub alpha: Vec<f64>,
    pub seed: u64,
    /// Raster pixels per attention patch along each side.
    pub pixel_scale: usize,
    /// Share of the diffuse mass drawn from a random field instead of the
    /// uniform distribution.
    pub noise: f64,
    /// Class score given to classes absent from an image.
    pub score_leak: f64,
    /// Absent classes attend to a random rectangle instead of spreading
    /// uniformly.
    pub decoys: bool,
    /// Upper bound on foreground rectangles per image.
    pub max_regions: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_images: 8,
            heads: 2,
            tokens: 3,
            grid: 16,
            alpha: vec![0.9, 0.7, 0.5, 0.3, 0.2, 0.1],
            seed: 0,
            pixel_scale: 1,
            noise: 0.0,
            score_leak: 0.0,
            decoys: false,
            max_regions: 2,
        }
    }
}

impl FixtureSpec {
    /// `layers` sharpness values falling linearly from 0.9 to 0.1.
    pub fn decreasing_alpha(layers: usize) -> Vec<f64> {
        if layers == 1 {
            return vec![0.9];
        }
        (0..layers)
            .map(|l| 0.9 - 0.8 * l as f64 / (layers - 1) as f64)
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadSpec(msg));
        if self.n_classes < 2 || self.n_classes > 255 {
            return bad(format!("n_classes {} must be in 2..=255", self.n_classes));
        }
        for (name, v) in [
            ("n_images", self.n_images),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("grid", self.grid),
            ("pixel_scale", self.pixel_scale),
            ("layers", self.alpha.len()),
            ("max_regions", self.max_regions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        for (name, v) in [("noise", self.noise), ("score_leak", self.score_leak)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle on the patch grid, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.top < other.bottom
            && other.top < self.bottom
            && self.left < other.right
            && other.left < self.right
    }

    fn random(rng: &mut ChaCha8Rng, grid: usize) -> Rect {
        let min_side = (grid / 4).max(1);
        let max_side = (grid / 2).max(min_side);
        let h = rng.gen_range(min_side..=max_side);
        let w = rng.gen_range(min_side..=max_side);
        let top = rng.gen_range(0..=grid - h);
        let left = rng.gen_range(0..=grid - w);
        Rect {
            top,
            left,
            bottom: top + h,
            right: left + w,
        }
    }
}

/// A generated dataset held in memory. Manifest paths are relative to the
/// directory the fixture is written to.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: PromptManifest,
    pub rasters: Vec<RasterImage>,
    pub masks: Vec<LabelMask>,
    /// Indexed `[image][class]`.
    pub attention: Vec<Vec<AttentionStack>>,
    /// Mask on the patch grid, before scaling.
    pub grid_masks: Vec<LabelMask>,
}

pub fn class_name(class: usize) -> String {
    if class == 0 {
        "background".into()
    } else {
        format!("class{class}")
    }
}

pub fn prompt_text(class: usize) -> String {
    format!("Image of {}.", class_name(class))
}

const PALETTE: [[u8; 3]; 8] = [
    [32, 32, 32],
    [230, 40, 40],
    [40, 200, 60],
    [50, 70, 230],
    [240, 220, 40],
    [220, 50, 220],
    [40, 220, 220],
    [245, 245, 245],
];

fn palette(n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
    (0..n_classes)
        .map(|c| PALETTE.get(c).copied().unwrap_or_else(|| rng.gen()))
        .collect()
}

fn include_mask(tokens: usize) -> Vec<bool> {
    (0..tokens)
        .map(|t| tokens < 3 || (t != 0 && t != tokens - 1))
        .collect()
}

/// Builds every image, mask and attention stack described by `spec`.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let colors = palette(spec.n_classes, &mut rng);
    let (p, s) = (spec.grid, spec.pixel_scale);
    let p2 = p * p;
    let include = include_mask(spec.tokens);

    let classes: Vec<ClassEntry> = (0..spec.n_classes)
        .map(|c| ClassEntry {
            class_id: c,
            class_name: class_name(c),
            prompts: vec![PromptEntry {
                prompt_text: prompt_text(c),
                token_include_mask: include.clone(),
            }],
        })
        .collect();

    let mut images = Vec::new();
    let mut rasters = Vec::new();
    let mut masks = Vec::new();
    let mut grid_masks = Vec::new();
    let mut attention = Vec::new();
    for i in 0..spec.n_images {
        // Foreground rectangles, one class each, never overlapping.
        let n_regions = rng.gen_range(1..=spec.max_regions.min(spec.n_classes - 1));
        let mut fg: Vec<usize> = (1..spec.n_classes).collect();
        let mut regions: Vec<(usize, Rect)> = Vec::new();
        for _ in 0..n_regions {
            let class = fg.swap_remove(rng.gen_range(0..fg.len()));
            for _ in 0..50 {
                let rect = Rect::random(&mut rng, p);
                if regions.iter().all(|(_, r)| !r.overlaps(&rect)) {
                    regions.push((class, rect));
                    break;
                }
            }
        }
        let mut grid_mask = LabelMask::filled(p, p, 0);
        for (class, rect) in &regions {
            for row in rect.top..rect.bottom {
                for col in rect.left..rect.right {
                    grid_mask.set(row, col, *class as u8);
                }
            }
        }
        let mut present = vec![false; spec.n_classes];
        for &v in &grid_mask.data {
            present[usize::from(v)] = true;
        }

        let mut raster = RasterImage::filled(p * s, p * s, colors[0]);
        let mut mask = LabelMask::filled(p * s, p * s, 0);
        for y in 0..p * s {
            for x in 0..p * s {
                let label = grid_mask.get(y / s, x / s);
                mask.set(y, x, label);
                raster.set_pixel(y, x, colors[usize::from(label)]);
            }
        }

        let mut stacks = Vec::with_capacity(spec.n_classes);
        for c in 0..spec.n_classes {
            let target: Option<Vec<bool>> = if present[c] {
                Some(
                    grid_mask
                        .data
                        .iter()
                        .map(|&v| usize::from(v) == c)
                        .collect(),
                )
            } else if spec.decoys && c != 0 {
                let rect = Rect::random(&mut rng, p);
                Some((0..p2).map(|k| rect.contains(k / p, k % p)).collect())
            } else {
                None
            };
            let area = target
                .as_ref()
                .map_or(0, |t| t.iter().filter(|&&b| b).count());
            let mut values = Vec::with_capacity(spec.layers() * spec.heads * spec.tokens * p2);
            for &alpha in &spec.alpha {
                let field: Vec<f64> = (0..p2).map(|_| rng.gen::<f64>()).collect();
                let field_sum: f64 = field.iter().sum();
                let layer_map: Vec<f64> = (0..p2)
                    .map(|k| match &target {
                        Some(t) => {
                            let sharp = if t[k] { alpha / area as f64 } else { 0.0 };
                            let diffuse =
                                (1.0 - spec.noise) / p2 as f64 + spec.noise * field[k] / field_sum;
                            sharp + (1.0 - alpha) * diffuse
                        }
                        None => 1.0 / p2 as f64,
                    })
                    .collect();
                for h in 0..spec.heads {
                    let beta = 1.0 - h as f64 / (2 * spec.heads) as f64;
                    let head_map: Vec<f64> = layer_map
                        .iter()
                        .map(|v| beta * v + (1.0 - beta) / p2 as f64)
                        .collect();
                    let total: f64 = head_map.iter().sum();
                    for &inc in &include {
                        if inc {
                            values.extend(head_map.iter().map(|v| (v / total) as f32));
                        } else {
                            values.extend(std::iter::repeat_n(1.0 / p2 as f32, p2));
                        }
                    }
                }
            }
            stacks.push(AttentionStack::new(
                spec.layers(),
                spec.heads,
                spec.tokens,
                p,
                values,
            )?);
        }

        let image_id = format!("img{i:03}");
        let attn_paths: BTreeMap<String, PathBuf> = (0..spec.n_classes)
            .map(|c| {
                (
                    prompt_text(c),
                    PathBuf::from(format!("attn/{image_id}_c{c}.atns")),
                )
            })
            .collect();
        let class_scores: BTreeMap<String, f64> = (0..spec.n_classes)
            .map(|c| {
                let score = if present[c] { 1.0 } else { spec.score_leak };
                (prompt_text(c), score)
            })
            .collect();
        images.push(ImageEntry {
            image_id: image_id.clone(),
            raster_path: PathBuf::from(format!("images/{image_id}.ppm")),
            mask_path: Some(PathBuf::from(format!("masks/{image_id}.pgm"))),
            attn_paths,
            class_scores,
            normalized: true,
        });
        rasters.push(raster);
        masks.push(mask);
        grid_masks.push(grid_mask);
        attention.push(stacks);
    }

    let manifest = PromptManifest {
        dataset_id: format!("synth-{}", spec.seed),
        classes,
        images,
    };
    manifest.validate()?;
    Ok(Fixture {
        manifest,
        rasters,
        masks,
        attention,
        grid_masks,
    })
}

impl Fixture {
    /// Writes all files under `out_dir` and returns the manifest path.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
        let out = out_dir.as_ref();
        for sub in ["images", "masks", "attn"] {
            let dir = out.join(sub);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for (i, entry) in self.manifest.images.iter().enumerate() {
            write_raster(&self.rasters[i], out.join(&entry.raster_path))?;
            if let Some(mask_path) = &entry.mask_path {
                write_mask(&self.masks[i], out.join(mask_path))?;
            }
            for (c, class) in self.manifest.classes.iter().enumerate() {
                let path = &entry.attn_paths[&class.prompts[0].prompt_text];
                write_attention(&self.attention[i][c], out.join(path))?;
            }
        }
        let path = out.join("manifest.json");
        save_manifest(&self.manifest, &path)?;
        Ok(path)
    }
}

/// Generates the fixture and writes it to `out_dir`.
pub fn make_fixture(spec: &FixtureSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    generate(spec)?.write(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::argmax_prediction;
    use crate::heatmap::{per_layer_probmaps, ImageAttention};

    #[test]
    fn zero_images_rejected() {
        let spec = FixtureSpec {
            n_images: 0,
            ..FixtureSpec::default()
        };
        assert!(matches!(generate(&spec), Err(SynthError::BadSpec(_))));
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let spec = FixtureSpec {
            alpha: vec![1.5],
            ..FixtureSpec::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn stacks_are_normalized() {
        let spec = FixtureSpec {
            noise: 0.5,
            decoys: true,
            ..FixtureSpec::default()
        };
        let f = generate(&spec).unwrap();
        for stacks in &f.attention {
            for s in stacks {
                s.check_normalized(1e-4).unwrap();
            }
        }
    }

    #[test]
    fn sharp_layer_argmax_is_ground_truth() {
        let spec = FixtureSpec {
            alpha: vec![1.0, 0.3],
            heads: 3,
            ..FixtureSpec::default()
        };
        let f = generate(&spec).unwrap();
        for (i, stacks) in f.attention.iter().enumerate() {
            let attn = ImageAttention::from_stacks(&f.manifest, stacks.clone()).unwrap();
            let maps = per_layer_probmaps(&attn).unwrap();
            assert_eq!(argmax_prediction(&maps[0]), f.grid_masks[i]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = FixtureSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_fixture(&spec, a.path()).unwrap();
        make_fixture(&spec, b.path()).unwrap();
        for sub in [
            "images/img003.ppm",
            "masks/img003.pgm",
            "attn/img003_c1.atns",
            "manifest.json",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(sub)).unwrap(),
                std::fs::read(b.path().join(sub)).unwrap(),
                "{sub}"
            );
        }
    }

    #[test]
    fn scale_enlarges_raster_only() {
        let spec = FixtureSpec {
            pixel_scale: 3,
            n_images: 1,
            ..FixtureSpec::default()
        };
        let f = generate(&spec).unwrap();
        assert_eq!((f.rasters[0].height, f.masks[0].width), (48, 48));
        assert_eq!(f.attention[0][0].grid(), 16);
        assert_eq!(f.masks[0].resample_nearest(16, 16), f.grid_masks[0]);
    }
}
