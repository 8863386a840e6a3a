//! JSON prompt manifest tying classes, prompts, and per-image files together.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, FormatError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt_text: String,
    pub token_include_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: usize,
    pub class_name: String,
    pub prompts: Vec<PromptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub raster_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    /// Prompt text → ATNS file.
    pub attn_paths: BTreeMap<String, PathBuf>,
    /// Prompt text or class name → presence score in [0, 1].
    #[serde(default)]
    pub class_scores: BTreeMap<String, f64>,
    pub normalized: bool,
}

impl ImageEntry {
    /// Score for one prompt, falling back to the class-level entry.
    pub fn prompt_score(&self, prompt: &PromptEntry, class: &ClassEntry) -> Option<f64> {
        self.class_scores
            .get(&prompt.prompt_text)
            .or_else(|| self.class_scores.get(&class.class_name))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptManifest {
    pub dataset_id: String,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageEntry>,
}

impl PromptManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Id of a class literally named "background", if any.
    pub fn background_class(&self) -> Option<usize> {
        self.classes
            .iter()
            .find(|c| c.class_name.eq_ignore_ascii_case("background"))
            .map(|c| c.class_id)
    }

    /// Checks that every prompt of every image has a presence score.
    pub fn validate_scores(&self) -> Result<(), FormatError> {
        for (i, image) in self.images.iter().enumerate() {
            for class in &self.classes {
                for prompt in &class.prompts {
                    if image.prompt_score(prompt, class).is_none() {
                        return Err(FormatError::Schema(format!(
                            "images[{i}].class_scores[{:?}]",
                            prompt.prompt_text
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Validates every structural invariant. File existence is not checked.
    pub fn validate(&self) -> Result<(), FormatError> {
        if self.classes.is_empty() {
            return Err(FormatError::Schema("classes: empty".into()));
        }
        if self.classes.len() > 255 {
            return Err(FormatError::Schema(
                "classes: at most 255 classes fit an 8-bit mask".into(),
            ));
        }
        let ids: Vec<usize> = self.classes.iter().map(|c| c.class_id).collect();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(FormatError::NonDenseClassIds(ids));
        }

        let mut prompt_texts = BTreeSet::new();
        for (ci, class) in self.classes.iter().enumerate() {
            if class.prompts.is_empty() {
                return Err(FormatError::Schema(format!("classes[{ci}].prompts")));
            }
            for (pi, prompt) in class.prompts.iter().enumerate() {
                if !prompt.token_include_mask.iter().any(|&b| b) {
                    return Err(FormatError::Schema(format!(
                        "classes[{ci}].prompts[{pi}].token_include_mask"
                    )));
                }
                if !prompt_texts.insert(prompt.prompt_text.as_str()) {
                    return Err(FormatError::Schema(format!(
                        "classes[{ci}].prompts[{pi}].prompt_text (duplicate)"
                    )));
                }
            }
        }

        let mut image_ids = BTreeSet::new();
        for (ii, image) in self.images.iter().enumerate() {
            if !image_ids.insert(image.image_id.as_str()) {
                return Err(FormatError::Schema(format!(
                    "images[{ii}].image_id (duplicate)"
                )));
            }
            for text in &prompt_texts {
                if !image.attn_paths.contains_key(*text) {
                    return Err(FormatError::Schema(format!(
                        "images[{ii}].attn_paths[{text:?}]"
                    )));
                }
            }
            if let Some(extra) = image
                .attn_paths
                .keys()
                .find(|k| !prompt_texts.contains(k.as_str()))
            {
                return Err(FormatError::Schema(format!(
                    "images[{ii}].attn_paths[{extra:?}] (unknown prompt)"
                )));
            }
            for (key, &score) in &image.class_scores {
                if !score.is_finite() || !(0.0..=1.0).contains(&score) {
                    return Err(FormatError::Schema(format!(
                        "images[{ii}].class_scores[{key:?}] = {score}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for image in &mut self.images {
            resolve(&mut image.raster_path);
            if let Some(mask) = image.mask_path.as_mut() {
                resolve(mask);
            }
            for path in image.attn_paths.values_mut() {
                resolve(path);
            }
        }
    }

    fn check_files(&self) -> Result<(), FormatError> {
        for image in &self.images {
            let paths = std::iter::once(&image.raster_path)
                .chain(image.mask_path.iter())
                .chain(image.attn_paths.values());
            for path in paths {
                if !path.is_file() {
                    return Err(FormatError::MissingFile(path.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Parses, validates, and resolves a manifest. Relative paths are taken
/// relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<PromptManifest, FormatError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut manifest: PromptManifest =
        serde_json::from_str(&text).map_err(|e| FormatError::Schema(e.to_string()))?;
    manifest.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.resolve_paths(base);
    manifest.check_files()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &PromptManifest, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| FormatError::Schema(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
