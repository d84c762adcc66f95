//! Class/domain text prompts and their embeddings.
//!
//! Prompts follow a triplet structure: general prompts name a class, a
//! conditional phrase names a domain (the empty phrase keeps the source
//! style), and specific prompts compose both. A pluggable [`TextEncoder`]
//! turns prompts into unit vectors; the default [`StubTextEncoder`] is a
//! deterministic hash-seeded draw so the stack runs without any pretrained
//! text model. Per-pixel embedding maps are broadcast from one embedding
//! per (class, condition) pair, never encoded per pixel.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Label value excluded from losses, metrics, and embedding maps.
pub const IGNORE_LABEL: u8 = 255;

/// General prompt templates; `{}` is replaced by the class name.
pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "a photo of {}",
    "This is a photo of a {}",
    "a picture of {}",
    "an image of {}",
    "a photograph of {}",
    "a close-up photo of {}",
    "a scene containing {}",
];

/// Conditional domain phrases. The empty phrase keeps the source style.
pub const DEFAULT_CONDITIONS: [&str; 5] = ["", "in snow", "in night", "in fog", "in rain"];

/// Text encoder interface: deterministic, unit-norm output.
pub trait TextEncoder {
    fn encode(&self, prompt: &str) -> Result<Array1<f64>>;
    fn dim(&self) -> usize;
}

/// Hash-seeded pseudo-random text encoder.
///
/// Each prompt string seeds a PRNG (via SHA-256 of the prompt bytes mixed
/// with `seed`), from which `dim` standard normals are drawn and normalized.
/// Identical strings always produce identical vectors; distinct strings are
/// distinct with overwhelming probability. A real pretrained text encoder
/// can be dropped in behind the same trait.
#[derive(Debug, Clone)]
pub struct StubTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for StubTextEncoder {
    fn encode(&self, prompt: &str) -> Result<Array1<f64>> {
        if prompt.is_empty() {
            return Err(Error::invalid("cannot encode an empty prompt"));
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let mut seed_bytes = [0u8; 32];
        seed_bytes.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        let mut v = Array1::from_shape_fn(self.dim, |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm);
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// The general / conditional / specific prompt triplet for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTriplet {
    pub general: Vec<String>,
    pub conditional: String,
    pub specific: Vec<String>,
}

/// Per-class text embedding matrix with unit-norm rows.
#[derive(Debug, Clone)]
pub struct TextEmbedTable {
    /// `C x D_emb`, rows unit-norm.
    pub embeddings: Array2<f64>,
    pub class_names: Vec<String>,
}

impl TextEmbedTable {
    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// Dense per-pixel specific/general/difference embedding maps (`H x W x D`).
#[derive(Debug, Clone)]
pub struct PixelDomainEmbeddings {
    pub specific: Array3<f64>,
    pub general: Array3<f64>,
    pub difference: Array3<f64>,
    pub condition_index: usize,
}

fn fill_template(template: &str, class_name: &str) -> String {
    template.replace("{}", class_name)
}

/// Build the prompt triplet for one class under one conditional phrase.
/// An empty condition yields `specific == general`.
pub fn build_prompt_triplet(
    class_name: &str,
    condition: &str,
    templates: &[String],
) -> Result<PromptTriplet> {
    if class_name.is_empty() {
        return Err(Error::invalid("class name must be non-empty"));
    }
    let general: Vec<String> = templates.iter().map(|t| fill_template(t, class_name)).collect();
    let specific: Vec<String> = if condition.is_empty() {
        general.clone()
    } else {
        general.iter().map(|p| format!("{p} {condition}")).collect()
    };
    Ok(PromptTriplet {
        general,
        conditional: condition.to_string(),
        specific,
    })
}

/// Encode each class through every template, average, and renormalize.
pub fn build_class_embeddings(
    class_names: &[String],
    templates: &[String],
    encoder: &dyn TextEncoder,
) -> Result<TextEmbedTable> {
    if class_names.is_empty() {
        return Err(Error::invalid("class name list must be non-empty"));
    }
    if templates.is_empty() {
        return Err(Error::invalid("template list must be non-empty"));
    }
    let mut seen = std::collections::HashSet::new();
    for name in class_names {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!("duplicate class name: {name}")));
        }
    }
    let dim = encoder.dim();
    let mut table = Array2::<f64>::zeros((class_names.len(), dim));
    for (c, name) in class_names.iter().enumerate() {
        let mean = mean_embedding(
            templates.iter().map(|t| fill_template(t, name)),
            encoder,
        )?;
        let norm = mean.dot(&mean).sqrt();
        table.row_mut(c).assign(&mean.mapv(|v| v / norm));
    }
    Ok(TextEmbedTable {
        embeddings: table,
        class_names: class_names.to_vec(),
    })
}

fn mean_embedding(
    prompts: impl Iterator<Item = String>,
    encoder: &dyn TextEncoder,
) -> Result<Array1<f64>> {
    let mut sum = Array1::<f64>::zeros(encoder.dim());
    let mut count = 0usize;
    for prompt in prompts {
        sum += &encoder.encode(&prompt)?;
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Mean-over-templates specific and general embeddings for one
/// (class, condition) pair. Not renormalized: the difference is taken on
/// the raw means.
pub fn class_condition_embedding(
    class_name: &str,
    condition: &str,
    templates: &[String],
    encoder: &dyn TextEncoder,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let triplet = build_prompt_triplet(class_name, condition, templates)?;
    let general = mean_embedding(triplet.general.iter().cloned(), encoder)?;
    let specific = if condition.is_empty() {
        general.clone()
    } else {
        mean_embedding(triplet.specific.iter().cloned(), encoder)?
    };
    Ok((specific, general))
}

/// Broadcast per-(class, condition) embeddings over a ground-truth mask.
///
/// Every pixel labeled `c` carries the specific embedding of class `c`
/// under the chosen condition, the general embedding of class `c`, and
/// their difference. Ignore-label pixels carry zero vectors.
pub fn pixel_domain_embeddings(
    gt_mask: &Array2<u8>,
    condition_index: usize,
    encoder: &dyn TextEncoder,
    class_names: &[String],
    templates: &[String],
    conditions: &[String],
) -> Result<PixelDomainEmbeddings> {
    if condition_index >= conditions.len() {
        return Err(Error::invalid(format!(
            "condition index {condition_index} out of range [0, {})",
            conditions.len()
        )));
    }
    let condition = &conditions[condition_index];
    let dim = encoder.dim();
    let (h, w) = gt_mask.dim();

    // One encoder pass per class present in the mask, then broadcast.
    let mut per_class: HashMap<u8, (Array1<f64>, Array1<f64>)> = HashMap::new();
    for &label in gt_mask.iter() {
        if label == IGNORE_LABEL || per_class.contains_key(&label) {
            continue;
        }
        let name = class_names.get(label as usize).ok_or_else(|| {
            Error::invalid(format!(
                "label {label} out of range for {} classes",
                class_names.len()
            ))
        })?;
        per_class.insert(
            label,
            class_condition_embedding(name, condition, templates, encoder)?,
        );
    }

    let mut specific = Array3::<f64>::zeros((h, w, dim));
    let mut general = Array3::<f64>::zeros((h, w, dim));
    let mut difference = Array3::<f64>::zeros((h, w, dim));
    for y in 0..h {
        for x in 0..w {
            let label = gt_mask[[y, x]];
            if label == IGNORE_LABEL {
                continue;
            }
            let (spec, gen) = &per_class[&label];
            for d in 0..dim {
                let s = spec[d];
                let g = gen[d];
                specific[[y, x, d]] = s;
                general[[y, x, d]] = g;
                difference[[y, x, d]] = s - g;
            }
        }
    }
    Ok(PixelDomainEmbeddings {
        specific,
        general,
        difference,
        condition_index,
    })
}

/// Precomputed (class, condition) embedding tables for the training loop.
///
/// Build once, then broadcast per step. Concurrent reads are fine; the
/// table is immutable after construction.
#[derive(Debug, Clone)]
pub struct PromptCache {
    /// `[K][C]` specific-mean embeddings.
    specific: Vec<Vec<Array1<f64>>>,
    /// `[C]` general-mean embeddings.
    general: Vec<Array1<f64>>,
    dim: usize,
}

impl PromptCache {
    pub fn build(
        class_names: &[String],
        templates: &[String],
        conditions: &[String],
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        let mut general = Vec::with_capacity(class_names.len());
        for name in class_names {
            general.push(mean_embedding(
                templates.iter().map(|t| fill_template(t, name)),
                encoder,
            )?);
        }
        let mut specific = Vec::with_capacity(conditions.len());
        for condition in conditions {
            let mut row = Vec::with_capacity(class_names.len());
            for (c, name) in class_names.iter().enumerate() {
                if condition.is_empty() {
                    row.push(general[c].clone());
                } else {
                    let (spec, _) =
                        class_condition_embedding(name, condition, templates, encoder)?;
                    row.push(spec);
                }
            }
            specific.push(row);
        }
        Ok(Self {
            specific,
            general,
            dim: encoder.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_conditions(&self) -> usize {
        self.specific.len()
    }

    /// Broadcast cached embeddings over a mask; same contract as
    /// [`pixel_domain_embeddings`].
    pub fn pixel_embeddings(
        &self,
        gt_mask: &Array2<u8>,
        condition_index: usize,
    ) -> Result<PixelDomainEmbeddings> {
        if condition_index >= self.specific.len() {
            return Err(Error::invalid(format!(
                "condition index {condition_index} out of range [0, {})",
                self.specific.len()
            )));
        }
        let (h, w) = gt_mask.dim();
        let dim = self.dim;
        let mut specific = Array3::<f64>::zeros((h, w, dim));
        let mut general = Array3::<f64>::zeros((h, w, dim));
        let mut difference = Array3::<f64>::zeros((h, w, dim));
        for y in 0..h {
            for x in 0..w {
                let label = gt_mask[[y, x]];
                if label == IGNORE_LABEL {
                    continue;
                }
                let c = label as usize;
                if c >= self.general.len() {
                    return Err(Error::invalid(format!(
                        "label {c} out of range for {} classes",
                        self.general.len()
                    )));
                }
                let spec = &self.specific[condition_index][c];
                let gen = &self.general[c];
                for d in 0..dim {
                    specific[[y, x, d]] = spec[d];
                    general[[y, x, d]] = gen[d];
                    difference[[y, x, d]] = spec[d] - gen[d];
                }
            }
        }
        Ok(PixelDomainEmbeddings {
            specific,
            general,
            difference,
            condition_index,
        })
    }
}

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

pub fn default_conditions() -> Vec<String> {
    DEFAULT_CONDITIONS.iter().map(|s| s.to_string()).collect()
}
