//! Encoder interface, embedding records and the on-disk embedding cache.

use std::collections::HashSet;
use std::path::Path;

use image::RgbImage;

use crate::envelope::{self, Blob, Manifest};
use crate::error::{Error, Result};
use crate::snippet::{self, GridShape};

pub const CLASS_PLACEHOLDER: &str = "[class]";
pub const DEFAULT_TEMPLATE: &str = "a photo of the [class]";

const CACHE_KIND: &str = "embedding-cache";

/// A vision-language encoder pair with a fixed embedding width and softmax
/// temperature.
///
/// Implementations must be pure: the same input always yields the same
/// vector, so encoding can run from many threads at once.
pub trait Encoder: Send + Sync {
    /// Model name and version, recorded in every cache.
    fn identity(&self) -> &str;
    fn visual_dim(&self) -> usize;
    fn temperature(&self) -> f64;
    fn encode_image_raw(&self, image: &RgbImage) -> Result<Vec<f32>>;
    fn encode_text_raw(&self, prompt: &str) -> Result<Vec<f32>>;
}

fn check_vector(v: &[f32], dim: usize, what: &'static str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Config(format!(
            "encoder returned a {}-dim {what} embedding, handle declares {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Encoder(format!("non-finite {what} embedding")));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::Encoder(format!("zero-norm {what} embedding")));
    }
    Ok(())
}

/// Encodes one image, enforcing the handle's dimension and finiteness.
pub fn encode_image(encoder: &dyn Encoder, image: &RgbImage) -> Result<Vec<f32>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Invalid("image has zero area".into()));
    }
    let v = encoder.encode_image_raw(image)?;
    check_vector(&v, encoder.visual_dim(), "image")?;
    Ok(v)
}

/// Cached visual embeddings for one image: the whole image plus every
/// snippet of its grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub global: Vec<f32>,
    /// `grid.count() * dim` values, snippet-major.
    pub snippets: Vec<f32>,
    pub grid: GridShape,
}

impl EmbeddingRecord {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn snippet_count(&self) -> usize {
        self.grid.count()
    }

    pub fn snippet(&self, j: usize) -> &[f32] {
        let k = self.dim();
        &self.snippets[j * k..(j + 1) * k]
    }

    pub fn snippet_embeddings(&self) -> impl Iterator<Item = &[f32]> {
        self.snippets.chunks_exact(self.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if k == 0 {
            return Err(Error::Invalid(format!("{}: empty embedding", self.image_id)));
        }
        if self.snippets.len() != self.grid.count() * k {
            return Err(Error::Dimension {
                what: "snippet embeddings",
                expected: self.grid.count() * k,
                got: self.snippets.len(),
            });
        }
        check_vector(&self.global, k, "image")?;
        for s in self.snippet_embeddings() {
            check_vector(s, k, "snippet")?;
        }
        Ok(())
    }
}

/// Splits `image` on `grid` and encodes the whole image and every snippet.
pub fn encode_record(
    encoder: &dyn Encoder,
    image_id: &str,
    image: &RgbImage,
    grid: GridShape,
) -> Result<EmbeddingRecord> {
    let global = encode_image(encoder, image)?;
    let mut snippets = Vec::with_capacity(grid.count() * global.len());
    for s in snippet::split(image, grid)? {
        snippets.extend(encode_image(encoder, &s.image)?);
    }
    Ok(EmbeddingRecord {
        image_id: image_id.to_string(),
        global,
        snippets,
        grid,
    })
}

/// Class-prompt embeddings, one row per class in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingMatrix {
    pub class_names: Vec<String>,
    pub template: String,
    dim: usize,
    rows: Vec<f32>,
}

impl TextEmbeddingMatrix {
    pub fn new(
        class_names: Vec<String>,
        template: String,
        dim: usize,
        rows: Vec<f32>,
    ) -> Result<Self> {
        validate_vocabulary(&class_names)?;
        if rows.len() != class_names.len() * dim {
            return Err(Error::Dimension {
                what: "text embedding matrix",
                expected: class_names.len() * dim,
                got: rows.len(),
            });
        }
        for row in rows.chunks_exact(dim.max(1)) {
            check_vector(row, dim, "text")?;
        }
        Ok(TextEmbeddingMatrix {
            class_names,
            template,
            dim,
            rows,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class: usize) -> &[f32] {
        &self.rows[class * self.dim..(class + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.rows
    }
}

pub fn validate_vocabulary(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Invalid("class vocabulary is empty".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if n.trim().is_empty() {
            return Err(Error::Invalid("blank class name".into()));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::Invalid(format!("duplicate class name {n:?}")));
        }
    }
    Ok(())
}

/// Fills `template` for one class name.
pub fn render_prompt(template: &str, class_name: &str) -> String {
    template.replace(CLASS_PLACEHOLDER, class_name)
}

/// Encodes one prompt per class, `[class]` substituted in `template`.
pub fn encode_class_prompts(
    encoder: &dyn Encoder,
    vocabulary: &[String],
    template: &str,
) -> Result<TextEmbeddingMatrix> {
    validate_vocabulary(vocabulary)?;
    if !template.contains(CLASS_PLACEHOLDER) {
        return Err(Error::Config(format!(
            "prompt template {template:?} has no {CLASS_PLACEHOLDER} placeholder"
        )));
    }
    let dim = encoder.visual_dim();
    let mut rows = Vec::with_capacity(vocabulary.len() * dim);
    for name in vocabulary {
        let v = encoder.encode_text_raw(&render_prompt(template, name))?;
        check_vector(&v, dim, "text")?;
        rows.extend(v);
    }
    TextEmbeddingMatrix::new(vocabulary.to_vec(), template.to_string(), dim, rows)
}

/// Everything the alignment stage needs: per-image embeddings, class-prompt
/// embeddings and the encoder's temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub encoder_id: String,
    pub tau: f64,
    pub records: Vec<EmbeddingRecord>,
    pub text: TextEmbeddingMatrix,
}

impl EmbeddingCache {
    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.records.first().map(|r| r.grid)
    }

    pub fn image_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.image_id.as_str()).collect()
    }

    fn validate(&self) -> Result<GridShape> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("temperature must be > 0, got {}", self.tau)));
        }
        let k = self.text.dim();
        let grid = self.grid().unwrap_or(GridShape { rows: 1, cols: 1 });
        let mut ids = HashSet::new();
        for r in &self.records {
            if r.dim() != k {
                return Err(Error::Dimension {
                    what: "record embedding width",
                    expected: k,
                    got: r.dim(),
                });
            }
            if r.grid != grid {
                return Err(Error::Invalid(format!(
                    "{}: grid {} differs from {}",
                    r.image_id, r.grid, grid
                )));
            }
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate image id {:?}", r.image_id)));
            }
            r.validate()?;
        }
        Ok(grid)
    }

    /// Writes the cache into `dir`. Nothing is written if validation fails.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let grid = self.validate()?;
        let k = self.dim();
        let mut m = Manifest::new(CACHE_KIND);
        m.push("encoder_id", &self.encoder_id)
            .push("K", k)
            .push("N", grid.count())
            .push("rows", grid.rows)
            .push("cols", grid.cols)
            .push("C", self.text.num_classes())
            .push("tau", self.tau)
            .push("count", self.records.len())
            .push("template", &self.text.template);
        for r in &self.records {
            m.push("image", &r.image_id);
        }
        for c in &self.text.class_names {
            m.push("class", c);
        }

        let mut floats =
            Vec::with_capacity(self.records.len() * k * (1 + grid.count()) + self.text.as_flat().len());
        for r in &self.records {
            floats.extend_from_slice(&r.global);
            floats.extend_from_slice(&r.snippets);
        }
        floats.extend_from_slice(self.text.as_flat());
        envelope::write(dir, &m, &Blob::F32(floats))?;
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (m, blob, path) = envelope::read_kind(dir, CACHE_KIND)?;
        let k: usize = m.require_parsed("K", &path)?;
        let n: usize = m.require_parsed("N", &path)?;
        let rows: usize = m.require_parsed("rows", &path)?;
        let cols: usize = m.require_parsed("cols", &path)?;
        let c: usize = m.require_parsed("C", &path)?;
        let tau: f64 = m.require_parsed("tau", &path)?;
        let count: usize = m.require_parsed("count", &path)?;
        let encoder_id = m.require("encoder_id", &path)?.to_string();
        let template = m.require("template", &path)?.to_string();
        let ids = m.get_all("image");
        let classes: Vec<String> = m.get_all("class").into_iter().map(String::from).collect();
        let grid = GridShape::new(rows, cols)?;
        if grid.count() != n || ids.len() != count || classes.len() != c {
            return Err(Error::format(&path, "inconsistent counts in manifest"));
        }
        let floats = blob.into_f32(&path)?;
        let per_image = k * (1 + n);
        if floats.len() != count * per_image + c * k {
            return Err(Error::format(&path, "payload size disagrees with K, N, C, count"));
        }
        let records = ids
            .iter()
            .zip(floats.chunks_exact(per_image))
            .map(|(id, chunk)| EmbeddingRecord {
                image_id: id.to_string(),
                global: chunk[..k].to_vec(),
                snippets: chunk[k..].to_vec(),
                grid,
            })
            .collect();
        let text_rows = floats[count * per_image..].to_vec();
        let text = TextEmbeddingMatrix::new(classes, template, k, text_rows)?;
        Ok(EmbeddingCache {
            encoder_id,
            tau,
            records,
            text,
        })
    }
}
