//! Dataset manifests, image loading and annotation parsing.
//!
//! Annotations (PASCAL VOC XML or COCO JSON) are only ever turned into a
//! [`GroundTruthSet`] for evaluation; nothing on the training path reads
//! them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;

use crate::embedding::validate_vocabulary;
use crate::error::{Error, Result};
use crate::eval::GroundTruthSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationSource {
    /// Directory of `<image id>.xml` files.
    Voc(PathBuf),
    /// One `instances_*.json` file.
    Coco(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub id: String,
    pub path: PathBuf,
}

/// An ordered image list plus its class vocabulary.
///
/// On disk this is a `key=value` text file: `split`, then one `class=` line
/// per class, an optional `annotations=voc:<dir>` or `annotations=coco:<file>`,
/// and one `image=<path>` line per image. Relative paths resolve against the
/// manifest's directory; an image's id is its file stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub classes: Vec<String>,
    pub images: Vec<ImageEntry>,
    pub annotations: Option<AnnotationSource>,
}

fn image_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(String::from)
        .ok_or_else(|| Error::ingest(path, "cannot derive an image id from the file name"))
}

impl DatasetManifest {
    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|e| e.id.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut split = None;
        let mut classes = Vec::new();
        let mut images = Vec::new();
        let mut annotations = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::ingest(path, format!("line {}: expected key=value", n + 1)))?;
            match key.trim() {
                "split" => split = Some(value.to_string()),
                "class" => classes.push(value.to_string()),
                "image" => {
                    let p = root.join(value);
                    images.push(ImageEntry { id: image_id(&p)?, path: p });
                }
                "annotations" => {
                    annotations = Some(match value.split_once(':') {
                        Some(("voc", dir)) => AnnotationSource::Voc(root.join(dir)),
                        Some(("coco", file)) => AnnotationSource::Coco(root.join(file)),
                        _ => {
                            return Err(Error::ingest(
                                path,
                                format!("annotations must be voc:<dir> or coco:<file>, got {value:?}"),
                            ))
                        }
                    })
                }
                other => return Err(Error::ingest(path, format!("unknown key {other:?}"))),
            }
        }
        validate_vocabulary(&classes).map_err(|e| Error::ingest(path, e.to_string()))?;
        let mut seen = HashSet::new();
        if let Some(dup) = images.iter().find(|e| !seen.insert(e.id.clone())) {
            return Err(Error::ingest(path, format!("duplicate image id {:?}", dup.id)));
        }
        Ok(DatasetManifest {
            split: split.unwrap_or_else(|| "train".into()),
            classes,
            images,
            annotations,
        })
    }

    /// Writes the manifest with paths relative to `path`'s directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| -> String {
            p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut out = format!("split={}\n", self.split);
        for c in &self.classes {
            writeln!(out, "class={c}").unwrap();
        }
        match &self.annotations {
            Some(AnnotationSource::Voc(d)) => writeln!(out, "annotations=voc:{}", rel(d)).unwrap(),
            Some(AnnotationSource::Coco(f)) => writeln!(out, "annotations=coco:{}", rel(f)).unwrap(),
            None => {}
        }
        for e in &self.images {
            writeln!(out, "image={}", rel(&e.path)).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Ground truth for this split, rows in image order.
    pub fn ground_truth(&self) -> Result<Option<GroundTruthSet>> {
        let truth = match &self.annotations {
            None => return Ok(None),
            Some(AnnotationSource::Voc(dir)) => parse_voc(dir, &self.classes)?,
            Some(AnnotationSource::Coco(file)) => parse_coco(file, &self.classes)?,
        };
        truth.aligned_to(&self.ids()).map(Some)
    }
}

/// Decodes an image file into RGB8.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::ingest(path, "image has zero area"));
    }
    Ok(rgb)
}

fn class_index(vocabulary: &[String]) -> HashMap<&str, usize> {
    vocabulary.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
}

/// Parses one VOC annotation file into the set of class indices present.
pub fn parse_voc_file(path: &Path, vocabulary: &[String]) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| Error::ingest(path, format!("malformed XML: {e}")))?;
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(Error::ingest(path, "root element is not <annotation>"));
    }
    let index = class_index(vocabulary);
    let mut row = vec![0u8; vocabulary.len()];
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = obj
            .children()
            .find(|n| n.has_tag_name("name"))
            .and_then(|n| n.text())
            .map(str::trim)
            .ok_or_else(|| Error::ingest(path, "<object> without <name>"))?;
        let i = *index
            .get(name)
            .ok_or_else(|| Error::ingest(path, format!("unknown class {name:?}")))?;
        row[i] = 1;
    }
    Ok(row)
}

/// Parses every `*.xml` in `dir`; an image's id is its file stem.
pub fn parse_voc(dir: &Path, vocabulary: &[String]) -> Result<GroundTruthSet> {
    validate_vocabulary(vocabulary)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    files.sort();
    let mut image_ids = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len() * vocabulary.len());
    for f in &files {
        image_ids.push(image_id(f)?);
        labels.extend(parse_voc_file(f, vocabulary)?);
    }
    Ok(GroundTruthSet {
        class_names: vocabulary.to_vec(),
        image_ids,
        labels,
    })
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses a COCO instances file. Category ids map to names through the
/// file's own `categories`; an image's id is the stem of its `file_name`.
pub fn parse_coco(path: &Path, vocabulary: &[String]) -> Result<GroundTruthSet> {
    validate_vocabulary(vocabulary)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::ingest(path, format!("malformed JSON: {e}")))?;
    let index = class_index(vocabulary);
    let mut category: HashMap<u64, usize> = HashMap::new();
    for c in &coco.categories {
        let i = *index
            .get(c.name.as_str())
            .ok_or_else(|| Error::ingest(path, format!("unknown class {:?}", c.name)))?;
        category.insert(c.id, i);
    }
    let c = vocabulary.len();
    // BTreeMap keeps rows in image-id order.
    let mut rows: BTreeMap<u64, (String, Vec<u8>)> = BTreeMap::new();
    for img in &coco.images {
        let id = image_id(Path::new(&img.file_name))?;
        if rows.insert(img.id, (id, vec![0; c])).is_some() {
            return Err(Error::ingest(path, format!("duplicate image id {}", img.id)));
        }
    }
    for a in &coco.annotations {
        let cls = *category
            .get(&a.category_id)
            .ok_or_else(|| Error::ingest(path, format!("unknown category id {}", a.category_id)))?;
        let row = rows
            .get_mut(&a.image_id)
            .ok_or_else(|| Error::ingest(path, format!("annotation for unknown image {}", a.image_id)))?;
        row.1[cls] = 1;
    }
    let mut image_ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len() * c);
    for (_, (id, row)) in rows {
        image_ids.push(id);
        labels.extend(row);
    }
    Ok(GroundTruthSet {
        class_names: vocabulary.to_vec(),
        image_ids,
        labels,
    })
}

/// Object entry for [`voc_xml`]: class name and `(xmin, ymin, xmax, ymax)`.
pub type VocObject = (String, (u32, u32, u32, u32));

/// Minimal VOC annotation document.
pub fn voc_xml(filename: &str, width: u32, height: u32, objects: &[VocObject]) -> String {
    let mut out = String::from("<annotation>\n");
    writeln!(out, "  <filename>{filename}</filename>").unwrap();
    writeln!(
        out,
        "  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>"
    )
    .unwrap();
    for (name, (x0, y0, x1, y1)) in objects {
        writeln!(
            out,
            "  <object><name>{name}</name><difficult>0</difficult><bndbox><xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax></bndbox></object>"
        )
        .unwrap();
    }
    out.push_str("</annotation>\n");
    out
}
