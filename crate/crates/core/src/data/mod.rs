//! ShapeWorld: procedurally rendered multi-domain few-shot data.
//!
//! Classes are (shape family × stroke pattern) composites. A [`DomainSpec`]
//! post-processes the rendered pixels; rendering and transforms use integer
//! arithmetic (plus IEEE add/multiply), so datasets are byte-identical across
//! platforms for a given seed.

mod augment;
mod domain;
mod episode;
mod io;
mod render;

pub use augment::{augment, two_views, AugmentPolicy};
pub use domain::{format_chain, parse_chain, DomainSpec, Texture, Transform};
pub use episode::{sample_episode, Episode, DEFAULT_QUERY};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use render::{render, Composite, Geometry, ShapeFamily, Stroke, COMPOSITES, FAMILIES, STROKES};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("requested {requested} classes but only {available} composites exist")]
    ClassSpace { requested: usize, available: usize },
    #[error("invalid class id {0}")]
    ClassId(usize),
    #[error("n_per_class must be at least 1")]
    EmptyClass,
    #[error("base and novel splits share classes: {0:?}")]
    Overlap(Vec<String>),
    #[error("need {need} classes with at least {per_class} samples each, found {found}")]
    Insufficient { need: usize, per_class: usize, found: usize },
    #[error("episode needs n ≥ 1 and k ≥ 1")]
    EpisodeShape,
    #[error("domain spec: {0}")]
    Spec(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u16),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes in dataset file")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// Immutable `N×C×H×W` u8 images with labels indexing `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
    pub domain_tag: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn empty(domain_tag: &str, split: Split) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            class_names: Vec::new(),
            domain_tag: domain_tag.into(),
            split,
            channels: 3,
            height: 0,
            width: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Dataset indices of every class, in index order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// SHA-256 of the pixel payload, hex.
    pub fn payload_sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(&self.images).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits the composite space into disjoint base and novel class ids.
pub fn split_classes(n_base: usize, n_novel: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if n_base + n_novel > COMPOSITES {
        return Err(DataError::ClassSpace { requested: n_base + n_novel, available: COMPOSITES });
    }
    let mut ids: Vec<usize> = (0..COMPOSITES).collect();
    ids.shuffle(&mut rng::stream(seed, "classes", 0));
    let novel = ids[n_base..n_base + n_novel].to_vec();
    ids.truncate(n_base);
    Ok((ids, novel))
}

/// Hard check that no class appears in both splits.
pub fn check_disjoint(base: &Dataset, novel: &Dataset) -> Result<(), DataError> {
    let b: BTreeSet<&String> = base.class_names.iter().collect();
    let shared: Vec<String> = novel.class_names.iter().filter(|n| b.contains(n)).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(DataError::Overlap(shared))
    }
}

/// Renders `n_per_class` images for each composite id in `class_ids` and runs
/// them through the domain's transforms. Image `i` draws its geometry from a
/// stream keyed by `(seed, i)` alone, so two domains generated with the same
/// seed and classes differ only by their transform chains.
pub fn generate_shapeworld(
    spec: &DomainSpec,
    class_ids: &[usize],
    n_per_class: usize,
    image_size: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_per_class == 0 {
        return Err(DataError::EmptyClass);
    }
    if class_ids.len() > COMPOSITES {
        return Err(DataError::ClassSpace { requested: class_ids.len(), available: COMPOSITES });
    }
    let mut seen = BTreeSet::new();
    let mut classes = Vec::with_capacity(class_ids.len());
    for &id in class_ids {
        if !seen.insert(id) {
            return Err(DataError::ClassId(id));
        }
        classes.push(Composite::from_id(id).ok_or(DataError::ClassId(id))?);
    }

    let n = class_ids.len() * n_per_class;
    let mut images = Vec::with_capacity(n * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for (label, class) in classes.iter().enumerate() {
        for j in 0..n_per_class {
            let idx = (label * n_per_class + j) as u64;
            let mut img = render(*class, &spec.geometry, image_size, &mut rng::stream(seed, "render", idx));
            spec.apply(&mut img, image_size, image_size, &mut rng::stream(seed, &format!("domain/{}", spec.name), idx));
            images.extend_from_slice(&img);
            labels.push(label as u32);
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_names: classes.iter().map(Composite::name).collect(),
        domain_tag: spec.name.clone(),
        split,
        channels: 3,
        height: image_size,
        width: image_size,
    })
}

/// Per-channel standardization fitted once on the source data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let plane = ds.height * ds.width;
        let mut sum = vec![0f64; ds.channels];
        let mut sq = vec![0f64; ds.channels];
        for i in 0..ds.len() {
            for (c, chunk) in ds.image(i).chunks(plane).enumerate() {
                for &p in chunk {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (ds.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / count - m * m).max(0.0).sqrt()).max(1e-3) as f32).collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// `(p/255 − mean_c)/std_c` for a stack of raw images.
    pub fn tensor(&self, images: &[&[u8]], c: usize, h: usize, w: usize) -> Tensor {
        let plane = h * w;
        let mut data = Vec::with_capacity(images.len() * c * plane);
        for img in images {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                data.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&p| (p as f32 / 255.0 - m) / s));
            }
        }
        Tensor::new(&[images.len(), c, h, w], data).expect("non-empty batch")
    }

    pub fn batch(&self, ds: &Dataset, indices: &[usize]) -> Tensor {
        let imgs: Vec<&[u8]> = indices.iter().map(|&i| ds.image(i)).collect();
        self.tensor(&imgs, ds.channels, ds.height, ds.width)
    }
}
