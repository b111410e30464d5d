//! End-to-end orchestration: configuration, fitting every stage on a
//! training corpus, encoding images, and evaluating retrieval.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationConfig};
use crate::codebooks::{fit_gmm, fit_kmeans, Codebook, DiagonalGmm};
use crate::embedding::{
    embed_fv, embed_temb, embed_temb_raw, embed_vlad, fit_temb_projection, EmbedKind,
    TembProjection,
};
use crate::error::{Error, Result};
use crate::hashing::{encode_itq, fit_itq, ItqModel, DEFAULT_ITQ_ITERATIONS};
use crate::linalg::norm;
use crate::masking::{apply_mask, compute_mask, stack_hypercolumn, MaskKind};
use crate::postprocessing::{
    apply_rn, fit_rn_with_epsilon, power_normalize, RnModel, DEFAULT_ALPHA, DEFAULT_RN_EPSILON,
};
use crate::preprocessing::{apply_pca, fit_pca, PcaModel};
use crate::retrieval::{mean_ap, search_cosine, search_hamming, GroundTruth, RankedList};
use crate::store::{load_keypoints, load_tensor, BinaryCodeFile, GlobalDescriptorFile};
use crate::tensor::{DescriptorSet, FeatureTensor, KeypointList};

/// `(name, D, d, |C|)` rows of the final-dimensionality table, all T-emb with 128 dropped components.
pub const PRESETS: [(&str, usize, usize, usize); 5] = [
    ("D512", 512, 32, 20),
    ("D1024", 1024, 64, 18),
    ("D2048", 2048, 64, 34),
    ("D4096", 4096, 64, 66),
    ("D8064", 8064, 128, 64),
];

pub const TEMB_DROP: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mask: MaskKind,
    /// Layer suffixes stacked into a hyper-column, in this order.
    pub layers: Vec<String>,
    pub embed: EmbedKind,
    /// Local descriptor dimension after PCA, `d`.
    pub pca_dim: usize,
    /// `|C|`: centroids or mixture components.
    pub codebook_size: usize,
    /// Leading eigen-directions removed from T-emb, `e`.
    pub drop: usize,
    pub aggregation: AggregationConfig,
    pub alpha: f64,
    pub whiten: bool,
    pub rn_epsilon: f64,
    /// Output dimension of rotation normalisation; `None` keeps the embedding dimension.
    pub rn_dim: Option<usize>,
    /// Code length `L`; `None` disables hashing.
    pub hash_bits: Option<usize>,
    pub itq_iterations: usize,
    pub seed: u64,
    /// Cap on local descriptors sampled for PCA and codebook training.
    pub max_train_descriptors: usize,
    /// Cap on descriptors used to fit the T-emb projection.
    pub max_embed_descriptors: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask: MaskKind::Max,
            layers: vec!["conv5_3".into()],
            embed: EmbedKind::Temb,
            pca_dim: 32,
            codebook_size: 20,
            drop: TEMB_DROP,
            aggregation: AggregationConfig::default(),
            alpha: DEFAULT_ALPHA,
            whiten: true,
            rn_epsilon: DEFAULT_RN_EPSILON,
            rn_dim: None,
            hash_bits: None,
            itq_iterations: DEFAULT_ITQ_ITERATIONS,
            seed: 1,
            max_train_descriptors: 100_000,
            max_embed_descriptors: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected on/off, got {value:?}"
        ))),
    }
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim().to_ascii_lowercase().as_str() {
        "" | "none" | "off" | "0" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl PipelineConfig {
    /// Configuration for one of [`PRESETS`]; other fields keep their defaults.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_preset(name)?;
        Ok(cfg)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (_, _, d, c) = PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let known: Vec<_> = PRESETS.iter().map(|p| p.0).collect();
                Error::Config(format!(
                    "unknown preset {name:?}; known: {}",
                    known.join(", ")
                ))
            })?;
        self.embed = EmbedKind::Temb;
        self.pca_dim = *d;
        self.codebook_size = *c;
        self.drop = TEMB_DROP;
        Ok(())
    }

    /// Sets one `key = value` entry as used in config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.apply_preset(v)?,
            "mask" => self.mask = v.parse()?,
            "layers" => {
                self.layers = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            "embed" => self.embed = v.parse()?,
            "dim" | "pca_dim" => self.pca_dim = parse(key, v)?,
            "codebook_size" | "codebook-size" => self.codebook_size = parse(key, v)?,
            "drop" => self.drop = parse(key, v)?,
            "agg" | "aggregation" => self.aggregation.mode = v.parse()?,
            "sinkhorn_iterations" => self.aggregation.sinkhorn_iterations = parse(key, v)?,
            "sinkhorn_exponent" => self.aggregation.sinkhorn_exponent = parse(key, v)?,
            "clamp_negative" => self.aggregation.clamp_negative = parse_flag(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "whiten" => self.whiten = parse_flag(key, v)?,
            "rn_epsilon" => self.rn_epsilon = parse(key, v)?,
            "rn_dim" => self.rn_dim = parse_optional(key, v)?,
            "bits" | "hash_bits" => self.hash_bits = parse_optional(key, v)?,
            "itq_iterations" => self.itq_iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_train_descriptors" => self.max_train_descriptors = parse(key, v)?,
            "max_embed_descriptors" => self.max_embed_descriptors = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Applies a UTF-8 `key = value` file; blank lines and `#` comments are ignored.
    pub fn apply_kv_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Embedding dimension `D` before rotation normalisation.
    pub fn embed_dim(&self) -> Option<usize> {
        let drop = if self.embed == EmbedKind::Temb {
            self.drop
        } else {
            0
        };
        self.embed
            .output_dim(self.pca_dim, self.codebook_size, drop)
    }

    /// Dimension of the real-valued global descriptor.
    pub fn final_dim(&self) -> Option<usize> {
        self.embed_dim().map(|d| self.rn_dim.unwrap_or(d))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return fail("at least one layer is required".into());
        }
        if self.pca_dim == 0 || self.codebook_size == 0 {
            return fail("dim and codebook size must be positive".into());
        }
        if self.embed != EmbedKind::Temb && self.drop != 0 {
            return fail(format!(
                "drop = {} only applies to temb; set drop = 0 for {}",
                self.drop, self.embed
            ));
        }
        let Some(embed_dim) = self.embed_dim() else {
            return fail(format!(
                "temb with d = {}, |C| = {} cannot drop {} components",
                self.pca_dim, self.codebook_size, self.drop
            ));
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.rn_epsilon >= 0.0) {
            return fail(format!("rn_epsilon {} is negative", self.rn_epsilon));
        }
        let final_dim = self.rn_dim.unwrap_or(embed_dim);
        if final_dim == 0 || final_dim > embed_dim {
            return fail(format!("rn_dim {final_dim} outside [1, {embed_dim}]"));
        }
        if let Some(bits) = self.hash_bits {
            if bits == 0 || bits > final_dim {
                return fail(format!("{bits}-bit codes need 1 <= L <= D = {final_dim}"));
            }
            if self.itq_iterations == 0 {
                return fail("itq_iterations must be positive".into());
            }
        }
        if self.max_train_descriptors == 0 || self.max_embed_descriptors == 0 {
            return fail("descriptor sampling caps must be positive".into());
        }
        self.aggregation.validate()
    }
}

/// One image: its per-layer tensors (in configured layer order) and keypoints.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub name: String,
    pub layers: Vec<FeatureTensor>,
    pub keypoints: Option<KeypointList>,
}

/// Anything that can hand out images by index, loading lazily if it wants.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn name(&self, i: usize) -> &str;
    fn load(&self, i: usize) -> Result<ImageInput>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for [ImageInput] {
    fn len(&self) -> usize {
        <[ImageInput]>::len(self)
    }

    fn name(&self, i: usize) -> &str {
        &self[i].name
    }

    fn load(&self, i: usize) -> Result<ImageInput> {
        Ok(self[i].clone())
    }
}

impl ImageSource for Vec<ImageInput> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn name(&self, i: usize) -> &str {
        &self[i].name
    }

    fn load(&self, i: usize) -> Result<ImageInput> {
        Ok(self[i].clone())
    }
}

/// Files of one image inside a corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub name: String,
    pub layers: Vec<PathBuf>,
    pub keypoints: Option<PathBuf>,
}

/// Directory corpus: `<image>.<layer>.cft` tensors and optional `<image>.kpt`
/// keypoints. Tensors are read on demand.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn scan(dir: impl AsRef<Path>, layers: &[String]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut tensors: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
        let mut keypoints = BTreeMap::new();
        let listing = fs::read_dir(dir)
            .map_err(|e| Error::Malformed(format!("cannot list {}: {e}", dir.display())))?;
        for entry in listing {
            let path = entry?.path();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
                continue;
            };
            if let Some(stem) = file.strip_suffix(".cft") {
                if let Some((image, layer)) = stem.rsplit_once('.') {
                    tensors
                        .entry(image.to_owned())
                        .or_default()
                        .insert(layer.to_owned(), path.clone());
                }
            } else if let Some(image) = file.strip_suffix(".kpt") {
                keypoints.insert(image.to_owned(), path.clone());
            }
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, mut by_layer) in tensors {
            let mut paths = Vec::with_capacity(layers.len());
            for layer in layers {
                let p = by_layer.remove(layer).ok_or_else(|| {
                    Error::Malformed(format!(
                        "image {name} has no {layer} tensor in {}",
                        dir.display()
                    ))
                })?;
                paths.push(p);
            }
            entries.push(CorpusEntry {
                keypoints: keypoints.remove(&name),
                name,
                layers: paths,
            });
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!(
                "no <image>.<layer>.cft tensors in {}",
                dir.display()
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }
}

impl ImageSource for Corpus {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    fn load(&self, i: usize) -> Result<ImageInput> {
        let e = &self.entries[i];
        let layers = e
            .layers
            .iter()
            .map(load_tensor)
            .collect::<Result<Vec<_>>>()?;
        let keypoints = e.keypoints.as_ref().map(load_keypoints).transpose()?;
        Ok(ImageInput {
            name: e.name.clone(),
            layers,
            keypoints,
        })
    }
}

/// Codebook of the configured embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantizer {
    KMeans(Codebook),
    Gmm(DiagonalGmm),
}

/// Every fitted stage plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    pub config: PipelineConfig,
    /// Channels of the stacked input tensor.
    pub input_channels: usize,
    pub pca: PcaModel,
    pub quantizer: Quantizer,
    pub temb: Option<TembProjection>,
    pub rn: RnModel,
    pub itq: Option<ItqModel>,
}

/// Output of [`PipelineModel::encode_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub descriptor: Vec<f32>,
    pub code: Option<Vec<u64>>,
}

/// Wall-clock totals per encoding stage, summed over worker threads.
#[derive(Debug, Default)]
pub struct StageTimer {
    nanos: [AtomicU64; STAGES.len()],
}

pub const STAGES: [&str; 7] = [
    "load",
    "mask",
    "pca",
    "embed",
    "aggregate",
    "normalize",
    "hash",
];

impl StageTimer {
    fn time<T>(&self, stage: usize, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.nanos[stage].fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    pub fn summary(&self) -> Vec<(&'static str, Duration)> {
        STAGES
            .iter()
            .zip(&self.nanos)
            .map(|(s, n)| (*s, Duration::from_nanos(n.load(Ordering::Relaxed))))
            .collect()
    }
}

fn timed<T>(timer: Option<&StageTimer>, stage: usize, f: impl FnOnce() -> T) -> T {
    match timer {
        Some(t) => t.time(stage, f),
        None => f(),
    }
}

/// Stack, mask and gather. A SIFT mask over an image without keypoints falls
/// back to every location.
fn local_descriptors(cfg: &PipelineConfig, image: &ImageInput) -> Result<DescriptorSet> {
    if image.layers.len() != cfg.layers.len() {
        return Err(Error::Malformed(format!(
            "image {} has {} layers, the model expects {}",
            image.name,
            image.layers.len(),
            cfg.layers.len()
        )));
    }
    let tensor = stack_hypercolumn(&image.layers)?;
    tensor_descriptors(cfg.mask, &image.name, &tensor, image.keypoints.as_ref())
}

fn tensor_descriptors(
    kind: MaskKind,
    name: &str,
    tensor: &FeatureTensor,
    keypoints: Option<&KeypointList>,
) -> Result<DescriptorSet> {
    if kind == MaskKind::Sift && keypoints.is_none() {
        return Err(Error::Malformed(format!(
            "image {name} has no keypoint file but the SIFT mask needs one"
        )));
    }
    let mask = match compute_mask(kind, tensor, keypoints) {
        Ok(m) => m,
        Err(Error::EmptyMask(_)) => {
            warn!("image {name}: no keypoints, using every location");
            None
        }
        Err(e) => return Err(e),
    };
    apply_mask(tensor, mask.as_ref())
}

impl PipelineModel {
    pub fn descriptor_dim(&self) -> usize {
        self.rn.output_dim()
    }

    pub fn code_bits(&self) -> Option<usize> {
        self.itq.as_ref().map(ItqModel::bits)
    }

    pub fn embed_dim(&self) -> usize {
        self.rn.input_dim()
    }

    fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        match (&self.quantizer, self.config.embed) {
            (Quantizer::KMeans(c), EmbedKind::Temb) => {
                let proj = self
                    .temb
                    .as_ref()
                    .ok_or_else(|| Error::Manifest("temb model without projection".into()))?;
                embed_temb(proj, &embed_temb_raw(c, x)?)
            }
            (Quantizer::KMeans(c), EmbedKind::Vlad) => embed_vlad(c, x),
            (Quantizer::Gmm(g), EmbedKind::Fv) => embed_fv(g, x),
            _ => Err(Error::Manifest(format!(
                "quantizer does not match embedding {}",
                self.config.embed
            ))),
        }
    }

    /// Embeds PCA-reduced descriptors; zero embeddings carry no weight in
    /// any pooling and are dropped.
    fn embed_all(&self, reduced: &DescriptorSet) -> Result<DescriptorSet> {
        let mut out = DescriptorSet::with_capacity(self.embed_dim(), reduced.len());
        for row in reduced.rows() {
            let e = self.embed_one(row)?;
            if norm(&e) > 0.0 {
                out.push(&e)?;
            }
        }
        Ok(out)
    }

    /// Aggregated and power-normalised vector (the input of rotation normalisation).
    fn pooled(&self, local: &DescriptorSet, timer: Option<&StageTimer>) -> Result<Vec<f64>> {
        if local.dim() != self.input_channels {
            return Err(Error::DimensionMismatch {
                expected: self.input_channels,
                actual: local.dim(),
            });
        }
        let reduced = timed(timer, 2, || apply_pca(&self.pca, local, true))?;
        let embedded = timed(timer, 3, || self.embed_all(&reduced))?;
        let agg = timed(timer, 4, || {
            if embedded.is_empty() {
                Ok(vec![0.0; self.embed_dim()])
            } else {
                aggregate(&embedded, &self.config.aggregation)
            }
        })?;
        Ok(timed(timer, 5, || power_normalize(&agg, self.config.alpha)))
    }

    fn finish(&self, pooled: &[f64], timer: Option<&StageTimer>) -> Result<Encoded> {
        let global = timed(timer, 5, || apply_rn(&self.rn, pooled))?;
        let descriptor: Vec<f32> = global.iter().map(|&v| v as f32).collect();
        let code = match &self.itq {
            Some(itq) => {
                let stored: Vec<f64> = descriptor.iter().map(|&v| v as f64).collect();
                Some(timed(timer, 6, || encode_itq(itq, &stored))?)
            }
            None => None,
        };
        Ok(Encoded { descriptor, code })
    }

    pub fn encode_image(&self, image: &ImageInput) -> Result<Encoded> {
        self.encode_image_timed(image, None)
    }

    pub fn encode_image_timed(
        &self,
        image: &ImageInput,
        timer: Option<&StageTimer>,
    ) -> Result<Encoded> {
        let local = timed(timer, 1, || local_descriptors(&self.config, image))?;
        let pooled = self.pooled(&local, timer)?;
        self.finish(&pooled, timer)
    }

    /// Encodes an already stacked tensor.
    pub fn encode_tensor(
        &self,
        tensor: &FeatureTensor,
        keypoints: Option<&KeypointList>,
    ) -> Result<Encoded> {
        let local = tensor_descriptors(self.config.mask, "<tensor>", tensor, keypoints)?;
        let pooled = self.pooled(&local, None)?;
        self.finish(&pooled, None)
    }
}

/// Per-image RNG stream independent of scheduling order.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn subsample(set: DescriptorSet, cap: usize, rng: &mut ChaCha8Rng) -> Result<DescriptorSet> {
    if set.len() <= cap {
        return Ok(set);
    }
    let mut idx = sample(rng, set.len(), cap).into_vec();
    idx.sort_unstable();
    let mut out = DescriptorSet::with_capacity(set.dim(), cap);
    for i in idx {
        out.push(set.row(i))?;
    }
    Ok(out)
}

/// Fits PCA, codebook, T-emb projection, RN and ITQ in that order. Every
/// fitted parameter is rounded to `f32` before the next stage is trained, so
/// the in-memory model and its saved bundle encode identically.
pub fn fit_pipeline<S: ImageSource + ?Sized>(
    train: &S,
    cfg: &PipelineConfig,
) -> Result<PipelineModel> {
    cfg.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let per_image = cfg.max_train_descriptors.div_ceil(n).max(1);

    let started = Instant::now();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let image = train.load(i)?;
            let local = local_descriptors(cfg, &image)?;
            subsample(local, per_image, &mut image_rng(cfg.seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = samples[0].dim();
    if let Some(bad) = samples.iter().position(|s| s.dim() != channels) {
        return Err(Error::Malformed(format!(
            "image {} has {} stacked channels, expected {channels}",
            train.name(bad),
            samples[bad].dim()
        )));
    }
    if cfg.pca_dim > channels {
        return Err(Error::Config(format!(
            "dim {} exceeds the {channels} input channels",
            cfg.pca_dim
        )));
    }
    let mut local = DescriptorSet::new(channels);
    for s in &samples {
        for row in s.rows() {
            local.push(row)?;
        }
    }
    drop(samples);
    info!(
        "sampled {} local descriptors from {n} images in {:?}",
        local.len(),
        started.elapsed()
    );

    let mut pca = fit_pca(&local, cfg.pca_dim)?;
    pca.snap();
    let reduced = apply_pca(&pca, &local, true)?;
    drop(local);

    let quantizer = match cfg.embed {
        EmbedKind::Fv => {
            let mut g = fit_gmm(&reduced, cfg.codebook_size, cfg.seed)?;
            g.snap();
            Quantizer::Gmm(g)
        }
        EmbedKind::Temb | EmbedKind::Vlad => {
            let mut c = fit_kmeans(&reduced, cfg.codebook_size, cfg.seed)?;
            c.snap();
            Quantizer::KMeans(c)
        }
    };

    let temb = match (&quantizer, cfg.embed) {
        (Quantizer::KMeans(c), EmbedKind::Temb) => {
            let stride = reduced.len().div_ceil(cfg.max_embed_descriptors).max(1);
            let mut raw = DescriptorSet::new(cfg.pca_dim * cfg.codebook_size);
            for row in reduced.rows().step_by(stride) {
                raw.push(&embed_temb_raw(c, row)?)?;
            }
            let mut p = fit_temb_projection(&raw, cfg.drop)?;
            p.snap();
            Some(p)
        }
        _ => None,
    };
    drop(reduced);
    info!("fitted local stages in {:?}", started.elapsed());

    let embed_dim = cfg.embed_dim().expect("validated");
    // placeholder RN so the partially fitted model can pool training images
    let mut model = PipelineModel {
        config: cfg.clone(),
        input_channels: channels,
        pca,
        quantizer,
        temb,
        rn: RnModel {
            mean: vec![0.0; embed_dim],
            rotation: nalgebra::DMatrix::identity(embed_dim, embed_dim),
            eigenvalues: vec![1.0; embed_dim],
            whiten: false,
            epsilon: 0.0,
        },
        itq: None,
    };

    let pooled = (0..n)
        .into_par_iter()
        .map(|i| {
            let image = train.load(i)?;
            model.pooled(&local_descriptors(cfg, &image)?, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = DescriptorSet::from_rows(embed_dim, &pooled)?;
    let mut rn = fit_rn_with_epsilon(
        &pooled,
        cfg.rn_dim.unwrap_or(embed_dim),
        cfg.whiten,
        cfg.rn_epsilon,
    )?;
    rn.snap();
    model.rn = rn;
    info!("fitted rotation normalisation in {:?}", started.elapsed());

    if let Some(bits) = cfg.hash_bits {
        let mut globals = DescriptorSet::with_capacity(model.descriptor_dim(), n);
        for row in pooled.rows() {
            let g: Vec<f64> = apply_rn(&model.rn, row)?
                .into_iter()
                .map(|v| v as f32 as f64)
                .collect();
            globals.push(&g)?;
        }
        let mut itq = fit_itq(&globals, bits, cfg.itq_iterations, cfg.seed)?;
        itq.snap();
        model.itq = Some(itq);
    }
    info!("fitted pipeline in {:?}", started.elapsed());
    Ok(model)
}

/// Encodes every image of `source` in parallel; output keeps source order.
pub fn encode_corpus<S: ImageSource + ?Sized>(
    model: &PipelineModel,
    source: &S,
    timer: Option<&StageTimer>,
) -> Result<Vec<(String, Encoded)>> {
    (0..source.len())
        .into_par_iter()
        .map(|i| {
            let image = timed(timer, 0, || source.load(i))?;
            let enc = model.encode_image_timed(&image, timer)?;
            Ok((image.name, enc))
        })
        .collect()
}

/// Splits encoded images into a descriptor file and, when hashing is on, a code file.
pub fn build_index(
    model: &PipelineModel,
    encoded: &[(String, Encoded)],
) -> Result<(GlobalDescriptorFile, Option<BinaryCodeFile>)> {
    let mut descriptors = GlobalDescriptorFile::new(model.descriptor_dim());
    let mut codes = model.code_bits().map(BinaryCodeFile::new);
    for (name, enc) in encoded {
        descriptors.push(name.clone(), &enc.descriptor)?;
        if let (Some(codes), Some(code)) = (codes.as_mut(), enc.code.as_ref()) {
            codes.push(name.clone(), code)?;
        }
    }
    Ok((descriptors, codes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Real,
    Binary,
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Real => "real",
            SearchMode::Binary => "binary",
        })
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(SearchMode::Real),
            "binary" | "hamming" => Ok(SearchMode::Binary),
            other => Err(Error::Config(format!("unknown search mode {other:?}"))),
        }
    }
}

/// Ranks the full index for each query.
pub fn rank_queries(
    mode: SearchMode,
    descriptors: &GlobalDescriptorFile,
    codes: Option<&BinaryCodeFile>,
    queries: &[(String, Encoded)],
) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .map(|(name, enc)| match mode {
            SearchMode::Real => {
                let q: Vec<f64> = enc.descriptor.iter().map(|&v| v as f64).collect();
                search_cosine(descriptors, name, &q, None)
            }
            SearchMode::Binary => {
                let codes = codes.ok_or_else(|| {
                    Error::Config("binary search needs a model fitted with --bits".into())
                })?;
                let code = enc
                    .code
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("query {name} has no binary code")))?;
                search_hamming(codes, name, code, None)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mode: SearchMode,
    pub per_query: Vec<(String, f64)>,
    pub map: f64,
    /// Wall-clock per phase and per encoding stage; not part of [`EvalReport::to_tsv`].
    pub timings: Vec<(String, Duration)>,
}

impl EvalReport {
    /// One `query<TAB>AP` line per query, then `mAP<TAB>value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, ap) in &self.per_query {
            out.push_str(&format!("{q}\t{ap:.6}\n"));
        }
        out.push_str(&format!("mAP\t{:.6}\n", self.map));
        out
    }
}

/// Encodes database and queries, ranks the database for every query and
/// scores it. Every query must appear in the ground truth.
pub fn run_eval<D: ImageSource + ?Sized, Q: ImageSource + ?Sized>(
    model: &PipelineModel,
    db: &D,
    queries: &Q,
    gt: &GroundTruth,
    mode: SearchMode,
) -> Result<EvalReport> {
    if mode == SearchMode::Binary && model.itq.is_none() {
        return Err(Error::Config(
            "binary evaluation needs a model fitted with --bits".into(),
        ));
    }
    for i in 0..queries.len() {
        if gt.get(queries.name(i)).is_none() {
            return Err(Error::GroundTruth(format!(
                "query {} is not in the ground truth",
                queries.name(i)
            )));
        }
    }
    let timer = StageTimer::default();
    let mut timings = Vec::new();

    let t = Instant::now();
    let db_enc = encode_corpus(model, db, Some(&timer))?;
    timings.push(("encode database".to_string(), t.elapsed()));
    let t = Instant::now();
    let mut q_enc = encode_corpus(model, queries, Some(&timer))?;
    q_enc.sort_by(|a, b| a.0.cmp(&b.0));
    timings.push(("encode queries".to_string(), t.elapsed()));

    let t = Instant::now();
    let (descriptors, codes) = build_index(model, &db_enc)?;
    let lists = rank_queries(mode, &descriptors, codes.as_ref(), &q_enc)?;
    timings.push(("search".to_string(), t.elapsed()));

    let t = Instant::now();
    let (per_query, map) = mean_ap(&lists, gt)?;
    timings.push(("average precision".to_string(), t.elapsed()));
    timings.extend(
        timer
            .summary()
            .into_iter()
            .map(|(s, d)| (format!("stage {s}"), d)),
    );
    Ok(EvalReport {
        mode,
        per_query,
        map,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_dimensions() {
        for (name, d_final, ..) in PRESETS {
            let cfg = PipelineConfig::preset(name).unwrap();
            assert_eq!(cfg.final_dim(), Some(d_final), "{name}");
            cfg.validate().unwrap();
        }
        assert!(PipelineConfig::preset("D999").is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_combinations() {
        let mut cfg = PipelineConfig::default();
        cfg.pca_dim = 8;
        cfg.codebook_size = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = PipelineConfig::default();
        cfg.embed = EmbedKind::Vlad;
        assert!(cfg.validate().is_err());
        cfg.drop = 0;
        cfg.validate().unwrap();
        assert_eq!(cfg.final_dim(), Some(640));

        let mut cfg = PipelineConfig::default();
        cfg.hash_bits = Some(1024);
        assert!(cfg.validate().is_err());
        cfg.alpha = 2.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(
            &path,
            "# retrieval config\npreset = D1024\nmask = sum\nlayers = conv5_3, conv5_2\nbits = 256\nwhiten = off\n",
        )
        .unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.apply_kv_file(&path).unwrap();
        assert_eq!(cfg.mask, MaskKind::Sum);
        assert_eq!((cfg.pca_dim, cfg.codebook_size), (64, 18));
        assert_eq!(cfg.layers, vec!["conv5_3", "conv5_2"]);
        assert_eq!(cfg.hash_bits, Some(256));
        assert!(!cfg.whiten);

        fs::write(&path, "colour = blue\n").unwrap();
        assert!(matches!(cfg.apply_kv_file(&path), Err(Error::Config(_))));
    }
}
