//! Seedable multi-domain classification data.
//!
//! One base task (well-separated class prototypes plus Gaussian within-class
//! scatter) is rendered once, then every domain applies its own feature
//! transform x' = gain * rotate(x, angle) + offset (+ optional nonlinearity,
//! + Gaussian noise). Labels are shared across domains by construction, so
//! the domains differ only in the conditional feature distribution.

use crate::bundle::Bundle;
use crate::error::{FdseError, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_FORMAT: &str = "fdse-dataset/v1";
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from a base seed and a tag path
/// (e.g. `[client, round]`). Same inputs always give the same stream.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x6A09_E667_F3BC_C909);
    for &t in tags {
        state = mix(state.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t));
    }
    let mut key = [0u8; 32];
    for i in 0..4 {
        state = mix(state.wrapping_add(0x9E37_79B9_7F4A_7C15));
        key[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// sign(x) * sqrt(|x|); inverse is sign(y) * y^2.
    SignedSqrt,
}

/// How one domain distorts the shared base features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    /// Rotation in radians: bilinear image rotation about the center for
    /// image data, plane rotation of the first two coordinates for flat data.
    pub angle: f64,
    /// Per-channel multiplicative gain, all entries > 0.
    pub gain: Vec<f64>,
    /// Per-channel additive offset.
    pub offset: Vec<f64>,
    /// Scale of i.i.d. Gaussian noise added last; 0 adds nothing and draws
    /// nothing from the rng.
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
}

impl DomainSpec {
    pub fn identity(id: impl Into<String>, channels: usize) -> Self {
        DomainSpec {
            id: id.into(),
            angle: 0.0,
            gain: vec![1.0; channels],
            offset: vec![0.0; channels],
            noise: 0.0,
            nonlinearity: None,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(FdseError::Config(format!(
                "domain id '{}' must be non-empty and use only [A-Za-z0-9_-]",
                self.id
            )));
        }
        if self.gain.len() != channels || self.offset.len() != channels {
            return Err(FdseError::Config(format!(
                "domain '{}': gain/offset lengths {}/{} must match {} channels",
                self.id,
                self.gain.len(),
                self.offset.len(),
                channels
            )));
        }
        if self.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(FdseError::Config(format!("domain '{}': gain entries must be > 0", self.id)));
        }
        if !(self.noise >= 0.0) {
            return Err(FdseError::Config(format!("domain '{}': noise scale must be >= 0", self.id)));
        }
        if !self.angle.is_finite() {
            return Err(FdseError::Config(format!("domain '{}': angle must be finite", self.id)));
        }
        Ok(())
    }

    /// The four-domain default benchmark. Difficulty comes from heavy
    /// per-domain noise (each domain alone is sample-starved, so pooling
    /// pays off) while the gain/offset spread and the signed-sqrt warp on
    /// the last two domains misalign feature statistics across clients.
    /// Noise scales track the gains so every domain keeps a comparable
    /// within-domain signal-to-noise ratio.
    pub fn synth_domains_4() -> Vec<DomainSpec> {
        let mk = |id: &str, gain: f64, offset: f64, noise: f64, warp: bool| DomainSpec {
            id: id.to_string(),
            angle: 0.0,
            gain: vec![gain],
            offset: vec![offset],
            noise,
            nonlinearity: warp.then_some(Nonlinearity::SignedSqrt),
        };
        vec![
            mk("d0", 1.0, 0.0, 2.0, false),
            mk("d1", 1.3, 0.4, 3.12, false),
            mk("d2", 0.8, -0.35, 1.76, true),
            mk("d3", 1.15, 0.25, 2.76, true),
        ]
    }
}

/// Features plus integer labels; features are [n, C, H, W] or [n, d].
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(FdseError::Dimension(format!(
                "feature shape {:?} does not lead with {} labels",
                features.shape(),
                labels.len()
            )));
        }
        for &l in &labels {
            if l as usize >= num_classes {
                return Err(FdseError::Label { label: l as usize, num_classes });
            }
        }
        Ok(LabeledDataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample (feature shape without the leading n).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Gather the given sample indices into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<u32>)> {
        let stride: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(FdseError::Dimension(format!(
                    "batch index {} out of range for {} samples",
                    i,
                    self.len()
                )));
            }
            data.extend_from_slice(&self.features.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Shared class prototypes and the un-shifted samples drawn around them.
#[derive(Debug, Clone)]
pub struct BaseTask {
    /// [num_classes, ...sample shape]
    pub prototypes: Tensor<f32>,
    pub features: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// [C, H, W] for images or [d] for flat vectors.
    pub shape: Vec<usize>,
    /// Prototype pattern amplitude.
    pub amplitude: f64,
    /// Within-class Gaussian scatter around the prototype.
    pub within_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 8,
            samples_per_class: 200,
            shape: vec![1, 16, 16],
            amplitude: 1.0,
            within_std: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FdseError::Config(format!("need >= 2 classes, got {}", self.num_classes)));
        }
        if self.samples_per_class == 0 {
            return Err(FdseError::Config("samples_per_class must be > 0".into()));
        }
        match self.shape.len() {
            1 | 3 => {}
            n => {
                return Err(FdseError::Config(format!(
                    "feature shape must be [C, H, W] or [d], got {} dims",
                    n
                )))
            }
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(FdseError::Config(format!("degenerate feature shape {:?}", self.shape)));
        }
        if self.shape.len() == 1 && self.shape[0] < 2 {
            return Err(FdseError::Config("flat features need d >= 2 for plane rotation".into()));
        }
        if !(self.amplitude > 0.0) || !(self.within_std >= 0.0) {
            return Err(FdseError::Config("amplitude must be > 0 and within_std >= 0".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.shape.len() == 3 {
            self.shape[0]
        } else {
            1
        }
    }
}

/// Integer (fx, fy) frequency pairs: distinct nonzero DFT modes, so the
/// resulting cosine patterns over a full grid are exactly orthogonal.
const FREQS: [(usize, usize); 16] = [
    (1, 0),
    (0, 1),
    (1, 1),
    (2, 0),
    (0, 2),
    (2, 1),
    (1, 2),
    (2, 2),
    (3, 0),
    (0, 3),
    (3, 1),
    (1, 3),
    (3, 2),
    (2, 3),
    (3, 3),
    (4, 1),
];

fn image_prototype(c: usize, channels: usize, h: usize, w: usize, amp: f64) -> Vec<f64> {
    let (fx, fy) = FREQS[c % FREQS.len()];
    // Second pass over the table flips cosine to sine, which stays
    // orthogonal to the first pass at the same frequency.
    let phase0 = if (c / FREQS.len()) % 2 == 1 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
    let mut p = vec![0.0; channels * h * w];
    for ch in 0..channels {
        let phase = phase0 + ch as f64 * 0.7;
        for y in 0..h {
            for x in 0..w {
                let t = 2.0 * std::f64::consts::PI
                    * (fx as f64 * x as f64 / w as f64 + fy as f64 * y as f64 / h as f64)
                    + phase;
                p[ch * h * w + y * w + x] = amp * t.cos();
            }
        }
    }
    p
}

fn flat_prototype(c: usize, d: usize, amp: f64) -> Vec<f64> {
    let f = 1 + (c % (d - 1).max(1));
    let phase = if c >= d - 1 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
    (0..d)
        .map(|i| amp * (2.0 * std::f64::consts::PI * f as f64 * i as f64 / d as f64 + phase).cos())
        .collect()
}

/// Build the shared base task: one prototype per class plus Gaussian
/// within-class scatter. Samples are laid out class-major.
pub fn make_base_task(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<BaseTask> {
    cfg.validate()?;
    let sample_len: usize = cfg.shape.iter().product();
    let mut protos = Vec::with_capacity(cfg.num_classes * sample_len);
    for c in 0..cfg.num_classes {
        let p = if cfg.shape.len() == 3 {
            image_prototype(c, cfg.shape[0], cfg.shape[1], cfg.shape[2], cfg.amplitude)
        } else {
            flat_prototype(c, cfg.shape[0], cfg.amplitude)
        };
        protos.extend(p);
    }

    let n = cfg.num_classes * cfg.samples_per_class;
    let mut feats = Vec::with_capacity(n * sample_len);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.num_classes {
        let p = &protos[c * sample_len..(c + 1) * sample_len];
        for _ in 0..cfg.samples_per_class {
            for &v in p {
                let eps: f64 = if cfg.within_std > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                feats.push((v + cfg.within_std * eps) as f32);
            }
            labels.push(c as u32);
        }
    }

    let mut proto_shape = vec![cfg.num_classes];
    proto_shape.extend_from_slice(&cfg.shape);
    let mut feat_shape = vec![n];
    feat_shape.extend_from_slice(&cfg.shape);
    Ok(BaseTask {
        prototypes: Tensor::new(proto_shape, protos.iter().map(|&v| v as f32).collect())?,
        features: Tensor::new(feat_shape, feats)?,
        labels,
        num_classes: cfg.num_classes,
    })
}

/// Smallest pairwise L2 distance between class prototypes, and the
/// within-class L2 std (within_std * sqrt(sample dim)) it must dominate.
pub fn prototype_separation(task: &BaseTask, within_std: f64) -> (f64, f64) {
    let k = task.num_classes;
    let len: usize = task.prototypes.shape()[1..].iter().product();
    let d = task.prototypes.data();
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in (a + 1)..k {
            let mut s = 0.0f64;
            for i in 0..len {
                let diff = (d[a * len + i] - d[b * len + i]) as f64;
                s += diff * diff;
            }
            min_dist = min_dist.min(s.sqrt());
        }
    }
    (min_dist, within_std * (len as f64).sqrt())
}

fn rotate_plane(input: &[f32], out: &mut [f32], angle: f64) {
    out.copy_from_slice(input);
    let (s, c) = angle.sin_cos();
    let x0 = input[0] as f64;
    let x1 = input[1] as f64;
    out[0] = (c * x0 - s * x1) as f32;
    out[1] = (s * x0 + c * x1) as f32;
}

/// Rotate one H x W plane about its center by bilinear resampling; samples
/// falling outside the source grid read as zero.
fn rotate_image_plane(input: &[f32], out: &mut [f32], h: usize, w: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let fetch = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input[y as usize * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            // Inverse-rotate the output coordinate into the source image.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let tx = sx - x0;
            let ty = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v = (1.0 - ty) * ((1.0 - tx) * fetch(yi, xi) + tx * fetch(yi, xi + 1))
                + ty * ((1.0 - tx) * fetch(yi + 1, xi) + tx * fetch(yi + 1, xi + 1));
            out[y * w + x] = v as f32;
        }
    }
}

fn transform_features(
    features: &Tensor<f32>,
    shape: &[usize],
    spec: &DomainSpec,
    invert: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<f32>> {
    let n = features.shape()[0];
    let sample_len: usize = shape.iter().product();
    let mut out = vec![0.0f32; n * sample_len];
    let src = features.data();
    let mut plane = vec![0.0f32; if shape.len() == 3 { shape[1] * shape[2] } else { sample_len }];

    for i in 0..n {
        let sin = &src[i * sample_len..(i + 1) * sample_len];
        let dst = &mut out[i * sample_len..(i + 1) * sample_len];
        if !invert {
            // rotate, then per-channel affine, then optional nonlinearity.
            if spec.angle == 0.0 {
                dst.copy_from_slice(sin);
            } else if shape.len() == 3 {
                let (h, w) = (shape[1], shape[2]);
                for ch in 0..shape[0] {
                    rotate_image_plane(&sin[ch * h * w..(ch + 1) * h * w], &mut plane[..h * w], h, w, spec.angle);
                    dst[ch * h * w..(ch + 1) * h * w].copy_from_slice(&plane[..h * w]);
                }
            } else {
                rotate_plane(sin, dst, spec.angle);
            }
            let per_ch = sample_len / spec.gain.len();
            for (ch, (&g, &o)) in spec.gain.iter().zip(&spec.offset).enumerate() {
                if g == 1.0 && o == 0.0 && spec.nonlinearity.is_none() {
                    continue;
                }
                for v in &mut dst[ch * per_ch..(ch + 1) * per_ch] {
                    let mut y = g * (*v as f64) + o;
                    if let Some(Nonlinearity::SignedSqrt) = spec.nonlinearity {
                        y = y.signum() * y.abs().sqrt();
                    }
                    *v = y as f32;
                }
            }
        } else {
            // undo nonlinearity and affine, then rotate back.
            let per_ch = sample_len / spec.gain.len();
            let mut tmp = sin.to_vec();
            for (ch, (&g, &o)) in spec.gain.iter().zip(&spec.offset).enumerate() {
                if g == 1.0 && o == 0.0 && spec.nonlinearity.is_none() {
                    continue;
                }
                for v in &mut tmp[ch * per_ch..(ch + 1) * per_ch] {
                    let mut y = *v as f64;
                    if let Some(Nonlinearity::SignedSqrt) = spec.nonlinearity {
                        y = y.signum() * y * y;
                    }
                    *v = ((y - o) / g) as f32;
                }
            }
            if spec.angle == 0.0 {
                dst.copy_from_slice(&tmp);
            } else if shape.len() == 3 {
                let (h, w) = (shape[1], shape[2]);
                for ch in 0..shape[0] {
                    rotate_image_plane(&tmp[ch * h * w..(ch + 1) * h * w], &mut plane[..h * w], h, w, -spec.angle);
                    dst[ch * h * w..(ch + 1) * h * w].copy_from_slice(&plane[..h * w]);
                }
            } else {
                rotate_plane(&tmp, dst, -spec.angle);
            }
        }
    }

    if !invert && spec.noise > 0.0 {
        let rng = rng.ok_or_else(|| FdseError::Config("noise > 0 requires an rng".into()))?;
        for v in &mut out {
            let eps: f64 = StandardNormal.sample(rng);
            *v = (*v as f64 + spec.noise * eps) as f32;
        }
    }

    let mut out_shape = vec![n];
    out_shape.extend_from_slice(shape);
    Tensor::new(out_shape, out)
}

/// Apply a domain's feature shift to the base samples; labels are untouched.
pub fn apply_domain(base: &BaseTask, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let shape: Vec<usize> = base.features.shape()[1..].to_vec();
    let channels = if shape.len() == 3 { shape[0] } else { 1 };
    spec.validate(channels)?;
    let features = transform_features(&base.features, &shape, spec, false, Some(rng))?;
    LabeledDataset::new(features, base.labels.clone(), base.num_classes)
}

/// Analytic inverse of the domain transform, ignoring noise. Exact for flat
/// data at any angle; for images, exact at multiples of a quarter turn where
/// bilinear resampling is a permutation.
pub fn invert_domain(data: &LabeledDataset, spec: &DomainSpec) -> Result<LabeledDataset> {
    let shape: Vec<usize> = data.features.shape()[1..].to_vec();
    let channels = if shape.len() == 3 { shape[0] } else { 1 };
    spec.validate(channels)?;
    let features = transform_features(&data.features, &shape, spec, true, None)?;
    LabeledDataset::new(features, data.labels.clone(), data.num_classes)
}

/// Split per class in sample order: floor(0.8 n) train, floor(0.1 n) val,
/// remainder test. The same base indices land in the same split for every
/// domain, so label marginals match across domains and splits are disjoint.
pub fn split_dataset(ds: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut tr = Vec::new();
    let mut va = Vec::new();
    let mut te = Vec::new();
    for idx in &by_class {
        let n = idx.len();
        let n_tr = (n as f64 * SPLIT_RATIOS.0).floor() as usize;
        let n_va = (n as f64 * SPLIT_RATIOS.1).floor() as usize;
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    let take = |idx: &[usize]| -> Result<LabeledDataset> {
        let (features, labels) = ds.batch(idx)?;
        LabeledDataset::new(features, labels, ds.num_classes)
    };
    Ok((take(&tr)?, take(&va)?, take(&te)?))
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub num_classes: usize,
    /// Sample shape without the leading n.
    pub shape: Vec<usize>,
    pub domains: Vec<DomainData>,
}

/// Generate the full multi-domain benchmark as a pure function of
/// (config, specs, seed).
pub fn generate_benchmark(cfg: &GeneratorConfig, specs: &[DomainSpec], seed: u64) -> Result<Benchmark> {
    if specs.is_empty() {
        return Err(FdseError::Config("need at least one domain spec".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    for s in specs {
        if !ids.insert(s.id.clone()) {
            return Err(FdseError::Config(format!("duplicate domain id '{}'", s.id)));
        }
    }
    let mut base_rng = derive_rng(seed, &[0]);
    let base = make_base_task(cfg, &mut base_rng)?;
    let mut domains = Vec::with_capacity(specs.len());
    for (di, spec) in specs.iter().enumerate() {
        let mut rng = derive_rng(seed, &[1, di as u64]);
        let full = apply_domain(&base, spec, &mut rng)?;
        let (train, val, test) = split_dataset(&full)?;
        domains.push(DomainData { spec: spec.clone(), train, val, test });
    }
    Ok(Benchmark { num_classes: cfg.num_classes, shape: cfg.shape.clone(), domains })
}

/// The pinned default benchmark: 4 domains, 8 classes, 16x16 single-channel
/// images, 200 samples per class and domain.
pub fn synth_domains_4(seed: u64) -> Result<Benchmark> {
    generate_benchmark(&GeneratorConfig::default(), &DomainSpec::synth_domains_4(), seed)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainManifest {
    spec: DomainSpec,
    train: String,
    val: String,
    test: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    num_classes: usize,
    shape: Vec<usize>,
    domains: Vec<DomainManifest>,
}

/// Write a benchmark as `manifest.json` plus one tensor bundle per split
/// under `<dir>/<domain id>/{train,val,test}.tb`.
pub fn save_dataset(dir: &Path, bench: &Benchmark) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FdseError::io(dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    for d in &bench.domains {
        let sub = dir.join(&d.spec.id);
        std::fs::create_dir_all(&sub).map_err(|e| FdseError::io(sub.display().to_string(), e))?;
        let mut files = Vec::new();
        for (tag, split) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
            let rel = format!("{}/{}.tb", d.spec.id, tag);
            let mut b = Bundle::new(serde_json::json!({
                "split": tag,
                "domain": d.spec.id,
                "num_classes": bench.num_classes,
            }));
            b.push_tensor("features", &split.features);
            b.push_labels("labels", &split.labels);
            b.save(&dir.join(&rel))?;
            files.push(rel);
        }
        entries.push(DomainManifest {
            spec: d.spec.clone(),
            train: files[0].clone(),
            val: files[1].clone(),
            test: files[2].clone(),
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        num_classes: bench.num_classes,
        shape: bench.shape.clone(),
        domains: entries,
    };
    let path = dir.join("manifest.json");
    let disp = path.display().to_string();
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FdseError::parse(&disp, format!("manifest encode: {}", e)))?;
    std::fs::write(&path, text).map_err(|e| FdseError::io(&disp, e))?;
    Ok(())
}

fn load_split(dir: &Path, rel: &str, shape: &[usize], num_classes: usize) -> Result<LabeledDataset> {
    let path = dir.join(rel);
    let disp = path.display().to_string();
    let b = Bundle::load(&path)?;
    let features: Tensor<f32> = b.get("features")?.to_tensor()?;
    let labels = b.get("labels")?.to_labels()?;
    if features.shape().len() != shape.len() + 1 || &features.shape()[1..] != shape {
        return Err(FdseError::parse(
            &disp,
            format!("features shaped {:?} do not match manifest sample shape {:?}", features.shape(), shape),
        ));
    }
    if features.shape()[0] != labels.len() {
        return Err(FdseError::parse(
            &disp,
            format!("{} feature rows vs {} labels", features.shape()[0], labels.len()),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(FdseError::parse(&disp, format!("label {} at sample {} out of range [0, {})", l, i, num_classes)));
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Load a benchmark saved by `save_dataset`, validating shapes and labels.
pub fn load_dataset(dir: &Path) -> Result<Benchmark> {
    let path = dir.join("manifest.json");
    let disp = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|e| FdseError::io(&disp, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| FdseError::parse(&disp, format!("manifest: {}", e)))?;
    if manifest.format != DATASET_FORMAT {
        return Err(FdseError::parse(
            &disp,
            format!("format '{}', expected '{}'", manifest.format, DATASET_FORMAT),
        ));
    }
    let channels = if manifest.shape.len() == 3 { manifest.shape[0] } else { 1 };
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for d in manifest.domains {
        d.spec.validate(channels)?;
        domains.push(DomainData {
            train: load_split(dir, &d.train, &manifest.shape, manifest.num_classes)?,
            val: load_split(dir, &d.val, &manifest.shape, manifest.num_classes)?,
            test: load_split(dir, &d.test, &manifest.shape, manifest.num_classes)?,
            spec: d.spec,
        });
    }
    Ok(Benchmark { num_classes: manifest.num_classes, shape: manifest.shape, domains })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { num_classes: 4, samples_per_class: 10, ..GeneratorConfig::default() }
    }

    #[test]
    fn histogram_is_exact_and_deterministic() {
        let cfg = GeneratorConfig { num_classes: 10, samples_per_class: 100, ..GeneratorConfig::default() };
        let t1 = make_base_task(&cfg, &mut derive_rng(7, &[0])).unwrap();
        let t2 = make_base_task(&cfg, &mut derive_rng(7, &[0])).unwrap();
        assert_eq!(t1.features.data(), t2.features.data());
        assert_eq!(t1.labels, t2.labels);
        let ds = LabeledDataset::new(t1.features, t1.labels, 10).unwrap();
        assert_eq!(ds.class_histogram(), vec![100; 10]);
    }

    #[test]
    fn prototypes_are_well_separated() {
        for classes in [2usize, 8, 16, 20] {
            let cfg = GeneratorConfig { num_classes: classes, samples_per_class: 1, ..GeneratorConfig::default() };
            let t = make_base_task(&cfg, &mut derive_rng(0, &[0])).unwrap();
            let (min_dist, within) = prototype_separation(&t, cfg.within_std);
            assert!(min_dist >= 4.0 * within, "{} classes: {} < 4 x {}", classes, min_dist, within);
        }
    }

    #[test]
    fn degenerate_shapes_rejected() {
        for shape in [vec![], vec![1, 16], vec![0, 16, 16], vec![1]] {
            let cfg = GeneratorConfig { shape, ..GeneratorConfig::default() };
            assert!(make_base_task(&cfg, &mut derive_rng(0, &[0])).is_err());
        }
        let cfg = GeneratorConfig { num_classes: 1, ..GeneratorConfig::default() };
        assert!(make_base_task(&cfg, &mut derive_rng(0, &[0])).is_err());
    }

    #[test]
    fn identity_spec_is_bitwise_noop() {
        let base = make_base_task(&small_cfg(), &mut derive_rng(3, &[0])).unwrap();
        let spec = DomainSpec::identity("d", 1);
        let out = apply_domain(&base, &spec, &mut derive_rng(3, &[1])).unwrap();
        assert_eq!(out.features.data(), base.features.data());
        assert_eq!(out.labels, base.labels);
    }

    #[test]
    fn pure_offset_shifts_means_exactly() {
        let base = make_base_task(&small_cfg(), &mut derive_rng(5, &[0])).unwrap();
        let mut spec = DomainSpec::identity("d", 1);
        spec.offset = vec![0.75];
        let out = apply_domain(&base, &spec, &mut derive_rng(5, &[1])).unwrap();
        let n = base.features.numel();
        let before: f64 = base.features.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let after: f64 = out.features.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((after - before - 0.75).abs() < 1e-6, "shift {}", after - before);
    }

    #[test]
    fn distinct_specs_separate_class_means() {
        let base = make_base_task(&GeneratorConfig::default(), &mut derive_rng(11, &[0])).unwrap();
        let specs = DomainSpec::synth_domains_4();
        let d0 = apply_domain(&base, &specs[0], &mut derive_rng(11, &[1, 0])).unwrap();
        let d1 = apply_domain(&base, &specs[1], &mut derive_rng(11, &[1, 1])).unwrap();
        // Per-sample channel means, compared per class across the domains.
        let stats = |ds: &LabeledDataset, class: u32| -> (f64, f64, usize) {
            let stride: usize = ds.sample_shape().iter().product();
            let vals: Vec<f64> = ds
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| {
                    ds.features.data()[i * stride..(i + 1) * stride]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / stride as f64
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, var, vals.len())
        };
        // The benchmark noise is deliberately large, so individual samples
        // overlap across domains; the domain shift must still move the class
        // means by far more than their standard errors.
        let mut separated = false;
        for c in 0..8u32 {
            let (m0, v0, n0) = stats(&d0, c);
            let (m1, v1, n1) = stats(&d1, c);
            let se = (v0 / n0 as f64 + v1 / n1 as f64).sqrt();
            if (m0 - m1).abs() > 10.0 * se {
                separated = true;
            }
        }
        assert!(separated, "no class mean shifted by 10x its standard error");
    }

    #[test]
    fn quarter_turn_rotation_round_trips() {
        let base = make_base_task(&small_cfg(), &mut derive_rng(9, &[0])).unwrap();
        for quarter in 0..4 {
            let spec = DomainSpec {
                id: "d".into(),
                angle: quarter as f64 * std::f64::consts::FRAC_PI_2,
                gain: vec![1.7],
                offset: vec![-0.3],
                noise: 0.0,
                nonlinearity: Some(Nonlinearity::SignedSqrt),
            };
            let fwd = apply_domain(&base, &spec, &mut derive_rng(9, &[1])).unwrap();
            let back = invert_domain(&fwd, &spec).unwrap();
            let mut worst = 0.0f64;
            for (a, b) in back.features.data().iter().zip(base.features.data()) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
            assert!(worst < 1e-5, "quarter {}: max err {}", quarter, worst);
        }
    }

    #[test]
    fn flat_rotation_round_trips_any_angle() {
        let cfg = GeneratorConfig { shape: vec![12], ..small_cfg() };
        let base = make_base_task(&cfg, &mut derive_rng(13, &[0])).unwrap();
        let spec = DomainSpec {
            id: "d".into(),
            angle: 0.93,
            gain: vec![2.1],
            offset: vec![0.4],
            noise: 0.0,
            nonlinearity: None,
        };
        let fwd = apply_domain(&base, &spec, &mut derive_rng(13, &[1])).unwrap();
        let back = invert_domain(&fwd, &spec).unwrap();
        for (a, b) in back.features.data().iter().zip(base.features.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn split_ratios_and_disjoint_marginals() {
        let bench = synth_domains_4(1).unwrap();
        assert_eq!(bench.domains.len(), 4);
        for d in &bench.domains {
            assert_eq!(d.train.len(), 1280);
            assert_eq!(d.val.len(), 160);
            assert_eq!(d.test.len(), 160);
            assert_eq!(d.train.class_histogram(), vec![160; 8]);
            assert_eq!(d.val.class_histogram(), vec![20; 8]);
            assert_eq!(d.test.class_histogram(), vec![20; 8]);
        }
        // Same label layout in every domain.
        for d in &bench.domains[1..] {
            assert_eq!(d.train.labels, bench.domains[0].train.labels);
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let bench = generate_benchmark(
            &small_cfg(),
            &DomainSpec::synth_domains_4()[..2].to_vec(),
            42,
        )
        .unwrap();
        save_dataset(dir.path(), &bench).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_classes, bench.num_classes);
        assert_eq!(loaded.domains.len(), 2);
        for (a, b) in loaded.domains.iter().zip(&bench.domains) {
            assert_eq!(a.train.features.data(), b.train.features.data());
            assert_eq!(a.test.labels, b.test.labels);
        }
    }

    #[test]
    fn truncated_split_file_names_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let bench = generate_benchmark(&small_cfg(), &[DomainSpec::identity("d0", 1)], 4).unwrap();
        save_dataset(dir.path(), &bench).unwrap();
        let victim = dir.path().join("d0/val.tb");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 64]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels") || err.contains("truncated"), "unhelpful error: {}", err);
    }

    #[test]
    fn bad_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bench = generate_benchmark(&small_cfg(), &[DomainSpec::identity("d0", 1)], 4).unwrap();
        save_dataset(dir.path(), &bench).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("[\n    1,\n    16,\n    16\n  ]", "[1, 8, 8]")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample shape"), "unhelpful error: {}", err);
    }

    #[test]
    fn two_classes_no_noise_linearly_separable() {
        use crate::tape::Tape;
        let cfg = GeneratorConfig {
            num_classes: 2,
            samples_per_class: 12,
            within_std: 0.0,
            ..GeneratorConfig::default()
        };
        let base = make_base_task(&cfg, &mut derive_rng(2, &[0])).unwrap();
        let ds = LabeledDataset::new(base.features, base.labels, 2).unwrap();
        let d: usize = ds.sample_shape().iter().product();
        let n = ds.len();
        let x = ds.features.reshaped(vec![n, d]).unwrap();
        let mut w = Tensor::<f64>::zeros(vec![2, d]);
        let mut b = Tensor::<f64>::zeros(vec![2]);
        for _ in 0..30 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.to_f64());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let logits = tape.linear(xv, wv, bv).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &ds.labels).unwrap();
            tape.backward(loss).unwrap();
            let gw = tape.grad_tensor(wv).unwrap();
            let gb = tape.grad_tensor(bv).unwrap();
            for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
                *p -= 0.5 * g;
            }
            for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
                *p -= 0.5 * g;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_f64());
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let logits = tape.linear(xv, wv, bv).unwrap();
        let out = tape.value(logits).clone();
        let mut correct = 0;
        for i in 0..n {
            let row = &out.data()[i * 2..(i + 1) * 2];
            let pred = if row[1] > row[0] { 1 } else { 0 };
            if pred == ds.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, n, "linear probe failed to separate");
    }
}
