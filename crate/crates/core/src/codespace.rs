//! Code spaces: learnable codebooks behind affine adapters.
//!
//! A modality's encoded features pass through an adapter into the code
//! dimension, are snapped to their nearest code, and the resulting index map
//! is what travels between agents. Codebooks are fitted with Lloyd steps on
//! the current adapted features; adapters follow the detection loss through
//! a straight-through quantizer plus a commitment term.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::warp_indices;
use crate::dataset::{scene_frames, shuffled, Frame, LocalView, ObservationSource, Split};
use crate::error::{Error, Result};
use crate::eval::cell_ap;
use crate::grid::{DetectionMap, FeatureMap, GridGeometry};
use crate::linalg::{accumulate_outer, affine, affine_transpose, dot, sq_dist};
use crate::numeric::{gauss, logistic_loss, name_id, sigmoid, smooth_l1_elem, streams, RngSeed};
use crate::worldgen::fov_mask;

/// Samples used for k-means++ seeding.
const SEEDING_SAMPLE: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    owner: String,
    size: usize,
    dim: usize,
    codes: Vec<f64>,
}

impl Codebook {
    pub fn new(owner: impl Into<String>, size: usize, dim: usize, codes: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 || codes.len() != size * dim {
            return Err(Error::Shape(format!(
                "codebook {size}x{dim} with {} values",
                codes.len()
            )));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite code entry".into()));
        }
        Ok(Self {
            owner: owner.into(),
            size,
            dim,
            codes,
        })
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Number of codes `D`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Embedding dimension `C_z`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn code(&self, idx: usize) -> &[f64] {
        &self.codes[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Nearest code to `v` and its squared distance; ties go to the lowest index.
    #[inline]
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for l in 0..self.size {
            let d = sq_dist(v, self.code(l));
            if d < best.1 {
                best = (l, d);
            }
        }
        best
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.size {
            for j in i + 1..self.size {
                best = best.min(sq_dist(self.code(i), self.code(j)).sqrt());
            }
        }
        best
    }

    /// Mean of all codes.
    pub fn centroid(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for l in 0..self.size {
            for (o, v) in out.iter_mut().zip(self.code(l)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.size as f64);
        out
    }
}

/// Affine map from a modality's encoded features into a code dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub modality: String,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `output_dim x input_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Adapter {
    pub fn identity(modality: impl Into<String>, dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            modality: modality.into(),
            input_dim: dim,
            output_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    fn random(modality: &str, input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        Self {
            modality: modality.to_string(),
            input_dim,
            output_dim,
            weight: (0..input_dim * output_dim)
                .map(|_| scale * gauss(rng))
                .collect(),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.len() != self.input_dim * self.output_dim || self.bias.len() != self.output_dim {
            return Err(Error::Shape(format!("adapter for {} has inconsistent sizes", self.modality)));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("adapter for {} is not finite", self.modality)));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        affine(&self.weight, &self.bias, x, out);
    }

    pub fn apply_map(&self, f: &FeatureMap) -> Result<FeatureMap> {
        if f.channels() != self.input_dim {
            return Err(Error::Shape(format!(
                "adapter for {} expects {} channels, got {}",
                self.modality,
                self.input_dim,
                f.channels()
            )));
        }
        let mut out = vec![0.0; f.cells() * self.output_dim];
        for (idx, o) in out.chunks_exact_mut(self.output_dim).enumerate() {
            self.apply(f.cell(idx), o);
        }
        FeatureMap::from_vec(f.height(), f.width(), self.output_dim, out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMap {
    height: usize,
    width: usize,
    indices: Vec<u16>,
    owner: String,
    codebook_size: usize,
}

impl CodeMap {
    pub fn new(
        height: usize,
        width: usize,
        indices: Vec<u16>,
        owner: impl Into<String>,
        codebook_size: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || indices.len() != height * width {
            return Err(Error::Shape(format!(
                "code map {height}x{width} with {} indices",
                indices.len()
            )));
        }
        if let Some(i) = indices.iter().find(|i| **i as usize >= codebook_size) {
            return Err(Error::Index(format!("code index {i} >= codebook size {codebook_size}")));
        }
        Ok(Self {
            height,
            width,
            indices,
            owner: owner.into(),
            codebook_size,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }
}

/// Per-cell logistic detector `sigmoid(weight . f + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHead {
    pub owner: String,
    pub weight: Vec<f64>,
    pub bias: f64,
    pub frozen: bool,
}

impl DetectionHead {
    #[inline]
    pub fn logit(&self, f: &[f64]) -> f64 {
        dot(&self.weight, f) + self.bias
    }

    #[inline]
    pub fn score(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn detect(&self, f: &FeatureMap) -> Result<DetectionMap> {
        if f.channels() != self.weight.len() {
            return Err(Error::Shape(format!(
                "head of {} expects {} channels, got {}",
                self.owner,
                self.weight.len(),
                f.channels()
            )));
        }
        let scores = (0..f.cells()).map(|i| self.score(f.cell(i))).collect();
        DetectionMap::new(f.height(), f.width(), scores)
    }
}

/// Nearest-code index per cell of `adapter(f)`.
pub fn quantize(f: &FeatureMap, adapter: &Adapter, book: &Codebook) -> Result<CodeMap> {
    if adapter.output_dim != book.dim() {
        return Err(Error::Shape(format!(
            "adapter outputs {} channels, codebook has dimension {}",
            adapter.output_dim,
            book.dim()
        )));
    }
    quantize_adapted(&adapter.apply_map(f)?, book)
}

/// Nearest-code index per cell of an already adapted map.
pub fn quantize_adapted(adapted: &FeatureMap, book: &Codebook) -> Result<CodeMap> {
    if adapted.channels() != book.dim() {
        return Err(Error::Shape(format!(
            "features have {} channels, codebook has dimension {}",
            adapted.channels(),
            book.dim()
        )));
    }
    if book.size() > u16::MAX as usize + 1 {
        return Err(Error::Config("codebooks are limited to 65536 codes".into()));
    }
    let indices = (0..adapted.cells())
        .map(|i| book.nearest(adapted.cell(i)).0 as u16)
        .collect();
    CodeMap::new(adapted.height(), adapted.width(), indices, book.owner(), book.size())
}

/// Replaces every index by its code embedding.
pub fn decode(map: &CodeMap, book: &Codebook) -> Result<FeatureMap> {
    if map.owner() != book.owner() || map.codebook_size() != book.size() {
        return Err(Error::Config(format!(
            "code map references {}/{} but codebook is {}/{}",
            map.owner(),
            map.codebook_size(),
            book.owner(),
            book.size()
        )));
    }
    let mut out = Vec::with_capacity(map.indices().len() * book.dim());
    for &i in map.indices() {
        let i = i as usize;
        if i >= book.size() {
            return Err(Error::Corruption(format!("code index {i} >= {}", book.size())));
        }
        out.extend_from_slice(book.code(i));
    }
    FeatureMap::from_vec(map.height(), map.width(), book.dim(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydOutcome {
    pub codebook: Codebook,
    /// Distortion of the input codebook over the features.
    pub distortion_before: f64,
    /// Distortion of the updated codebook, after reassignment.
    pub distortion_after: f64,
    /// Codes whose cluster was empty and were moved onto a far feature.
    pub reseeded: Vec<usize>,
}

/// One Lloyd step: assign every vector to its nearest code, move each code to
/// its cluster mean, and re-seed empty clusters on the features farthest from
/// their assigned code.
///
/// `features` holds vectors of length `book.dim()` back to back and must
/// contain at least `book.size()` distinct vectors.
pub fn lloyd_update(features: &[f64], book: &Codebook) -> Result<LloydOutcome> {
    let dim = book.dim();
    if features.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values are not a whole number of {dim}-vectors",
            features.len()
        )));
    }
    let distinct = count_distinct(features, dim, book.size());
    if distinct < book.size() {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct vectors for {} codes",
            book.size()
        )));
    }
    Ok(lloyd_step(features, book))
}

fn count_distinct(features: &[f64], dim: usize, enough: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for v in features.chunks_exact(dim) {
        seen.insert(v.iter().map(|x| x.to_bits()).collect());
        if seen.len() >= enough {
            break;
        }
    }
    seen.len()
}

fn assign(features: &[f64], book: &Codebook) -> Vec<(usize, f64)> {
    features
        .par_chunks_exact(book.dim())
        .with_min_len(1024)
        .map(|v| book.nearest(v))
        .collect()
}

pub(crate) fn distortion(features: &[f64], book: &Codebook) -> f64 {
    assign(features, book).iter().map(|(_, d)| d).sum()
}

/// Lloyd step without the distinctness precondition. A re-seed target that
/// already coincides with a code leaves the empty code where it is.
pub(crate) fn lloyd_step(features: &[f64], book: &Codebook) -> LloydOutcome {
    let dim = book.dim();
    let d = book.size();
    let assignment = assign(features, book);
    let before: f64 = assignment.iter().map(|(_, dist)| dist).sum();

    let mut sums = vec![0.0; d * dim];
    let mut counts = vec![0usize; d];
    for (v, (l, _)) in features.chunks_exact(dim).zip(&assignment) {
        counts[*l] += 1;
        for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(v) {
            *s += x;
        }
    }
    let mut codes = book.codes().to_vec();
    for l in 0..d {
        if counts[l] > 0 {
            let n = counts[l] as f64;
            for k in 0..dim {
                codes[l * dim + k] = sums[l * dim + k] / n;
            }
        }
    }

    let mut reseeded = Vec::new();
    let empty: Vec<usize> = (0..d).filter(|l| counts[*l] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..assignment.len()).collect();
        order.sort_by(|a, b| assignment[*b].1.total_cmp(&assignment[*a].1).then(a.cmp(b)));
        let mut cursor = order.into_iter();
        for l in empty {
            for i in cursor.by_ref() {
                let v = &features[i * dim..(i + 1) * dim];
                let taken = (0..d).any(|m| codes[m * dim..(m + 1) * dim] == *v);
                if !taken {
                    codes[l * dim..(l + 1) * dim].copy_from_slice(v);
                    reseeded.push(l);
                    break;
                }
            }
        }
    }

    let codebook = Codebook {
        owner: book.owner.clone(),
        size: d,
        dim,
        codes,
    };
    let after = distortion(features, &codebook);
    LloydOutcome {
        codebook,
        distortion_before: before,
        distortion_after: after,
        reseeded,
    }
}

/// k-means++ seeding on a deterministic subsample. When the data has fewer
/// distinct vectors than codes, the surplus codes are small distinct
/// offsets of the first one.
pub(crate) fn seed_codebook(owner: &str, features: &[f64], dim: usize, size: usize, seed: RngSeed) -> Result<Codebook> {
    let n = features.len() / dim;
    if n == 0 {
        return Err(Error::Data(format!("no features to seed codebook {owner}")));
    }
    let mut rng = seed.rng();
    let sample: Vec<usize> = if n <= SEEDING_SAMPLE {
        (0..n).collect()
    } else {
        (0..SEEDING_SAMPLE).map(|_| rng.random_range(0..n)).collect()
    };
    let vec_at = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut codes: Vec<f64> = Vec::with_capacity(size * dim);
    codes.extend_from_slice(vec_at(sample[rng.random_range(0..sample.len())]));
    let mut best: Vec<f64> = sample.iter().map(|&i| sq_dist(vec_at(i), &codes[..dim])).collect();
    for l in 1..size {
        let total: f64 = best.iter().sum();
        if total <= 0.0 {
            let base = codes[..dim].to_vec();
            for extra in l..size {
                for (k, b) in base.iter().enumerate() {
                    codes.push(b + 1e-3 * (extra as f64) * if k == extra % dim { 1.0 } else { 0.0 });
                }
            }
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = sample.len() - 1;
        for (j, w) in best.iter().enumerate() {
            if target < *w {
                pick = j;
                break;
            }
            target -= w;
        }
        let start = codes.len();
        codes.extend_from_slice(vec_at(sample[pick]));
        for (j, &i) in sample.iter().enumerate() {
            best[j] = best[j].min(sq_dist(vec_at(i), &codes[start..start + dim]));
        }
    }
    Codebook::new(owner, size, dim, codes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub modality: String,
    /// Head on the encoded features (`C_m` inputs), frozen.
    pub head: DetectionHead,
    /// Single-agent AP on the evaluation split.
    pub ap: f64,
    pub loss_curve: Vec<f64>,
}

/// Trains a per-cell logistic detector directly on a modality's encoded
/// features against its own-frame ground truth.
pub fn pretrain_pipeline(view: &LocalView, config: &PretrainConfig, seed: RngSeed) -> Result<PretrainResult> {
    let modality = view.modality().to_string();
    let frames = view.frames(Split::Train)?;
    if frames.is_empty() {
        return Err(Error::Data(format!("no training observations for {modality}")));
    }
    let c = view.spec().channels();
    let seed = seed.derive(&[streams::PRETRAIN, name_id(&modality)]);
    let mut rng = seed.rng();
    let mut head = DetectionHead {
        owner: modality.clone(),
        weight: (0..c).map(|_| 0.01 * gauss(&mut rng)).collect(),
        bias: 0.0,
        frozen: false,
    };
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for &fi in &shuffled(frames.len(), seed.derive(&[streams::SHUFFLE, epoch as u64])) {
            let frame = &frames[fi];
            let n = frame.features.cells() as f64;
            let mut dw = vec![0.0; c];
            let mut db = 0.0;
            for idx in 0..frame.features.cells() {
                let x = frame.features.cell(idx);
                let (l, g) = logistic_loss(head.logit(x), frame.labels[idx]);
                epoch_loss += l / n;
                for (d, v) in dw.iter_mut().zip(x) {
                    *d += g * v / n;
                }
                db += g / n;
            }
            for (w, d) in head.weight.iter_mut().zip(&dw) {
                *w -= config.lr * d;
            }
            head.bias -= config.lr * db;
        }
        loss_curve.push(epoch_loss / frames.len() as f64);
    }
    head.frozen = true;

    let eval = view.frames(Split::Eval)?;
    let ap = if eval.is_empty() {
        f64::NAN
    } else {
        let seen = fov_mask(&view.manifest().world.geometry(), view.spec().config.fov_radius);
        let maps = eval
            .iter()
            .map(|f| head.detect(&f.features)?.masked(&seen))
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<Vec<bool>> = eval.iter().map(|f| f.labels.clone()).collect();
        cell_ap(&maps, &truths)?
    };
    Ok(PretrainResult {
        modality,
        head,
        ap,
        loss_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodespaceConfig {
    /// Codebook size `D`.
    pub codebook_size: usize,
    /// Code embedding dimension `C_z`.
    pub code_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the commitment term `|adapted - code|^2`.
    pub commitment: f64,
    /// Weight of the cross-modal Smooth-L1 term in group training.
    pub lambda: f64,
    pub smooth_l1_beta: f64,
    /// Scenes averaged per gradient step.
    #[serde(default = "one")]
    pub batch_scenes: usize,
}

fn one() -> usize {
    1
}

impl Default for CodespaceConfig {
    fn default() -> Self {
        Self {
            codebook_size: 16,
            code_dim: 16,
            epochs: 20,
            lr: 0.2,
            commitment: 0.25,
            lambda: 0.1,
            smooth_l1_beta: 1.0,
            batch_scenes: 1,
        }
    }
}

/// A trained code space: shared codebook and head, one adapter per member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codespace {
    pub owner: String,
    pub codebook: Codebook,
    pub adapters: BTreeMap<String, Adapter>,
    pub head: DetectionHead,
}

impl Codespace {
    pub fn adapter(&self, modality: &str) -> Result<&Adapter> {
        self.adapters
            .get(modality)
            .ok_or_else(|| Error::Config(format!("code space {} has no adapter for {modality}", self.owner)))
    }

    pub fn quantize(&self, modality: &str, f: &FeatureMap) -> Result<CodeMap> {
        quantize(f, self.adapter(modality)?, &self.codebook)
    }

    pub fn decode(&self, map: &CodeMap) -> Result<FeatureMap> {
        decode(map, &self.codebook)
    }

    /// Full single-agent pipeline: adapt, quantize, decode, detect.
    pub fn detect(&self, modality: &str, f: &FeatureMap) -> Result<DetectionMap> {
        self.head.detect(&self.decode(&self.quantize(modality, f)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Lloyd distortion before and after the codebook update.
    pub distortion_before: f64,
    pub distortion_after: f64,
    pub reseeded: usize,
    /// Mean per-element squared error between adapted features and codes.
    pub reconstruction_mse: f64,
    pub loss: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodespaceResult {
    pub codespace: Codespace,
    pub history: Vec<EpochStats>,
    /// How the detection head was obtained.
    pub head_fit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum HeadMode {
    /// Least-squares re-fit of the pretrained head, then frozen.
    Frozen,
    /// Same initialization, then trained with the adapters.
    Trainable,
}

/// Single-modality code space with the pretrained head re-fitted onto the
/// code dimension and frozen.
pub fn train_codespace(
    view: &LocalView,
    pretrained: &DetectionHead,
    config: &CodespaceConfig,
    seed: RngSeed,
) -> Result<CodespaceResult> {
    let modality = view.modality().to_string();
    let train: Vec<Vec<Frame>> = view.frames(Split::Train)?.into_iter().map(|f| vec![f]).collect();
    let eval = view.frames(Split::Eval)?;
    let mut heads = BTreeMap::new();
    heads.insert(modality.clone(), pretrained.clone());
    let fov = fov_radii(view.manifest(), &[modality.clone()])?;
    let geometry = view.manifest().world.geometry();
    fit_codespace(&modality, &[modality.clone()], &heads, &fov, geometry, &train, &eval, config, HeadMode::Frozen, 0.0, seed)
}

/// Shared code space for a group of co-occurring modalities, trained with a
/// trainable head and the cross-modal Smooth-L1 term weighted by
/// `config.lambda`.
pub fn train_group_codespace(
    source: &dyn ObservationSource,
    owner: &str,
    members: &[String],
    pretrained: &BTreeMap<String, DetectionHead>,
    config: &CodespaceConfig,
    seed: RngSeed,
) -> Result<CodespaceResult> {
    let manifest = source.manifest();
    if members.is_empty() {
        return Err(Error::Config(format!("group {owner} has no members")));
    }
    for (i, a) in members.iter().enumerate() {
        manifest.modality(a)?;
        for b in &members[i + 1..] {
            if manifest.is_isolated(a, b) {
                return Err(Error::Constraint(format!(
                    "group {owner}: ({a}, {b}) is isolated, grouping requires co-occurring data"
                )));
            }
        }
    }
    let train = scene_frames(source, Split::Train, members)?;
    if members.len() > 1 {
        let co = train
            .iter()
            .filter(|s| s.iter().map(|f| &f.agent.modality).collect::<HashSet<_>>().len() > 1)
            .count();
        if co == 0 {
            return Err(Error::Data(format!("group {owner} has no co-occurring training scenes")));
        }
    }
    let eval: Vec<Frame> = scene_frames(source, Split::Eval, members)?.into_iter().flatten().collect();
    let fov = fov_radii(manifest, members)?;
    fit_codespace(owner, members, pretrained, &fov, manifest.world.geometry(), &train, &eval, config, HeadMode::Trainable, config.lambda, seed)
}

fn fov_radii(manifest: &crate::dataset::DatasetManifest, members: &[String]) -> Result<BTreeMap<String, f64>> {
    members
        .iter()
        .map(|m| Ok((m.clone(), manifest.modality(m)?.config.fov_radius)))
        .collect()
}

/// Least-squares fit of `(w, b)` with `w . z + b ~= target` over the rows
/// of `zs`.
fn least_squares_head(zs: &[f64], dim: usize, targets: &[f64]) -> (Vec<f64>, f64) {
    let p = dim + 1;
    let mut ata = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut atb = nalgebra::DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for (z, t) in zs.chunks_exact(dim).zip(targets) {
        row[..dim].copy_from_slice(z);
        row[dim] = 1.0;
        for i in 0..p {
            atb[i] += row[i] * t;
            for j in 0..p {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    let svd = ata.svd(true, true);
    let sol = svd.solve(&atb, 1e-10).unwrap_or_else(|_| nalgebra::DVector::zeros(p));
    (sol.as_slice()[..dim].to_vec(), sol[dim])
}

/// Initial adapters and head: random adapter for the first member, head
/// re-fitted onto its outputs against the pretrained logits, adapter output
/// channels flipped so the head weights are non-negative (an exact
/// symmetry), and every other member's adapter corrected so the shared head
/// reproduces that member's pretrained logits.
fn initialize(
    owner: &str,
    members: &[String],
    pretrained: &BTreeMap<String, DetectionHead>,
    frames: &[&Frame],
    dims: &BTreeMap<String, usize>,
    code_dim: usize,
    seed: RngSeed,
) -> Result<(BTreeMap<String, Adapter>, DetectionHead)> {
    let mut adapters = BTreeMap::new();
    for m in members {
        let mut rng = seed.derive(&[streams::CODESPACE, name_id(m)]).rng();
        adapters.insert(m.clone(), Adapter::random(m, dims[m], code_dim, &mut rng));
    }
    let first = &members[0];
    let pre = pretrained
        .get(first)
        .ok_or_else(|| Error::Data(format!("no pretrained head for {first}")))?;
    let adapter = &adapters[first];
    let mut zs = Vec::new();
    let mut targets = Vec::new();
    let mut z = vec![0.0; code_dim];
    for f in frames.iter().filter(|f| &f.agent.modality == first) {
        for idx in 0..f.features.cells() {
            let x = f.features.cell(idx);
            adapter.apply(x, &mut z);
            zs.extend_from_slice(&z);
            targets.push(pre.logit(x));
        }
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("no training observations for {first}")));
    }
    let (mut w, b) = least_squares_head(&zs, code_dim, &targets);
    for k in 0..code_dim {
        if w[k] < 0.0 {
            w[k] = -w[k];
            for a in adapters.values_mut() {
                let cols = a.input_dim;
                a.weight[k * cols..(k + 1) * cols].iter_mut().for_each(|v| *v = -*v);
                a.bias[k] = -a.bias[k];
            }
        }
    }
    let wn = dot(&w, &w);
    for m in &members[1..] {
        let pre_m = pretrained
            .get(m)
            .ok_or_else(|| Error::Data(format!("no pretrained head for {m}")))?;
        let a = adapters.get_mut(m).expect("created above");
        if wn <= 0.0 {
            continue;
        }
        // rank-one update: A += w (v - A^T w)^T / |w|^2 makes w^T A = v^T exactly
        let mut atw = vec![0.0; a.input_dim];
        affine_transpose(&a.weight, &w, &mut atw);
        let cols = a.input_dim;
        for r in 0..code_dim {
            for c in 0..cols {
                a.weight[r * cols + c] += w[r] * (pre_m.weight[c] - atw[c]) / wn;
            }
        }
        let cb = dot(&w, &a.bias);
        for r in 0..code_dim {
            a.bias[r] += w[r] * (pre_m.bias - b - cb) / wn;
        }
    }
    let head = DetectionHead {
        owner: owner.to_string(),
        weight: w,
        bias: b,
        frozen: false,
    };
    Ok((adapters, head))
}

/// Gradients of the code-space objective for one scene.
pub(crate) struct SceneGradients {
    pub loss: f64,
    pub adapters: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl SceneGradients {
    /// Element-wise mean of per-scene gradients, summed in input order.
    pub(crate) fn mean(parts: Vec<SceneGradients>) -> SceneGradients {
        let n = parts.len() as f64;
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one scene per batch");
        for p in it {
            acc.loss += p.loss;
            for (m, (dw, db)) in p.adapters {
                let (aw, ab) = acc.adapters.get_mut(&m).expect("same adapter set");
                aw.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
                ab.iter_mut().zip(&db).for_each(|(a, d)| *a += d);
            }
            acc.head_weight.iter_mut().zip(&p.head_weight).for_each(|(a, d)| *a += d);
            acc.head_bias += p.head_bias;
        }
        acc.loss /= n;
        for (aw, ab) in acc.adapters.values_mut() {
            aw.iter_mut().for_each(|a| *a /= n);
            ab.iter_mut().for_each(|a| *a /= n);
        }
        acc.head_weight.iter_mut().for_each(|a| *a /= n);
        acc.head_bias /= n;
        acc
    }
}

pub(crate) struct ObjectiveParams<'a> {
    pub adapters: &'a BTreeMap<String, Adapter>,
    pub head: &'a DetectionHead,
    /// `None` bypasses the quantizer entirely (decoded = adapted).
    pub codebook: Option<&'a Codebook>,
    pub commitment: f64,
    pub lambda: f64,
    pub beta: f64,
    pub fov: &'a BTreeMap<String, f64>,
    pub geometry: GridGeometry,
}

/// Loss and gradients for one training scene. The detection loss is the
/// mean logistic loss over each frame's cells, averaged over frames; the
/// quantizer passes gradients straight through; the similarity term covers
/// every pair of frames with different modalities, warped into the frame of
/// the scene's first agent and restricted to cells both agents can see.
pub(crate) fn scene_gradients(frames: &[Frame], p: &ObjectiveParams) -> Result<SceneGradients> {
    let cz = p.head.weight.len();
    let nf = frames.len() as f64;
    let mut out = SceneGradients {
        loss: 0.0,
        adapters: p
            .adapters
            .iter()
            .map(|(m, a)| (m.clone(), (vec![0.0; a.weight.len()], vec![0.0; a.bias.len()])))
            .collect(),
        head_weight: vec![0.0; cz],
        head_bias: 0.0,
    };

    // forward: adapted and decoded per frame
    let mut adapted: Vec<Vec<f64>> = Vec::with_capacity(frames.len());
    let mut decoded: Vec<Vec<f64>> = Vec::with_capacity(frames.len());
    for f in frames {
        let a = p.adapters.get(&f.agent.modality).ok_or_else(|| {
            Error::Config(format!("no adapter for modality {}", f.agent.modality))
        })?;
        let cells = f.features.cells();
        let mut av = vec![0.0; cells * cz];
        for idx in 0..cells {
            a.apply(f.features.cell(idx), &mut av[idx * cz..(idx + 1) * cz]);
        }
        let dv = match p.codebook {
            Some(book) => {
                let mut dv = vec![0.0; cells * cz];
                for idx in 0..cells {
                    let (l, _) = book.nearest(&av[idx * cz..(idx + 1) * cz]);
                    dv[idx * cz..(idx + 1) * cz].copy_from_slice(book.code(l));
                }
                dv
            }
            None => av.clone(),
        };
        adapted.push(av);
        decoded.push(dv);
    }

    // gradient w.r.t. adapted features, per frame
    let mut grads: Vec<Vec<f64>> = adapted.iter().map(|a| vec![0.0; a.len()]).collect();
    for (fi, f) in frames.iter().enumerate() {
        let cells = f.features.cells();
        let n = cells as f64 * nf;
        for idx in 0..cells {
            let d = &decoded[fi][idx * cz..(idx + 1) * cz];
            let (l, g) = logistic_loss(p.head.logit(d), f.labels[idx]);
            out.loss += l / n;
            let gs = g / n;
            for (k, gr) in grads[fi][idx * cz..(idx + 1) * cz].iter_mut().enumerate() {
                *gr += gs * p.head.weight[k];
                out.head_weight[k] += gs * d[k];
            }
            out.head_bias += gs;
            if p.codebook.is_some() && p.commitment > 0.0 {
                let a = &adapted[fi][idx * cz..(idx + 1) * cz];
                for (k, gr) in grads[fi][idx * cz..(idx + 1) * cz].iter_mut().enumerate() {
                    let diff = a[k] - d[k];
                    out.loss += p.commitment * diff * diff / n;
                    *gr += 2.0 * p.commitment * diff / n;
                }
            }
        }
    }

    if p.lambda > 0.0 && frames.len() > 1 {
        for k in 0..frames.len() {
            for j in k + 1..frames.len() {
                if frames[k].agent.modality == frames[j].agent.modality {
                    continue;
                }
                similarity_pair(frames, k, j, &decoded, &mut grads, p, &mut out.loss)?;
            }
        }
    }

    // backprop into adapters
    for (fi, f) in frames.iter().enumerate() {
        let (dw, db) = out.adapters.get_mut(&f.agent.modality).expect("adapter present");
        for idx in 0..f.features.cells() {
            accumulate_outer(dw, db, &grads[fi][idx * cz..(idx + 1) * cz], f.features.cell(idx));
        }
    }
    Ok(out)
}

fn similarity_pair(
    frames: &[Frame],
    k: usize,
    j: usize,
    decoded: &[Vec<f64>],
    grads: &mut [Vec<f64>],
    p: &ObjectiveParams,
    loss: &mut f64,
) -> Result<()> {
    let cz = p.head.weight.len();
    let ego = &frames[0];
    let map_k = warp_indices(&p.geometry, &frames[k].agent.pose, &ego.agent.pose);
    let map_j = warp_indices(&p.geometry, &frames[j].agent.pose, &ego.agent.pose);
    let fov_k = fov_mask(&p.geometry, p.fov[&frames[k].agent.modality]);
    let fov_j = fov_mask(&p.geometry, p.fov[&frames[j].agent.modality]);
    let pairs: Vec<(usize, usize)> = map_k
        .iter()
        .zip(&map_j)
        .filter_map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if fov_k[*a] && fov_j[*b] => Some((*a, *b)),
            _ => None,
        })
        .collect();
    if pairs.is_empty() {
        return Ok(());
    }
    let n = (pairs.len() * cz) as f64;
    for (a, b) in pairs {
        for c in 0..cz {
            let diff = decoded[k][a * cz + c] - decoded[j][b * cz + c];
            let (l, g) = smooth_l1_elem(diff, p.beta);
            *loss += p.lambda * l / n;
            grads[k][a * cz + c] += p.lambda * g / n;
            grads[j][b * cz + c] -= p.lambda * g / n;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_codespace(
    owner: &str,
    members: &[String],
    pretrained: &BTreeMap<String, DetectionHead>,
    fov: &BTreeMap<String, f64>,
    geometry: GridGeometry,
    train: &[Vec<Frame>],
    eval: &[Frame],
    config: &CodespaceConfig,
    head_mode: HeadMode,
    lambda: f64,
    seed: RngSeed,
) -> Result<CodespaceResult> {
    if config.codebook_size < 2 {
        return Err(Error::Config(format!(
            "codebook size must be at least 2, got {}",
            config.codebook_size
        )));
    }
    if config.code_dim == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("code_dim and lr must be positive".into()));
    }
    let all: Vec<&Frame> = train.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Data(format!("no training observations for code space {owner}")));
    }
    let mut dims = BTreeMap::new();
    for f in &all {
        dims.insert(f.agent.modality.clone(), f.features.channels());
    }
    for m in members {
        if !dims.contains_key(m) {
            return Err(Error::Data(format!("no training observations for {m}")));
        }
    }
    let seed = seed.derive(&[streams::CODESPACE, name_id(owner)]);
    let cz = config.code_dim;
    let (mut adapters, mut head) = initialize(owner, members, pretrained, &all, &dims, cz, seed)?;
    let mut book: Option<Codebook> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let feats = adapted_features(&all, &adapters, cz);
        let current = match book.take() {
            Some(b) => b,
            None => seed_codebook(owner, &feats, cz, config.codebook_size, seed.derive(&[epoch as u64]))?,
        };
        let outcome = lloyd_step(&feats, &current);
        if !outcome.reseeded.is_empty() {
            log::debug!("{owner}: epoch {epoch} re-seeded codes {:?}", outcome.reseeded);
        }
        let updated = outcome.codebook;

        let lr = cosine_lr(config.lr, epoch, config.epochs);
        let mut epoch_loss = 0.0;
        let order = shuffled(train.len(), seed.derive(&[streams::SHUFFLE, epoch as u64]));
        for batch in order.chunks(config.batch_scenes.max(1)) {
            let params = ObjectiveParams {
                adapters: &adapters,
                head: &head,
                codebook: Some(&updated),
                commitment: config.commitment,
                lambda,
                beta: config.smooth_l1_beta,
                fov,
                geometry,
            };
            let parts = batch
                .par_iter()
                .map(|&si| scene_gradients(&train[si], &params))
                .collect::<Result<Vec<_>>>()?;
            let g = SceneGradients::mean(parts);
            epoch_loss += g.loss * batch.len() as f64;
            for (m, (dw, db)) in &g.adapters {
                let a = adapters.get_mut(m).expect("adapter present");
                for (w, d) in a.weight.iter_mut().zip(dw) {
                    *w -= lr * d;
                }
                for (b, d) in a.bias.iter_mut().zip(db) {
                    *b -= lr * d;
                }
            }
            if head_mode == HeadMode::Trainable {
                for (w, d) in head.weight.iter_mut().zip(&g.head_weight) {
                    *w = (*w - lr * d).max(0.0);
                }
                head.bias -= lr * g.head_bias;
            }
        }

        // The adapter moved during the pass; re-centre the codes on it.
        let feats = adapted_features(&all, &adapters, cz);
        let updated = lloyd_step(&feats, &updated).codebook;
        let assignment = assign(&feats, &updated);
        let mse = assignment.iter().map(|(_, d)| d).sum::<f64>() / feats.len() as f64;
        let ap = eval_ap(eval, &adapters, &updated, &head, fov, &geometry)?;
        history.push(EpochStats {
            epoch,
            distortion_before: outcome.distortion_before,
            distortion_after: outcome.distortion_after,
            reseeded: outcome.reseeded.len(),
            reconstruction_mse: mse,
            loss: epoch_loss / train.len() as f64,
            ap,
        });
        book = Some(updated);
    }

    let codebook = match book {
        Some(b) => b,
        None => {
            let feats = adapted_features(&all, &adapters, cz);
            seed_codebook(owner, &feats, cz, config.codebook_size, seed.derive(&[0]))?
        }
    };
    for a in adapters.values() {
        a.validate()?;
    }
    head.frozen = true;
    let head_fit = match head_mode {
        HeadMode::Frozen => "pretrained head re-fitted onto the code dimension by least squares, then frozen",
        HeadMode::Trainable => "shared head initialized by least-squares re-fit, trained jointly (non-negative weights)",
    };
    Ok(CodespaceResult {
        codespace: Codespace {
            owner: owner.to_string(),
            codebook,
            adapters,
            head,
        },
        history,
        head_fit: head_fit.to_string(),
    })
}

/// Half-cosine decay from `base` at epoch 0 towards 0 after the last epoch.
pub(crate) fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
}

fn adapted_features(frames: &[&Frame], adapters: &BTreeMap<String, Adapter>, cz: usize) -> Vec<f64> {
    let per: Vec<Vec<f64>> = frames
        .par_iter()
        .map(|f| {
            let a = &adapters[&f.agent.modality];
            let mut out = vec![0.0; f.features.cells() * cz];
            for (idx, o) in out.chunks_exact_mut(cz).enumerate() {
                a.apply(f.features.cell(idx), o);
            }
            out
        })
        .collect();
    per.concat()
}

fn eval_ap(
    eval: &[Frame],
    adapters: &BTreeMap<String, Adapter>,
    book: &Codebook,
    head: &DetectionHead,
    fov: &BTreeMap<String, f64>,
    geometry: &GridGeometry,
) -> Result<f64> {
    if eval.is_empty() {
        return Ok(f64::NAN);
    }
    let masks: BTreeMap<&String, Vec<bool>> = fov.iter().map(|(m, r)| (m, fov_mask(geometry, *r))).collect();
    let maps = eval
        .par_iter()
        .map(|f| {
            let m = &f.agent.modality;
            head.detect(&decode(&quantize(&f.features, &adapters[m], book)?, book)?)?.masked(&masks[m])
        })
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<Vec<bool>> = eval.iter().map(|f| f.labels.clone()).collect();
    match cell_ap(&maps, &truths) {
        Ok(ap) => Ok(ap),
        Err(Error::Undefined(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_dataset, DatasetConfig};
    use proptest::prelude::*;

    fn book(codes: &[&[f64]]) -> Codebook {
        Codebook::new("o", codes.len(), codes[0].len(), codes.concat()).unwrap()
    }

    fn one_cell(v: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn quantize_picks_nearest_with_low_index_ties() {
        let b = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let id = Adapter::identity("m", 2);
        assert_eq!(quantize(&one_cell(&[0.2, 0.2]), &id, &b).unwrap().indices(), &[0]);
        assert_eq!(quantize(&one_cell(&[0.5, 0.5]), &id, &b).unwrap().indices(), &[0]);
        assert_eq!(quantize(&one_cell(&[0.6, 0.5]), &id, &b).unwrap().indices(), &[1]);
        assert!(matches!(quantize(&one_cell(&[0.0; 3]), &Adapter::identity("m", 3), &b), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_looks_up_codes() {
        let b = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let m = CodeMap::new(1, 2, vec![0, 1], "o", 2).unwrap();
        assert_eq!(decode(&m, &b).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let single = book(&[&[0.3, -2.0]]);
        let m = CodeMap::new(2, 2, vec![0; 4], "o", 1).unwrap();
        assert_eq!(decode(&m, &single).unwrap().data(), &[0.3, -2.0].repeat(4)[..]);
        assert!(CodeMap::new(1, 1, vec![2], "o", 2).is_err());
        let foreign = CodeMap::new(1, 1, vec![0], "x", 2).unwrap();
        assert!(matches!(decode(&foreign, &b), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn decode_then_quantize_is_identity(
            codes in prop::collection::vec(-5.0f64..5.0, 8 * 3),
            idx in prop::collection::vec(0u16..8, 12),
        ) {
            let b = Codebook::new("o", 8, 3, codes).unwrap();
            prop_assume!(b.min_pairwise_distance() > 1e-9);
            let m = CodeMap::new(3, 4, idx, "o", 8).unwrap();
            let back = quantize(&decode(&m, &b).unwrap(), &Adapter::identity("m", 3), &b).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn lloyd_examples() {
        let b = book(&[&[0.0], &[10.0]]);
        let out = lloyd_update(&[0.0, 1.0, 9.0, 10.0], &b).unwrap();
        assert_eq!(out.codebook.codes(), &[0.5, 9.5]);
        assert_eq!(out.distortion_before, 2.0);
        assert_eq!(out.distortion_after, 1.0);

        let fixed = lloyd_update(&[0.0, 10.0, 0.0, 10.0], &b).unwrap();
        assert_eq!(fixed.codebook, b);

        assert!(matches!(lloyd_update(&[1.0, 1.0, 1.0], &b), Err(Error::Degenerate(_))));
        assert!(matches!(lloyd_update(&[1.0, 2.0, 3.0], &book(&[&[0.0, 0.0], &[1.0, 1.0]])), Err(Error::Shape(_))));
    }

    #[test]
    fn lloyd_distortion_never_increases() {
        for s in 0..50u64 {
            let mut rng = RngSeed(s).rng();
            let dim = 1 + (s as usize % 4);
            let n = 200;
            let feats: Vec<f64> = (0..n * dim).map(|i| gauss(&mut rng) + (i % 3) as f64).collect();
            let mut b = seed_codebook("o", &feats, dim, 8, RngSeed(s)).unwrap();
            let mut last = distortion(&feats, &b);
            for _ in 0..10 {
                let out = lloyd_update(&feats, &b).unwrap();
                if out.reseeded.is_empty() {
                    assert!(out.distortion_after <= last + 1e-9, "seed {s}: {} > {last}", out.distortion_after);
                }
                last = out.distortion_after;
                b = out.codebook;
            }
        }
    }

    #[test]
    fn seeding_handles_few_distinct_vectors() {
        let b = seed_codebook("o", &[1.0, 1.0, 1.0], 1, 3, RngSeed(0)).unwrap();
        assert!(b.min_pairwise_distance() > 0.0);
        assert!(seed_codebook("o", &[], 1, 3, RngSeed(0)).is_err());
    }

    #[test]
    fn least_squares_recovers_a_linear_map() {
        let mut rng = RngSeed(2).rng();
        let zs: Vec<f64> = (0..300).map(|_| gauss(&mut rng)).collect();
        let targets: Vec<f64> = zs.chunks_exact(3).map(|z| 2.0 * z[0] - z[1] + 0.5 * z[2] + 0.25).collect();
        let (w, b) = least_squares_head(&zs, 3, &targets);
        for (a, e) in w.iter().zip([2.0, -1.0, 0.5]) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!((b - 0.25).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.4, 0, 10), 0.4);
        assert!((cosine_lr(0.4, 5, 10) - 0.2).abs() < 1e-12);
        assert!(cosine_lr(0.4, 9, 10) > 0.0);
    }

    fn tiny() -> (crate::dataset::Dataset, DatasetConfig) {
        let mut c = DatasetConfig::default();
        c.world.height = 16;
        c.world.width = 16;
        c.world.object_count = [1, 3];
        c.train_scenes = 12;
        c.eval_scenes = 4;
        (make_dataset(&c, RngSeed(4)).unwrap(), c)
    }

    fn params<'a>(
        adapters: &'a BTreeMap<String, Adapter>,
        head: &'a DetectionHead,
        book: Option<&'a Codebook>,
        lambda: f64,
        fov: &'a BTreeMap<String, f64>,
        geometry: GridGeometry,
    ) -> ObjectiveParams<'a> {
        ObjectiveParams {
            adapters,
            head,
            codebook: book,
            commitment: 0.0,
            lambda,
            beta: 1.0,
            fov,
            geometry,
        }
    }

    #[test]
    fn quantizer_passes_gradients_straight_through() {
        let (d, c) = tiny();
        let frames = LocalView::new(&d, "mA").unwrap().frames(Split::Train).unwrap();
        let frame = frames[0].clone();
        let cz = 4;
        let mut rng = RngSeed(9).rng();
        let adapter = Adapter::random("mA", frame.features.channels(), cz, &mut rng);
        let adapters: BTreeMap<String, Adapter> = [("mA".to_string(), adapter.clone())].into();
        let head = DetectionHead {
            owner: "o".into(),
            weight: vec![0.5, 1.0, 0.2, 0.7],
            bias: -0.3,
            frozen: false,
        };
        // a codebook holding every adapted vector decodes each cell to itself
        let adapted = adapter.apply_map(&frame.features).unwrap();
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for i in 0..adapted.cells() {
            if !distinct.iter().any(|v| v.as_slice() == adapted.cell(i)) {
                distinct.push(adapted.cell(i).to_vec());
            }
        }
        let exact = Codebook::new("o", distinct.len(), cz, distinct.concat()).unwrap();
        let fov: BTreeMap<String, f64> = [("mA".to_string(), 10.0)].into();
        let g = c.world.geometry();
        let frames = vec![frame];
        let q = scene_gradients(&frames, &params(&adapters, &head, Some(&exact), 0.0, &fov, g)).unwrap();
        let plain = scene_gradients(&frames, &params(&adapters, &head, None, 0.0, &fov, g)).unwrap();
        assert!((q.loss - plain.loss).abs() < 1e-12);
        assert_eq!(q.adapters["mA"], plain.adapters["mA"]);
        assert_eq!(q.head_weight, plain.head_weight);
    }

    #[test]
    fn single_modality_scenes_have_no_similarity_term() {
        let (d, c) = tiny();
        let all = LocalView::new(&d, "mA").unwrap().frames(Split::Train).unwrap();
        let multi = &all[..2];
        let mut rng = RngSeed(1).rng();
        let adapters: BTreeMap<String, Adapter> =
            [("mA".to_string(), Adapter::random("mA", multi[0].features.channels(), 3, &mut rng))].into();
        let head = DetectionHead {
            owner: "o".into(),
            weight: vec![1.0, 0.5, 0.1],
            bias: 0.0,
            frozen: false,
        };
        let fov: BTreeMap<String, f64> = [("mA".to_string(), 14.0)].into();
        let g = c.world.geometry();
        let with = scene_gradients(multi, &params(&adapters, &head, None, 0.1, &fov, g)).unwrap();
        let without = scene_gradients(multi, &params(&adapters, &head, None, 0.0, &fov, g)).unwrap();
        assert_eq!(with.loss, without.loss);
        assert_eq!(with.adapters, without.adapters);
    }

    #[test]
    fn group_of_one_matches_trainable_single_space() {
        let (d, c) = tiny();
        let view = LocalView::new(&d, "mA").unwrap();
        let pre = pretrain_pipeline(&view, &PretrainConfig { epochs: 3, lr: 0.5 }, RngSeed(2)).unwrap();
        let heads: BTreeMap<String, DetectionHead> = [("mA".to_string(), pre.head)].into();
        let config = CodespaceConfig {
            codebook_size: 4,
            code_dim: 4,
            epochs: 2,
            ..CodespaceConfig::default()
        };
        let members = vec!["mA".to_string()];
        let group = train_group_codespace(&d, "gA", &members, &heads, &config, RngSeed(3)).unwrap();
        let train = scene_frames(&d, Split::Train, &members).unwrap();
        let eval: Vec<Frame> = scene_frames(&d, Split::Eval, &members).unwrap().into_iter().flatten().collect();
        let fov = fov_radii(&d.manifest, &members).unwrap();
        let direct = fit_codespace(
            "gA", &members, &heads, &fov, c.world.geometry(), &train, &eval, &config, HeadMode::Trainable, 0.0, RngSeed(3),
        )
        .unwrap();
        assert_eq!(group.codespace, direct.codespace);
    }

    #[test]
    fn codebook_size_below_two_is_rejected() {
        let (d, _) = tiny();
        let view = LocalView::new(&d, "mB").unwrap();
        let pre = pretrain_pipeline(&view, &PretrainConfig { epochs: 1, lr: 0.5 }, RngSeed(2)).unwrap();
        let config = CodespaceConfig {
            codebook_size: 1,
            ..CodespaceConfig::default()
        };
        assert!(matches!(train_codespace(&view, &pre.head, &config, RngSeed(1)), Err(Error::Config(_))));
    }
}
