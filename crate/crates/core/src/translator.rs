//! Feature-code-feature translation: per-cell classifiers from a source
//! modality's features to indices of a foreign codebook.
//!
//! Training only ever sees the source modality's own frames (through a
//! [`LocalView`]) plus the target's frozen codebook and head. Codes are
//! selected softly during training, `softmax(logits / tau) . codes`, with
//! `tau` annealed geometrically; inference takes the hard argmax.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codespace::{decode, CodeMap, Codebook, Codespace, DetectionHead};
use crate::dataset::{shuffled, Frame, LocalView, Split};
use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::linalg::{accumulate_outer, affine, affine_transpose, dot};
use crate::numeric::{gauss, logistic_loss, smooth_l1_slices, softmax, streams, RngSeed};

/// What a translator consumes from the source agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    /// Raw encoded features (`C_m` channels).
    Encoded,
    /// Source features after the source code space adapter (`C_z`).
    Adapted,
    /// Decoded source code map (`C_z`), i.e. code-to-code translation.
    Codemap,
}

impl InputSource {
    pub const ALL: [InputSource; 3] = [InputSource::Encoded, InputSource::Adapted, InputSource::Codemap];

    pub fn name(self) -> &'static str {
        match self {
            InputSource::Encoded => "encoded",
            InputSource::Adapted => "adapted",
            InputSource::Codemap => "codemap",
        }
    }
}

/// Dense affine layer, `output_dim x input_dim` row-major weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            weight: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    fn random(input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 0.1 / (input_dim as f64).sqrt();
        Self {
            input_dim,
            output_dim,
            weight: (0..input_dim * output_dim).map(|_| scale * gauss(rng)).collect(),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn params(&self) -> usize {
        self.output_dim * (self.input_dim + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.weight.len() != self.input_dim * self.output_dim || self.bias.len() != self.output_dim {
            return Err(Error::Shape("layer has inconsistent sizes".into()));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer has non-finite parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

/// Affine layers with `activation` between consecutive layers (not after
/// the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub activation: Activation,
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            activation: Activation::Tanh,
        }
    }

    /// Layers after which `tanh` is applied: indices `< n`.
    fn tanh_until(&self) -> usize {
        match self.activation {
            Activation::Tanh => self.layers.len() - 1,
            Activation::Identity => 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("empty layer stack".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim != w[1].input_dim {
                return Err(Error::Shape("layer dimensions do not chain".into()));
            }
        }
        self.layers.iter().try_for_each(Layer::validate)
    }
}

/// Per-source translator into a single target code space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorOneToOne {
    pub source: String,
    pub target_owner: String,
    pub input_source: InputSource,
    /// Usually one `D_t x C_src` layer.
    pub net: Stack,
}

/// Shared backbone with one output head per target code space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorMultiHead {
    pub source: String,
    pub input_source: InputSource,
    pub backbone: Stack,
    pub heads: BTreeMap<String, Layer>,
    /// Per-target loss EMA used for sampling targets.
    pub balance_state: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "kebab-case")]
pub enum Translator {
    OneToOne(TranslatorOneToOne),
    MultiHead(TranslatorMultiHead),
}

impl TranslatorOneToOne {
    /// Randomly initialized single-layer translator.
    pub fn new(
        source: &str,
        target_owner: &str,
        input_source: InputSource,
        input_dim: usize,
        codebook_size: usize,
        seed: RngSeed,
    ) -> Self {
        let mut rng = seed.derive(&[streams::TRANSLATOR]).rng();
        Self {
            source: source.to_string(),
            target_owner: target_owner.to_string(),
            input_source,
            net: Stack::new(vec![Layer::random(input_dim, codebook_size, &mut rng)]),
        }
    }

    pub fn params(&self) -> usize {
        self.net.params()
    }
}

impl TranslatorMultiHead {
    pub fn new(
        source: &str,
        input_source: InputSource,
        input_dim: usize,
        hidden: usize,
        depth: usize,
        targets: &[(String, usize)],
        seed: RngSeed,
    ) -> Self {
        let mut rng = seed.derive(&[streams::TRANSLATOR]).rng();
        let mut layers = vec![Layer::random(input_dim, hidden, &mut rng)];
        for _ in 1..depth.max(1) {
            layers.push(Layer::random(hidden, hidden, &mut rng));
        }
        let heads = targets
            .iter()
            .map(|(t, d)| (t.clone(), Layer::random(hidden, *d, &mut rng)))
            .collect();
        Self {
            source: source.to_string(),
            input_source,
            backbone: Stack::new(layers),
            heads,
            balance_state: targets.iter().map(|(t, _)| (t.clone(), 1.0)).collect(),
        }
    }

    pub fn params(&self) -> usize {
        self.backbone.params() + self.heads.values().map(Layer::params).sum::<usize>()
    }
}

impl Translator {
    pub fn source(&self) -> &str {
        match self {
            Translator::OneToOne(t) => &t.source,
            Translator::MultiHead(t) => &t.source,
        }
    }

    pub fn input_source(&self) -> InputSource {
        match self {
            Translator::OneToOne(t) => t.input_source,
            Translator::MultiHead(t) => t.input_source,
        }
    }

    pub fn targets(&self) -> Vec<String> {
        match self {
            Translator::OneToOne(t) => vec![t.target_owner.clone()],
            Translator::MultiHead(t) => t.heads.keys().cloned().collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Translator::OneToOne(t) => t.net.input_dim(),
            Translator::MultiHead(t) => t.backbone.input_dim(),
        }
    }

    pub fn params(&self) -> usize {
        match self {
            Translator::OneToOne(t) => t.params(),
            Translator::MultiHead(t) => t.params(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Translator::OneToOne(t) => t.net.validate(),
            Translator::MultiHead(t) => {
                t.backbone.validate()?;
                for h in t.heads.values() {
                    h.validate()?;
                    if h.input_dim != t.backbone.output_dim() {
                        return Err(Error::Shape("head does not match backbone width".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// Layers applied for `target`, in order. In the multi-head form the
    /// backbone output feeds the head without an activation.
    fn chain(&self, target: &str) -> Result<Chain<'_>> {
        match self {
            Translator::OneToOne(t) => {
                if t.target_owner != target {
                    return Err(Error::Config(format!(
                        "translator {} -> {} has no head for {target}",
                        t.source, t.target_owner
                    )));
                }
                Ok(Chain {
                    layers: t.net.layers.iter().collect(),
                    linear_from: t.net.tanh_until(),
                })
            }
            Translator::MultiHead(t) => {
                let head = t.heads.get(target).ok_or_else(|| {
                    Error::Config(format!("translator from {} has no head for {target}", t.source))
                })?;
                let mut layers: Vec<&Layer> = t.backbone.layers.iter().collect();
                let linear_from = t.backbone.tanh_until();
                layers.push(head);
                Ok(Chain { layers, linear_from })
            }
        }
    }
}

/// Borrowed view of the layers used for one target.
struct Chain<'a> {
    layers: Vec<&'a Layer>,
    /// `tanh` follows layers with index `< linear_from`.
    linear_from: usize,
}

impl Chain<'_> {
    fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim
    }

    /// Forward pass keeping every layer's input for backprop.
    fn forward(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> Vec<f64> {
        acts.clear();
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; l.output_dim];
            affine(&l.weight, &l.bias, &cur, &mut out);
            if i < self.linear_from {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(std::mem::replace(&mut cur, out));
        }
        cur
    }

    /// Accumulates parameter gradients given the gradient at the output.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grads: &mut [(Vec<f64>, Vec<f64>)]) {
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            let (dw, db) = &mut grads[i];
            accumulate_outer(dw, db, &g, &acts[i]);
            if i == 0 {
                break;
            }
            let mut gin = vec![0.0; l.input_dim];
            affine_transpose(&l.weight, &g, &mut gin);
            if i - 1 < self.linear_from {
                // acts[i] is tanh output of layer i - 1
                for (gv, a) in gin.iter_mut().zip(&acts[i]) {
                    *gv *= 1.0 - a * a;
                }
            }
            g = gin;
        }
    }

    fn zero_grads(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect()
    }
}

/// Per-cell code logits for `target`, `D_t` channels.
pub fn translate_logits(f: &FeatureMap, t: &Translator, target: &str) -> Result<FeatureMap> {
    let chain = t.chain(target)?;
    if f.channels() != t.input_dim() {
        return Err(Error::Shape(format!(
            "translator from {} expects {} input channels ({:?}), got {}",
            t.source(),
            t.input_dim(),
            t.input_source(),
            f.channels()
        )));
    }
    let d = chain.out_dim();
    let mut out = vec![0.0; f.cells() * d];
    let mut acts = Vec::new();
    for (idx, o) in out.chunks_exact_mut(d).enumerate() {
        o.copy_from_slice(&chain.forward(f.cell(idx), &mut acts));
    }
    FeatureMap::from_vec(f.height(), f.width(), d, out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax code per cell, referencing the target codebook `(owner, D)`.
pub fn translate_hard(f: &FeatureMap, t: &Translator, target: &str) -> Result<CodeMap> {
    let logits = translate_logits(f, t, target)?;
    hard_from_logits(&logits, target)
}

pub fn hard_from_logits(logits: &FeatureMap, owner: &str) -> Result<CodeMap> {
    let indices = (0..logits.cells()).map(|i| argmax(logits.cell(i)) as u16).collect();
    CodeMap::new(logits.height(), logits.width(), indices, owner, logits.channels())
}

/// Per cell `softmax(logits / tau) . codes`.
pub fn decode_soft(logits: &FeatureMap, book: &Codebook, tau: f64) -> Result<FeatureMap> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if logits.channels() != book.size() {
        return Err(Error::Shape(format!(
            "{} logits per cell for a codebook of {}",
            logits.channels(),
            book.size()
        )));
    }
    let dim = book.dim();
    let mut out = vec![0.0; logits.cells() * dim];
    for (idx, o) in out.chunks_exact_mut(dim).enumerate() {
        let p = softmax(logits.cell(idx), tau);
        for (l, pl) in p.iter().enumerate() {
            for (ov, c) in o.iter_mut().zip(book.code(l)) {
                *ov += pl * c;
            }
        }
    }
    FeatureMap::from_vec(logits.height(), logits.width(), dim, out)
}

/// Converts a source observation into a translator input.
pub fn prepare_input(
    f: &FeatureMap,
    modality: &str,
    input_source: InputSource,
    source_space: Option<&Codespace>,
) -> Result<FeatureMap> {
    let need = || {
        source_space.ok_or_else(|| {
            Error::Config(format!("{input_source:?} translator input needs the code space of {modality}"))
        })
    };
    match input_source {
        InputSource::Encoded => Ok(f.clone()),
        InputSource::Adapted => need()?.adapter(modality)?.apply_map(f),
        InputSource::Codemap => {
            let space = need()?;
            space.decode(&space.quantize(modality, f)?)
        }
    }
}

/// Geometric temperature schedule from `start` to `end` over `epochs`.
pub fn tau_schedule(start: f64, end: f64, epochs: usize) -> Vec<f64> {
    match epochs {
        0 => Vec::new(),
        1 => vec![start],
        n => (0..n)
            .map(|e| start * (end / start).powf(e as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub structure: Structure,
    pub input_source: InputSource,
    pub epochs: usize,
    pub lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Backbone width of the multi-head form.
    pub hidden: usize,
    /// Backbone depth of the multi-head form.
    pub depth: usize,
    pub balancing: bool,
    pub ema_decay: f64,
    pub min_target_prob: f64,
    /// Weight of the dense baseline's smooth-L1 pull towards the nearest
    /// target code.
    #[serde(default = "default_dense_anchor")]
    pub dense_anchor: f64,
}

fn default_dense_anchor() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    OneToOne,
    MultiHead,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            structure: Structure::OneToOne,
            input_source: InputSource::Encoded,
            epochs: 10,
            lr: 0.5,
            tau_start: 1.0,
            tau_end: 0.1,
            hidden: 32,
            depth: 1,
            balancing: true,
            ema_decay: 0.9,
            min_target_prob: 0.05,
            dense_anchor: 1.0,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return Err(Error::Config("translator lr and temperatures must be positive".into()));
        }
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config("translator hidden width and depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.min_target_prob) {
            return Err(Error::Config("ema_decay must be in [0, 1) and min_target_prob in [0, 1]".into()));
        }
        if !(self.dense_anchor >= 0.0) {
            return Err(Error::Config("dense_anchor must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frozen target artifacts reduced to what training needs: each code's
/// contribution `head . code` to the target logit, plus the head bias.
struct TargetSignal {
    code_scores: Vec<f64>,
    bias: f64,
}

impl TargetSignal {
    fn new(book: &Codebook, head: &DetectionHead) -> Result<Self> {
        if head.weight.len() != book.dim() {
            return Err(Error::Shape(format!(
                "target head of {} has {} weights for code dimension {}",
                head.owner,
                head.weight.len(),
                book.dim()
            )));
        }
        Ok(Self {
            code_scores: (0..book.size()).map(|l| dot(&head.weight, book.code(l))).collect(),
            bias: head.bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorTraining {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub tau: Vec<f64>,
    /// Target chosen at every step (multi-head only).
    pub sampled: Vec<String>,
}

/// Loss and gradients for one frame: mean logistic loss of the frozen target
/// head over soft-decoded cells.
fn frame_gradients(
    chain: &Chain,
    inputs: &FeatureMap,
    labels: &[bool],
    target: &TargetSignal,
    tau: f64,
) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
    let n = inputs.cells() as f64;
    let mut grads = chain.zero_grads();
    let mut acts = Vec::new();
    let mut loss = 0.0;
    for idx in 0..inputs.cells() {
        let u = chain.forward(inputs.cell(idx), &mut acts);
        let p = softmax(&u, tau);
        let mean_score = dot(&p, &target.code_scores);
        let (l, g) = logistic_loss(mean_score + target.bias, labels[idx]);
        loss += l / n;
        let du: Vec<f64> = p
            .iter()
            .zip(&target.code_scores)
            .map(|(pl, a)| g / n / tau * pl * (a - mean_score))
            .collect();
        chain.backward(&acts, &du, &mut grads);
    }
    (loss, grads)
}

fn apply(layers: &mut [&mut Layer], grads: &[(Vec<f64>, Vec<f64>)], lr: f64) {
    for (l, (dw, db)) in layers.iter_mut().zip(grads) {
        for (w, d) in l.weight.iter_mut().zip(dw) {
            *w -= lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(db) {
            *b -= lr * d;
        }
    }
}

struct Prepared {
    inputs: Vec<FeatureMap>,
    labels: Vec<Vec<bool>>,
}

fn prepare(
    view: &LocalView,
    source: &str,
    input_source: InputSource,
    source_space: Option<&Codespace>,
    expected_dim: usize,
) -> Result<Prepared> {
    if view.modality() != source {
        return Err(Error::Config(format!(
            "translator from {source} trained on a view of {}",
            view.modality()
        )));
    }
    let frames: Vec<Frame> = view.frames(Split::Train)?;
    if frames.is_empty() {
        return Err(Error::Data(format!("no training observations for {source}")));
    }
    let inputs = frames
        .par_iter()
        .map(|f| prepare_input(&f.features, source, input_source, source_space))
        .collect::<Result<Vec<_>>>()?;
    if inputs[0].channels() != expected_dim {
        return Err(Error::Shape(format!(
            "translator from {source} expects {expected_dim} input channels, data has {}",
            inputs[0].channels()
        )));
    }
    Ok(Prepared {
        inputs,
        labels: frames.into_iter().map(|f| f.labels).collect(),
    })
}

fn check_target(t_dim: usize, target: &Codespace) -> Result<TargetSignal> {
    if t_dim != target.codebook.size() {
        return Err(Error::Shape(format!(
            "translator emits {t_dim} logits, codebook {} has {} codes",
            target.owner,
            target.codebook.size()
        )));
    }
    TargetSignal::new(&target.codebook, &target.head)
}

/// Trains a one-to-one translator on the source modality's local frames
/// against a frozen target code space.
pub fn train_translator(
    t: &mut TranslatorOneToOne,
    view: &LocalView,
    source_space: Option<&Codespace>,
    target: &Codespace,
    config: &TranslatorConfig,
    seed: RngSeed,
) -> Result<TranslatorTraining> {
    config.validate()?;
    if target.owner != t.target_owner {
        return Err(Error::Config(format!(
            "translator targets {} but was given code space {}",
            t.target_owner, target.owner
        )));
    }
    let signal = check_target(t.net.output_dim(), target)?;
    let data = prepare(view, &t.source, t.input_source, source_space, t.net.input_dim())?;
    let taus = tau_schedule(config.tau_start, config.tau_end, config.epochs);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for (epoch, &tau) in taus.iter().enumerate() {
        let mut total = 0.0;
        for &fi in &shuffled(data.inputs.len(), seed.derive(&[streams::SHUFFLE, epoch as u64])) {
            let chain = Chain {
                layers: t.net.layers.iter().collect(),
                linear_from: t.net.tanh_until(),
            };
            let (loss, grads) = frame_gradients(&chain, &data.inputs[fi], &data.labels[fi], &signal, tau);
            total += loss;
            let mut layers: Vec<&mut Layer> = t.net.layers.iter_mut().collect();
            apply(&mut layers, &grads, config.lr);
        }
        loss_curve.push(total / data.inputs.len() as f64);
    }
    t.net.validate()?;
    Ok(TranslatorTraining {
        loss_curve,
        tau: taus,
        sampled: Vec::new(),
    })
}

/// Sampling distribution over targets (sorted by name): proportional to the
/// loss EMA with a floor of `min_prob` each, or uniform.
pub fn target_probabilities(ema: &BTreeMap<String, f64>, balancing: bool, min_prob: f64) -> Vec<f64> {
    let n = ema.len();
    if n == 0 {
        return Vec::new();
    }
    let uniform = vec![1.0 / n as f64; n];
    if !balancing {
        return uniform;
    }
    let floor = min_prob.min(1.0 / n as f64);
    let total: f64 = ema.values().sum();
    if !(total > 0.0) || !total.is_finite() {
        return uniform;
    }
    ema.values()
        .map(|e| floor + (1.0 - n as f64 * floor) * e / total)
        .collect()
}

/// Trains a multi-head translator. Every step draws one target (by loss EMA
/// when balancing, uniformly otherwise) and updates the backbone and that
/// head on one local frame.
pub fn train_multihead(
    t: &mut TranslatorMultiHead,
    view: &LocalView,
    source_space: Option<&Codespace>,
    targets: &BTreeMap<String, Codespace>,
    config: &TranslatorConfig,
    seed: RngSeed,
) -> Result<TranslatorTraining> {
    config.validate()?;
    if t.heads.is_empty() {
        return Err(Error::Config(format!("multi-head translator from {} has no targets", t.source)));
    }
    let mut signals = BTreeMap::new();
    for (name, head) in &t.heads {
        let space = targets
            .get(name)
            .ok_or_else(|| Error::Config(format!("no code space artifacts for target {name}")))?;
        signals.insert(name.clone(), check_target(head.output_dim, space)?);
    }
    let names: Vec<String> = t.heads.keys().cloned().collect();
    for n in &names {
        t.balance_state.entry(n.clone()).or_insert(1.0);
    }
    t.balance_state.retain(|k, _| t.heads.contains_key(k));
    let data = prepare(view, &t.source, t.input_source, source_space, t.backbone.input_dim())?;
    let taus = tau_schedule(config.tau_start, config.tau_end, config.epochs);
    let mut picker = seed.derive(&[streams::TRANSLATOR, 1]).rng();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut sampled = Vec::new();
    let linear_from = t.backbone.tanh_until();
    for (epoch, &tau) in taus.iter().enumerate() {
        let mut total = 0.0;
        for &fi in &shuffled(data.inputs.len(), seed.derive(&[streams::SHUFFLE, epoch as u64])) {
            let k = if names.len() == 1 {
                0
            } else {
                let probs = target_probabilities(&t.balance_state, config.balancing, config.min_target_prob);
                let mut r: f64 = picker.random();
                let mut k = names.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    if r < *p {
                        k = i;
                        break;
                    }
                    r -= p;
                }
                k
            };
            let name = &names[k];
            let (loss, grads) = {
                let mut layers: Vec<&Layer> = t.backbone.layers.iter().collect();
                layers.push(&t.heads[name]);
                let chain = Chain { layers, linear_from };
                frame_gradients(&chain, &data.inputs[fi], &data.labels[fi], &signals[name], tau)
            };
            total += loss;
            let mut layers: Vec<&mut Layer> = t.backbone.layers.iter_mut().collect();
            layers.push(t.heads.get_mut(name).expect("head present"));
            apply(&mut layers, &grads, config.lr);
            let ema = t.balance_state.get_mut(name).expect("state present");
            *ema = config.ema_decay * *ema + (1.0 - config.ema_decay) * loss;
            sampled.push(name.clone());
        }
        loss_curve.push(total / data.inputs.len() as f64);
    }
    t.backbone.validate()?;
    for h in t.heads.values() {
        h.validate()?;
    }
    Ok(TranslatorTraining {
        loss_curve,
        tau: taus,
        sampled,
    })
}

/// Dense-to-dense baseline: an affine map from source features straight
/// into the target's code dimension, no codebook in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTranslator {
    pub source: String,
    pub target_owner: String,
    pub layer: Layer,
}

impl DenseTranslator {
    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap> {
        if f.channels() != self.layer.input_dim {
            return Err(Error::Shape(format!(
                "dense translator from {} expects {} channels, got {}",
                self.source,
                self.layer.input_dim,
                f.channels()
            )));
        }
        let d = self.layer.output_dim;
        let mut out = vec![0.0; f.cells() * d];
        for (idx, o) in out.chunks_exact_mut(d).enumerate() {
            affine(&self.layer.weight, &self.layer.bias, f.cell(idx), o);
        }
        FeatureMap::from_vec(f.height(), f.width(), d, out)
    }
}

/// Trains the dense baseline with the frozen target head's logistic loss on
/// the mapped features plus a smooth-L1 pull (weight `dense_anchor`) towards
/// the nearest target code, which keeps outputs near the code manifold.
pub fn train_dense_translator(
    view: &LocalView,
    target: &Codespace,
    config: &TranslatorConfig,
    seed: RngSeed,
) -> Result<(DenseTranslator, Vec<f64>)> {
    config.validate()?;
    let source = view.modality().to_string();
    let c_src = view.spec().channels();
    let cz = target.codebook.dim();
    let mut rng = seed.derive(&[streams::TRANSLATOR, 2]).rng();
    let mut t = DenseTranslator {
        source: source.clone(),
        target_owner: target.owner.clone(),
        layer: Layer::random(c_src, cz, &mut rng),
    };
    let data = prepare(view, &source, InputSource::Encoded, None, c_src)?;
    let head = &target.head;
    // Step scaled by the head norm; large frozen heads otherwise diverge.
    let lr = config.lr / dot(&head.weight, &head.weight).sqrt().max(1.0);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for &fi in &shuffled(data.inputs.len(), seed.derive(&[streams::SHUFFLE, epoch as u64])) {
            let f = &data.inputs[fi];
            let n = f.cells() as f64;
            let mut dw = vec![0.0; t.layer.weight.len()];
            let mut db = vec![0.0; cz];
            let mut z = vec![0.0; cz];
            let mut g = vec![0.0; cz];
            for idx in 0..f.cells() {
                affine(&t.layer.weight, &t.layer.bias, f.cell(idx), &mut z);
                let (l, gs) = logistic_loss(head.logit(&z), data.labels[fi][idx]);
                total += l / n;
                for (gk, w) in g.iter_mut().zip(&head.weight) {
                    *gk = gs * w / n;
                }
                if config.dense_anchor > 0.0 {
                    let (k, _) = target.codebook.nearest(&z);
                    let (la, ga) = smooth_l1_slices(&z, target.codebook.code(k), 1.0)?;
                    total += config.dense_anchor * la / n;
                    for (gk, a) in g.iter_mut().zip(&ga) {
                        *gk += config.dense_anchor * a / n;
                    }
                }
                accumulate_outer(&mut dw, &mut db, &g, f.cell(idx));
            }
            apply(&mut [&mut t.layer], &[(dw, db)], lr);
        }
        curve.push(total / data.inputs.len() as f64);
    }
    t.layer.validate()?;
    Ok((t, curve))
}

/// Serialized translator with its training provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorArtifact {
    pub translator: Translator,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: RngSeed,
    pub loss_curve: Vec<f64>,
}

impl TranslatorArtifact {
    /// `translator_<src>_to_<targets>.json`, targets joined by `+`.
    pub fn file_name(&self) -> String {
        translator_file_name(self.translator.source(), &self.translator.targets())
    }
}

pub fn translator_file_name(source: &str, targets: &[String]) -> String {
    format!("translator_{source}_to_{}.json", targets.join("+"))
}

/// Total one-to-one parameters for `n` modalities with `c_src` input
/// channels and codebooks of `d`: one translator per ordered pair.
pub fn one_to_one_total_params(n: usize, c_src: usize, d: usize) -> usize {
    n * n.saturating_sub(1) * d * (c_src + 1)
}

/// Decodes a hard translation with the target codebook.
pub fn translate_decode(f: &FeatureMap, t: &Translator, target: &Codespace) -> Result<FeatureMap> {
    decode(&translate_hard(f, t, &target.owner)?, &target.codebook)
}
