//! Metrics and experiment orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{run_frame, warp_indices, AgentInput, Artifacts, CollabOptions, FrameResult, Mode};
use crate::codespace::PretrainResult;
use crate::config::{EgoPolicy, RunConfig};
use crate::dataset::{ObservationSource, Split};
use crate::error::{Error, Result};
use crate::grid::DetectionMap;
use crate::numeric::{smooth_l1_elem, RngSeed};
use crate::pipeline::{
    assemble, pretrain_all, spaces, train_codespaces, train_dense_translators, train_translators, translator_pairs,
    heads, DenseArtifact, TrainedSystem,
};
use crate::translator::{prepare_input, translate_hard, InputSource, Translator, TranslatorMultiHead, TranslatorOneToOne};
use crate::wire::{bandwidth_report, bits_per_index, BandwidthRow, LinkRecord};
use crate::worldgen::{agent_truth, fov_mask};

/// Threshold-free cell-level average precision.
///
/// All cells of all frames are ranked by score; each distinct score is one
/// threshold. AP is the trapezoidal area under the precision-recall curve,
/// starting from recall 0 at the precision of the highest threshold.
pub fn cell_ap(scores: &[DetectionMap], truths: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} score maps vs {} truth maps",
            scores.len(),
            truths.len()
        )));
    }
    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for (s, t) in scores.iter().zip(truths) {
        if s.scores().len() != t.len() {
            return Err(Error::Shape(format!(
                "score map with {} cells vs truth with {}",
                s.scores().len(),
                t.len()
            )));
        }
        pairs.extend(s.scores().iter().copied().zip(t.iter().copied()));
    }
    ap_from_pairs(pairs)
}

/// [`cell_ap`] over flat `(score, is_positive)` pairs.
pub fn ap_from_pairs(mut pairs: Vec<(f64, bool)>) -> Result<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision needs at least one positive cell".into()));
    }
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = positives as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut prev_recall, mut prev_precision) = (0.0, f64::NAN);
    let mut area = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            tp += pairs[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total;
        let precision = tp as f64 / seen as f64;
        if prev_precision.is_nan() {
            prev_precision = precision;
        }
        area += (recall - prev_recall) * (precision + prev_precision) / 2.0;
        prev_recall = recall;
        prev_precision = precision;
    }
    Ok(area)
}

/// A simulated frame with the ego's own-frame ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub result: FrameResult,
    pub ego_modality: String,
    pub labels: Vec<bool>,
}

/// Runs every evaluation scene. With a fixed policy the agent carrying
/// `ego` is the ego; alternating makes every agent the ego once. All other
/// agents of the scene are neighbors.
pub fn simulate_frames(
    source: &dyn ObservationSource,
    artifacts: &Artifacts,
    ego: &str,
    policy: EgoPolicy,
    opts: &CollabOptions,
) -> Result<Vec<FrameOutcome>> {
    let manifest = source.manifest();
    let geometry = manifest.world.geometry();
    let per_scene: Vec<Vec<FrameOutcome>> = manifest
        .scenes(Split::Eval)
        .par_iter()
        .map(|scene| {
            let obs = scene
                .agents
                .iter()
                .map(|a| source.observation(scene.scene_id, a.agent_id))
                .collect::<Result<Vec<_>>>()?;
            let truth = source.truth(scene.scene_id)?;
            let inputs: Vec<AgentInput> = scene
                .agents
                .iter()
                .zip(&obs)
                .map(|(agent, features)| AgentInput { agent, features })
                .collect();
            let mut out = Vec::new();
            for (k, e) in inputs.iter().enumerate() {
                if policy == EgoPolicy::Fixed && e.agent.modality != ego {
                    continue;
                }
                let neighbors: Vec<AgentInput> =
                    inputs.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, n)| *n).collect();
                let result = run_frame(scene.scene_id, *e, &neighbors, artifacts, &geometry, opts)?;
                out.push(FrameOutcome {
                    result,
                    ego_modality: e.agent.modality.clone(),
                    labels: agent_truth(&truth, &manifest.world, &e.agent.pose),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<FrameOutcome> = per_scene.into_iter().flatten().collect();
    if frames.is_empty() {
        return Err(Error::Data(format!("no evaluation frames with ego {ego}")));
    }
    Ok(frames)
}

/// AP over frames; with several ego modalities, the mean of per-modality AP.
pub fn frames_ap(frames: &[FrameOutcome]) -> Result<f64> {
    let mut by_ego: BTreeMap<&str, (Vec<DetectionMap>, Vec<Vec<bool>>)> = BTreeMap::new();
    for f in frames {
        let e = by_ego.entry(&f.ego_modality).or_default();
        e.0.push(f.result.detection.clone());
        e.1.push(f.labels.clone());
    }
    if by_ego.is_empty() {
        return Err(Error::Undefined("no frames to score".into()));
    }
    let mut total = 0.0;
    for (scores, truths) in by_ego.values() {
        total += cell_ap(scores, truths)?;
    }
    Ok(total / by_ego.len() as f64)
}

/// Mean Smooth-L1 between a source modality's features expressed in
/// `target_owner`'s code space and the target members' own quantized
/// features, over cells both agents observe, in the target agent's frame.
///
/// The source side is translated with `translator` when given, otherwise with
/// the artifact translator, or quantized directly when the source already
/// belongs to `target_owner`. An agent is compared with itself only through a
/// translator.
pub fn alignment_error(
    source: &dyn ObservationSource,
    artifacts: &Artifacts,
    src: &str,
    target_owner: &str,
    translator: Option<&Translator>,
    beta: f64,
) -> Result<f64> {
    let manifest = source.manifest();
    let geom = manifest.world.geometry();
    let space = artifacts.space(target_owner)?;
    let members: Vec<&String> = space.adapters.keys().collect();
    let own = artifacts.owner(src)? == target_owner;
    let translator = match translator {
        Some(t) => Some(t),
        None if own => None,
        None => Some(artifacts.translator(src, target_owner)?),
    };
    let src_space = artifacts.space_of(src)?;
    let src_fov = fov_mask(&geom, manifest.modality(src)?.config.fov_radius);

    let per_scene: Vec<(f64, usize)> = manifest
        .scenes(Split::Eval)
        .par_iter()
        .map(|scene| {
            let mut total = (0.0, 0usize);
            for s in scene.agents.iter().filter(|a| a.modality == src) {
                let f = source.observation(scene.scene_id, s.agent_id)?;
                let mapped = match translator {
                    Some(t) => {
                        let input = prepare_input(&f, src, t.input_source(), Some(src_space))?;
                        space.decode(&translate_hard(&input, t, target_owner)?)?
                    }
                    None => space.decode(&space.quantize(src, &f)?)?,
                };
                for t in scene.agents.iter().filter(|a| members.contains(&&a.modality)) {
                    if t.agent_id == s.agent_id && translator.is_none() {
                        continue;
                    }
                    let g = source.observation(scene.scene_id, t.agent_id)?;
                    let reference = space.decode(&space.quantize(&t.modality, &g)?)?;
                    let t_fov = fov_mask(&geom, manifest.modality(&t.modality)?.config.fov_radius);
                    let cz = reference.channels();
                    for (idx, from) in warp_indices(&geom, &s.pose, &t.pose).into_iter().enumerate() {
                        let Some(from) = from else { continue };
                        if !src_fov[from] || !t_fov[idx] {
                            continue;
                        }
                        for (a, b) in mapped.cell(from).iter().zip(reference.cell(idx)) {
                            total.0 += smooth_l1_elem(a - b, beta).0;
                        }
                        total.1 += cz;
                    }
                }
            }
            Ok(total)
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = per_scene.into_iter().fold((0.0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if count == 0 {
        return Err(Error::Data(format!(
            "no co-occurring evaluation observations of {src} and {target_owner}"
        )));
    }
    Ok(sum / count as f64)
}

/// Named experiment suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    IsolationCore,
    CodebookSweep,
    TranslationVariants,
    PoseSweep,
    Scaling,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::IsolationCore,
        Suite::CodebookSweep,
        Suite::TranslationVariants,
        Suite::PoseSweep,
        Suite::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::IsolationCore => "isolation-core",
            Suite::CodebookSweep => "codebook-sweep",
            Suite::TranslationVariants => "translation-variants",
            Suite::PoseSweep => "pose-sweep",
            Suite::Scaling => "scaling",
        }
    }

    pub fn parse(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s}")))
    }
}

/// One simulated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub suite: Suite,
    pub mode: Mode,
    /// Translator input source, or `dense` for the dense baseline.
    pub variant: String,
    pub codebook_size: usize,
    pub pose_noise_cells: f64,
}

impl Setting {
    /// Stable identifier used for log file names.
    pub fn key(&self) -> String {
        format!(
            "{}_{}_{}_d{}_s{}",
            self.suite.name(),
            self.mode.name(),
            self.variant,
            self.codebook_size,
            self.pose_noise_cells
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingFrames {
    pub setting: Setting,
    pub frames: Vec<FrameOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub suite: Suite,
    pub source: String,
    pub target_owner: String,
    pub variant: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub modalities: usize,
    pub one_to_one_params: usize,
    pub multi_head_params: usize,
}

/// Headline numbers of each training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub name: String,
    pub codebook_size: usize,
    pub value: f64,
    pub metric: String,
}

/// Raw outputs of one suite, before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteLog {
    pub suite: Suite,
    pub config_hash: String,
    pub seed: RngSeed,
    pub settings: Vec<SettingFrames>,
    pub alignment: Vec<AlignmentRow>,
    pub scaling: Vec<ScalingRow>,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub suite: Suite,
    pub mode: Mode,
    pub variant: String,
    pub codebook_size: usize,
    pub pose_noise_cells: f64,
    pub ap: f64,
    pub frames: usize,
    pub links: usize,
    pub mean_payload_bytes: f64,
    pub mean_header_bytes: f64,
    /// Dense-equivalent bytes over payload bytes, code-map links only.
    pub compression_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookPoint {
    pub codebook_size: usize,
    pub bits: u8,
    pub payload_bytes: usize,
    pub ap_codealign: f64,
    pub ap_no_collab: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePoint {
    pub pose_noise_cells: f64,
    pub pose_noise_m: f64,
    pub ap: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: RngSeed,
    pub suites: Vec<Suite>,
    pub ap_table: Vec<ApRow>,
    pub alignment: Vec<AlignmentRow>,
    pub bandwidth: Vec<BandwidthSummary>,
    pub codebook_curve: Vec<CodebookPoint>,
    pub pose_curve: Vec<PosePoint>,
    pub scaling: Vec<ScalingRow>,
    pub stages: Vec<StageSummary>,
    pub notes: Vec<String>,
    pub config: RunConfig,
}

impl ExperimentReport {
    /// AP of the first row matching the filter.
    pub fn ap(&self, suite: Suite, mode: Mode, variant: &str, pose_noise_cells: f64) -> Option<f64> {
        self.ap_table
            .iter()
            .find(|r| r.suite == suite && r.mode == mode && r.variant == variant && r.pose_noise_cells == pose_noise_cells)
            .map(|r| r.ap)
    }

    pub fn alignment_error(&self, suite: Suite, source: &str, target_owner: &str, variant: &str) -> Option<f64> {
        self.alignment
            .iter()
            .find(|r| r.suite == suite && r.source == source && r.target_owner == target_owner && r.variant == variant)
            .map(|r| r.error)
    }
}

/// Per-link message sizes of one setting. All links of a setting carry the
/// same message kind and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub suite: Suite,
    pub mode: Mode,
    pub variant: String,
    pub codebook_size: usize,
    pub kind: String,
    pub payload_bytes: f64,
    pub header_bytes: f64,
    pub dense_equivalent_bytes: Option<usize>,
    pub compression_ratio: Option<f64>,
}

const NOTES: &[&str] = &[
    "AP is threshold-free cell-level average precision: all cells of all frames ranked by score, trapezoidal area under the precision-recall curve. It stands in for box AP at IoU 0.3/0.5/0.7, which needs oriented boxes.",
    "Single-modality code spaces use the pretrained head re-fitted onto the code dimension by least squares and frozen; group code spaces train a shared head from the same initialization.",
    "Fusion is the element-wise maximum over the maps of agents that observe a cell.",
];

fn summarize(setting: &Setting, frames: &[FrameOutcome]) -> Result<(ApRow, Option<BandwidthSummary>)> {
    let ap = frames_ap(frames)?;
    let links: Vec<LinkRecord> = frames.iter().flat_map(|f| f.result.links.iter().cloned()).collect();
    let rows = bandwidth_report(&links);
    let mean = |f: fn(&BandwidthRow) -> usize| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| f(r) as f64).sum::<f64>() / rows.len() as f64
        }
    };
    let payload = mean(|r| r.payload_bytes);
    let header = mean(|r| r.header_bytes);
    let ratio = rows
        .first()
        .and_then(|r| r.dense_equivalent_bytes)
        .filter(|_| payload > 0.0)
        .map(|d| d as f64 / payload);
    let row = ApRow {
        suite: setting.suite,
        mode: setting.mode,
        variant: setting.variant.clone(),
        codebook_size: setting.codebook_size,
        pose_noise_cells: setting.pose_noise_cells,
        ap,
        frames: frames.len(),
        links: rows.len(),
        mean_payload_bytes: payload,
        mean_header_bytes: header,
        compression_ratio: ratio,
    };
    let bw = rows.first().map(|r| BandwidthSummary {
        suite: setting.suite,
        mode: setting.mode,
        variant: setting.variant.clone(),
        codebook_size: setting.codebook_size,
        kind: r.kind.clone(),
        payload_bytes: payload,
        header_bytes: header,
        dense_equivalent_bytes: r.dense_equivalent_bytes,
        compression_ratio: ratio,
    });
    Ok((row, bw))
}

fn mode_rank(m: Mode) -> usize {
    Mode::ALL.iter().position(|x| *x == m).unwrap_or(usize::MAX)
}

/// Aggregates suite logs into one report. Every number is recomputed from
/// the logged frames.
pub fn build_report(config: &RunConfig, logs: &[SuiteLog]) -> Result<ExperimentReport> {
    if logs.is_empty() {
        return Err(Error::Data("no simulation logs to report".into()));
    }
    let hash = config.hash()?;
    for log in logs {
        if log.config_hash != hash {
            return Err(Error::Config(format!(
                "log of suite {} has config hash {}, expected {hash}",
                log.suite.name(),
                log.config_hash
            )));
        }
    }
    let mut logs: Vec<&SuiteLog> = logs.iter().collect();
    logs.sort_by_key(|l| l.suite);

    let mut report = ExperimentReport {
        config_hash: hash,
        seed: config.seed,
        suites: logs.iter().map(|l| l.suite).collect(),
        ap_table: Vec::new(),
        alignment: Vec::new(),
        bandwidth: Vec::new(),
        codebook_curve: Vec::new(),
        pose_curve: Vec::new(),
        scaling: Vec::new(),
        stages: Vec::new(),
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
        config: config.clone(),
    };
    for log in logs {
        // canonical order, independent of how the settings were logged
        let mut settings: Vec<&SettingFrames> = log.settings.iter().collect();
        settings.sort_by(|a, b| {
            let (a, b) = (&a.setting, &b.setting);
            a.pose_noise_cells
                .total_cmp(&b.pose_noise_cells)
                .then(a.codebook_size.cmp(&b.codebook_size))
                .then(a.variant.cmp(&b.variant))
                .then(mode_rank(a.mode).cmp(&mode_rank(b.mode)))
        });
        for sf in settings {
            let (row, bw) = summarize(&sf.setting, &sf.frames)?;
            // pose noise does not change message sizes
            if sf.setting.pose_noise_cells == 0.0 {
                report.bandwidth.extend(bw);
            }
            report.ap_table.push(row);
        }
        report.alignment.extend(log.alignment.iter().cloned());
        report.scaling.extend(log.scaling.iter().cloned());
        report.stages.extend(log.stages.iter().cloned());
    }

    let sweep: Vec<&ApRow> = report.ap_table.iter().filter(|r| r.suite == Suite::CodebookSweep).collect();
    let mut sizes: Vec<usize> = sweep.iter().map(|r| r.codebook_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    for d in sizes {
        let get = |m: Mode| sweep.iter().find(|r| r.codebook_size == d && r.mode == m);
        if let (Some(c), Some(n)) = (get(Mode::Codealign), get(Mode::NoCollab)) {
            report.codebook_curve.push(CodebookPoint {
                codebook_size: d,
                bits: bits_per_index(d)?,
                payload_bytes: c.mean_payload_bytes as usize,
                ap_codealign: c.ap,
                ap_no_collab: n.ap,
            });
        }
    }

    let cell = config.dataset.world.cell_size;
    let mut sigmas: Vec<f64> = report
        .ap_table
        .iter()
        .filter(|r| r.suite == Suite::PoseSweep)
        .map(|r| r.pose_noise_cells)
        .collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    for s in sigmas {
        let ap = report
            .ap_table
            .iter()
            .filter(|r| r.suite == Suite::PoseSweep && r.pose_noise_cells == s)
            .map(|r| (r.mode.name().to_string(), r.ap))
            .collect();
        report.pose_curve.push(PosePoint {
            pose_noise_cells: s,
            pose_noise_m: s * cell,
            ap,
        });
    }
    Ok(report)
}

fn stage<T>(r: Result<T>, name: &str, hash: &str) -> Result<T> {
    r.map_err(|e| e.in_stage(name, hash))
}

/// Pretraining plus every stage of the default setting.
pub fn train_system(source: &dyn ObservationSource, config: &RunConfig) -> Result<TrainedSystem> {
    let hash = config.hash()?;
    let pretrained = stage(pretrain_all(source, &config.pretrain, config.seed), "pretrain", &hash)?;
    train_stack(source, config, pretrained, config.codespace.codebook_size, true)
}

/// Code spaces of size `codebook_size`, translators and, when `with_dense`,
/// the dense baselines, on top of pretrained heads.
pub fn train_stack(
    source: &dyn ObservationSource,
    config: &RunConfig,
    pretrained: BTreeMap<String, PretrainResult>,
    codebook_size: usize,
    with_dense: bool,
) -> Result<TrainedSystem> {
    let hash = config.hash()?;
    let mut cs_config = config.codespace.clone();
    cs_config.codebook_size = codebook_size;
    let codespaces = stage(
        train_codespaces(source, &cs_config, &heads(&pretrained), config.seed),
        "train-codespace",
        &hash,
    )?;
    let sp = spaces(&codespaces);
    let pairs = translator_pairs(source);
    let translators = stage(
        train_translators(source, &config.translator, &sp, &pairs, config.seed),
        "train-translator",
        &hash,
    )?;
    let dense: Vec<DenseArtifact> = if with_dense {
        stage(
            train_dense_translators(source, &config.translator, &sp, &pairs, config.seed),
            "train-dense",
            &hash,
        )?
    } else {
        Vec::new()
    };
    let artifacts = assemble(source, &sp, &translators, &dense);
    Ok(TrainedSystem {
        pretrained,
        codespaces,
        translators,
        dense,
        artifacts,
    })
}

/// Collaboration options of one setting.
pub fn options(config: &RunConfig, mode: Mode, pose_noise_cells: f64) -> CollabOptions {
    let mut o = CollabOptions::new(mode, config.seed);
    o.pose_noise_xy = pose_noise_cells * config.dataset.world.cell_size;
    o.pose_noise_heading = if pose_noise_cells > 0.0 { config.collab.pose_noise_heading } else { 0.0 };
    o.ego_dense = config.collab.ego_dense;
    o.late_threshold = config.collab.late_threshold;
    o
}

fn simulate_setting(
    source: &dyn ObservationSource,
    config: &RunConfig,
    artifacts: &Artifacts,
    setting: Setting,
) -> Result<SettingFrames> {
    let opts = options(config, setting.mode, setting.pose_noise_cells);
    let frames = stage(
        simulate_frames(source, artifacts, &config.collab.ego, config.collab.ego_policy, &opts),
        "simulate",
        &config.hash()?,
    )?;
    Ok(SettingFrames { setting, frames })
}

fn stage_summaries(system: &TrainedSystem, codebook_size: usize) -> Vec<StageSummary> {
    let mut out = Vec::new();
    for (m, r) in &system.pretrained {
        out.push(StageSummary {
            stage: "pretrain".into(),
            name: m.clone(),
            codebook_size: 0,
            value: r.ap,
            metric: "ap".into(),
        });
    }
    for (o, r) in &system.codespaces {
        if let Some(last) = r.history.last() {
            out.push(StageSummary {
                stage: "train-codespace".into(),
                name: o.clone(),
                codebook_size,
                value: last.ap,
                metric: "ap".into(),
            });
        }
    }
    for t in &system.translators {
        if let Some(loss) = t.loss_curve.last() {
            out.push(StageSummary {
                stage: "train-translator".into(),
                name: t.file_name(),
                codebook_size,
                value: *loss,
                metric: "loss".into(),
            });
        }
    }
    for d in &system.dense {
        if let Some(loss) = d.loss_curve.last() {
            out.push(StageSummary {
                stage: "train-dense".into(),
                name: format!("{}_to_{}", d.translator.source, d.translator.target_owner),
                codebook_size,
                value: *loss,
                metric: "loss".into(),
            });
        }
    }
    out
}

fn alignment_rows(
    source: &dyn ObservationSource,
    config: &RunConfig,
    artifacts: &Artifacts,
    suite: Suite,
    variant: &str,
) -> Result<Vec<AlignmentRow>> {
    let beta = config.codespace.smooth_l1_beta;
    translator_pairs(source)
        .into_iter()
        .map(|(m, o)| {
            let error = stage(alignment_error(source, artifacts, &m, &o, None, beta), "alignment", &config.hash()?)?;
            Ok(AlignmentRow {
                suite,
                source: m,
                target_owner: o,
                variant: variant.to_string(),
                error,
            })
        })
        .collect()
}

/// Measured translator parameter totals for `n` modalities: one-to-one
/// translators for every ordered pair, against one multi-head translator
/// per source with `n - 1` heads counted once per added target.
pub fn scaling_rows(config: &RunConfig, input_dim: usize, counts: &[usize]) -> Vec<ScalingRow> {
    let d = config.codespace.codebook_size;
    let t = &config.translator;
    counts
        .iter()
        .map(|&n| {
            let pair = TranslatorOneToOne::new("s", "t", t.input_source, input_dim, d, config.seed).params();
            let targets: Vec<(String, usize)> = (1..n).map(|k| (format!("t{k}"), d)).collect();
            let multi = TranslatorMultiHead::new("s", t.input_source, input_dim, t.hidden, t.depth, &targets, config.seed);
            ScalingRow {
                modalities: n,
                one_to_one_params: n * (n - 1) * pair,
                multi_head_params: multi.params(),
            }
        })
        .collect()
}

/// Runs one suite on top of a system trained for the default setting.
/// Sweeps retrain the stages they vary from `base`'s pretrained heads.
/// A non-empty `modes` restricts the simulated settings to those modes.
pub fn run_suite(
    source: &dyn ObservationSource,
    config: &RunConfig,
    suite: Suite,
    base: &TrainedSystem,
    modes: &[Mode],
) -> Result<SuiteLog> {
    let hash = config.hash()?;
    let d0 = config.codespace.codebook_size;
    let v0 = config.translator.input_source.name();
    let wanted = |m: Mode| modes.is_empty() || modes.contains(&m);
    let variant_of = |m: Mode| if m == Mode::D2d { "dense" } else { v0 };
    let setting = |mode: Mode, variant: &str, d: usize, sigma: f64| Setting {
        suite,
        mode,
        variant: variant.to_string(),
        codebook_size: d,
        pose_noise_cells: sigma,
    };
    let mut log = SuiteLog {
        suite,
        config_hash: hash.clone(),
        seed: config.seed,
        settings: Vec::new(),
        alignment: Vec::new(),
        scaling: Vec::new(),
        stages: Vec::new(),
    };
    match suite {
        Suite::IsolationCore => {
            for mode in Mode::ALL.into_iter().filter(|m| wanted(*m)) {
                log.settings.push(simulate_setting(
                    source,
                    config,
                    &base.artifacts,
                    setting(mode, variant_of(mode), d0, 0.0),
                )?);
            }
            log.alignment = alignment_rows(source, config, &base.artifacts, suite, v0)?;
            log.stages = stage_summaries(base, d0);
        }
        Suite::CodebookSweep => {
            let sweep_modes: Vec<Mode> = [Mode::NoCollab, Mode::Codealign].into_iter().filter(|m| wanted(*m)).collect();
            if !sweep_modes.is_empty() {
                for &d in &config.experiment.codebook_sizes {
                    let retrained;
                    let system = if d == d0 {
                        base
                    } else {
                        retrained = train_stack(source, config, base.pretrained.clone(), d, false)?;
                        &retrained
                    };
                    for &mode in &sweep_modes {
                        log.settings
                            .push(simulate_setting(source, config, &system.artifacts, setting(mode, v0, d, 0.0))?);
                    }
                    log.stages.extend(stage_summaries(system, d).into_iter().filter(|s| s.stage != "pretrain"));
                }
            }
        }
        Suite::TranslationVariants => {
            if wanted(Mode::Codealign) {
                for input in InputSource::ALL {
                    let mut artifacts = base.artifacts.clone();
                    if input != config.translator.input_source {
                        let mut tc = config.translator.clone();
                        tc.input_source = input;
                        let sp = spaces(&base.codespaces);
                        let translators = stage(
                            train_translators(source, &tc, &sp, &translator_pairs(source), config.seed),
                            "train-translator",
                            &hash,
                        )?;
                        artifacts.translators = translators.into_iter().map(|t| t.translator).collect();
                    }
                    log.settings.push(simulate_setting(
                        source,
                        config,
                        &artifacts,
                        setting(Mode::Codealign, input.name(), d0, 0.0),
                    )?);
                    log.alignment
                        .extend(alignment_rows(source, config, &artifacts, suite, input.name())?);
                }
            }
            for mode in [Mode::NoCollab, Mode::D2d].into_iter().filter(|m| wanted(*m)) {
                log.settings.push(simulate_setting(
                    source,
                    config,
                    &base.artifacts,
                    setting(mode, variant_of(mode), d0, 0.0),
                )?);
            }
        }
        Suite::PoseSweep => {
            for &sigma in &config.experiment.pose_noise_cells {
                for mode in Mode::ALL.into_iter().filter(|m| wanted(*m)) {
                    log.settings.push(simulate_setting(
                        source,
                        config,
                        &base.artifacts,
                        setting(mode, variant_of(mode), d0, sigma),
                    )?);
                }
            }
        }
        Suite::Scaling => {
            let ego = source.manifest().modality(&config.collab.ego)?.channels();
            log.scaling = scaling_rows(config, ego, &config.experiment.scaling_counts);
        }
    }
    Ok(log)
}

/// End-to-end run of `suites`: pretraining, default-setting training, every
/// suite, and the aggregated report.
pub fn run_experiment(source: &dyn ObservationSource, config: &RunConfig, suites: &[Suite]) -> Result<ExperimentReport> {
    config.validate()?;
    let base = train_system(source, config)?;
    let logs = suites
        .iter()
        .map(|s| run_suite(source, config, *s, &base, &[]))
        .collect::<Result<Vec<_>>>()?;
    build_report(config, &logs)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Encode(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Encode(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Encode(e.to_string()))
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per simulated setting.
    pub fn table_csv(&self) -> Result<Vec<u8>> {
        let (h, s) = (self.config_hash.as_str(), self.seed.0);
        csv_bytes(
            self.ap_table.iter().map(|r| {
                (
                    h,
                    s,
                    r.suite,
                    r.mode,
                    &r.variant,
                    r.codebook_size,
                    r.pose_noise_cells,
                    r.ap,
                    r.frames,
                    r.links,
                    r.mean_payload_bytes,
                    r.mean_header_bytes,
                    r.compression_ratio,
                )
            }),
            &[
                "config_hash", "seed", "suite", "mode", "variant", "codebook_size", "pose_noise_cells", "ap", "frames",
                "links", "mean_payload_bytes", "mean_header_bytes", "compression_ratio",
            ],
        )
    }

    /// Sweep curves by file name, one row per setting.
    pub fn curves_csv(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let (h, s) = (self.config_hash.as_str(), self.seed.0);
        let mut out = BTreeMap::new();
        if !self.codebook_curve.is_empty() {
            out.insert(
                "codebook.csv".to_string(),
                csv_bytes(
                    self.codebook_curve
                        .iter()
                        .map(|p| (h, s, p.codebook_size, p.bits, p.payload_bytes, p.ap_codealign, p.ap_no_collab)),
                    &["config_hash", "seed", "codebook_size", "bits", "payload_bytes", "ap_codealign", "ap_no_collab"],
                )?,
            );
        }
        if !self.pose_curve.is_empty() {
            let rows = self
                .pose_curve
                .iter()
                .flat_map(|p| p.ap.iter().map(move |(mode, ap)| (h, s, p.pose_noise_cells, p.pose_noise_m, mode, *ap)));
            out.insert(
                "pose.csv".to_string(),
                csv_bytes(rows, &["config_hash", "seed", "pose_noise_cells", "pose_noise_m", "mode", "ap"])?,
            );
        }
        if !self.alignment.is_empty() {
            out.insert(
                "alignment.csv".to_string(),
                csv_bytes(
                    self.alignment
                        .iter()
                        .map(|r| (h, s, r.suite, &r.source, &r.target_owner, &r.variant, r.error)),
                    &["config_hash", "seed", "suite", "source", "target_owner", "variant", "error"],
                )?,
            );
        }
        if !self.scaling.is_empty() {
            out.insert(
                "scaling.csv".to_string(),
                csv_bytes(
                    self.scaling
                        .iter()
                        .map(|r| (h, s, r.modalities, r.one_to_one_params, r.multi_head_params)),
                    &["config_hash", "seed", "modalities", "one_to_one_params", "multi_head_params"],
                )?,
            );
        }
        Ok(out)
    }

    /// Writes `report.json`, `report.csv` and `curves/*.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let curves = dir.join("curves");
        fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        let write = |p: PathBuf, bytes: &[u8]| fs::write(&p, bytes).map_err(|e| Error::io(&p, e));
        write(dir.join("report.json"), self.to_json()?.as_bytes())?;
        write(dir.join("report.csv"), &self.table_csv()?)?;
        for (name, bytes) in self.curves_csv()? {
            write(curves.join(name), &bytes)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pairs(scores: &[f64], labels: &[bool]) -> Vec<(f64, bool)> {
        scores.iter().copied().zip(labels.iter().copied()).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [true, false, false, true, false];
        let scores: Vec<f64> = labels.iter().map(|l| if *l { 0.9 } else { 0.1 }).collect();
        assert_eq!(ap_from_pairs(pairs(&scores, &labels)).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores_give_positive_rate() {
        let labels = [true, false, false, false, true, false, false, false];
        assert!((ap_from_pairs(pairs(&[0.3; 8], &labels)).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_noise_approaches_positive_rate() {
        let mut rng = RngSeed(11).rng();
        let p = 0.2;
        let data: Vec<(f64, bool)> = (0..100_000).map(|_| (rng.random::<f64>(), rng.random::<f64>() < p)).collect();
        let ap = ap_from_pairs(data).unwrap();
        assert!((ap - p).abs() < 0.02, "{ap}");
    }

    #[test]
    fn inverted_ranking_is_the_minimum() {
        let (neg, pos) = (6usize, 3usize);
        let mut data: Vec<(f64, bool)> = (0..neg).map(|i| (10.0 + i as f64, false)).collect();
        data.extend((0..pos).map(|i| (i as f64, true)));
        let mut expected = 0.0;
        for k in 1..=pos {
            let before = (k - 1) as f64 / (neg + k - 1) as f64;
            let after = k as f64 / (neg + k) as f64;
            expected += (before + after) / 2.0 / pos as f64;
        }
        let ap = ap_from_pairs(data.clone()).unwrap();
        assert!((ap - expected).abs() < 1e-12);
        // any other ordering of the same cells scores at least as much
        let mut rng = RngSeed(3).rng();
        for _ in 0..50 {
            let shuffled: Vec<(f64, bool)> = data.iter().map(|(_, l)| (rng.random::<f64>(), *l)).collect();
            assert!(ap_from_pairs(shuffled).unwrap() >= ap - 1e-12);
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = RngSeed(5).rng();
        let data: Vec<(f64, bool)> = (0..500)
            .map(|_| {
                let l = rng.random::<f64>() < 0.3;
                ((rng.random::<f64>() * 4.0).round() + if l { 0.7 } else { 0.0 }, l)
            })
            .collect();
        let moved: Vec<(f64, bool)> = data.iter().map(|(s, l)| ((2.0 * s).exp() - 3.0, *l)).collect();
        assert_eq!(ap_from_pairs(data).unwrap(), ap_from_pairs(moved).unwrap());
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(matches!(ap_from_pairs(vec![(0.4, false), (0.1, false)]), Err(Error::Undefined(_))));
        assert!(matches!(ap_from_pairs(vec![(f64::NAN, true)]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cell_ap_checks_shapes() {
        let d = DetectionMap::new(1, 2, vec![0.2, 0.8]).unwrap();
        assert_eq!(cell_ap(&[d.clone()], &[vec![false, true]]).unwrap(), 1.0);
        assert!(cell_ap(&[d.clone()], &[vec![true]]).is_err());
        assert!(cell_ap(&[d], &[]).is_err());
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!(Suite::parse("nope").is_err());
    }

    #[test]
    fn report_needs_matching_logs() {
        let config = RunConfig::default();
        assert!(matches!(build_report(&config, &[]), Err(Error::Data(_))));
        let log = SuiteLog {
            suite: Suite::Scaling,
            config_hash: "stale".into(),
            seed: config.seed,
            settings: vec![],
            alignment: vec![],
            scaling: vec![],
            stages: vec![],
        };
        assert!(matches!(build_report(&config, &[log.clone()]), Err(Error::Config(_))));
        let ok = SuiteLog {
            config_hash: config.hash().unwrap(),
            scaling: scaling_rows(&config, 12, &[2, 3]),
            ..log
        };
        let report = build_report(&config, &[ok]).unwrap();
        assert_eq!(report.scaling.len(), 2);
        let curves = report.curves_csv().unwrap();
        let text = String::from_utf8(curves["scaling.csv"].clone()).unwrap();
        assert!(text.starts_with("config_hash,seed,modalities,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn scaling_follows_the_pair_count() {
        let config = RunConfig::default();
        let rows = scaling_rows(&config, 12, &[2, 3, 4, 5]);
        let pair = rows[0].one_to_one_params / 2;
        for r in &rows {
            assert_eq!(r.one_to_one_params, r.modalities * (r.modalities - 1) * pair);
        }
        let steps: Vec<usize> = rows.windows(2).map(|w| w[1].multi_head_params - w[0].multi_head_params).collect();
        assert!(steps.iter().all(|s| *s == steps[0] && *s > 0));
    }
}
