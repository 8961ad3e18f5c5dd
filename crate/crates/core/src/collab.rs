//! Multi-agent inference: rigid warps between agent frames, pose noise,
//! message exchange and fusion, and the comparison baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codespace::{Codespace, DetectionHead};
use crate::error::{Error, Result};
use crate::grid::{DetectionMap, FeatureMap, GridGeometry, Pose};
use crate::numeric::{gauss, streams, RngSeed};
use crate::translator::{prepare_input, translate_hard, DenseTranslator, Translator};
use crate::wire::{pack, unpack, CodeMessage, LinkRecord, MessageKind, MessageMeta, FIXED_HEADER_BYTES};
use crate::worldgen::{fov_mask, AgentConfig};

/// Source cell for every cell of the destination grid when a grid observed
/// at `from` is resampled into the frame at `to` (nearest neighbour).
pub fn warp_indices(geom: &GridGeometry, from: &Pose, to: &Pose) -> Vec<Option<usize>> {
    if from == to {
        return (0..geom.cells()).map(Some).collect();
    }
    let mut out = Vec::with_capacity(geom.cells());
    for r in 0..geom.height {
        for c in 0..geom.width {
            let (lx, ly) = geom.cell_center(r, c);
            let (wx, wy) = to.to_world(lx, ly);
            let (sx, sy) = from.to_local(wx, wy);
            out.push(geom.locate(sx, sy).map(|(sr, sc)| sr * geom.width + sc));
        }
    }
    out
}

/// Resamples `f`, expressed in the frame at `from`, into the frame at `to`.
/// Destination cells whose source falls outside the grid are set to `fill`.
pub fn warp(f: &FeatureMap, geom: &GridGeometry, from: &Pose, to: &Pose, fill: f64) -> Result<FeatureMap> {
    check_geometry(f, geom)?;
    if from == to {
        return Ok(f.clone());
    }
    let (out, _) = warp_masked(f, geom, from, to, fill)?;
    Ok(out)
}

/// [`warp`] that also reports which destination cells received data.
pub fn warp_masked(
    f: &FeatureMap,
    geom: &GridGeometry,
    from: &Pose,
    to: &Pose,
    fill: f64,
) -> Result<(FeatureMap, Vec<bool>)> {
    check_geometry(f, geom)?;
    let map = warp_indices(geom, from, to);
    let c = f.channels();
    let mut data = vec![fill; f.data().len()];
    let mut valid = vec![false; map.len()];
    for (dst, src) in map.iter().enumerate() {
        if let Some(s) = src {
            data[dst * c..(dst + 1) * c].copy_from_slice(f.cell(*s));
            valid[dst] = true;
        }
    }
    Ok((FeatureMap::from_vec(f.height(), f.width(), c, data)?, valid))
}

fn check_geometry(f: &FeatureMap, geom: &GridGeometry) -> Result<()> {
    if f.height() != geom.height || f.width() != geom.width {
        return Err(Error::Shape(format!(
            "map {}x{} does not match grid {}x{}",
            f.height(),
            f.width(),
            geom.height,
            geom.width
        )));
    }
    Ok(())
}

/// Adds independent Gaussian noise to position and heading.
pub fn inject_pose_noise(pose: &Pose, sigma_xy: f64, sigma_heading: f64, seed: RngSeed) -> Pose {
    if sigma_xy == 0.0 && sigma_heading == 0.0 {
        return *pose;
    }
    let mut rng = seed.rng();
    let nx: f64 = gauss(&mut rng);
    let ny: f64 = gauss(&mut rng);
    let nh: f64 = gauss(&mut rng);
    Pose::new(
        pose.x + sigma_xy * nx,
        pose.y + sigma_xy * ny,
        pose.heading + sigma_heading * nh,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Codealign,
    NoCollab,
    NoAlign,
    LateFusion,
    D2d,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::NoCollab, Mode::NoAlign, Mode::LateFusion, Mode::Codealign, Mode::D2d];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Codealign => "codealign",
            Mode::NoCollab => "no_collab",
            Mode::NoAlign => "no_align",
            Mode::LateFusion => "late_fusion",
            Mode::D2d => "d2d",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s}")))
    }
}

/// Everything an inference run needs, keyed by modality and code-space owner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    /// Code spaces by owner.
    pub codespaces: BTreeMap<String, Codespace>,
    /// Owner of each modality's code space.
    pub owner_of: BTreeMap<String, String>,
    pub translators: Vec<Translator>,
    pub dense: Vec<DenseTranslator>,
    /// Sensing radius (meters) of each modality. Received cells beyond the
    /// sender's radius carry no observation and are not fused.
    #[serde(default)]
    pub sensing_range: BTreeMap<String, f64>,
}

impl Artifacts {
    pub fn owner(&self, modality: &str) -> Result<&str> {
        self.owner_of
            .get(modality)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("no code space assigned to modality {modality}")))
    }

    pub fn space(&self, owner: &str) -> Result<&Codespace> {
        self.codespaces
            .get(owner)
            .ok_or_else(|| Error::Config(format!("no code space artifacts for {owner}")))
    }

    pub fn space_of(&self, modality: &str) -> Result<&Codespace> {
        self.space(self.owner(modality)?)
    }

    pub fn translator(&self, source: &str, target_owner: &str) -> Result<&Translator> {
        self.translators
            .iter()
            .find(|t| t.source() == source && t.targets().iter().any(|o| o == target_owner))
            .ok_or_else(|| Error::Config(format!("no translator from {source} into {target_owner}")))
    }

    pub fn dense_translator(&self, source: &str, target_owner: &str) -> Result<&DenseTranslator> {
        self.dense
            .iter()
            .find(|t| t.source == source && t.target_owner == target_owner)
            .ok_or_else(|| Error::Config(format!("no dense translator from {source} into {target_owner}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollabOptions {
    pub mode: Mode,
    /// Standard deviation of transmitted-position noise, meters.
    pub pose_noise_xy: f64,
    /// Standard deviation of transmitted-heading noise, radians.
    pub pose_noise_heading: f64,
    /// Use the ego's adapted features without quantizing them.
    pub ego_dense: bool,
    /// Score threshold for late-fusion detections.
    pub late_threshold: f64,
    pub seed: RngSeed,
}

impl CollabOptions {
    pub fn new(mode: Mode, seed: RngSeed) -> Self {
        Self {
            mode,
            pose_noise_xy: 0.0,
            pose_noise_heading: 0.0,
            ego_dense: false,
            late_threshold: 0.5,
            seed,
        }
    }
}

/// One agent's view of a frame.
#[derive(Debug, Clone, Copy)]
pub struct AgentInput<'a> {
    pub agent: &'a AgentConfig,
    pub features: &'a FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub scene_id: u32,
    pub ego: u32,
    pub mode: Mode,
    pub detection: DetectionMap,
    /// One record per neighbor, ascending sender id; empty without collaboration.
    pub links: Vec<LinkRecord>,
}

/// Pose a neighbor transmits: its true pose plus noise seeded by scene and
/// sender, so every mode sees the same corruption.
pub fn transmitted_pose(agent: &AgentConfig, scene_id: u32, opts: &CollabOptions) -> Pose {
    inject_pose_noise(
        &agent.pose,
        opts.pose_noise_xy,
        opts.pose_noise_heading,
        opts.seed.derive(&[streams::POSE_NOISE, scene_id as u64, agent.agent_id as u64]),
    )
}

/// Warps a received map into the ego frame. Cells are valid when they come
/// from inside the grid and, if `range` is known, inside the sender's
/// sensing radius.
fn warp_received(
    f: &FeatureMap,
    geom: &GridGeometry,
    from: &Pose,
    to: &Pose,
    range: Option<f64>,
) -> Result<(FeatureMap, Vec<bool>)> {
    let (warped, mut valid) = warp_masked(f, geom, from, to, 0.0)?;
    if let Some(r) = range {
        let seen = fov_mask(geom, r);
        for (v, src) in valid.iter_mut().zip(warp_indices(geom, from, to)) {
            *v = *v && src.is_some_and(|s| seen[s]);
        }
    }
    Ok((warped, valid))
}

/// Element-wise max of `incoming` into `fused` on valid cells. A cell no
/// agent has observed yet holds only the ego's placeholder and takes the
/// incoming value outright.
fn max_fuse(fused: &mut FeatureMap, observed: &mut [bool], incoming: &FeatureMap, valid: &[bool]) {
    let c = fused.channels();
    for (idx, ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let src = &incoming.data()[idx * c..(idx + 1) * c];
        let dst = fused.cell_mut(idx);
        if observed[idx] {
            for (f, v) in dst.iter_mut().zip(src) {
                if *v > *f {
                    *f = *v;
                }
            }
        } else {
            dst.copy_from_slice(src);
            observed[idx] = true;
        }
    }
}

/// Cells inside the ego's own sensing range; all cells when it is unknown.
fn ego_observed(artifacts: &Artifacts, modality: &str, geometry: &GridGeometry) -> Vec<bool> {
    match artifacts.sensing_range.get(modality) {
        Some(r) => fov_mask(geometry, *r),
        None => vec![true; geometry.cells()],
    }
}

/// Zero-pads or truncates every cell to `channels`.
fn fit_channels(f: &FeatureMap, channels: usize) -> Result<FeatureMap> {
    if f.channels() == channels {
        return Ok(f.clone());
    }
    let mut out = vec![0.0; f.cells() * channels];
    let keep = channels.min(f.channels());
    for idx in 0..f.cells() {
        out[idx * channels..idx * channels + keep].copy_from_slice(&f.cell(idx)[..keep]);
    }
    FeatureMap::from_vec(f.height(), f.width(), channels, out)
}

/// Number of 4-connected clusters of `true` cells.
pub fn count_clusters(mask: &[bool], height: usize, width: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
    }
    count
}

fn ego_features(space: &Codespace, modality: &str, f: &FeatureMap, dense: bool) -> Result<FeatureMap> {
    if dense {
        space.adapter(modality)?.apply_map(f)
    } else {
        space.decode(&space.quantize(modality, f)?)
    }
}

fn detect(head: &DetectionHead, f: &FeatureMap) -> Result<DetectionMap> {
    head.detect(f)
}

/// Collaborative detection for one ego agent. Neighbors are processed in
/// ascending agent id; every feature message goes through the wire codec.
pub fn run_frame(
    scene_id: u32,
    ego: AgentInput,
    neighbors: &[AgentInput],
    artifacts: &Artifacts,
    geometry: &GridGeometry,
    opts: &CollabOptions,
) -> Result<FrameResult> {
    let ego_owner = artifacts.owner(&ego.agent.modality)?.to_string();
    let ego_space = artifacts.space(&ego_owner)?;
    let mut order: Vec<&AgentInput> = neighbors.iter().collect();
    order.sort_by_key(|n| n.agent.agent_id);
    if opts.mode == Mode::NoCollab {
        order.clear();
    }
    let mut links = Vec::with_capacity(order.len());
    let cz = ego_space.codebook.dim();
    let mut observed = ego_observed(artifacts, &ego.agent.modality, geometry);

    let detection = match opts.mode {
        Mode::LateFusion => {
            let own = detect(&ego_space.head, &ego_features(ego_space, &ego.agent.modality, ego.features, opts.ego_dense)?)?;
            let mut scores = own.scores().to_vec();
            for n in order {
                let space = artifacts.space_of(&n.agent.modality)?;
                let dets = space.detect(&n.agent.modality, n.features)?;
                let binary: Vec<bool> = dets.scores().iter().map(|s| *s >= opts.late_threshold).collect();
                let count = count_clusters(&binary, dets.height(), dets.width());
                links.push(LinkRecord {
                    sender: n.agent.agent_id,
                    receiver: ego.agent.agent_id,
                    kind: MessageKind::Detections { count },
                    payload_bytes: 12 * count,
                    header_bytes: 0,
                });
                let map = FeatureMap::from_vec(
                    dets.height(),
                    dets.width(),
                    1,
                    binary.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
                )?;
                let pose = transmitted_pose(n.agent, scene_id, opts);
                let range = artifacts.sensing_range.get(&n.agent.modality).copied();
                let (warped, valid) = warp_received(&map, geometry, &pose, &ego.agent.pose, range)?;
                let mut fused = FeatureMap::from_vec(own.height(), own.width(), 1, scores)?;
                max_fuse(&mut fused, &mut observed, &warped, &valid);
                scores = fused.into_data();
            }
            DetectionMap::new(own.height(), own.width(), scores)?
        }
        Mode::D2d => {
            let mut fused = ego_features(ego_space, &ego.agent.modality, ego.features, opts.ego_dense)?;
            for n in order {
                let n_owner = artifacts.owner(&n.agent.modality)?;
                let dense = if n_owner == ego_owner {
                    ego_space.adapter(&n.agent.modality)?.apply_map(n.features)?
                } else {
                    artifacts.dense_translator(&n.agent.modality, &ego_owner)?.apply(n.features)?
                };
                links.push(LinkRecord {
                    sender: n.agent.agent_id,
                    receiver: ego.agent.agent_id,
                    kind: MessageKind::Dense {
                        height: dense.height(),
                        width: dense.width(),
                        channels: dense.channels(),
                    },
                    payload_bytes: dense.cells() * dense.channels() * 4,
                    header_bytes: FIXED_HEADER_BYTES + ego_owner.len(),
                });
                let pose = transmitted_pose(n.agent, scene_id, opts);
                let range = artifacts.sensing_range.get(&n.agent.modality).copied();
                let (warped, valid) = warp_received(&dense, geometry, &pose, &ego.agent.pose, range)?;
                max_fuse(&mut fused, &mut observed, &warped, &valid);
            }
            detect(&ego_space.head, &fused)?
        }
        Mode::Codealign | Mode::NoAlign | Mode::NoCollab => {
            let mut fused = ego_features(ego_space, &ego.agent.modality, ego.features, opts.ego_dense)?;
            for n in order {
                let m = &n.agent.modality;
                let n_owner = artifacts.owner(m)?;
                let n_space = artifacts.space(n_owner)?;
                let map = if opts.mode == Mode::NoAlign || n_owner == ego_owner {
                    n_space.quantize(m, n.features)?
                } else {
                    let t = artifacts.translator(m, &ego_owner)?;
                    let input = prepare_input(n.features, m, t.input_source(), Some(n_space))?;
                    translate_hard(&input, t, &ego_owner)?
                };
                let pose = transmitted_pose(n.agent, scene_id, opts);
                let msg = pack(
                    &map,
                    &MessageMeta {
                        sender_id: n.agent.agent_id,
                        scene_id,
                        pose,
                    },
                )?;
                let bytes = msg.to_bytes();
                let received = CodeMessage::from_bytes(&bytes)?;
                links.push(LinkRecord {
                    sender: n.agent.agent_id,
                    receiver: ego.agent.agent_id,
                    kind: MessageKind::CodeMap {
                        height: map.height(),
                        width: map.width(),
                        codebook_size: map.codebook_size(),
                        dense_channels: n.features.channels(),
                    },
                    payload_bytes: received.payload.len(),
                    header_bytes: received.header_len(),
                });
                let (codes, meta) = unpack(&received)?;
                let decoded = if codes.owner() == ego_owner {
                    ego_space.decode(&codes)?
                } else {
                    // no alignment: the sender's own code embeddings, reshaped to fit
                    fit_channels(&artifacts.space(codes.owner())?.decode(&codes)?, cz)?
                };
                let range = artifacts.sensing_range.get(m).copied();
                let (warped, valid) = warp_received(&decoded, geometry, &meta.pose, &ego.agent.pose, range)?;
                max_fuse(&mut fused, &mut observed, &warped, &valid);
            }
            detect(&ego_space.head, &fused)?
        }
    };
    let detection = detection.masked(&observed)?;
    Ok(FrameResult {
        scene_id,
        ego: ego.agent.agent_id,
        mode: opts.mode,
        detection,
        links,
    })
}
