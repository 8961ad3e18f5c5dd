//! Synthetic scenes and per-modality observation models.
//!
//! A scene is a world-frame occupancy grid whose occupied cells carry a
//! unit-norm latent vector, one per rectangular object. A modality observes
//! the scene from an agent pose through a fixed random mixing matrix, a
//! pointwise nonlinearity, range attenuation, sparsity and noise. Different
//! modalities therefore see the same world through incompatible feature
//! spaces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridGeometry, Pose};
use crate::numeric::{gauss, name_id, streams, RngSeed};

const PLACEMENT_RETRIES: usize = 200;
const LAYOUT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub cell_size: f64,
    pub latent_dim: usize,
    /// Inclusive range of objects per scene.
    pub object_count: [usize; 2],
    /// Number of object types; each type has a latent prototype.
    pub object_types: usize,
    /// Weight of the per-object common component shared by every prototype.
    pub objectness: f64,
    /// Standard deviation of per-object latent jitter around its prototype.
    pub latent_jitter: f64,
    /// Bounds on the occupied fraction of a scene with at least one object.
    pub min_occupancy: f64,
    pub max_occupancy: f64,
    /// Agents are placed uniformly within this fraction of the world half-extent.
    pub agent_spread: f64,
    /// Snap agent positions to whole cells and headings to quarter turns.
    #[serde(default)]
    pub lattice_poses: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            cell_size: 1.0,
            latent_dim: 8,
            object_count: [4, 9],
            object_types: 6,
            objectness: 0.6,
            latent_jitter: 0.15,
            min_occupancy: 0.02,
            max_occupancy: 0.15,
            agent_spread: 0.5,
            lattice_poses: true,
        }
    }
}

impl WorldConfig {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::new(self.height, self.width, self.cell_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "world must be at least 8x8 cells, got {}x{}",
                self.height, self.width
            )));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        if self.object_count[0] > self.object_count[1] {
            return Err(Error::Config("object_count range is reversed".into()));
        }
        if self.object_types == 0 {
            return Err(Error::Config("object_types must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_occupancy)
            || !(0.0..=1.0).contains(&self.max_occupancy)
            || self.min_occupancy > self.max_occupancy
        {
            return Err(Error::Config("occupancy bounds must satisfy 0 <= min <= max <= 1".into()));
        }
        if !(self.cell_size > 0.0) || !(0.0..=1.0).contains(&self.agent_spread) {
            return Err(Error::Config("cell_size must be positive and agent_spread in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ground-truth world: occupancy and per-cell latent semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScene {
    pub scene_id: u32,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub occupancy: Vec<bool>,
    pub latent: Vec<f64>,
}

impl LatentScene {
    pub fn occupied_fraction(&self) -> f64 {
        self.occupancy.iter().filter(|o| **o).count() as f64 / self.occupancy.len() as f64
    }

    pub fn latent_at(&self, idx: usize) -> &[f64] {
        &self.latent[idx * self.latent_dim..(idx + 1) * self.latent_dim]
    }
}

/// Per-type latent prototypes: a common "objectness" direction plus a
/// type-specific random direction, normalized.
pub fn object_prototypes(world: &WorldConfig, seed: RngSeed) -> Vec<Vec<f64>> {
    let mut rng = seed.derive(&[streams::PROTOTYPES]).rng();
    let d = world.latent_dim;
    (0..world.object_types)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
            v[0] = 0.0;
            let rest = norm(&v).max(1e-12);
            let side = (1.0 - world.objectness * world.objectness).max(0.0).sqrt();
            for x in v.iter_mut() {
                *x *= side / rest;
            }
            v[0] = world.objectness;
            v
        })
        .collect()
}

/// Places non-overlapping rectangular objects and assigns each a jittered
/// prototype latent.
pub fn gen_scene(
    seed: RngSeed,
    scene_id: u32,
    world: &WorldConfig,
    prototypes: &[Vec<f64>],
) -> Result<LatentScene> {
    world.validate()?;
    let (h, w, d) = (world.height, world.width, world.latent_dim);
    if prototypes.is_empty() || prototypes.iter().any(|p| p.len() != d) {
        return Err(Error::Shape(format!("prototypes must be non-empty with dimension {d}")));
    }
    let mut rng = seed.rng();
    let count = rng.random_range(world.object_count[0]..=world.object_count[1]);
    let max_cells = (world.max_occupancy * (h * w) as f64).floor() as usize;
    let min_cells = (world.min_occupancy * (h * w) as f64).ceil() as usize;

    // whole layouts are redrawn until the occupied fraction is in bounds
    for _ in 0..LAYOUT_ATTEMPTS {
        let mut occupancy = vec![false; h * w];
        let mut latent = vec![0.0; h * w * d];
        let mut used = 0usize;
        for obj in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let (mut oh, mut ow) = (rng.random_range(1..=3usize), rng.random_range(2..=5usize));
                if rng.random_bool(0.5) {
                    std::mem::swap(&mut oh, &mut ow);
                }
                if oh > h || ow > w || used + oh * ow > max_cells {
                    continue;
                }
                let r0 = rng.random_range(0..=h - oh);
                let c0 = rng.random_range(0..=w - ow);
                let free = (r0..r0 + oh).all(|r| (c0..c0 + ow).all(|c| !occupancy[r * w + c]));
                if !free {
                    continue;
                }
                let proto = &prototypes[rng.random_range(0..prototypes.len())];
                let mut z: Vec<f64> = proto
                    .iter()
                    .map(|p| p + world.latent_jitter * gauss(&mut rng))
                    .collect();
                let n = norm(&z).max(1e-12);
                z.iter_mut().for_each(|x| *x /= n);
                for r in r0..r0 + oh {
                    for c in c0..c0 + ow {
                        let idx = r * w + c;
                        occupancy[idx] = true;
                        latent[idx * d..(idx + 1) * d].copy_from_slice(&z);
                    }
                }
                used += oh * ow;
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "scene {scene_id}: could not place object {} of {count} without overlap",
                    obj + 1
                )));
            }
        }
        if count == 0 || used >= min_cells {
            return Ok(LatentScene {
                scene_id,
                height: h,
                width: w,
                latent_dim: d,
                occupancy,
                latent,
            });
        }
    }
    Err(Error::Generation(format!(
        "scene {scene_id}: {count} objects never reached the minimum occupied fraction {}",
        world.min_occupancy
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
        }
    }
}

/// Parameters a modality is generated from. The mixing matrix is drawn from
/// the run seed and the modality name, never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub id: String,
    pub channels: usize,
    pub nonlinearity: Nonlinearity,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub range_falloff: f64,
    pub fov_radius: f64,
    /// Standard deviation of mixing-matrix entries.
    pub mix_gain: f64,
    /// Standard deviation of bias entries.
    pub bias_scale: f64,
}

impl ModalityConfig {
    pub fn defaults() -> Vec<ModalityConfig> {
        vec![
            ModalityConfig {
                id: "mA".into(),
                channels: 16,
                nonlinearity: Nonlinearity::Identity,
                noise_sigma: 0.05,
                dropout_rate: 0.2,
                range_falloff: 0.0,
                fov_radius: 14.0,
                mix_gain: 1.0,
                bias_scale: 0.2,
            },
            ModalityConfig {
                id: "mB".into(),
                channels: 12,
                nonlinearity: Nonlinearity::Tanh,
                noise_sigma: 0.15,
                dropout_rate: 0.0,
                range_falloff: 0.05,
                fov_radius: 12.0,
                mix_gain: 1.0,
                bias_scale: 0.2,
            },
            ModalityConfig {
                id: "mC".into(),
                channels: 16,
                nonlinearity: Nonlinearity::Relu,
                noise_sigma: 0.08,
                dropout_rate: 0.0,
                range_falloff: 0.0,
                fov_radius: 13.0,
                mix_gain: 1.0,
                bias_scale: 0.2,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.len() > 255 {
            return Err(Error::Config("modality id must be 1..=255 bytes".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config(format!("modality {}: channels must be positive", self.id)));
        }
        if !(self.noise_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.dropout_rate)
            || !(self.range_falloff >= 0.0)
            || !(self.fov_radius > 0.0)
        {
            return Err(Error::Config(format!(
                "modality {}: noise >= 0, dropout in [0,1), falloff >= 0 and fov > 0 required",
                self.id
            )));
        }
        Ok(())
    }
}

/// A generated modality: configuration plus its fixed observation transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    #[serde(flatten)]
    pub config: ModalityConfig,
    pub latent_dim: usize,
    /// `channels x latent_dim`, row-major.
    pub mix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModalitySpec {
    /// Draws the mixing matrix and bias from `seed` and the modality id,
    /// redrawing until the matrix has full rank.
    pub fn generate(config: &ModalityConfig, latent_dim: usize, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.derive(&[streams::MODALITY, name_id(&config.id)]).rng();
        let c = config.channels;
        for _ in 0..16 {
            let mix: Vec<f64> = (0..c * latent_dim)
                .map(|_| config.mix_gain * gauss(&mut rng))
                .collect();
            let bias: Vec<f64> = (0..c)
                .map(|_| config.bias_scale * gauss(&mut rng))
                .collect();
            let m = nalgebra::DMatrix::from_row_slice(c, latent_dim, &mix);
            if m.rank(1e-9) == c.min(latent_dim) {
                return Ok(Self {
                    config: config.clone(),
                    latent_dim,
                    mix,
                    bias,
                });
            }
        }
        Err(Error::Generation(format!("modality {}: degenerate mixing matrix", config.id)))
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Noise-free encoding of a latent vector at range attenuation `atten`.
    pub fn encode_clean(&self, z: &[f64], atten: f64, out: &mut [f64]) {
        let d = self.latent_dim;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.mix[k * d..(k + 1) * d];
            let dot: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            *o = self.config.nonlinearity.apply(atten * dot + self.bias[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent_id: u32,
    pub modality: String,
    pub pose: Pose,
}

/// Per-cell lookup of a world-frame grid from an agent-centred grid:
/// `Some(world_cell)` when the agent cell's centre lands inside the world.
pub(crate) fn world_lookup(world: &GridGeometry, local: &GridGeometry, pose: &Pose) -> Vec<Option<usize>> {
    let origin = Pose::origin();
    let mut out = Vec::with_capacity(local.cells());
    for r in 0..local.height {
        for c in 0..local.width {
            let (lx, ly) = local.cell_center(r, c);
            let (wx, wy) = pose.to_world(lx, ly);
            let (ox, oy) = origin.to_local(wx, wy);
            out.push(world.locate(ox, oy).map(|(wr, wc)| wr * world.width + wc));
        }
    }
    out
}

/// Ground-truth occupancy of `scene` in the agent's frame.
pub fn agent_truth(occupancy: &[bool], world: &WorldConfig, pose: &Pose) -> Vec<bool> {
    let geom = world.geometry();
    if *pose == Pose::origin() {
        return occupancy.to_vec();
    }
    world_lookup(&geom, &geom, pose)
        .into_iter()
        .map(|src| src.map(|i| occupancy[i]).unwrap_or(false))
        .collect()
}

/// Encodes the scene as seen by `agent` through `spec`.
///
/// Cells outside the field of view are zero. Occupied cells inside it carry
/// `nonlinearity(atten * mix z + bias)` plus noise, except for a random
/// `dropout_rate` fraction which is zeroed; empty cells carry
/// `nonlinearity(bias)` plus noise. Values are rounded to `f32` so the
/// on-disk form is lossless.
pub fn observe(
    scene: &LatentScene,
    spec: &ModalitySpec,
    agent: &AgentConfig,
    world: &WorldConfig,
    seed: RngSeed,
) -> Result<FeatureMap> {
    if scene.height != world.height || scene.width != world.width || scene.latent_dim != spec.latent_dim {
        return Err(Error::Shape(format!(
            "scene {}x{}x{} does not match world {}x{}x{}",
            scene.height, scene.width, scene.latent_dim, world.height, world.width, spec.latent_dim
        )));
    }
    if agent.modality != spec.config.id {
        return Err(Error::Config(format!(
            "agent {} has modality {}, observed with {}",
            agent.agent_id, agent.modality, spec.config.id
        )));
    }
    let geom = world.geometry();
    let lookup = world_lookup(&geom, &geom, &agent.pose);
    let cfg = &spec.config;
    let c = cfg.channels;
    let mut rng = seed.rng();
    let mut out = FeatureMap::zeros(geom.height, geom.width, c)?;
    let zero = vec![0.0; spec.latent_dim];
    let mut clean = vec![0.0; c];

    for r in 0..geom.height {
        for col in 0..geom.width {
            let idx = r * geom.width + col;
            let (lx, ly) = geom.cell_center(r, col);
            let dist = (lx * lx + ly * ly).sqrt();
            if dist > cfg.fov_radius {
                continue;
            }
            let occupied = lookup[idx].map(|i| scene.occupancy[i]).unwrap_or(false);
            if occupied && cfg.dropout_rate > 0.0 && rng.random::<f64>() < cfg.dropout_rate {
                continue;
            }
            let z = match lookup[idx] {
                Some(i) if occupied => scene.latent_at(i),
                _ => &zero[..],
            };
            let atten = (-cfg.range_falloff * dist).exp();
            spec.encode_clean(z, atten, &mut clean);
            let cell = out.cell_mut(idx);
            for (o, v) in cell.iter_mut().zip(&clean) {
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * gauss(&mut rng)
                } else {
                    0.0
                };
                *o = ((v + noise) as f32) as f64;
            }
        }
    }
    Ok(out)
}

/// Mask of cells within `radius` of the grid centre.
pub fn fov_mask(geom: &GridGeometry, radius: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(geom.cells());
    for r in 0..geom.height {
        for c in 0..geom.width {
            let (x, y) = geom.cell_center(r, c);
            out.push((x * x + y * y).sqrt() <= radius);
        }
    }
    out
}

/// Uniform random pose inside the agent placement square.
pub fn random_pose(world: &WorldConfig, rng: &mut impl Rng) -> Pose {
    let (hx, hy) = world.geometry().half_extent();
    let sx = hx * world.agent_spread;
    let sy = hy * world.agent_spread;
    let x = if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 };
    let y = if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 };
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    if world.lattice_poses {
        let step = world.cell_size;
        let quarter = std::f64::consts::FRAC_PI_2;
        return Pose::new((x / step).round() * step, (y / step).round() * step, (heading / quarter).round() * quarter);
    }
    Pose::new(x, y, heading)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    fn protos() -> Vec<Vec<f64>> {
        object_prototypes(&world(), RngSeed(1))
    }

    fn noiseless(id: &str, nl: Nonlinearity) -> ModalityConfig {
        ModalityConfig {
            id: id.into(),
            channels: 6,
            nonlinearity: nl,
            noise_sigma: 0.0,
            dropout_rate: 0.0,
            range_falloff: 0.0,
            fov_radius: 1e6,
            mix_gain: 1.0,
            bias_scale: 0.2,
        }
    }

    #[test]
    fn prototypes_are_unit_norm() {
        for p in protos() {
            assert!((norm(&p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_world() {
        let mut w = world();
        w.object_count = [0, 0];
        let s = gen_scene(RngSeed(5), 0, &w, &protos()).unwrap();
        assert!(s.occupancy.iter().all(|o| !o));
        assert!(s.latent.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = gen_scene(RngSeed(9), 3, &world(), &protos()).unwrap();
        let b = gen_scene(RngSeed(9), 3, &world(), &protos()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn five_objects_occupancy_within_bounds() {
        let mut w = world();
        w.object_count = [5, 5];
        for s in 0..20 {
            let scene = gen_scene(RngSeed(s), s as u32, &w, &protos()).unwrap();
            let f = scene.occupied_fraction();
            assert!((0.02..=0.15).contains(&f), "seed {s}: fraction {f}");
        }
    }

    #[test]
    fn occupied_latents_are_unit_norm() {
        let s = gen_scene(RngSeed(2), 0, &world(), &protos()).unwrap();
        for i in 0..s.occupancy.len() {
            let n = norm(s.latent_at(i));
            if s.occupancy[i] {
                assert!((n - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(n, 0.0);
            }
        }
    }

    #[test]
    fn overfull_world_fails() {
        let mut w = world();
        w.height = 8;
        w.width = 8;
        w.max_occupancy = 1.0;
        w.object_count = [60, 60];
        assert!(matches!(
            gen_scene(RngSeed(1), 0, &w, &protos()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn noiseless_identity_observation_is_exact() {
        let w = world();
        let spec = ModalitySpec::generate(&noiseless("m", Nonlinearity::Identity), 8, RngSeed(4)).unwrap();
        let scene = gen_scene(RngSeed(7), 0, &w, &protos()).unwrap();
        let agent = AgentConfig {
            agent_id: 0,
            modality: "m".into(),
            pose: Pose::origin(),
        };
        let f = observe(&scene, &spec, &agent, &w, RngSeed(0)).unwrap();
        for idx in 0..scene.occupancy.len() {
            for k in 0..6 {
                let row = &spec.mix[k * 8..(k + 1) * 8];
                let expect: f64 =
                    row.iter().zip(scene.latent_at(idx)).map(|(a, b)| a * b).sum::<f64>() + spec.bias[k];
                assert_eq!(f.cell(idx)[k], (expect as f32) as f64);
            }
        }
    }

    #[test]
    fn empty_scene_zero_bias_gives_zero_features() {
        let mut w = world();
        w.object_count = [0, 0];
        let scene = gen_scene(RngSeed(1), 0, &w, &protos()).unwrap();
        for nl in [Nonlinearity::Identity, Nonlinearity::Relu] {
            let mut cfg = noiseless("m", nl);
            cfg.bias_scale = 0.0;
            let spec = ModalitySpec::generate(&cfg, 8, RngSeed(2)).unwrap();
            let agent = AgentConfig {
                agent_id: 0,
                modality: "m".into(),
                pose: Pose::new(2.0, -1.0, 0.4),
            };
            let f = observe(&scene, &spec, &agent, &w, RngSeed(3)).unwrap();
            assert!(f.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn observe_is_deterministic_and_respects_fov() {
        let w = world();
        let cfg = &ModalityConfig::defaults()[1];
        let spec = ModalitySpec::generate(cfg, 8, RngSeed(2)).unwrap();
        let scene = gen_scene(RngSeed(3), 0, &w, &protos()).unwrap();
        let agent = AgentConfig {
            agent_id: 1,
            modality: cfg.id.clone(),
            pose: Pose::new(3.0, 1.0, -0.8),
        };
        let a = observe(&scene, &spec, &agent, &w, RngSeed(9)).unwrap();
        let b = observe(&scene, &spec, &agent, &w, RngSeed(9)).unwrap();
        assert_eq!(a, b);
        let mask = fov_mask(&w.geometry(), cfg.fov_radius);
        for (idx, inside) in mask.iter().enumerate() {
            if !inside {
                assert!(a.cell(idx).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn modality_mix_depends_on_name() {
        let mut a = noiseless("a", Nonlinearity::Identity);
        let sa = ModalitySpec::generate(&a, 8, RngSeed(1)).unwrap();
        a.id = "b".into();
        let sb = ModalitySpec::generate(&a, 8, RngSeed(1)).unwrap();
        assert_ne!(sa.mix, sb.mix);
    }
}
