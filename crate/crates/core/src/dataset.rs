//! Dataset assembly, on-disk layout and access-controlled views.
//!
//! Training scenes are assigned to maximal sets of mutually compatible
//! modalities, so any two modalities declared isolated never share a
//! training scene. The evaluation split always contains every modality.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! obs/scene_00012_agent_1.bin   16-byte header (H, W, C, 0 as u32 LE) + H*W*C f32 LE
//! truth/scene_00012.bin         16-byte header (H, W, 1, 1 as u32 LE) + H*W bytes (0/1)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::numeric::{streams, RngSeed};
use crate::worldgen::{
    agent_truth, gen_scene, object_prototypes, observe, random_pose, AgentConfig, ModalityConfig,
    ModalitySpec, WorldConfig,
};

const OBS_HEADER: usize = 16;
const TRUTH_TAG: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub modalities: Vec<ModalityConfig>,
    /// Modality pairs that must never co-occur in a training scene.
    pub isolation_pairs: Vec<[String; 2]>,
    /// Non-isolated modalities sharing one code space. Modalities outside
    /// every group own a code space named after themselves.
    pub groups: Vec<GroupConfig>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            modalities: ModalityConfig::defaults(),
            isolation_pairs: vec![["mA".into(), "mB".into()]],
            groups: vec![GroupConfig {
                name: "gAC".into(),
                members: vec!["mA".into(), "mC".into()],
            }],
            train_scenes: 500,
            eval_scenes: 100,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let mut ids = BTreeSet::new();
        for m in &self.modalities {
            m.validate()?;
            if !ids.insert(m.id.as_str()) {
                return Err(Error::Config(format!("duplicate modality {}", m.id)));
            }
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let known = |m: &str| -> Result<()> {
            if ids.contains(m) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown modality {m}")))
            }
        };
        for [a, b] in &self.isolation_pairs {
            known(a)?;
            known(b)?;
            if a == b {
                return Err(Error::Constraint(format!(
                    "modality {a} cannot be isolated from itself"
                )));
            }
        }
        let mut grouped = BTreeSet::new();
        for g in &self.groups {
            if g.members.is_empty() {
                return Err(Error::Config(format!("group {} has no members", g.name)));
            }
            if ids.contains(g.name.as_str()) && !(g.members.len() == 1 && g.members[0] == g.name) {
                return Err(Error::Config(format!("group name {} collides with a modality", g.name)));
            }
            for m in &g.members {
                known(m)?;
                if !grouped.insert(m.as_str()) {
                    return Err(Error::Config(format!("modality {m} belongs to several groups")));
                }
            }
            for (i, a) in g.members.iter().enumerate() {
                for b in &g.members[i + 1..] {
                    if self.is_isolated(a, b) {
                        return Err(Error::Constraint(format!(
                            "group {} requires {a} and {b} to co-occur, but ({a}, {b}) is an isolation pair",
                            g.name
                        )));
                    }
                }
            }
        }
        if self.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn is_isolated(&self, a: &str, b: &str) -> bool {
        self.isolation_pairs
            .iter()
            .any(|[x, y]| (x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: u32,
    pub agents: Vec<AgentConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: RngSeed,
    pub world: WorldConfig,
    pub modalities: Vec<ModalitySpec>,
    pub isolation_pairs: Vec<[String; 2]>,
    pub groups: Vec<GroupConfig>,
    pub train: Vec<SceneEntry>,
    pub eval: Vec<SceneEntry>,
    /// Training scene ids per modality.
    pub coverage: BTreeMap<String, BTreeSet<u32>>,
}

impl DatasetManifest {
    pub fn modality(&self, id: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown modality {id}")))
    }

    pub fn scenes(&self, split: Split) -> &[SceneEntry] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn agent(&self, scene_id: u32, agent_id: u32) -> Result<&AgentConfig> {
        self.train
            .iter()
            .chain(&self.eval)
            .find(|s| s.scene_id == scene_id)
            .and_then(|s| s.agents.iter().find(|a| a.agent_id == agent_id))
            .ok_or_else(|| Error::Data(format!("no agent {agent_id} in scene {scene_id}")))
    }

    /// Code-space owner of a modality: its group name, or its own id.
    pub fn owner_of(&self, modality: &str) -> String {
        owner_of(&self.groups, modality)
    }

    /// Members of the code space named `owner`.
    pub fn owner_members(&self, owner: &str) -> Vec<String> {
        if let Some(g) = self.groups.iter().find(|g| g.name == owner) {
            return g.members.clone();
        }
        if self.modalities.iter().any(|m| m.id() == owner) {
            return vec![owner.to_string()];
        }
        Vec::new()
    }

    /// All code-space owners in a stable order.
    pub fn owners(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for m in &self.modalities {
            let o = self.owner_of(m.id());
            if !out.contains(&o) {
                out.push(o);
            }
        }
        out
    }

    pub fn is_isolated(&self, a: &str, b: &str) -> bool {
        self.isolation_pairs
            .iter()
            .any(|[x, y]| (x == a && y == b) || (x == b && y == a))
    }

    /// Exhaustive check that isolated modalities never share a training scene
    /// and that coverage agrees with the scene list.
    pub fn verify_isolation(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for s in &self.train {
            if s.agents.is_empty() {
                return Err(Error::Constraint(format!("scene {} has no agents", s.scene_id)));
            }
            for a in &s.agents {
                seen.entry(a.modality.as_str()).or_default().insert(s.scene_id);
            }
        }
        for (m, set) in &seen {
            if self.coverage.get(*m) != Some(set) {
                return Err(Error::Constraint(format!("coverage of {m} disagrees with scene list")));
            }
        }
        for [a, b] in &self.isolation_pairs {
            let empty = BTreeSet::new();
            let sa = seen.get(a.as_str()).unwrap_or(&empty);
            let sb = seen.get(b.as_str()).unwrap_or(&empty);
            if let Some(s) = sa.intersection(sb).next() {
                return Err(Error::Constraint(format!(
                    "isolated pair ({a}, {b}) co-occurs in training scene {s}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn owner_of(groups: &[GroupConfig], modality: &str) -> String {
    groups
        .iter()
        .find(|g| g.members.iter().any(|m| m == modality))
        .map(|g| g.name.clone())
        .unwrap_or_else(|| modality.to_string())
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub truths: BTreeMap<u32, Vec<bool>>,
    pub observations: BTreeMap<(u32, u32), FeatureMap>,
}

/// Maximal sets of pairwise compatible modalities, in a stable order.
fn compatible_sets(config: &DatasetConfig) -> Vec<Vec<String>> {
    let ids: Vec<&str> = config.modalities.iter().map(|m| m.id.as_str()).collect();
    let n = ids.len();
    let ok = |mask: u64| {
        (0..n).all(|i| {
            (i + 1..n).all(|j| {
                mask & (1 << i) == 0 || mask & (1 << j) == 0 || !config.is_isolated(ids[i], ids[j])
            })
        })
    };
    let mut valid: Vec<u64> = (1..(1u64 << n)).filter(|m| ok(*m)).collect();
    valid.sort_unstable();
    let maximal: Vec<u64> = valid
        .iter()
        .copied()
        .filter(|m| !valid.iter().any(|o| o != m && o & m == *m))
        .collect();
    maximal
        .into_iter()
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| ids[i].to_string()).collect())
        .collect()
}

pub fn make_dataset(config: &DatasetConfig, seed: RngSeed) -> Result<Dataset> {
    config.validate()?;
    if config.modalities.len() > 20 {
        return Err(Error::Config("at most 20 modalities are supported".into()));
    }
    let world = &config.world;
    let specs = config
        .modalities
        .iter()
        .map(|m| ModalitySpec::generate(m, world.latent_dim, seed))
        .collect::<Result<Vec<_>>>()?;
    let prototypes = object_prototypes(world, seed);
    let sets = compatible_sets(config);

    let make_entry = |scene_id: u32, members: &[String]| {
        let mut rng = seed.derive(&[streams::POSES, scene_id as u64]).rng();
        let agents = members
            .iter()
            .enumerate()
            .map(|(k, m)| AgentConfig {
                agent_id: k as u32,
                modality: m.clone(),
                pose: random_pose(world, &mut rng),
            })
            .collect();
        SceneEntry { scene_id, agents }
    };

    let train: Vec<SceneEntry> = (0..config.train_scenes)
        .map(|i| make_entry(i as u32, &sets[i % sets.len()]))
        .collect();
    let all: Vec<String> = config.modalities.iter().map(|m| m.id.clone()).collect();
    let eval: Vec<SceneEntry> = (0..config.eval_scenes)
        .map(|i| make_entry((config.train_scenes + i) as u32, &all))
        .collect();

    let mut coverage: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for s in &train {
        for a in &s.agents {
            coverage.entry(a.modality.clone()).or_default().insert(s.scene_id);
        }
    }

    let generated: Vec<(u32, Vec<bool>, Vec<((u32, u32), FeatureMap)>)> = train
        .par_iter()
        .chain(eval.par_iter())
        .map(|entry| {
            let scene = gen_scene(
                seed.derive(&[streams::SCENE, entry.scene_id as u64]),
                entry.scene_id,
                world,
                &prototypes,
            )?;
            let obs = entry
                .agents
                .iter()
                .map(|a| {
                    let spec = specs.iter().find(|s| s.id() == a.modality).expect("validated");
                    let f = observe(
                        &scene,
                        spec,
                        a,
                        world,
                        seed.derive(&[streams::OBSERVE, entry.scene_id as u64, a.agent_id as u64]),
                    )?;
                    Ok(((entry.scene_id, a.agent_id), f))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((entry.scene_id, scene.occupancy, obs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut truths = BTreeMap::new();
    let mut observations = BTreeMap::new();
    for (id, occ, obs) in generated {
        truths.insert(id, occ);
        observations.extend(obs);
    }

    let manifest = DatasetManifest {
        config_hash: crate::config::hash_json(&(config, seed))?,
        seed,
        world: world.clone(),
        modalities: specs,
        isolation_pairs: config.isolation_pairs.clone(),
        groups: config.groups.clone(),
        train,
        eval,
        coverage,
    };
    manifest.verify_isolation()?;
    Ok(Dataset {
        manifest,
        truths,
        observations,
    })
}

/// Read access to observations and ground truth, in memory or on disk.
pub trait ObservationSource: Sync {
    fn manifest(&self) -> &DatasetManifest;
    fn observation(&self, scene_id: u32, agent_id: u32) -> Result<FeatureMap>;
    /// World-frame occupancy of a scene.
    fn truth(&self, scene_id: u32) -> Result<Vec<bool>>;
}

impl ObservationSource for Dataset {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn observation(&self, scene_id: u32, agent_id: u32) -> Result<FeatureMap> {
        self.observations
            .get(&(scene_id, agent_id))
            .cloned()
            .ok_or_else(|| Error::Data(format!("no observation for scene {scene_id} agent {agent_id}")))
    }

    fn truth(&self, scene_id: u32) -> Result<Vec<bool>> {
        self.truths
            .get(&scene_id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no ground truth for scene {scene_id}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub path: String,
    pub scene_id: u32,
    pub agent_id: u32,
    pub modality: String,
}

/// Dataset directory reader that records every observation file it opens.
pub struct DatasetStore {
    root: PathBuf,
    manifest: DatasetManifest,
    log: Mutex<Vec<AccessRecord>>,
}

impl DatasetStore {
    pub fn write(root: impl AsRef<Path>, dataset: &Dataset) -> Result<DatasetStore> {
        let root = root.as_ref();
        for dir in [root.join("obs"), root.join("truth")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let manifest_path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(&dataset.manifest)?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        for (&(scene, agent), f) in &dataset.observations {
            let p = root.join(obs_file(scene, agent));
            fs::write(&p, encode_feature_map(f)).map_err(|e| Error::io(&p, e))?;
        }
        for (&scene, occ) in &dataset.truths {
            let p = root.join(truth_file(scene));
            let w = &dataset.manifest.world;
            fs::write(&p, encode_truth(w.height, w.width, occ)).map_err(|e| Error::io(&p, e))?;
        }
        Self::open(root)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<DatasetStore> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.verify_isolation()?;
        Ok(DatasetStore {
            root,
            manifest,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn clear_access_log(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}

impl ObservationSource for DatasetStore {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn observation(&self, scene_id: u32, agent_id: u32) -> Result<FeatureMap> {
        let agent = self.manifest.agent(scene_id, agent_id)?;
        let rel = obs_file(scene_id, agent_id);
        let path = self.root.join(&rel);
        self.log.lock().expect("access log poisoned").push(AccessRecord {
            path: rel,
            scene_id,
            agent_id,
            modality: agent.modality.clone(),
        });
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_feature_map(&bytes)
    }

    fn truth(&self, scene_id: u32) -> Result<Vec<bool>> {
        let path = self.root.join(truth_file(scene_id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let w = &self.manifest.world;
        decode_truth(&bytes, w.height, w.width)
    }
}

pub fn obs_file(scene_id: u32, agent_id: u32) -> String {
    format!("obs/scene_{scene_id:05}_agent_{agent_id}.bin")
}

pub fn truth_file(scene_id: u32) -> String {
    format!("truth/scene_{scene_id:05}.bin")
}

/// Observation file body: `(H, W, C, 0)` as little-endian u32, then the
/// features as row-major little-endian f32.
pub fn encode_feature_map(f: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(OBS_HEADER + f.data().len() * 4);
    for v in [f.height() as u32, f.width() as u32, f.channels() as u32, 0u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let header = read_header(bytes)?;
    let (h, w, c) = (header[0] as usize, header[1] as usize, header[2] as usize);
    let expect = OBS_HEADER + h * w * c * 4;
    if bytes.len() != expect {
        return Err(Error::Corruption(format!(
            "observation file has {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    let data = bytes[OBS_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    FeatureMap::from_vec(h, w, c, data)
}

fn encode_truth(h: usize, w: usize, occ: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(OBS_HEADER + occ.len());
    for v in [h as u32, w as u32, 1, TRUTH_TAG] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(occ.iter().map(|o| *o as u8));
    out
}

fn decode_truth(bytes: &[u8], h: usize, w: usize) -> Result<Vec<bool>> {
    let header = read_header(bytes)?;
    if header != [h as u32, w as u32, 1, TRUTH_TAG] || bytes.len() != OBS_HEADER + h * w {
        return Err(Error::Corruption("malformed ground-truth file".into()));
    }
    Ok(bytes[OBS_HEADER..].iter().map(|b| *b != 0).collect())
}

fn read_header(bytes: &[u8]) -> Result<[u32; 4]> {
    if bytes.len() < OBS_HEADER {
        return Err(Error::Corruption("file shorter than its 16-byte header".into()));
    }
    let mut out = [0u32; 4];
    for (i, v) in out.iter_mut().enumerate() {
        *v = u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
    }
    Ok(out)
}

/// One agent's observation with its own-frame labels.
#[derive(Debug, Clone)]
pub struct Frame {
    pub scene_id: u32,
    pub agent: AgentConfig,
    pub features: FeatureMap,
    pub labels: Vec<bool>,
}

pub(crate) fn load_frame(source: &dyn ObservationSource, scene_id: u32, agent: &AgentConfig) -> Result<Frame> {
    let features = source.observation(scene_id, agent.agent_id)?;
    let truth = source.truth(scene_id)?;
    let labels = agent_truth(&truth, &source.manifest().world, &agent.pose);
    Ok(Frame {
        scene_id,
        agent: agent.clone(),
        features,
        labels,
    })
}

/// Read-only view restricted to one modality's local data. Any attempt to
/// read another modality's observation is refused before touching storage.
pub struct LocalView<'a> {
    source: &'a dyn ObservationSource,
    modality: String,
}

impl<'a> LocalView<'a> {
    pub fn new(source: &'a dyn ObservationSource, modality: &str) -> Result<Self> {
        source.manifest().modality(modality)?;
        Ok(Self {
            source,
            modality: modality.to_string(),
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.source.manifest()
    }

    pub fn spec(&self) -> &ModalitySpec {
        self.manifest().modality(&self.modality).expect("checked in new")
    }

    pub fn observation(&self, scene_id: u32, agent_id: u32) -> Result<FeatureMap> {
        let agent = self.manifest().agent(scene_id, agent_id)?;
        if agent.modality != self.modality {
            return Err(Error::IsolationViolation(format!(
                "view of {} refused observation of {} (scene {scene_id}, agent {agent_id})",
                self.modality, agent.modality
            )));
        }
        self.source.observation(scene_id, agent_id)
    }

    /// Every frame of this modality in `split`, in scene order.
    pub fn frames(&self, split: Split) -> Result<Vec<Frame>> {
        let mut out = Vec::new();
        for s in self.manifest().scenes(split) {
            for a in s.agents.iter().filter(|a| a.modality == self.modality) {
                out.push(load_frame(self.source, s.scene_id, a)?);
            }
        }
        Ok(out)
    }
}

/// Frames of several modalities grouped by scene, for group code-space
/// training and evaluation.
pub fn scene_frames(
    source: &dyn ObservationSource,
    split: Split,
    modalities: &[String],
) -> Result<Vec<Vec<Frame>>> {
    let mut out = Vec::new();
    for s in source.manifest().scenes(split) {
        let frames = s
            .agents
            .iter()
            .filter(|a| modalities.contains(&a.modality))
            .map(|a| load_frame(source, s.scene_id, a))
            .collect::<Result<Vec<_>>>()?;
        if !frames.is_empty() {
            out.push(frames);
        }
    }
    Ok(out)
}

/// Deterministic epoch order over `n` items.
pub(crate) fn shuffled(n: usize, seed: RngSeed) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.rng());
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(isolation: Vec<[&str; 2]>, groups: Vec<(&str, Vec<&str>)>, n_mod: usize) -> DatasetConfig {
        let mut c = DatasetConfig::default();
        c.world.height = 16;
        c.world.width = 16;
        c.world.object_count = [1, 3];
        c.modalities.truncate(n_mod);
        c.isolation_pairs = isolation.into_iter().map(|[a, b]| [a.into(), b.into()]).collect();
        c.groups = groups
            .into_iter()
            .map(|(n, m)| GroupConfig {
                name: n.into(),
                members: m.into_iter().map(String::from).collect(),
            })
            .collect();
        c.train_scenes = 100;
        c.eval_scenes = 4;
        c
    }

    #[test]
    fn isolation_partitions_two_modalities() {
        let c = small(vec![["mA", "mB"]], vec![], 2);
        let d = make_dataset(&c, RngSeed(1)).unwrap();
        let a = &d.manifest.coverage["mA"];
        let b = &d.manifest.coverage["mB"];
        assert!(a.is_disjoint(b));
        assert_eq!(a.len() + b.len(), 100);
        d.manifest.verify_isolation().unwrap();
    }

    #[test]
    fn grouped_modalities_share_scenes() {
        let c = small(vec![["mA", "mB"]], vec![("gAC", vec!["mA", "mC"])], 3);
        let d = make_dataset(&c, RngSeed(2)).unwrap();
        let shared = d.manifest.coverage["mA"].intersection(&d.manifest.coverage["mC"]).count();
        assert!(shared >= 1);
        assert!(d.manifest.coverage["mA"].is_disjoint(&d.manifest.coverage["mB"]));
        for s in &d.manifest.eval {
            assert_eq!(s.agents.len(), 3);
        }
        assert_eq!(d.manifest.owner_of("mC"), "gAC");
        assert_eq!(d.manifest.owner_of("mB"), "mB");
    }

    #[test]
    fn same_seed_same_manifest() {
        let c = small(vec![["mA", "mB"]], vec![], 3);
        let a = make_dataset(&c, RngSeed(5)).unwrap();
        let b = make_dataset(&c, RngSeed(5)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.observations, b.observations);
    }

    #[test]
    fn contradictory_group_is_rejected_naming_pair() {
        let c = small(vec![["mA", "mB"]], vec![("g", vec!["mA", "mB"])], 2);
        match make_dataset(&c, RngSeed(1)) {
            Err(Error::Constraint(msg)) => assert!(msg.contains("mA") && msg.contains("mB")),
            other => panic!("expected constraint error, got {other:?}"),
        }
        let c = small(vec![["mA", "mA"]], vec![], 2);
        assert!(matches!(make_dataset(&c, RngSeed(1)), Err(Error::Constraint(_))));
    }

    #[test]
    fn verify_detects_tampered_manifest() {
        let c = small(vec![["mA", "mB"]], vec![], 2);
        let mut d = make_dataset(&c, RngSeed(1)).unwrap();
        let b_agent = AgentConfig {
            agent_id: 9,
            modality: "mB".into(),
            pose: crate::grid::Pose::origin(),
        };
        let scene = d.manifest.train.iter_mut().find(|s| s.agents[0].modality == "mA").unwrap();
        let id = scene.scene_id;
        scene.agents.push(b_agent);
        d.manifest.coverage.get_mut("mB").unwrap().insert(id);
        assert!(matches!(d.manifest.verify_isolation(), Err(Error::Constraint(_))));
    }

    #[test]
    fn store_round_trip_and_access_log() {
        let c = small(vec![["mA", "mB"]], vec![], 2);
        let d = make_dataset(&c, RngSeed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = DatasetStore::write(dir.path(), &d).unwrap();
        let (&(scene, agent), f) = d.observations.iter().next().unwrap();
        assert_eq!(&store.observation(scene, agent).unwrap(), f);
        assert_eq!(store.truth(scene).unwrap(), d.truths[&scene]);
        let log = store.access_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].path, obs_file(scene, agent));
    }

    #[test]
    fn feature_file_format() {
        let f = FeatureMap::from_vec(1, 2, 1, vec![1.0, -2.0]).unwrap();
        let b = encode_feature_map(&f);
        assert_eq!(&b[..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_feature_map(&b).unwrap(), f);
        assert!(matches!(decode_feature_map(&b[..19]), Err(Error::Corruption(_))));
    }

    #[test]
    fn local_view_refuses_foreign_modality() {
        let c = small(vec![["mA", "mB"]], vec![], 2);
        let d = make_dataset(&c, RngSeed(4)).unwrap();
        let view = LocalView::new(&d, "mA").unwrap();
        let b_scene = d.manifest.train.iter().find(|s| s.agents[0].modality == "mB").unwrap();
        assert!(matches!(
            view.observation(b_scene.scene_id, b_scene.agents[0].agent_id),
            Err(Error::IsolationViolation(_))
        ));
        let frames = view.frames(Split::Train).unwrap();
        assert!(frames.iter().all(|f| f.agent.modality == "mA"));
        assert_eq!(frames.len(), d.manifest.coverage["mA"].len());
    }
}
