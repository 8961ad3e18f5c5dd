//! Simulation logs: one directory per suite holding `suite.json`, and per
//! setting a JSONL frame log plus a binary file of scores and labels.
//!
//! Score file layout (little-endian): magic `CAFRAMES`, u64 seed, u32 hash
//! length, hash bytes, then per frame `H·W` f64 scores followed by `H·W`
//! label bytes (0 or 1). Each JSONL line records its frame's byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use codealign::collab::{FrameResult, Mode};
use codealign::config::RunConfig;
use codealign::eval::{
    AlignmentRow, FrameOutcome, ScalingRow, Setting, SettingFrames, StageSummary, Suite, SuiteLog,
};
use codealign::wire::LinkRecord;
use codealign::{DetectionMap, Error, RngSeed};
use serde::{Deserialize, Serialize};

use crate::artifacts::{io, write_json};
use crate::error::CliResult;

const MAGIC: &[u8; 8] = b"CAFRAMES";

#[derive(Debug, Serialize, Deserialize)]
pub struct SettingEntry {
    pub key: String,
    pub setting: Setting,
    pub frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SuiteIndex {
    pub suite: Suite,
    pub config_hash: String,
    pub seed: RngSeed,
    pub settings: Vec<SettingEntry>,
    pub alignment: Vec<AlignmentRow>,
    pub scaling: Vec<ScalingRow>,
    pub stages: Vec<StageSummary>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameLine {
    pub config_hash: String,
    pub seed: RngSeed,
    pub setting: String,
    pub scene_id: u32,
    pub ego: u32,
    pub ego_modality: String,
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    pub links: Vec<LinkRecord>,
    pub scores_offset: u64,
}

fn header(config_hash: &str, seed: RngSeed) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&seed.0.to_le_bytes());
    out.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(config_hash.as_bytes());
    out
}

fn write_setting(dir: &Path, key: &str, log: &SuiteLog, s: &SettingFrames) -> CliResult<()> {
    let mut bin = header(&log.config_hash, log.seed);
    let mut lines = Vec::new();
    for f in &s.frames {
        let d = &f.result.detection;
        let line = FrameLine {
            config_hash: log.config_hash.clone(),
            seed: log.seed,
            setting: key.to_string(),
            scene_id: f.result.scene_id,
            ego: f.result.ego,
            ego_modality: f.ego_modality.clone(),
            mode: f.result.mode,
            height: d.height(),
            width: d.width(),
            links: f.result.links.clone(),
            scores_offset: bin.len() as u64,
        };
        for v in d.scores() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        bin.extend(f.labels.iter().map(|&l| l as u8));
        serde_json::to_writer(&mut lines, &line).map_err(Error::from)?;
        lines.push(b'\n');
    }
    let jsonl = dir.join(format!("{key}.jsonl"));
    fs::write(&jsonl, lines).map_err(|e| io(&jsonl, e))?;
    let scores = dir.join(format!("{key}.scores"));
    let mut file = fs::File::create(&scores).map_err(|e| io(&scores, e))?;
    file.write_all(&bin).map_err(|e| io(&scores, e))?;
    Ok(())
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Corruption(format!("{}: {what}", path.display()))
}

fn read_setting(dir: &Path, entry: &SettingEntry, index: &SuiteIndex) -> CliResult<SettingFrames> {
    let jsonl = dir.join(format!("{}.jsonl", entry.key));
    let scores = dir.join(format!("{}.scores", entry.key));
    let text = fs::read_to_string(&jsonl).map_err(|e| io(&jsonl, e))?;
    let bin = fs::read(&scores).map_err(|e| io(&scores, e))?;
    let head = header(&index.config_hash, index.seed);
    if !bin.starts_with(&head) {
        return Err(corrupt(&scores, "header does not match the suite's config hash and seed").into());
    }
    let mut frames = Vec::with_capacity(entry.frames);
    for line in text.lines() {
        let l: FrameLine = serde_json::from_str(line).map_err(|e| corrupt(&jsonl, &e.to_string()))?;
        if l.config_hash != index.config_hash {
            return Err(corrupt(&jsonl, "frame from a different config").into());
        }
        let n = l.height * l.width;
        let start = l.scores_offset as usize;
        let end = start + n * 9;
        if start < head.len() || end > bin.len() {
            return Err(corrupt(&scores, "frame offset out of range").into());
        }
        let values = bin[start..start + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let labels = bin[start + n * 8..end].iter().map(|&b| b != 0).collect();
        frames.push(FrameOutcome {
            result: FrameResult {
                scene_id: l.scene_id,
                ego: l.ego,
                mode: l.mode,
                detection: DetectionMap::new(l.height, l.width, values)?,
                links: l.links,
            },
            ego_modality: l.ego_modality,
            labels,
        });
    }
    if frames.len() != entry.frames {
        return Err(corrupt(&jsonl, &format!("expected {} frames, found {}", entry.frames, frames.len())).into());
    }
    Ok(SettingFrames {
        setting: entry.setting.clone(),
        frames,
    })
}

/// Writes `log` into `dir`, merging with an existing log of the same
/// config: settings are replaced by key, everything else by the new run.
pub fn write_suite(dir: &Path, log: &SuiteLog, config: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut entries: Vec<SettingEntry> = match read_index(dir)? {
        Some(old) if old.config_hash == log.config_hash => old.settings,
        Some(_) => {
            log::warn!("replacing logs in {} from a different config", dir.display());
            fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            Vec::new()
        }
        None => Vec::new(),
    };
    for s in &log.settings {
        let key = s.setting.key();
        write_setting(dir, &key, log, s)?;
        entries.retain(|e| e.key != key);
        entries.push(SettingEntry {
            key,
            setting: s.setting.clone(),
            frames: s.frames.len(),
        });
    }
    entries.sort_by(|a, b| a.key.cmp(&b.key));
    let index = SuiteIndex {
        suite: log.suite,
        config_hash: log.config_hash.clone(),
        seed: log.seed,
        settings: entries,
        alignment: log.alignment.clone(),
        scaling: log.scaling.clone(),
        stages: log.stages.clone(),
        config: config.clone(),
    };
    write_json(&dir.join("suite.json"), &index)
}

fn read_index(dir: &Path) -> CliResult<Option<SuiteIndex>> {
    let path = dir.join("suite.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let index = serde_json::from_str(&text).map_err(|e| corrupt(&path, &e.to_string()))?;
    Ok(Some(index))
}

/// Every suite log under `root`, in suite order, each with the config it
/// was produced under.
pub fn read_all(root: &Path) -> CliResult<Vec<(SuiteLog, RunConfig)>> {
    let mut out = Vec::new();
    for suite in Suite::ALL {
        let dir = root.join(suite.name());
        let Some(index) = read_index(&dir)? else { continue };
        let settings = index
            .settings
            .iter()
            .map(|e| read_setting(&dir, e, &index))
            .collect::<CliResult<Vec<_>>>()?;
        let log = SuiteLog {
            suite: index.suite,
            config_hash: index.config_hash,
            seed: index.seed,
            settings,
            alignment: index.alignment,
            scaling: index.scaling,
            stages: index.stages,
        };
        out.push((log, index.config));
    }
    Ok(out)
}
