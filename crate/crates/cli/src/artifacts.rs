//! On-disk layout under `--out` and the stage-hash chain that ties every
//! artifact to the config fields it was built from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use codealign::codespace::{CodespaceResult, PretrainResult};
use codealign::config::{hash_json, RunConfig};
use codealign::dataset::{DatasetStore, ObservationSource};
use codealign::pipeline::{translator_pairs, DenseArtifact};
use codealign::translator::{translator_file_name, Structure, TranslatorArtifact};
use codealign::{Error, RngSeed};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Hash of each stage's inputs. Each one folds in its upstream hash, so a
/// change anywhere upstream invalidates everything below it.
#[derive(Debug, Clone)]
pub struct StageHashes {
    pub data: String,
    pub pretrain: String,
    pub codespace: String,
    pub translator: String,
    pub run: String,
}

impl StageHashes {
    pub fn new(config: &RunConfig) -> CliResult<Self> {
        let data = hash_json(&(&config.dataset, config.seed))?;
        let pretrain = hash_json(&(&data, &config.pretrain))?;
        let codespace = hash_json(&(&pretrain, &config.codespace))?;
        let translator = hash_json(&(&codespace, &config.translator))?;
        Ok(Self {
            data,
            pretrain,
            codespace,
            translator,
            run: config.hash()?,
        })
    }
}

/// Wrapper written around every trained artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub seed: RngSeed,
    pub config: RunConfig,
    pub artifact: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodespaceFile {
    pub codebook_size: usize,
    pub code_dim: usize,
    #[serde(flatten)]
    pub result: CodespaceResult,
}

/// Observation files one translator-training pass opened.
#[derive(Debug, Serialize, Deserialize)]
pub struct AccessSummary {
    pub source: String,
    pub files_read: usize,
    pub modalities_read: Vec<String>,
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain(&self, modality: &str) -> PathBuf {
        self.root.join("artifacts/pretrain").join(format!("pretrain_{modality}.json"))
    }

    pub fn codespace(&self, owner: &str) -> PathBuf {
        self.root.join("artifacts/codespace").join(format!("codespace_{owner}.json"))
    }

    pub fn translators_dir(&self) -> PathBuf {
        self.root.join("artifacts/translators")
    }

    pub fn dense(&self, source: &str, owner: &str) -> PathBuf {
        self.root.join("artifacts/dense").join(format!("dense_{source}_to_{owner}.json"))
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

pub struct Checker {
    pub force: bool,
}

impl Checker {
    /// Refuses a hash mismatch unless forced.
    pub fn check(&self, what: &str, path: &Path, expected: &str, found: &str, command: &str) -> CliResult<()> {
        if expected == found {
            return Ok(());
        }
        if self.force {
            log::warn!("using stale {what} at {} (--force)", path.display());
            return Ok(());
        }
        Err(CliError::Stale {
            what: what.to_string(),
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
            command: command.to_string(),
        })
    }
}

pub fn missing(what: &str, path: &Path, command: &str) -> CliError {
    CliError::Missing {
        what: what.to_string(),
        path: path.display().to_string(),
        command: command.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(())
}

pub fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save<T: Serialize>(
    path: &Path,
    stage: &str,
    stage_hash: &str,
    config: &RunConfig,
    hashes: &StageHashes,
    artifact: T,
) -> CliResult<()> {
    let env = Envelope {
        stage: stage.to_string(),
        stage_hash: stage_hash.to_string(),
        config_hash: hashes.run.clone(),
        seed: config.seed,
        config: config.clone(),
        artifact,
    };
    write_json(path, &env)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Reads an artifact, checking its stage hash. `command` is what produces it.
pub fn load<T: DeserializeOwned>(
    path: &Path,
    what: &str,
    expected: &str,
    command: &str,
    checker: &Checker,
) -> CliResult<T> {
    if !path.exists() {
        return Err(missing(what, path, command));
    }
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
    checker.check(what, path, expected, &env.stage_hash, command)?;
    Ok(env.artifact)
}

/// Opens the dataset directory and checks it matches the config.
pub fn open_data(layout: &Layout, hashes: &StageHashes, checker: &Checker) -> CliResult<DatasetStore> {
    let dir = layout.data();
    if !dir.join("manifest.json").exists() {
        return Err(missing("dataset", &dir, "codealign gen-data"));
    }
    let store = DatasetStore::open(&dir)?;
    checker.check(
        "dataset",
        &dir,
        &hashes.data,
        &store.manifest().config_hash,
        "codealign gen-data",
    )?;
    Ok(store)
}

pub fn load_pretrained(
    layout: &Layout,
    source: &dyn ObservationSource,
    hashes: &StageHashes,
    checker: &Checker,
) -> CliResult<BTreeMap<String, PretrainResult>> {
    source
        .manifest()
        .modalities
        .iter()
        .map(|m| {
            let id = m.id().to_string();
            let r = load(
                &layout.pretrain(&id),
                &format!("pretrained head for {id}"),
                &hashes.pretrain,
                "codealign pretrain",
                checker,
            )?;
            Ok((id, r))
        })
        .collect()
}

pub fn load_codespaces(
    layout: &Layout,
    source: &dyn ObservationSource,
    hashes: &StageHashes,
    checker: &Checker,
) -> CliResult<BTreeMap<String, CodespaceResult>> {
    source
        .manifest()
        .owners()
        .into_iter()
        .map(|o| {
            let f: CodespaceFile = load(
                &layout.codespace(&o),
                &format!("code space {o}"),
                &hashes.codespace,
                "codealign train-codespace",
                checker,
            )?;
            Ok((o, f.result))
        })
        .collect()
}

/// Translator file names the configured structure produces, sorted.
pub fn translator_files(source: &dyn ObservationSource, structure: Structure) -> Vec<String> {
    let pairs = translator_pairs(source);
    let mut out: Vec<String> = match structure {
        Structure::OneToOne => pairs
            .iter()
            .map(|(m, o)| translator_file_name(m, std::slice::from_ref(o)))
            .collect(),
        Structure::MultiHead => {
            let mut by_source: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for (m, o) in &pairs {
                by_source.entry(m).or_default().push(o.clone());
            }
            by_source.iter().map(|(m, os)| translator_file_name(m, os)).collect()
        }
    };
    out.sort();
    out
}

pub fn load_translators(
    layout: &Layout,
    source: &dyn ObservationSource,
    config: &RunConfig,
    hashes: &StageHashes,
    checker: &Checker,
) -> CliResult<(Vec<TranslatorArtifact>, Vec<DenseArtifact>)> {
    let command = "codealign train-translator";
    let translators = translator_files(source, config.translator.structure)
        .iter()
        .map(|name| {
            let what = format!("translator {name}");
            load(&layout.translators_dir().join(name), &what, &hashes.translator, command, checker)
        })
        .collect::<CliResult<Vec<TranslatorArtifact>>>()?;
    let dense = translator_pairs(source)
        .iter()
        .map(|(m, o)| {
            let what = format!("dense translator {m} to {o}");
            load(&layout.dense(m, o), &what, &hashes.translator, command, checker)
        })
        .collect::<CliResult<Vec<DenseArtifact>>>()?;
    Ok((translators, dense))
}
