//! Stage drivers: pretraining, code spaces, translators, and assembly of
//! the inference artifacts. Each stage is a pure function of its inputs and
//! seed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codespace::{
    pretrain_pipeline, train_codespace, train_group_codespace, Codespace, CodespaceConfig, CodespaceResult,
    DetectionHead, PretrainConfig, PretrainResult,
};
use crate::collab::Artifacts;
use crate::dataset::{LocalView, ObservationSource};
use crate::error::{Error, Result};
use crate::numeric::{name_id, streams, RngSeed};
use crate::translator::{
    train_dense_translator, train_multihead, train_translator, DenseTranslator, InputSource, Structure, Translator,
    TranslatorArtifact, TranslatorConfig, TranslatorMultiHead, TranslatorOneToOne,
};

pub fn pretrain_all(
    source: &dyn ObservationSource,
    config: &PretrainConfig,
    seed: RngSeed,
) -> Result<BTreeMap<String, PretrainResult>> {
    let ids: Vec<String> = source.manifest().modalities.iter().map(|m| m.id().to_string()).collect();
    ids.par_iter()
        .map(|m| {
            let view = LocalView::new(source, m)?;
            Ok((m.clone(), pretrain_pipeline(&view, config, seed)?))
        })
        .collect()
}

pub fn heads(pretrained: &BTreeMap<String, PretrainResult>) -> BTreeMap<String, DetectionHead> {
    pretrained.iter().map(|(m, r)| (m.clone(), r.head.clone())).collect()
}

/// One code space per group, and one per modality outside every group.
pub fn train_codespaces(
    source: &dyn ObservationSource,
    config: &CodespaceConfig,
    pretrained: &BTreeMap<String, DetectionHead>,
    seed: RngSeed,
) -> Result<BTreeMap<String, CodespaceResult>> {
    let manifest = source.manifest();
    let owners = manifest.owners();
    owners
        .par_iter()
        .map(|owner| {
            let result = if manifest.groups.iter().any(|g| &g.name == owner) {
                let members = manifest.owner_members(owner);
                train_group_codespace(source, owner, &members, pretrained, config, seed)?
            } else {
                let view = LocalView::new(source, owner)?;
                let head = pretrained
                    .get(owner)
                    .ok_or_else(|| Error::Data(format!("no pretrained head for {owner}")))?;
                train_codespace(&view, head, config, seed)?
            };
            Ok((owner.clone(), result))
        })
        .collect()
}

/// Every (source modality, foreign code-space owner) pair.
pub fn translator_pairs(source: &dyn ObservationSource) -> Vec<(String, String)> {
    let manifest = source.manifest();
    let owners = manifest.owners();
    let mut out = Vec::new();
    for m in &manifest.modalities {
        let own = manifest.owner_of(m.id());
        for o in &owners {
            if *o != own {
                out.push((m.id().to_string(), o.clone()));
            }
        }
    }
    out
}

fn translator_seed(seed: RngSeed, source: &str, target: &str) -> RngSeed {
    seed.derive(&[streams::TRANSLATOR, name_id(source), name_id(target)])
}

fn input_dim(
    source: &dyn ObservationSource,
    modality: &str,
    input_source: InputSource,
    spaces: &BTreeMap<String, Codespace>,
) -> Result<usize> {
    Ok(match input_source {
        InputSource::Encoded => source.manifest().modality(modality)?.channels(),
        _ => source_space(source, modality, spaces)?.codebook.dim(),
    })
}

fn source_space<'a>(
    source: &dyn ObservationSource,
    modality: &str,
    spaces: &'a BTreeMap<String, Codespace>,
) -> Result<&'a Codespace> {
    let owner = source.manifest().owner_of(modality);
    spaces
        .get(&owner)
        .ok_or_else(|| Error::Config(format!("no code space artifacts for {owner}")))
}

/// Trains translators for `pairs`: one per pair, or one multi-head
/// translator per source covering all of its targets.
pub fn train_translators(
    source: &dyn ObservationSource,
    config: &TranslatorConfig,
    spaces: &BTreeMap<String, Codespace>,
    pairs: &[(String, String)],
    seed: RngSeed,
) -> Result<Vec<TranslatorArtifact>> {
    let space = |o: &str| {
        spaces
            .get(o)
            .ok_or_else(|| Error::Config(format!("no code space artifacts for {o}")))
    };
    match config.structure {
        Structure::OneToOne => pairs
            .par_iter()
            .map(|(m, o)| {
                let target = space(o)?;
                let s = translator_seed(seed, m, o);
                let dim = input_dim(source, m, config.input_source, spaces)?;
                let mut t = TranslatorOneToOne::new(m, o, config.input_source, dim, target.codebook.size(), s);
                let view = LocalView::new(source, m)?;
                let src_space = source_space(source, m, spaces).ok();
                let training = train_translator(&mut t, &view, src_space, target, config, s)?;
                Ok(TranslatorArtifact {
                    translator: Translator::OneToOne(t),
                    tau_start: config.tau_start,
                    tau_end: config.tau_end,
                    seed: s,
                    loss_curve: training.loss_curve,
                })
            })
            .collect(),
        Structure::MultiHead => {
            let mut by_source: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for (m, o) in pairs {
                by_source.entry(m).or_default().push(o);
            }
            let groups: Vec<(&str, Vec<&str>)> = by_source.into_iter().collect();
            groups
                .par_iter()
                .map(|(m, owners)| {
                    let s = translator_seed(seed, m, "*");
                    let dim = input_dim(source, m, config.input_source, spaces)?;
                    let mut targets = BTreeMap::new();
                    let mut dims = Vec::new();
                    for o in owners {
                        let sp = space(o)?;
                        dims.push((o.to_string(), sp.codebook.size()));
                        targets.insert(o.to_string(), sp.clone());
                    }
                    let mut t = TranslatorMultiHead::new(m, config.input_source, dim, config.hidden, config.depth, &dims, s);
                    let view = LocalView::new(source, m)?;
                    let src_space = source_space(source, m, spaces).ok();
                    let training = train_multihead(&mut t, &view, src_space, &targets, config, s)?;
                    Ok(TranslatorArtifact {
                        translator: Translator::MultiHead(t),
                        tau_start: config.tau_start,
                        tau_end: config.tau_end,
                        seed: s,
                        loss_curve: training.loss_curve,
                    })
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArtifact {
    pub translator: DenseTranslator,
    pub seed: RngSeed,
    pub loss_curve: Vec<f64>,
}

pub fn train_dense_translators(
    source: &dyn ObservationSource,
    config: &TranslatorConfig,
    spaces: &BTreeMap<String, Codespace>,
    pairs: &[(String, String)],
    seed: RngSeed,
) -> Result<Vec<DenseArtifact>> {
    pairs
        .par_iter()
        .map(|(m, o)| {
            let target = spaces
                .get(o)
                .ok_or_else(|| Error::Config(format!("no code space artifacts for {o}")))?;
            let s = translator_seed(seed, m, o).derive(&[2]);
            let view = LocalView::new(source, m)?;
            let (translator, loss_curve) = train_dense_translator(&view, target, config, s)?;
            Ok(DenseArtifact {
                translator,
                seed: s,
                loss_curve,
            })
        })
        .collect()
}

/// Inference artifacts from trained stages.
pub fn assemble(
    source: &dyn ObservationSource,
    spaces: &BTreeMap<String, Codespace>,
    translators: &[TranslatorArtifact],
    dense: &[DenseArtifact],
) -> Artifacts {
    let manifest = source.manifest();
    Artifacts {
        codespaces: spaces.clone(),
        owner_of: manifest
            .modalities
            .iter()
            .map(|m| (m.id().to_string(), manifest.owner_of(m.id())))
            .collect(),
        translators: translators.iter().map(|t| t.translator.clone()).collect(),
        dense: dense.iter().map(|d| d.translator.clone()).collect(),
        sensing_range: manifest
            .modalities
            .iter()
            .map(|m| (m.id().to_string(), m.config.fov_radius))
            .collect(),
    }
}

/// Every trained stage of one run.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub pretrained: BTreeMap<String, PretrainResult>,
    pub codespaces: BTreeMap<String, CodespaceResult>,
    pub translators: Vec<TranslatorArtifact>,
    pub dense: Vec<DenseArtifact>,
    pub artifacts: Artifacts,
}

pub fn spaces(results: &BTreeMap<String, CodespaceResult>) -> BTreeMap<String, Codespace> {
    results.iter().map(|(o, r)| (o.clone(), r.codespace.clone())).collect()
}

/// Code spaces, translators and dense baselines on top of existing
/// pretrained heads.
pub fn train_from_pretrained(
    source: &dyn ObservationSource,
    pretrained: BTreeMap<String, PretrainResult>,
    codespace: &CodespaceConfig,
    translator: &TranslatorConfig,
    seed: RngSeed,
) -> Result<TrainedSystem> {
    let codespaces = train_codespaces(source, codespace, &heads(&pretrained), seed)?;
    let sp = spaces(&codespaces);
    let pairs = translator_pairs(source);
    let translators = train_translators(source, translator, &sp, &pairs, seed)?;
    let dense = train_dense_translators(source, translator, &sp, &pairs, seed)?;
    let artifacts = assemble(source, &sp, &translators, &dense);
    Ok(TrainedSystem {
        pretrained,
        codespaces,
        translators,
        dense,
        artifacts,
    })
}
