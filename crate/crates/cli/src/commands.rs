use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use codealign::collab::Mode;
use codealign::config::RunConfig;
use codealign::dataset::{make_dataset, DatasetManifest, DatasetStore};
use codealign::eval::{build_report, run_suite, Suite};
use codealign::pipeline::{
    assemble, pretrain_all, spaces, train_codespaces, heads, train_dense_translators, train_translators,
    translator_pairs, TrainedSystem,
};
use codealign::Error;

use crate::artifacts::{
    io, load_codespaces, load_pretrained, load_translators, missing, open_data, save, AccessSummary,
    Checker, CodespaceFile, Layout, StageHashes,
};
use crate::error::CliResult;
use crate::logs;

pub struct Context {
    pub config: RunConfig,
    pub hashes: StageHashes,
    pub layout: Layout,
    pub checker: Checker,
}

impl Context {
    pub fn new(config: RunConfig, out: &Path, force: bool) -> CliResult<Self> {
        config.validate()?;
        Ok(Self {
            hashes: StageHashes::new(&config)?,
            config,
            layout: Layout::new(out),
            checker: Checker { force },
        })
    }

    fn stage<T>(&self, stage: &str, r: codealign::Result<T>) -> CliResult<T> {
        r.map_err(|e| e.in_stage(stage, &self.hashes.run).into())
    }
}

pub fn gen_data(ctx: &Context) -> CliResult<()> {
    let dir = ctx.layout.data();
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| io(&manifest_path, e))?;
        let old: DatasetManifest = serde_json::from_str(&text).map_err(Error::from)?;
        if old.config_hash != ctx.hashes.data {
            if !ctx.checker.force {
                return Err(crate::error::CliError::Stale {
                    what: "existing dataset".into(),
                    path: dir.display().to_string(),
                    expected: ctx.hashes.data.clone(),
                    found: old.config_hash,
                    command: "codealign gen-data".into(),
                });
            }
            log::warn!("replacing dataset at {} (--force)", dir.display());
        }
        fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
    }
    let dataset = make_dataset(&ctx.config.dataset, ctx.config.seed)?;
    DatasetStore::write(&dir, &dataset)?;
    log::info!(
        "wrote {} train and {} eval scenes to {}",
        dataset.manifest.train.len(),
        dataset.manifest.eval.len(),
        dir.display()
    );
    Ok(())
}

pub fn pretrain(ctx: &Context) -> CliResult<()> {
    let store = open_data(&ctx.layout, &ctx.hashes, &ctx.checker)?;
    let results = ctx.stage("pretrain", pretrain_all(&store, &ctx.config.pretrain, ctx.config.seed))?;
    for (m, r) in results {
        log::info!("pretrained {m}: ap {:.4}", r.ap);
        save(&ctx.layout.pretrain(&m), "pretrain", &ctx.hashes.pretrain, &ctx.config, &ctx.hashes, r)?;
    }
    Ok(())
}

pub fn train_codespace(ctx: &Context) -> CliResult<()> {
    let store = open_data(&ctx.layout, &ctx.hashes, &ctx.checker)?;
    let pretrained = load_pretrained(&ctx.layout, &store, &ctx.hashes, &ctx.checker)?;
    let results = ctx.stage(
        "train-codespace",
        train_codespaces(&store, &ctx.config.codespace, &heads(&pretrained), ctx.config.seed),
    )?;
    for (o, r) in results {
        if let Some(last) = r.history.last() {
            log::info!("code space {o}: ap {:.4}, mse {:.4}", last.ap, last.reconstruction_mse);
        }
        let file = CodespaceFile {
            codebook_size: r.codespace.codebook.size(),
            code_dim: r.codespace.codebook.dim(),
            result: r,
        };
        save(&ctx.layout.codespace(&o), "train-codespace", &ctx.hashes.codespace, &ctx.config, &ctx.hashes, file)?;
    }
    Ok(())
}

/// Trains each source modality's translators against a fresh dataset
/// handle and fails if that pass opened another modality's observations.
pub fn train_translator(ctx: &Context) -> CliResult<()> {
    let probe = open_data(&ctx.layout, &ctx.hashes, &ctx.checker)?;
    let codespaces = load_codespaces(&ctx.layout, &probe, &ctx.hashes, &ctx.checker)?;
    let sp = spaces(&codespaces);
    let pairs = translator_pairs(&probe);
    let sources: BTreeSet<&str> = pairs.iter().map(|(m, _)| m.as_str()).collect();
    let tc = &ctx.config.translator;
    let mut access = Vec::new();
    for src in sources {
        let store = DatasetStore::open(probe.root())?;
        let mine: Vec<(String, String)> = pairs.iter().filter(|(m, _)| m == src).cloned().collect();
        let translators = ctx.stage("train-translator", train_translators(&store, tc, &sp, &mine, ctx.config.seed))?;
        let dense = ctx.stage("train-dense", train_dense_translators(&store, tc, &sp, &mine, ctx.config.seed))?;
        let log = store.access_log();
        let read: BTreeSet<String> = log.iter().map(|r| r.modality.clone()).collect();
        if let Some(other) = read.iter().find(|m| m.as_str() != src) {
            let e = Error::IsolationViolation(format!("training translators for {src} read observations of {other}"));
            return Err(e.in_stage("train-translator", &ctx.hashes.run).into());
        }
        access.push(AccessSummary {
            source: src.to_string(),
            files_read: log.len(),
            modalities_read: read.into_iter().collect(),
        });
        for t in translators {
            if let Some(loss) = t.loss_curve.last() {
                log::info!("{}: final loss {loss:.4}", t.file_name());
            }
            let path = ctx.layout.translators_dir().join(t.file_name());
            save(&path, "train-translator", &ctx.hashes.translator, &ctx.config, &ctx.hashes, t)?;
        }
        for (d, (m, o)) in dense.into_iter().zip(&mine) {
            save(&ctx.layout.dense(m, o), "train-translator", &ctx.hashes.translator, &ctx.config, &ctx.hashes, d)?;
        }
    }
    let path = ctx.layout.translators_dir().join("access_log.json");
    save(&path, "train-translator", &ctx.hashes.translator, &ctx.config, &ctx.hashes, access)?;
    Ok(())
}

pub fn simulate(ctx: &Context, suites: &[Suite], modes: &[Mode]) -> CliResult<()> {
    let store = open_data(&ctx.layout, &ctx.hashes, &ctx.checker)?;
    let pretrained = load_pretrained(&ctx.layout, &store, &ctx.hashes, &ctx.checker)?;
    let codespaces = load_codespaces(&ctx.layout, &store, &ctx.hashes, &ctx.checker)?;
    let (translators, dense) = load_translators(&ctx.layout, &store, &ctx.config, &ctx.hashes, &ctx.checker)?;
    let artifacts = assemble(&store, &spaces(&codespaces), &translators, &dense);
    let base = TrainedSystem {
        pretrained,
        codespaces,
        translators,
        dense,
        artifacts,
    };
    let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites.to_vec() };
    for suite in suites {
        log::info!("simulating {}", suite.name());
        let log = run_suite(&store, &ctx.config, suite, &base, modes)?;
        let dir = ctx.layout.logs().join(suite.name());
        logs::write_suite(&dir, &log, &ctx.config)?;
        log::info!("wrote {} settings to {}", log.settings.len(), dir.display());
    }
    Ok(())
}

pub fn report(ctx: &Context) -> CliResult<()> {
    let dir = ctx.layout.logs();
    let logged = logs::read_all(&dir)?;
    let Some((_, config)) = logged.first() else {
        return Err(missing("simulation logs", &dir, "codealign simulate"));
    };
    let config = config.clone();
    for (l, _) in &logged {
        ctx.checker.check(
            &format!("{} log", l.suite.name()),
            &dir.join(l.suite.name()),
            &ctx.hashes.run,
            &l.config_hash,
            "codealign simulate",
        )?;
    }
    let logs: Vec<_> = logged.into_iter().map(|(l, _)| l).collect();
    let report = build_report(&config, &logs)?;
    report.write(&ctx.layout.root)?;
    log::info!("wrote report for {} suites to {}", logs.len(), ctx.layout.root.display());
    Ok(())
}
