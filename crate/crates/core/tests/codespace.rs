mod common;

use std::collections::BTreeMap;

use codealign::codespace::{pretrain_pipeline, train_codespace, train_group_codespace, CodespaceConfig, PretrainConfig};
use codealign::collab::Artifacts;
use codealign::dataset::{make_dataset, LocalView, Split};
use codealign::eval::{alignment_error, ap_from_pairs};
use codealign::pipeline::{heads, pretrain_all};
use codealign::worldgen::{fov_mask, Nonlinearity};
use codealign::Error;

#[test]
fn noiseless_world_is_reconstructed_exactly() {
    let mut c = common::small_config(60, 20);
    let w = &mut c.dataset.world;
    w.object_types = 2;
    w.latent_jitter = 0.0;
    for m in &mut c.dataset.modalities {
        m.noise_sigma = 0.0;
        m.dropout_rate = 0.0;
        m.range_falloff = 0.0;
        m.nonlinearity = Nonlinearity::Identity;
    }
    let d = common::dataset(&c);
    let view = LocalView::new(&d, "mA").unwrap();
    let pre = pretrain_pipeline(&view, &PretrainConfig { epochs: 50, lr: 0.5 }, c.seed).unwrap();
    // reported AP also counts objects outside the sensor's reach; score only what it can see
    let seen = fov_mask(&d.manifest.world.geometry(), view.spec().config.fov_radius);
    let mut pairs = Vec::new();
    for f in view.frames(Split::Eval).unwrap() {
        let s = pre.head.detect(&f.features).unwrap();
        pairs.extend(s.scores().iter().zip(&f.labels).zip(&seen).filter(|(_, v)| **v).map(|((s, l), _)| (*s, *l)));
    }
    let visible = ap_from_pairs(pairs).unwrap();
    assert!(visible >= 0.95, "pretrained AP inside the field of view {visible}");
    let config = CodespaceConfig {
        codebook_size: 8,
        ..c.codespace.clone()
    };
    let r = train_codespace(&view, &pre.head, &config, c.seed).unwrap();
    let last = r.history.last().unwrap();
    assert!(last.reconstruction_mse < 1e-9, "mse {}", last.reconstruction_mse);
    assert!((last.ap - pre.ap).abs() <= 0.02, "code space {} vs pretrained {}", last.ap, pre.ap);
}

#[test]
fn default_code_space_keeps_single_agent_ap() {
    let c = codealign::config::RunConfig::default();
    let d = common::dataset(&c);
    let view = LocalView::new(&d, "mB").unwrap();
    let pre = pretrain_pipeline(&view, &c.pretrain, c.seed).unwrap();
    let r = train_codespace(&view, &pre.head, &c.codespace, c.seed).unwrap();
    let ap = r.history.last().unwrap().ap;
    assert!((ap - pre.ap).abs() <= 0.05, "code space {ap} vs pretrained {}", pre.ap);
    for h in &r.history {
        assert!(h.distortion_after <= h.distortion_before + 1e-9 || h.reseeded > 0);
    }
}

#[test]
fn pretraining_is_deterministic_and_zero_epochs_do_nothing() {
    let c = common::small_config(20, 6);
    let d = common::dataset(&c);
    let view = LocalView::new(&d, "mC").unwrap();
    let a = pretrain_pipeline(&view, &c.pretrain, c.seed).unwrap();
    let b = pretrain_pipeline(&view, &c.pretrain, c.seed).unwrap();
    assert_eq!(a.head, b.head);
    let z1 = pretrain_pipeline(&view, &PretrainConfig { epochs: 0, lr: 0.5 }, c.seed).unwrap();
    let z2 = pretrain_pipeline(&view, &PretrainConfig { epochs: 0, lr: 5.0 }, c.seed).unwrap();
    assert!(z1.loss_curve.is_empty());
    assert_eq!(z1.head, z2.head);
    assert_eq!(z1.ap, z2.ap);
    assert!(z1.head.weight.iter().all(|w| w.abs() < 0.1));
}

#[test]
fn pretraining_without_data_fails() {
    let mut c = common::small_config(6, 2);
    c.dataset.isolation_pairs = vec![];
    c.dataset.modalities.truncate(2);
    c.dataset.groups = vec![];
    let d = make_dataset(&c.dataset, c.seed).unwrap();
    assert!(LocalView::new(&d, "mC").is_err());
}

#[test]
fn group_rejects_isolated_members() {
    let c = common::small_config(10, 4);
    let d = common::dataset(&c);
    let pre = heads(&pretrain_all(&d, &PretrainConfig { epochs: 1, lr: 0.5 }, c.seed).unwrap());
    let members = vec!["mA".to_string(), "mB".to_string()];
    let r = train_group_codespace(&d, "gAB", &members, &pre, &c.codespace, c.seed);
    assert!(matches!(r, Err(Error::Constraint(_))));
}

#[test]
fn similarity_term_improves_group_alignment() {
    let c = common::small_config(150, 30);
    let d = common::dataset(&c);
    let pre = heads(&pretrain_all(&d, &c.pretrain, c.seed).unwrap());
    let members = vec!["mA".to_string(), "mC".to_string()];
    let error = |lambda: f64| {
        let config = CodespaceConfig {
            lambda,
            ..c.codespace.clone()
        };
        let space = train_group_codespace(&d, "gAC", &members, &pre, &config, c.seed).unwrap().codespace;
        let artifacts = Artifacts {
            codespaces: [("gAC".to_string(), space)].into(),
            owner_of: members.iter().map(|m| (m.clone(), "gAC".to_string())).collect(),
            sensing_range: BTreeMap::new(),
            ..Artifacts::default()
        };
        alignment_error(&d, &artifacts, "mA", "gAC", None, 1.0).unwrap()
    };
    let (without, with) = (error(0.0), error(0.1));
    assert!(with < without, "lambda 0.1: {with}, lambda 0: {without}");
}
