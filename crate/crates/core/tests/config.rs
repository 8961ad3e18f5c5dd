use codealign::config::RunConfig;

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
    let text = std::fs::read_to_string(path).unwrap();
    let parsed = RunConfig::from_json(&text).unwrap();
    assert_eq!(parsed, RunConfig::default());
    assert_eq!(parsed.hash().unwrap(), RunConfig::default().hash().unwrap());
}

#[test]
fn dot_path_overrides_and_aliases() {
    let c = RunConfig::default()
        .with_overrides(&["codespace.D=32".into(), "dataset.modalities.1.fov_radius=9.5".into()])
        .unwrap();
    assert_eq!(c.codespace.codebook_size, 32);
    assert_eq!(c.dataset.modalities[1].fov_radius, 9.5);
    assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
    assert!(RunConfig::default().with_overrides(&["codespace.nope=1".into()]).is_err());
    assert!(RunConfig::default().with_overrides(&["missing-equals".into()]).is_err());
}
