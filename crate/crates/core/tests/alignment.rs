mod common;

use codealign::dataset::ObservationSource;
use codealign::eval::alignment_error;
use codealign::pipeline::{pretrain_all, train_from_pretrained};
use codealign::translator::{InputSource, Layer, Stack, Translator, TranslatorOneToOne};
use codealign::{Error, RngSeed};

#[test]
fn alignment_error_cases() {
    let c = common::small_config(80, 20);
    let d = common::dataset(&c);
    let pre = pretrain_all(&d, &c.pretrain, c.seed).unwrap();
    let sys = train_from_pretrained(&d, pre, &c.codespace, &c.translator, c.seed).unwrap();
    let art = &sys.artifacts;
    let space = art.space("mB").unwrap();
    let (dt, cz) = (space.codebook.size(), space.codebook.dim());

    // logits 2 c.z - |c|^2 rank codes exactly like the nearest-code rule
    let mut weight = Vec::with_capacity(dt * cz);
    let mut bias = Vec::with_capacity(dt);
    for k in 0..dt {
        let code = space.codebook.code(k);
        weight.extend(code.iter().map(|v| 2.0 * v));
        bias.push(-code.iter().map(|v| v * v).sum::<f64>());
    }
    let exact = Translator::OneToOne(TranslatorOneToOne {
        source: "mB".into(),
        target_owner: "mB".into(),
        input_source: InputSource::Adapted,
        net: Stack::new(vec![Layer {
            input_dim: cz,
            output_dim: dt,
            weight,
            bias,
        }]),
    });
    let one_per_scene = d
        .manifest()
        .scenes(codealign::dataset::Split::Eval)
        .iter()
        .all(|s| s.agents.iter().filter(|a| a.modality == "mB").count() <= 1);
    assert!(one_per_scene);
    let e = alignment_error(&d, art, "mB", "mB", Some(&exact), 1.0).unwrap();
    assert!(e.abs() < 1e-12, "self error {e}");

    let trained = alignment_error(&d, art, "mA", "mB", None, 1.0).unwrap();
    let fresh = Translator::OneToOne(TranslatorOneToOne::new("mA", "mB", InputSource::Encoded, 16, dt, RngSeed(77)));
    let untrained = alignment_error(&d, art, "mA", "mB", Some(&fresh), 1.0).unwrap();
    assert!(trained < untrained, "trained {trained} untrained {untrained}");

    assert!(matches!(alignment_error(&d, art, "mZ", "mB", None, 1.0), Err(Error::Config(_))));
}
