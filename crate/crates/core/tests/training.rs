use passage_embed::corpus::{build_corpus, generate_passage_events, render_audio, CorpusConfig, GeneratorConfig};
use passage_embed::geometry::FRAME_RATE;
use passage_embed::model::checkpoint::{passage_to_bytes, snippet_to_bytes};
use passage_embed::model::encoder::EncoderConfig;
use passage_embed::model::{ModelConfig, SnippetModel, TwoTowerModel};
use passage_embed::training::{pretrain_snippet_model, train_passage_model, PassageSet, TrainConfig, Variant};
use passage_embed::{seed, Error};

fn tiny_config() -> TrainConfig {
    let e = EncoderConfig {
        widths: [2, 2, 2, 2],
        proj_maps: 2,
        code_dim: 4,
    };
    TrainConfig {
        max_epochs: 2,
        batch_size: 4,
        negatives: 3,
        model: ModelConfig {
            sheet: e,
            audio: e,
            hidden: 4,
            embed_dim: 3,
        },
        ..Default::default()
    }
}

fn small_corpus(dir: &std::path::Path) -> (PassageSet, PassageSet) {
    let mut cfg = CorpusConfig {
        n_pairs: 12,
        seed: 5,
        splits: [0.5, 0.25, 0.25],
        ..Default::default()
    };
    cfg.generator.beats_min = 6.0;
    cfg.generator.beats_max = 9.0;
    cfg.generator.augment_factor = 2;
    let m = build_corpus(&cfg, dir, false).unwrap();
    (PassageSet::load(&m[0]).unwrap(), PassageSet::load(&m[1]).unwrap())
}

fn encoder_params(model: &mut TwoTowerModel<f32>) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_all(&mut |name, p| {
        if name.contains("encoder") {
            out.push((name.to_string(), p.value.to_vec()));
        }
    });
    out
}

fn pretrained_params(model: &mut SnippetModel<f32>) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_all(&mut |name, p| out.push((name.to_string(), p.value.to_vec())));
    out
}

#[test]
fn frozen_encoders_stay_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = small_corpus(dir.path());
    let cfg = TrainConfig {
        variant: Variant::Bl,
        ..tiny_config()
    };
    let mut pre = pretrain_snippet_model(&cfg, &train, &valid).unwrap().model;
    let before = pretrained_params(&mut pre);

    let fz = TrainConfig {
        variant: Variant::RnnFz,
        ..tiny_config()
    };
    let mut frozen = train_passage_model(&fz, &train, &valid, Some(&pre)).unwrap().model;
    let after = encoder_params(&mut frozen);
    assert_eq!(before.len(), after.len());
    for ((_, a), (name, b)) in before.iter().zip(&after) {
        assert!(a == b, "{name} changed under freezing");
    }
    let fresh = TwoTowerModel::<f32>::new(fz.model, fz.seed).unwrap();
    assert_ne!(fresh.sheet.gru.w_ih.value, frozen.sheet.gru.w_ih.value);

    let ft = TrainConfig {
        variant: Variant::RnnFt,
        ..tiny_config()
    };
    let mut tuned = train_passage_model(&ft, &train, &valid, Some(&pre)).unwrap().model;
    let changed = before
        .iter()
        .zip(encoder_params(&mut tuned))
        .filter(|((_, a), (_, b))| a != b)
        .count();
    assert!(changed > 0, "fine-tuning left every encoder tensor untouched");
}

#[test]
fn variant_preconditions_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = small_corpus(dir.path());
    let ft = TrainConfig {
        variant: Variant::RnnFt,
        ..tiny_config()
    };
    assert!(matches!(train_passage_model(&ft, &train, &valid, None), Err(Error::Config(_))));
    let mut pre = pretrain_snippet_model(&tiny_config(), &train, &valid).unwrap().model;
    pre.cca = None;
    let cca = TrainConfig {
        variant: Variant::RnnFtCca,
        ..tiny_config()
    };
    assert!(matches!(train_passage_model(&cca, &train, &valid, Some(&pre)), Err(Error::Config(_))));
    let bl = TrainConfig {
        variant: Variant::Bl,
        ..tiny_config()
    };
    assert!(train_passage_model(&bl, &train, &valid, None).is_err());
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = small_corpus(dir.path());
    let cfg = tiny_config();
    let a = train_passage_model(&cfg, &train, &valid, None).unwrap();
    let b = train_passage_model(&cfg, &train, &valid, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(passage_to_bytes(&a.model).unwrap(), passage_to_bytes(&b.model).unwrap());
    assert_eq!(a.model.meta.epochs_trained, 2);

    let p = pretrain_snippet_model(&cfg, &train, &valid).unwrap();
    let q = pretrain_snippet_model(&cfg, &train, &valid).unwrap();
    assert_eq!(snippet_to_bytes(&p.model).unwrap(), snippet_to_bytes(&q.model).unwrap());
    assert!(p.model.cca.is_some());
}

#[test]
fn cca_variant_stores_a_passage_projection() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = small_corpus(dir.path());
    let pre = pretrain_snippet_model(&tiny_config(), &train, &valid).unwrap().model;
    let cfg = TrainConfig {
        variant: Variant::RnnFzCca,
        ..tiny_config()
    };
    let m = train_passage_model(&cfg, &train, &valid, Some(&pre)).unwrap().model;
    let cca = m.cca.as_ref().expect("projection stored");
    assert_eq!(cca.dim, 3);
    assert!(cca.correlations.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn default_generator_yields_long_passages() {
    let g = GeneratorConfig::default();
    let n = 500;
    let long = (0..n)
        .filter(|&i| {
            let piece = seed::derive_index(11, i as u64);
            let ev = generate_passage_events(&g, piece, 0).unwrap();
            let spec = render_audio(&ev, 1.0, 7).unwrap();
            spec.ncols() as f64 / FRAME_RATE > 10.0
        })
        .count();
    assert!(long * 4 >= n, "only {long} of {n} passages exceed 10 s");
}
