use ndarray::{Array3, Array4};
use rand::Rng;

use passage_embed::corpus::{generate_passage_events, render_audio, render_sheet, AudioPassage, GeneratorConfig, SheetPassage};
use passage_embed::features::{collate, normalize_snippets, slice_passage, NormStats, PassageRef, SnippetSequence};
use passage_embed::geometry::Modality;
use passage_embed::model::encoder::{Encoder, EncoderConfig};
use passage_embed::model::{pack_inputs, ModelConfig, TowerInput, TwoTowerModel};
use passage_embed::seed;
use passage_embed::training::passage_step;

fn tiny() -> ModelConfig {
    let e = EncoderConfig {
        widths: [2, 2, 2, 2],
        proj_maps: 2,
        code_dim: 4,
    };
    ModelConfig {
        sheet: e,
        audio: e,
        hidden: 4,
        embed_dim: 3,
    }
}

fn random_snippets(m: Modality, n: usize, rng: &mut seed::Rng) -> Array3<f32> {
    let (r, c) = m.snippet_shape();
    Array3::from_shape_simple_fn((n, r, c), || rng.random_range(-1.0..1.0))
}

#[test]
fn pre_fc_features_have_reference_lengths() {
    let mut rng = seed::stream(0, "shapes");
    for (m, len) in [(Modality::Audio, 160), (Modality::Sheet, 3520)] {
        let enc = Encoder::<f32>::new(m, EncoderConfig::default(), &mut rng);
        assert_eq!(EncoderConfig::default().flat_len(m), len);
        for b in [1, 2, 7] {
            let x = random_snippets(m, b, &mut rng);
            let (r, c) = m.snippet_shape();
            let x = x.into_shape_with_order((b, 1, r, c)).unwrap();
            assert_eq!(enc.features_infer(&x).unwrap().dim(), (b, len));
            assert_eq!(enc.forward_infer(&x).unwrap().dim(), (b, 32));
        }
    }
}

#[test]
fn passage_embeddings_have_model_dimension() {
    let model = TwoTowerModel::<f32>::new(ModelConfig::full(), 1).unwrap();
    let mut rng = seed::stream(1, "dims");
    for b in [1, 2, 7] {
        let seqs: Vec<SnippetSequence> = (0..b)
            .map(|i| SnippetSequence::new(Modality::Audio, random_snippets(Modality::Audio, 1 + i % 3, &mut rng), format!("{i}")).unwrap())
            .collect();
        let e = model.embed_sequences(Modality::Audio, &seqs.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(e.dim(), (b, 64));
    }
}

#[test]
fn zero_padding_does_not_change_embeddings() {
    let model = TwoTowerModel::<f32>::new(ModelConfig::desk(), 2).unwrap();
    let mut rng = seed::stream(2, "padding");
    let mut worst = 0.0f32;
    for i in 0..50 {
        let m = if i % 5 == 0 { Modality::Sheet } else { Modality::Audio };
        let len = rng.random_range(1..6);
        let seq = SnippetSequence::new(m, random_snippets(m, len, &mut rng), "q".into()).unwrap();
        let longer = SnippetSequence::new(m, random_snippets(m, len + rng.random_range(1..4), &mut rng), "l".into()).unwrap();
        let alone = model.embed_sequences(m, &[&seq]).unwrap();
        let batch = collate(&[seq, longer]).unwrap();
        let codes = model.encode_snippets(&batch).unwrap();
        let ctx = model.summarize(m, &codes, &batch.lengths).unwrap();
        let padded = model.project(m, &ctx).unwrap();
        for (a, b) in alone.row(0).iter().zip(padded.row(0)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "padding changed embeddings by {worst}");
}

/// Standardised snippets of three short rendered passages, packed as
/// `(n, 1, rows, cols)` together with per-passage lengths.
fn rendered_batch(m: Modality) -> (Array4<f64>, Vec<usize>) {
    let g = GeneratorConfig {
        beats_min: 4.0,
        beats_max: 6.0,
        ..Default::default()
    };
    let seqs: Vec<SnippetSequence> = (0..3u64)
        .map(|i| {
            let ev = generate_passage_events(&g, seed::derive_index(21, i), 0).unwrap();
            let id = format!("g{i}");
            let seq = match m {
                Modality::Sheet => {
                    let p = SheetPassage::new(render_sheet(&ev, g.pixels_per_beat, true, i), id.clone(), id).unwrap();
                    slice_passage(PassageRef::Sheet(&p), 90).unwrap()
                }
                Modality::Audio => {
                    let p = AudioPassage::new(render_audio(&ev, 1.0, i).unwrap(), id.clone(), id).unwrap();
                    slice_passage(PassageRef::Audio(&p), 10).unwrap()
                }
            };
            // keep the check affordable
            let n = seq.len().min(2);
            SnippetSequence::new(m, seq.snippets.slice(ndarray::s![..n, .., ..]).to_owned(), seq.passage_id).unwrap()
        })
        .collect();
    let stats = NormStats::fit(&seqs).unwrap();
    let seqs: Vec<SnippetSequence> = seqs.iter().map(|s| normalize_snippets(s, stats).unwrap()).collect();
    let (x, lengths) = pack_inputs::<f64>(&seqs.iter().collect::<Vec<_>>());
    (x, lengths)
}

/// Symmetric loss of one fixed batch; gradients accumulate into `model`.
fn batch_loss(model: &mut TwoTowerModel<f64>, sheet: &(Array4<f64>, Vec<usize>), audio: &(Array4<f64>, Vec<usize>)) -> f64 {
    passage_step(
        model,
        TowerInput::Snippets(sheet.0.clone()),
        &sheet.1,
        TowerInput::Snippets(audio.0.clone()),
        &audio.1,
        2.5,
        2,
    )
    .unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let sheet = rendered_batch(Modality::Sheet);
    let audio = rendered_batch(Modality::Audio);
    let mut model = TwoTowerModel::<f64>::new(tiny(), 3).unwrap();
    model.zero_grad();
    batch_loss(&mut model, &sheet, &audio);

    let mut analytic = Vec::new();
    model.visit_all(&mut |name, p| analytic.push((name.to_string(), p.grad.to_vec())));

    let h = 1e-5;
    let mut errors = Vec::new();
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (k, &g) in grads.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut idx = 0;
                m.visit_all(&mut |_, p| {
                    if idx == pi {
                        p.value[k] += delta;
                    }
                    idx += 1;
                });
                batch_loss(&mut m, &sheet, &audio)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (g - numeric).abs() / scale };
            errors.push((rel, name.clone(), k));
        }
    }
    let n = errors.len();
    let good = errors.iter().filter(|e| e.0 <= 1e-4).count();
    let worst = errors.iter().cloned().fold((0.0, String::new(), 0), |a, b| if b.0 > a.0 { b } else { a });
    assert!(good as f64 >= 0.95 * n as f64, "{good}/{n} within 1e-4");
    assert!(worst.0 <= 1e-3, "max relative error {} at {}[{}]", worst.0, worst.1, worst.2);
}
