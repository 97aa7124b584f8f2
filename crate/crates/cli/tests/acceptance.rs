//! Acceptance run. Every criterion prints one `PASS`/`FAIL` line on
//! stderr (bypassing libtest capture); the test fails if any criterion does.
//!
//! The criteria run sequentially in one test so that wall-clock limits are
//! measured without other tests competing for the cores.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;

use passage_embed::cca::fit_cca;
use passage_embed::corpus::{
    build_corpus, generate_passage_events, render_audio, render_sheet, AudioPassage, CorpusConfig, CorpusManifest,
    GeneratorConfig, SheetPassage, TempoRendering,
};
use passage_embed::features::{collate, normalize_snippets, slice_passage, NormStats, PassageRef, SnippetSequence};
use passage_embed::geometry::{Direction, Modality, FRAME_RATE};
use passage_embed::loss::triplet_loss;
use passage_embed::model::encoder::{Encoder, EncoderConfig};
use passage_embed::model::{pack_inputs, ModelConfig, SnippetModel, TowerInput, TwoTowerModel};
use passage_embed::eval::{mean_reciprocal_rank, median_rank, recall_at_k};
use passage_embed::pipeline::{rerendered, sweep_tempo, Retriever};
use passage_embed::retrieval::{vote, RankedList, SnippetBank};
use passage_embed::seed;
use passage_embed::training::{passage_step, pretrain_snippet_model, train_passage_model, PassageSet, TrainConfig, Variant};

struct Criterion {
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Runs one criterion, enforcing its wall-clock limit when it has one.
fn run(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Criterion {
    let t = Instant::now();
    let (ok, detail) = f();
    let took = t.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let limit_note = limit.map(|l| format!(" (limit {:.0} s)", l.as_secs_f64())).unwrap_or_default();
    report(Criterion {
        name,
        pass: ok && in_time,
        detail: format!("{detail}; {:.1} s{limit_note}", took.as_secs_f64()),
    })
}

fn report(c: Criterion) -> Criterion {
    let tag = if c.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "{tag} {}: {}", c.name, c.detail);
    c
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- metrics

fn metric_oracles() -> (bool, String) {
    let mut rng = seed::stream(100, "metric-oracle");
    let mut worst_mrr = 0.0f64;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n: usize = rng.random_range(1..=50);
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=100)).collect();
        for k in [1, 5, 10, 25] {
            let mut hits = 0usize;
            for &r in &ranks {
                if r <= k {
                    hits += 1;
                }
            }
            if recall_at_k(&ranks, k).unwrap() != 100.0 * hits as f64 / n as f64 {
                mismatches += 1;
            }
        }
        let mut sum = 0.0;
        for &r in &ranks {
            sum += 1.0 / r as f64;
        }
        worst_mrr = worst_mrr.max((mean_reciprocal_rank(&ranks).unwrap() - sum / n as f64).abs());
        // lower median: smallest attained rank with at least ceil(n/2) ranks at or below it
        let need = n.div_ceil(2);
        let mr = *ranks
            .iter()
            .filter(|&&v| ranks.iter().filter(|&&w| w <= v).count() >= need)
            .min()
            .unwrap();
        if median_rank(&ranks).unwrap() != mr {
            mismatches += 1;
        }
    }
    (
        mismatches == 0 && worst_mrr <= 1e-12,
        format!("{mismatches} R@k/MR mismatches, max MRR error {worst_mrr:.1e}"),
    )
}

// ------------------------------------------------------------------- loss

fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    1.0 - dot / (nu.sqrt() * nv.sqrt())
}

fn loss_oracle() -> (bool, String) {
    let mut rng = seed::stream(101, "loss-oracle");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(2..=64);
        let k = rng.random_range(1..b);
        let alpha = rng.random_range(0.1..1.0);
        let x = Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0));
        let fast = triplet_loss(&x, &y, alpha, k).unwrap();
        let row = |a: &Array2<f64>, i: usize| a.row(i).to_vec();
        let mut slow = 0.0;
        for i in 0..b {
            for o in 1..=k {
                let j = (i + o) % b;
                slow += f64::max(0.0, alpha + cos_dist(&row(&x, i), &row(&y, i)) - cos_dist(&row(&x, i), &row(&y, j)));
            }
        }
        worst = worst.max((fast - slow).abs());
    }
    (worst <= 1e-6, format!("max deviation {worst:.1e} over 100 batches"))
}

// --------------------------------------------------------------- gradients

fn tiny_model() -> ModelConfig {
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

/// Standardised snippets of three short rendered passages.
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
            let n = seq.len().min(2);
            SnippetSequence::new(m, seq.snippets.slice(s![..n, .., ..]).to_owned(), seq.passage_id).unwrap()
        })
        .collect();
    let stats = NormStats::fit(&seqs).unwrap();
    let seqs: Vec<SnippetSequence> = seqs.iter().map(|s| normalize_snippets(s, stats).unwrap()).collect();
    pack_inputs::<f64>(&seqs.iter().collect::<Vec<_>>())
}

fn gradient_check() -> (bool, String) {
    let sheet = rendered_batch(Modality::Sheet);
    let audio = rendered_batch(Modality::Audio);
    let loss = |m: &mut TwoTowerModel<f64>| {
        passage_step(
            m,
            TowerInput::Snippets(sheet.0.clone()),
            &sheet.1,
            TowerInput::Snippets(audio.0.clone()),
            &audio.1,
            2.5,
            2,
        )
        .unwrap()
    };
    let mut model = TwoTowerModel::<f64>::new(tiny_model(), 3).unwrap();
    model.zero_grad();
    loss(&mut model);
    let mut analytic = Vec::new();
    model.visit_all(&mut |_, p| analytic.push(p.grad.to_vec()));

    let h = 1e-5;
    let mut errors = Vec::new();
    for (pi, grads) in analytic.iter().enumerate() {
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
                loss(&mut m)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            errors.push(if scale < 1e-7 { 0.0 } else { (g - numeric).abs() / scale });
        }
    }
    let good = errors.iter().filter(|e| **e <= 1e-4).count();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let frac = good as f64 / errors.len() as f64;
    (
        frac >= 0.95 && worst <= 1e-3,
        format!("{:.1}% of {} parameters within 1e-4, max {worst:.1e}", 100.0 * frac, errors.len()),
    )
}

// ----------------------------------------------------------------- shapes

fn random_snippets(m: Modality, n: usize, rng: &mut seed::Rng) -> Array3<f32> {
    let (r, c) = m.snippet_shape();
    Array3::from_shape_simple_fn((n, r, c), || rng.random_range(-1.0..1.0))
}

fn shape_contracts() -> (bool, String) {
    let mut rng = seed::stream(102, "shapes");
    let mut seen = Vec::new();
    let mut ok = true;
    for (m, want) in [(Modality::Audio, 160), (Modality::Sheet, 3520)] {
        let enc = Encoder::<f32>::new(m, EncoderConfig::default(), &mut rng);
        for b in [1, 2, 7] {
            let (r, c) = m.snippet_shape();
            let x = random_snippets(m, b, &mut rng).into_shape_with_order((b, 1, r, c)).unwrap();
            let got = enc.features_infer(&x).unwrap().dim();
            ok &= got == (b, want);
            seen.push(format!("{}[{b}]={}", m.name(), got.1));
        }
    }
    (ok, seen.join(" "))
}

fn padding_neutrality() -> (bool, String) {
    let model = TwoTowerModel::<f32>::new(ModelConfig::desk(), 2).unwrap();
    let mut rng = seed::stream(103, "padding");
    let mut worst = 0.0f32;
    for i in 0..50 {
        let m = if i % 2 == 0 { Modality::Sheet } else { Modality::Audio };
        let len = rng.random_range(1..6);
        let seq = SnippetSequence::new(m, random_snippets(m, len, &mut rng), "q".into()).unwrap();
        let extra = rng.random_range(1..4);
        let longer = SnippetSequence::new(m, random_snippets(m, len + extra, &mut rng), "l".into()).unwrap();
        let alone = model.embed_sequences(m, &[&seq]).unwrap();
        let batch = collate(&[seq, longer]).unwrap();
        let codes = model.encode_snippets(&batch).unwrap();
        let ctx = model.summarize(m, &codes, &batch.lengths).unwrap();
        let padded = model.project(m, &ctx).unwrap();
        for (a, b) in alone.row(0).iter().zip(padded.row(0)) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < 1e-5, format!("max-norm change {worst:.1e} over 50 sequences"))
}

// -------------------------------------------------------------------- CCA

fn gaussian(n: usize, d: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(rand_distr::StandardNormal))
}

/// Product of plane rotations through random angles over every axis pair.
fn rotation(d: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::eye(d);
    for i in 0..d {
        for j in i + 1..d {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut g = Array2::<f64>::eye(d);
            g[[i, i]] = t.cos();
            g[[j, j]] = t.cos();
            g[[i, j]] = -t.sin();
            g[[j, i]] = t.sin();
            q = q.dot(&g);
        }
    }
    q
}

fn cca_properties() -> (bool, String) {
    let mut rng = seed::stream(104, "cca");
    let x = gaussian(1000, 8, &mut rng);
    let same = fit_cca(&x, &x, 1e-4).unwrap();
    let rot = fit_cca(&x, &x.dot(&rotation(8, &mut rng)), 1e-4).unwrap();
    let indep = fit_cca(&x, &gaussian(1000, 8, &mut rng), 1e-4).unwrap();
    let mut sorted = true;
    for p in [&same, &rot, &indep] {
        sorted &= p.correlations.windows(2).all(|w| w[0] >= w[1]);
        sorted &= p.correlations.iter().all(|c| (0.0..=1.0).contains(c));
    }
    for _ in 0..20 {
        let n = rng.random_range(20..200);
        let (dx, dy) = (rng.random_range(1..8), rng.random_range(1..8));
        let a = gaussian(n, dx, &mut rng);
        let mix = gaussian(dx, dy, &mut rng);
        let b = a.dot(&mix) + gaussian(n, dy, &mut rng) * rng.random_range(0.0..2.0);
        let p = fit_cca(&a, &b, 1e-4).unwrap();
        sorted &= p.correlations.windows(2).all(|w| w[0] >= w[1]);
        sorted &= p.correlations.iter().all(|c| (0.0..=1.0).contains(c));
    }
    let (a, b, c) = (same.correlations[0], rot.correlations[0], indep.correlations[0]);
    (
        a >= 0.999 && b >= 0.99 && c <= 0.2 && sorted,
        format!("identical {a:.5}, rotated {b:.5}, independent {c:.3}, sorted in [0,1]: {sorted}"),
    )
}

// ----------------------------------------------------------------- voting

/// Brute-force snippet voting: every query snippet votes for the owners
/// of its `top_k` nearest bank snippets.
fn reference_vote(query: &Array2<f32>, bank: &[(String, Array2<f32>)], top_k: usize) -> Vec<(String, u32)> {
    let as64 = |r: ndarray::ArrayView1<'_, f32>| r.iter().map(|v| *v as f64).collect::<Vec<_>>();
    let mut tally: Vec<(String, u32, f64)> = bank.iter().map(|(id, _)| (id.clone(), 0, 0.0)).collect();
    for q in query.rows() {
        let q = as64(q);
        let mut hits = Vec::new();
        for (p, (id, e)) in bank.iter().enumerate() {
            for (j, r) in e.rows().into_iter().enumerate() {
                hits.push((cos_dist(&q, &as64(r)), id.clone(), p, j));
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));
        for (d, _, p, _) in hits.into_iter().take(top_k) {
            tally[p].1 += 1;
            tally[p].2 += d;
        }
    }
    tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then_with(|| a.0.cmp(&b.0)));
    tally.into_iter().map(|(id, v, _)| (id, v)).collect()
}

fn listed(l: &RankedList) -> Vec<(String, u32)> {
    l.entries.iter().map(|e| (e.passage_id.clone(), e.votes.unwrap_or(0))).collect()
}

fn voting_oracle() -> (bool, String) {
    let mut rng = seed::stream(105, "voting");
    let d = 8;
    let rand_block = |n: usize, rng: &mut seed::Rng| Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0f32..1.0));

    // candidate "c3" holds exact copies of the query snippets
    let query = rand_block(4, &mut rng);
    let mut blocks: Vec<(String, Array2<f32>)> = (0..6).map(|i| (format!("c{i}"), rand_block(5, &mut rng))).collect();
    blocks[3].1.slice_mut(s![..4, ..]).assign(&query);
    let bank = |b: &[(String, Array2<f32>)]| {
        let embs: Vec<Array2<f32>> = b.iter().map(|x| x.1.clone()).collect();
        SnippetBank::new(Modality::Sheet, b.iter().map(|x| x.0.clone()).collect(), &embs).unwrap()
    };
    let constructed = vote(&query, "c3", Modality::Audio, &bank(&blocks), 1).unwrap();
    let rank_one = constructed.true_rank == Some(1);

    let mut agree = 0;
    for _ in 0..20 {
        let n = rng.random_range(2..10);
        let blocks: Vec<(String, Array2<f32>)> = (0..n)
            .map(|i| {
                let len = rng.random_range(1..7);
                (format!("p{i:02}"), rand_block(len, &mut rng))
            })
            .collect();
        let q = rand_block(rng.random_range(1..7), &mut rng);
        let k = rng.random_range(1..6);
        let got = vote(&q, "p00", Modality::Audio, &bank(&blocks), k).unwrap();
        if listed(&got) == reference_vote(&q, &blocks, k) {
            agree += 1;
        }
    }
    (
        rank_one && agree == 20,
        format!("constructed instance rank {:?}, {agree}/20 random passages match the reference", constructed.true_rank),
    )
}

// ------------------------------------------------------------ calibration

fn corpus_calibration() -> (bool, String) {
    let g = GeneratorConfig::default();
    let n = 500;
    let long = (0..n)
        .filter(|&i| {
            let ev = generate_passage_events(&g, seed::derive_index(106, i as u64), 0).unwrap();
            render_audio(&ev, 1.0, i as u64).unwrap().ncols() as f64 / FRAME_RATE > 10.0
        })
        .count();
    (long * 4 >= n, format!("{long}/{n} passages longer than 10 s"))
}

// ------------------------------------------------------------ determinism

const SMOKE_TOML: &str = r#"
dims = [2, 3]
[corpus]
n_pairs = 12
splits = [0.5, 0.25, 0.25]
[corpus.generator]
beats_min = 6.0
beats_max = 9.0
augment_factor = 2
[train]
max_epochs = 2
batch_size = 4
negatives = 3
[train.model]
hidden = 4
embed_dim = 3
[train.model.sheet]
widths = [2, 2, 2, 2]
proj_maps = 2
code_dim = 4
[train.model.audio]
widths = [2, 2, 2, 2]
proj_maps = 2
code_dim = 4
"#;

fn files_under(root: &Path, sub: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join(sub))
        .map(|rd| {
            rd.map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("smoke.toml"), SMOKE_TOML).unwrap();
    let mut runs = Vec::new();
    for out in ["run1", "run2"] {
        let status = Command::new(env!("CARGO_BIN_EXE_passage"))
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .args(["--seed", "42", "--threads", "1", "--config", "smoke.toml", "repro", "--out", out])
            .status()
            .unwrap();
        if !status.success() {
            return (false, format!("repro exited with {status}"));
        }
        let root = dir.join(out);
        let mut files = vec![("report.json".to_string(), std::fs::read(root.join("report.json")).unwrap())];
        files.extend(files_under(&root, "checkpoints"));
        files.extend(files_under(&root, "indices"));
        runs.push(files);
    }
    let n = runs[0].len();
    (
        runs[0] == runs[1] && n > 2,
        format!("{n} files compared (report, checkpoints, indices), smoke-scale config"),
    )
}

// --------------------------------------------------------------- training

struct SeedRun {
    pre: SnippetModel<f32>,
    rnn: TwoTowerModel<f32>,
    ft: TwoTowerModel<f32>,
}

struct Fixture {
    _dir: tempfile::TempDir,
    train: PassageSet,
    valid: PassageSet,
    test: PassageSet,
    varied: PassageSet,
    test_manifest: CorpusManifest,
    cfg: TrainConfig,
    runs: Vec<SeedRun>,
}

/// 64 / 32 / 32 pairs of passages spanning 6 to 12 beats.
fn acceptance_corpus() -> CorpusConfig {
    let mut c = CorpusConfig {
        n_pairs: 128,
        splits: [0.5, 0.25, 0.25],
        ..Default::default()
    };
    c.generator.beats_min = 6.0;
    c.generator.beats_max = 12.0;
    c
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ccfg = acceptance_corpus();
    let m = build_corpus(&ccfg, dir.path(), false).unwrap();
    let train = PassageSet::load(&m[0]).unwrap();
    let valid = PassageSet::load(&m[1]).unwrap();
    let test = PassageSet::load(&m[2]).unwrap();
    let varied = rerendered(
        &m[2],
        TempoRendering::LogUniform {
            lo: 0.8,
            hi: 1.25,
            seed: seed::derive(ccfg.seed, "tempo-variation"),
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::desk(),
        ..Default::default()
    };
    let runs = (0..3u64)
        .map(|s| {
            let pre = pretrain_snippet_model(&TrainConfig { seed: s, variant: Variant::Bl, ..cfg.clone() }, &train, &valid)
                .unwrap()
                .model;
            let rnn = train_passage_model(&TrainConfig { seed: s, variant: Variant::Rnn, ..cfg.clone() }, &train, &valid, None)
                .unwrap()
                .model;
            let ft = train_passage_model(
                &TrainConfig { seed: s, variant: Variant::RnnFt, ..cfg.clone() },
                &train,
                &valid,
                Some(&pre),
            )
            .unwrap()
            .model;
            let _ = writeln!(std::io::stderr().lock(), "     trained seed {s}");
            SeedRun { pre, rnn, ft }
        })
        .collect();
    let test_manifest = m.into_iter().nth(2).unwrap();
    Fixture {
        _dir: dir,
        train,
        valid,
        test,
        varied,
        test_manifest,
        cfg,
        runs,
    }
}

fn mrrs(r: Retriever<'_>, set: &PassageSet, f: &Fixture, dataset: &str) -> [f64; 2] {
    let rep = r.evaluate(set, &f.cfg.hops, dataset).unwrap();
    [rep[0].mrr, rep[1].mrr]
}

const DIRS: [Direction; 2] = Direction::BOTH;

/// Trains RNN on the training split alone (it also serves as validation)
/// at a constant learning rate, then evaluates on train and test.
fn overfit(f: &Fixture) -> (bool, String) {
    let cfg = TrainConfig {
        variant: Variant::Rnn,
        lr_patience: f.cfg.max_epochs + 1,
        ..f.cfg.clone()
    };
    let model = train_passage_model(&cfg, &f.train, &f.train, None).unwrap().model;
    let train = Retriever::Passage(&model).evaluate(&f.train, &f.cfg.hops, "train").unwrap();
    let test = mrrs(Retriever::Passage(&model), &f.test, f, "test");
    let r1 = [train[0].r1, train[1].r1];
    let ok = r1.iter().all(|r| *r >= 95.0) && test.iter().all(|m| *m >= 0.5) && f.train.len() == 64 && f.test.len() == 32;
    (
        ok,
        format!(
            "{}/{} pairs, {} epochs; train R@1 {}; test MRR {}",
            f.train.len(),
            f.test.len(),
            model.meta.epochs_trained,
            pair(r1, 1),
            pair(test, 3),
        ),
    )
}

fn pair(v: [f64; 2], prec: usize) -> String {
    format!("{} {:.prec$} / {} {:.prec$}", DIRS[0], v[0], DIRS[1], v[1])
}

fn medians(per_seed: &[[f64; 2]]) -> [f64; 2] {
    [0, 1].map(|d| median3(per_seed.iter().map(|v| v[d]).collect()))
}

fn variant_ordering(f: &Fixture, top_k: usize) -> (bool, String) {
    let rnn: Vec<[f64; 2]> = f.runs.iter().map(|r| mrrs(Retriever::Passage(&r.rnn), &f.varied, f, "test-varied")).collect();
    let bl: Vec<[f64; 2]> = f.runs.iter().map(|r| mrrs(Retriever::Voting(&r.pre, top_k), &f.varied, f, "test-varied")).collect();
    let (r, b) = (medians(&rnn), medians(&bl));
    (
        r[0] >= b[0] && r[1] >= b[1],
        format!("median MRR rnn {} vs bl {}", pair(r, 3), pair(b, 3)),
    )
}

fn pretraining_transfer(f: &Fixture) -> (bool, String) {
    let rnn: Vec<[f64; 2]> = f.runs.iter().map(|r| mrrs(Retriever::Passage(&r.rnn), &f.test, f, "test")).collect();
    let ft: Vec<[f64; 2]> = f.runs.iter().map(|r| mrrs(Retriever::Passage(&r.ft), &f.test, f, "test")).collect();
    let (r, t) = (medians(&rnn), medians(&ft));
    (
        t[0] >= r[0] - 0.02 && t[1] >= r[1] - 0.02,
        format!("median MRR rnn-ft {} vs rnn {}", pair(t, 3), pair(r, 3)),
    )
}

fn tempo_trend(f: &Fixture) -> (bool, String) {
    let ratios = [0.5, 1.0, 2.0];
    let mut per_ratio = vec![Vec::new(); 3];
    for run in &f.runs {
        let rows = sweep_tempo(&ratios, &f.test_manifest, &[Retriever::Passage(&run.rnn)], &f.cfg.hops).unwrap();
        for row in rows {
            let i = ratios.iter().position(|r| *r == row.ratio).unwrap();
            per_ratio[i].push([row.mrr_a2s, row.mrr_s2a]);
        }
    }
    let m: Vec<[f64; 2]> = per_ratio.iter().map(|v| medians(v)).collect();
    let ok = (0..2).all(|d| m[1][d] >= m[0][d] && m[1][d] >= m[2][d]);
    (
        ok,
        format!("median MRR at 0.5: {}; at 1: {}; at 2: {}", pair(m[0], 3), pair(m[1], 3), pair(m[2], 3)),
    )
}

fn snippet_params(m: &SnippetModel<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.clone().visit_all(&mut |_, p| out.push(p.value.to_vec()));
    out
}

fn encoder_params(m: &TwoTowerModel<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.clone().visit_all(&mut |n, p| {
        if n.contains("encoder") {
            out.push(p.value.to_vec());
        }
    });
    out
}

fn freeze_semantics(f: &Fixture) -> (bool, String) {
    let run = &f.runs[0];
    let before = snippet_params(&run.pre);
    let fz_cfg = TrainConfig {
        variant: Variant::RnnFz,
        max_epochs: 5,
        ..f.cfg.clone()
    };
    let fz = train_passage_model(&fz_cfg, &f.train, &f.valid, Some(&run.pre)).unwrap().model;
    let frozen = encoder_params(&fz);
    let tuned = encoder_params(&run.ft);
    let same = before.len() == frozen.len() && before == frozen;
    let changed = before.iter().zip(&tuned).filter(|(a, b)| a != b).count();
    (
        same && changed > 0,
        format!(
            "rnn-fz: {} encoder tensors bit-identical: {same}; rnn-ft: {changed}/{} tensors changed",
            frozen.len(),
            tuned.len()
        ),
    )
}

#[test]
fn acceptance() {
    let _ = writeln!(std::io::stderr().lock());
    let mut results = vec![
        run("metric oracles", Some(Duration::from_secs(5)), metric_oracles),
        run("loss oracle", Some(Duration::from_secs(10)), loss_oracle),
        run("gradient check", Some(Duration::from_secs(120)), gradient_check),
        run("shape contracts", Some(Duration::from_secs(10)), shape_contracts),
        run("padding neutrality", Some(Duration::from_secs(30)), padding_neutrality),
        run("cca properties", Some(Duration::from_secs(10)), cca_properties),
        run("baseline voting oracle", None, voting_oracle),
        run("corpus calibration", None, corpus_calibration),
        run("determinism", None, determinism),
    ];

    let f = fixture();
    let top_k = passage_embed::pipeline::ExperimentConfig::default().top_k;
    results.push(run("overfit and retrieve", Some(Duration::from_secs(15 * 60)), || overfit(&f)));
    results.push(run("variant ordering", None, || variant_ordering(&f, top_k)));
    results.push(run("pretraining transfer", None, || pretraining_transfer(&f)));
    results.push(run("tempo trend", None, || tempo_trend(&f)));
    results.push(run("freeze semantics", None, || freeze_semantics(&f)));

    let failed: Vec<&str> = results.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    let _ = writeln!(std::io::stderr().lock(), "{}/{} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
