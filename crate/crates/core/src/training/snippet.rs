//! Snippet-level pretraining of the two encoders.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng as _;

use super::data::{fit_norm, PassageSet, SnippetPairSet};
use super::{epoch_batches, fit_loop, EpochRecord, TrainConfig};
use crate::cca::fit_cca;
use crate::error::{config, Error, Result};
use crate::loss::symmetric_loss_grad;
use crate::model::SnippetModel;
use crate::nn::Real;
use crate::retrieval::diagonal_ranks;
use crate::seed;

pub struct PretrainOutcome {
    pub model: SnippetModel<f32>,
    pub log: Vec<EpochRecord>,
}

fn to_input<F: Real>(s: &Array3<f32>) -> Array4<F> {
    let (n, r, c) = s.dim();
    s.mapv(|v| F::from_f32(v).unwrap()).into_shape_with_order((n, 1, r, c)).unwrap()
}

/// One batch of matching snippets through both encoders; gradients
/// accumulate into the model.
pub fn snippet_step<F: Real>(
    model: &mut SnippetModel<F>,
    sheet: Array4<F>,
    audio: Array4<F>,
    margin: f64,
    negatives: usize,
) -> Result<F> {
    let (es, cs) = model.sheet.forward_train(sheet)?;
    let (ea, ca) = model.audio.forward_train(audio)?;
    let (loss, ds, da) = symmetric_loss_grad(&es, &ea, margin, negatives)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss:?}")));
    }
    model.sheet.backward(cs, &ds);
    model.audio.backward(ca, &da);
    Ok(loss)
}

/// Flat list of `(passage, snippet)` pairs of one rendering choice.
fn flatten(set: &SnippetPairSet, renders: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (p, s) in set.sheet.iter().enumerate() {
        for i in 0..s.len_of(Axis(0)) {
            out.push((p, renders[p], i));
        }
    }
    out
}

fn gather(set: &SnippetPairSet, items: &[(usize, usize, usize)]) -> (Array3<f32>, Array3<f32>) {
    let s: Vec<_> = items.iter().map(|&(p, _, i)| set.sheet[p].index_axis(Axis(0), i)).collect();
    let a: Vec<_> = items.iter().map(|&(p, r, i)| set.audio[p][r].index_axis(Axis(0), i)).collect();
    (ndarray::stack(Axis(0), &s).unwrap(), ndarray::stack(Axis(0), &a).unwrap())
}

fn embed_codes(model: &SnippetModel<f32>, s: &Array3<f32>, a: &Array3<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
    Ok((
        model.sheet.forward_infer(&to_input(s))?,
        model.audio.forward_infer(&to_input(a))?,
    ))
}

/// Trains both encoders on snippet pairs cut at aligned onsets, then fits
/// a CCA projection on the training pairs.
pub fn pretrain_snippet_model(cfg: &TrainConfig, train: &PassageSet, valid: &PassageSet) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(config("pretraining needs train and validation pairs"));
    }
    let mut model = SnippetModel::<f32>::new(cfg.model.sheet, cfg.model.audio, cfg.seed)?;
    model.norm = fit_norm(train, &cfg.hops)?;
    model.meta.variant = "bl".into();
    model.meta.train_config_hash = cfg.fingerprint()?;

    let train_pairs = SnippetPairSet::new(train, &model.norm)?;
    let valid_pairs = SnippetPairSet::new(&valid.canonical(), &model.norm)?;
    let mut val_items = flatten(&valid_pairs, &vec![0; valid.len()]);
    val_items.truncate(cfg.snippet_val_pairs.max(2));
    if val_items.len() < 2 {
        return Err(config("validation split yields fewer than two snippet pairs"));
    }
    let (val_s, val_a) = gather(&valid_pairs, &val_items);
    let val_ids: Vec<String> = (0..val_items.len()).map(|i| format!("{i:06}")).collect();

    let batch_seed = seed::derive(cfg.seed, "batching");
    let run_epoch = |model: &mut SnippetModel<f32>, opt: &mut crate::optim::Adam<f32>, epoch: usize| -> Result<f64> {
        let mut rng = seed::stream(seed::derive_index(batch_seed, epoch as u64), "epoch");
        let renders: Vec<usize> = train_pairs.audio.iter().map(|r| rng.random_range(0..r.len())).collect();
        let items = flatten(&train_pairs, &renders);
        let batches = epoch_batches(items.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let chosen: Vec<_> = batch.iter().map(|&i| items[i]).collect();
            let (s, a) = gather(&train_pairs, &chosen);
            model.zero_grad();
            let loss = snippet_step(
                model,
                to_input(&s),
                to_input(&a),
                cfg.margin,
                cfg.effective_negatives(batch.len()),
            )?;
            let mut step = opt.begin_step();
            model.visit_all(&mut |name, p| step.update(name, p));
            total += f64::from(loss);
        }
        Ok(total / batches.len() as f64)
    };
    let validate = |m: &SnippetModel<f32>| -> Result<f64> {
        let (es, ea) = embed_codes(m, &val_s, &val_a)?;
        crate::eval::mean_reciprocal_rank(&diagonal_ranks(&es, &ea, &val_ids))
    };
    let result = fit_loop(&mut model, cfg, "pretrain", run_epoch, validate)?;
    let mut best = result.best;
    best.meta.epochs_trained = result.log.len();

    let all = flatten(&train_pairs, &vec![0; train_pairs.sheet.len()]);
    let (s, a) = gather(&train_pairs, &all);
    let (es, ea) = embed_codes(&best, &s, &a)?;
    best.cca = Some(fit_cca(&es.mapv(f64::from), &ea.mapv(f64::from), cfg.cca_reg)?);
    Ok(PretrainOutcome {
        model: best,
        log: result.log,
    })
}
