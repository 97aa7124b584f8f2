//! Passage-level training of the recurrent two-tower model.

use ndarray::{Array2, Axis};
use rand::Rng as _;

use super::data::{fit_norm, PassageSet, PreparedSet};
use super::{epoch_batches, fit_loop, EpochRecord, TrainConfig, Variant};
use crate::cca::fit_cca;
use crate::error::{config, Error, Result};
use crate::features::SnippetSequence;
use crate::geometry::Modality;
use crate::loss::symmetric_loss_grad;
use crate::model::{pack_inputs, SnippetModel, TowerInput, TwoTowerModel};
use crate::nn::Real;
use crate::parallel;
use crate::retrieval::diagonal_ranks;
use crate::seed;

/// A trained model with its per-epoch log.
pub struct TrainOutcome {
    pub model: TwoTowerModel<f32>,
    pub log: Vec<EpochRecord>,
}

/// Forward and backward pass for one batch of matching passages;
/// gradients accumulate into the model. Returns the symmetric loss.
pub fn passage_step<F: Real>(
    model: &mut TwoTowerModel<F>,
    sheet: TowerInput<F>,
    sheet_lengths: &[usize],
    audio: TowerInput<F>,
    audio_lengths: &[usize],
    margin: f64,
    negatives: usize,
) -> Result<F> {
    let (fs, fa) = (model.frozen.sheet, model.frozen.audio);
    let (es, cs) = model.sheet.forward_train(sheet, sheet_lengths, !fs)?;
    let (ea, ca) = model.audio.forward_train(audio, audio_lengths, !fa)?;
    let (loss, ds, da) = symmetric_loss_grad(&es, &ea, margin, negatives)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss:?}")));
    }
    model.sheet.backward(cs, &ds);
    model.audio.backward(ca, &da);
    Ok(loss)
}

/// Encoder codes of each sequence, for frozen encoders.
fn codes_of(model: &TwoTowerModel<f32>, m: Modality, seqs: &[&SnippetSequence]) -> Result<Vec<Array2<f32>>> {
    let enc = &model.tower(m).encoder;
    parallel::map_slice(seqs, |s| {
        let (x, _) = pack_inputs::<f32>(&[*s]);
        enc.forward_infer(&x)
    })
    .into_iter()
    .collect()
}

fn concat_codes(parts: &[&Array2<f32>]) -> Array2<f32> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Cached frozen-encoder codes: `sheet[p]`, `audio[p][rendering]`.
struct CodeCache {
    sheet: Vec<Array2<f32>>,
    audio: Vec<Vec<Array2<f32>>>,
}

impl CodeCache {
    fn new(model: &TwoTowerModel<f32>, data: &PreparedSet) -> Result<Self> {
        let sheet = codes_of(model, Modality::Sheet, &data.sheet.iter().collect::<Vec<_>>())?;
        let audio = data
            .audio
            .iter()
            .map(|r| codes_of(model, Modality::Audio, &r.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sheet, audio })
    }
}

/// S2A mean reciprocal rank on canonical renderings.
fn validation_mrr(model: &TwoTowerModel<f32>, data: &PreparedSet, cache: Option<&CodeCache>) -> Result<f64> {
    let (es, ea) = match cache {
        Some(c) => {
            let embed = |m: Modality, parts: Vec<&Array2<f32>>| -> Result<Array2<f32>> {
                let lens: Vec<usize> = parts.iter().map(|a| a.nrows()).collect();
                let tower = model.tower(m);
                let ctx = tower.summarize_packed(&concat_codes(&parts), &lens)?;
                Ok(tower.proj.forward(&ctx))
            };
            (
                embed(Modality::Sheet, c.sheet.iter().collect())?,
                embed(Modality::Audio, c.audio.iter().map(|r| &r[0]).collect())?,
            )
        }
        None => (
            model.embed_sequences(Modality::Sheet, &data.sheet.iter().collect::<Vec<_>>())?,
            model.embed_sequences(Modality::Audio, &data.audio.iter().map(|r| &r[0]).collect::<Vec<_>>())?,
        ),
    };
    let ranks = diagonal_ranks(&es, &ea, &data.ids);
    crate::eval::mean_reciprocal_rank(&ranks)
}

/// Trains a passage model of the configured variant. FT/FZ variants need
/// a pretrained snippet model; the CCA variants additionally need that
/// model to carry a CCA projection, and end with a CCA fit on the
/// training embeddings.
pub fn train_passage_model(
    cfg: &TrainConfig,
    train: &PassageSet,
    valid: &PassageSet,
    pretrained: Option<&SnippetModel<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let variant = cfg.variant;
    if variant == Variant::Bl {
        return Err(config("the bl variant is trained with snippet pretraining"));
    }
    if train.len() < 2 || valid.is_empty() {
        return Err(config("training needs at least two train pairs and one validation pair"));
    }
    let mut model = TwoTowerModel::<f32>::new(cfg.model, cfg.seed)?;
    if variant.needs_pretrained() {
        let pre = pretrained.ok_or_else(|| config(format!("variant {variant} requires a pretraining checkpoint")))?;
        if variant.uses_cca() && pre.cca.is_none() {
            return Err(config(format!("variant {variant} requires a CCA-refined pretraining checkpoint")));
        }
        model.load_encoders(pre)?;
    } else {
        model.norm = fit_norm(train, &cfg.hops)?;
    }
    model.frozen.sheet = variant.frozen();
    model.frozen.audio = variant.frozen();
    model.meta.variant = variant.name().to_string();
    model.meta.train_config_hash = cfg.fingerprint()?;

    let train_data = PreparedSet::new(train, &model, &cfg.hops)?;
    let valid_data = PreparedSet::new(&valid.canonical(), &model, &cfg.hops)?;
    let frozen = variant.frozen();
    let train_cache = if frozen { Some(CodeCache::new(&model, &train_data)?) } else { None };
    let valid_cache = if frozen { Some(CodeCache::new(&model, &valid_data)?) } else { None };

    let batch_seed = seed::derive(cfg.seed, "batching");
    let run_epoch = |model: &mut TwoTowerModel<f32>, opt: &mut crate::optim::Adam<f32>, epoch: usize| -> Result<f64> {
        let mut rng = seed::stream(seed::derive_index(batch_seed, epoch as u64), "epoch");
        let batches = epoch_batches(train_data.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let renders: Vec<usize> = batch
                .iter()
                .map(|&p| rng.random_range(0..train_data.audio[p].len()))
                .collect();
            let (sheet_in, sheet_len, audio_in, audio_len) = match &train_cache {
                Some(c) => {
                    let s: Vec<&Array2<f32>> = batch.iter().map(|&p| &c.sheet[p]).collect();
                    let a: Vec<&Array2<f32>> = batch.iter().zip(&renders).map(|(&p, &r)| &c.audio[p][r]).collect();
                    (
                        TowerInput::Codes(concat_codes(&s)),
                        s.iter().map(|x| x.nrows()).collect::<Vec<_>>(),
                        TowerInput::Codes(concat_codes(&a)),
                        a.iter().map(|x| x.nrows()).collect::<Vec<_>>(),
                    )
                }
                None => {
                    let s: Vec<&SnippetSequence> = batch.iter().map(|&p| &train_data.sheet[p]).collect();
                    let a: Vec<&SnippetSequence> =
                        batch.iter().zip(&renders).map(|(&p, &r)| &train_data.audio[p][r]).collect();
                    let (si, sl) = pack_inputs::<f32>(&s);
                    let (ai, al) = pack_inputs::<f32>(&a);
                    (TowerInput::Snippets(si), sl, TowerInput::Snippets(ai), al)
                }
            };
            model.zero_grad();
            let loss = passage_step(
                model,
                sheet_in,
                &sheet_len,
                audio_in,
                &audio_len,
                cfg.margin,
                cfg.effective_negatives(batch.len()),
            )?;
            let mut step = opt.begin_step();
            model.visit_trainable(&mut |name, p| step.update(name, p));
            total += f64::from(loss);
        }
        Ok(total / batches.len() as f64)
    };
    let validate = |m: &TwoTowerModel<f32>| validation_mrr(m, &valid_data, valid_cache.as_ref());
    let result = fit_loop(&mut model, cfg, variant.name(), run_epoch, validate)?;
    let mut best = result.best;
    best.meta.epochs_trained = result.log.len();

    if variant.uses_cca() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for p in 0..train_data.len() {
            for r in &train_data.audio[p] {
                xs.push(&train_data.sheet[p]);
                ys.push(r);
            }
        }
        let ex = best.embed_sequences(Modality::Sheet, &xs)?.mapv(f64::from);
        let ey = best.embed_sequences(Modality::Audio, &ys)?.mapv(f64::from);
        best.cca = Some(fit_cca(&ex, &ey, cfg.cca_reg)?);
    }
    Ok(TrainOutcome {
        model: best,
        log: result.log,
    })
}
