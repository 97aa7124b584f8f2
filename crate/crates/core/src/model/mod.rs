//! The two-tower recurrent-convolutional passage model and the snippet
//! model used for pretraining and the voting baseline.

pub mod checkpoint;
pub mod encoder;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::cca::{apply_cca, CcaProjection};
use crate::error::{argument, config, Result};
use crate::features::{normalize_snippets, slice_passage, HopConfig, NormStats, PaddedBatch, PassageRef, SnippetSequence};
use crate::geometry::Modality;
use crate::nn::gru::{Gru, GruCache};
use crate::nn::linear::Linear;
use crate::nn::{Real, Visitor};
use crate::seed;

pub use encoder::{Encoder, EncoderCache, EncoderConfig};

/// Architecture of the passage model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sheet: EncoderConfig,
    pub audio: EncoderConfig,
    /// Recurrent hidden units.
    pub hidden: usize,
    /// Final embedding dimension.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// The reference architecture: 24/48/96/96 feature maps, 128 hidden
    /// units, 64-dimensional embeddings.
    pub fn full() -> Self {
        Self {
            sheet: EncoderConfig::default(),
            audio: EncoderConfig::default(),
            hidden: 128,
            embed_dim: 64,
        }
    }

    /// Same topology with narrower convolutions, sized for single-core
    /// training runs on the synthetic corpus.
    pub fn desk() -> Self {
        let narrow = EncoderConfig {
            widths: [8, 16, 32, 32],
            proj_maps: 32,
            code_dim: 32,
        };
        Self {
            sheet: narrow,
            audio: narrow,
            hidden: 128,
            embed_dim: 64,
        }
    }

    pub fn encoder(&self, m: Modality) -> &EncoderConfig {
        match m {
            Modality::Sheet => &self.sheet,
            Modality::Audio => &self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sheet.validate()?;
        self.audio.validate()?;
        if self.sheet.code_dim != self.audio.code_dim {
            return Err(config("both encoders must produce codes of the same size"));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(config("hidden size and embedding dimension must be positive"));
        }
        Ok(())
    }
}

/// A D-dimensional point in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub modality: Modality,
    pub passage_id: String,
}

/// Per-modality pair of values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub sheet: T,
    pub audio: T,
}

impl<T> PerModality<T> {
    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Sheet => &self.sheet,
            Modality::Audio => &self.audio,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Sheet => &mut self.sheet,
            Modality::Audio => &mut self.audio,
        }
    }
}

/// Provenance recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub variant: String,
    pub train_config_hash: String,
    pub epochs_trained: usize,
}

/// Encoder input for a tower: raw snippets, or codes precomputed by a
/// frozen encoder.
pub enum TowerInput<F> {
    Snippets(Array4<F>),
    Codes(Array2<F>),
}

/// One modality's pathway: snippet encoder, GRU summariser, projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<F: Real> {
    pub encoder: Encoder<F>,
    pub gru: Gru<F>,
    pub proj: Linear<F>,
}

pub struct TowerCache<F> {
    encoder: Option<EncoderCache<F>>,
    grus: Vec<GruCache<F>>,
    context: Array2<F>,
    lengths: Vec<usize>,
}

fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(lengths.len() + 1);
    o.push(0);
    for l in lengths {
        o.push(o.last().unwrap() + l);
    }
    o
}

impl<F: Real> Tower<F> {
    pub fn new(modality: Modality, cfg: &ModelConfig, rng: &mut seed::Rng) -> Self {
        let enc_cfg = *cfg.encoder(modality);
        Self {
            encoder: Encoder::new(modality, enc_cfg, rng),
            gru: Gru::new(enc_cfg.code_dim, cfg.hidden, rng),
            proj: Linear::new(cfg.hidden, cfg.embed_dim, rng),
        }
    }

    /// Final GRU states for packed codes split by `lengths`.
    pub fn summarize_packed(&self, codes: &Array2<F>, lengths: &[usize]) -> Result<Array2<F>> {
        if lengths.iter().any(|l| *l == 0) {
            return Err(argument("sequence length must be at least 1"));
        }
        let off = offsets(lengths);
        if *off.last().unwrap() != codes.nrows() {
            return Err(argument("lengths do not cover the packed codes"));
        }
        let mut ctx = Array2::zeros((lengths.len(), self.gru.hidden));
        for i in 0..lengths.len() {
            let h = self.gru.forward_infer(codes.slice(s![off[i]..off[i + 1], ..]));
            ctx.row_mut(i).assign(&h);
        }
        Ok(ctx)
    }

    /// Inference-mode embeddings for packed snippets.
    pub fn embed_packed(&self, snippets: &Array4<F>, lengths: &[usize]) -> Result<Array2<F>> {
        let codes = self.encoder.forward_infer(snippets)?;
        let ctx = self.summarize_packed(&codes, lengths)?;
        Ok(self.proj.forward(&ctx))
    }

    pub fn forward_train(
        &mut self,
        input: TowerInput<F>,
        lengths: &[usize],
        train_encoder: bool,
    ) -> Result<(Array2<F>, TowerCache<F>)> {
        let (codes, enc_cache) = match input {
            TowerInput::Snippets(x) if train_encoder => {
                let (c, cache) = self.encoder.forward_train(x)?;
                (c, Some(cache))
            }
            TowerInput::Snippets(x) => (self.encoder.forward_infer(&x)?, None),
            TowerInput::Codes(c) => (c, None),
        };
        if lengths.iter().any(|l| *l == 0) {
            return Err(argument("sequence length must be at least 1"));
        }
        let off = offsets(lengths);
        if *off.last().unwrap() != codes.nrows() {
            return Err(argument("lengths do not cover the packed snippets"));
        }
        let mut context = Array2::zeros((lengths.len(), self.gru.hidden));
        let mut grus = Vec::with_capacity(lengths.len());
        for i in 0..lengths.len() {
            let (h, c) = self.gru.forward_train(codes.slice(s![off[i]..off[i + 1], ..]));
            context.row_mut(i).assign(&h);
            grus.push(c);
        }
        let emb = self.proj.forward(&context);
        Ok((
            emb,
            TowerCache {
                encoder: enc_cache,
                grus,
                context,
                lengths: lengths.to_vec(),
            },
        ))
    }

    pub fn backward(&mut self, cache: TowerCache<F>, demb: &Array2<F>) {
        let TowerCache {
            encoder,
            grus,
            context,
            lengths,
        } = cache;
        let dctx = self.proj.backward(&context, demb);
        let off = offsets(&lengths);
        let mut dcodes = Array2::zeros((*off.last().unwrap(), self.gru.input_dim()));
        for (i, c) in grus.iter().enumerate() {
            let dh: Array1<F> = dctx.row(i).to_owned();
            let dx = self.gru.backward(c, &dh);
            dcodes.slice_mut(s![off[i]..off[i + 1], ..]).assign(&dx);
        }
        if let Some(enc) = encoder {
            self.encoder.backward(enc, &dcodes);
        }
    }

    pub fn visit(&mut self, prefix: &str, include_encoder: bool, f: &mut Visitor<'_, F>) {
        if include_encoder {
            self.encoder.visit(&format!("{prefix}.encoder"), f);
        }
        self.gru.visit(&format!("{prefix}.gru"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.gru.zero_grad();
        self.proj.zero_grad();
    }
}

/// Converts a normalised snippet sequence into a `(len, 1, rows, cols)`
/// network input.
pub fn to_input<F: Real>(seq: &SnippetSequence) -> Array4<F> {
    let (n, r, c) = seq.snippets.dim();
    seq.snippets
        .mapv(|v| F::from_f32(v).unwrap())
        .into_shape_with_order((n, 1, r, c))
        .unwrap()
}

/// Stacks several sequences into one packed input plus their lengths.
pub fn pack_inputs<F: Real>(seqs: &[&SnippetSequence]) -> (Array4<F>, Vec<usize>) {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let (r, c) = seqs.first().map_or((0, 0), |s| s.modality.snippet_shape());
    let total: usize = lengths.iter().sum();
    let mut data = Vec::with_capacity(total * r * c);
    for s in seqs {
        data.extend(s.snippets.iter().map(|v| F::from_f32(*v).unwrap()));
    }
    (Array4::from_shape_vec((total, 1, r, c), data).unwrap(), lengths)
}

/// The recurrent passage model.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel<F: Real> {
    pub config: ModelConfig,
    pub sheet: Tower<F>,
    pub audio: Tower<F>,
    pub norm: PerModality<NormStats>,
    pub frozen: PerModality<bool>,
    pub cca: Option<CcaProjection>,
    pub meta: ModelMeta,
}

impl<F: Real> TwoTowerModel<F> {
    pub fn new(config: ModelConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed_value, "init");
        let sheet = Tower::new(Modality::Sheet, &config, &mut rng);
        let audio = Tower::new(Modality::Audio, &config, &mut rng);
        Ok(Self {
            config,
            sheet,
            audio,
            norm: PerModality::default(),
            frozen: PerModality::default(),
            cca: None,
            meta: ModelMeta {
                seed: seed_value,
                ..Default::default()
            },
        })
    }

    pub fn tower(&self, m: Modality) -> &Tower<F> {
        match m {
            Modality::Sheet => &self.sheet,
            Modality::Audio => &self.audio,
        }
    }

    pub fn tower_mut(&mut self, m: Modality) -> &mut Tower<F> {
        match m {
            Modality::Sheet => &mut self.sheet,
            Modality::Audio => &mut self.audio,
        }
    }

    /// Per-snippet codes for a padded batch, `(batch, max_len, code_dim)`.
    /// Padded positions hold the code of an all-zero snippet.
    pub fn encode_snippets(&self, batch: &PaddedBatch) -> Result<Array3<F>> {
        let enc = &self.tower(batch.modality).encoder;
        let (b, l, r, c) = batch.data.dim();
        if (r, c) != batch.modality.snippet_shape() {
            return Err(argument("batch snippets have the wrong shape"));
        }
        let x = batch
            .data
            .mapv(|v| F::from_f32(v).unwrap())
            .into_shape_with_order((b * l, 1, r, c))
            .unwrap();
        let codes = enc.forward_infer(&x)?;
        Ok(codes.into_shape_with_order((b, l, enc.code_dim())).unwrap())
    }

    /// Context vectors: the GRU state after each sequence's true last step.
    pub fn summarize(&self, modality: Modality, codes: &Array3<F>, lengths: &[usize]) -> Result<Array2<F>> {
        let (b, l, _) = codes.dim();
        if lengths.len() != b || lengths.iter().any(|x| *x == 0 || *x > l) {
            return Err(argument("lengths must be in 1..=max_len, one per sequence"));
        }
        let gru = &self.tower(modality).gru;
        let mut ctx = Array2::zeros((b, gru.hidden));
        for (i, len) in lengths.iter().enumerate() {
            let h = gru.forward_infer(codes.index_axis(Axis(0), i).slice(s![..*len, ..]));
            ctx.row_mut(i).assign(&h);
        }
        Ok(ctx)
    }

    pub fn project(&self, modality: Modality, context: &Array2<F>) -> Result<Array2<F>> {
        if context.ncols() != self.config.hidden {
            return Err(argument("context width differs from the hidden size"));
        }
        Ok(self.tower(modality).proj.forward(context))
    }

    /// Slices and standardises a passage with the stored statistics.
    pub fn prepare(&self, p: PassageRef<'_>, hops: &HopConfig) -> Result<SnippetSequence> {
        let m = p.modality();
        let seq = slice_passage(p, hops.for_modality(m))?;
        normalize_snippets(&seq, *self.norm.get(m))
    }

    /// Embeds prepared sequences of one modality (CCA applied if present).
    pub fn embed_sequences(&self, modality: Modality, seqs: &[&SnippetSequence]) -> Result<Array2<f32>> {
        if seqs.iter().any(|s| s.modality != modality) {
            return Err(argument("sequence modality mismatch"));
        }
        if seqs.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        let (x, lengths) = pack_inputs::<F>(seqs);
        let emb = self.tower(modality).embed_packed(&x, &lengths)?;
        let emb64 = emb.mapv(|v| v.to_f64().unwrap());
        let out = match &self.cca {
            Some(p) => apply_cca(&emb64, modality, p)?,
            None => emb64,
        };
        Ok(out.mapv(|v| v as f32))
    }

    /// slice -> normalise -> encode -> summarise -> project (-> CCA).
    pub fn embed_passage(&self, p: PassageRef<'_>, hops: &HopConfig) -> Result<EmbeddingVector> {
        let seq = self.prepare(p, hops)?;
        let emb = self.embed_sequences(p.modality(), &[&seq])?;
        Ok(EmbeddingVector {
            values: emb.row(0).to_vec(),
            modality: p.modality(),
            passage_id: p.passage_id().to_string(),
        })
    }

    /// Visits trainable parameters; frozen encoders are skipped.
    pub fn visit_trainable(&mut self, f: &mut Visitor<'_, F>) {
        let frozen = self.frozen;
        self.sheet.visit("sheet", !frozen.sheet, f);
        self.audio.visit("audio", !frozen.audio, f);
    }

    /// Visits every parameter, frozen or not.
    pub fn visit_all(&mut self, f: &mut Visitor<'_, F>) {
        self.sheet.visit("sheet", true, f);
        self.audio.visit("audio", true, f);
    }

    pub fn zero_grad(&mut self) {
        self.sheet.zero_grad();
        self.audio.zero_grad();
    }

    /// Copies pretrained encoders (and their input statistics) into this
    /// model; recurrent and projection layers keep their fresh values.
    pub fn load_encoders(&mut self, pretrained: &SnippetModel<F>) -> Result<()> {
        for m in [Modality::Sheet, Modality::Audio] {
            let src = pretrained.encoder(m);
            if src.config != *self.config.encoder(m) {
                return Err(config(format!(
                    "pretrained {m} encoder {:?} does not match {:?}",
                    src.config,
                    self.config.encoder(m)
                )));
            }
            self.tower_mut(m).encoder = src.clone();
            *self.norm.get_mut(m) = *pretrained.norm.get(m);
        }
        Ok(())
    }
}

/// The non-recurrent snippet model: two encoders whose codes are the
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetModel<F: Real> {
    pub sheet: Encoder<F>,
    pub audio: Encoder<F>,
    pub norm: PerModality<NormStats>,
    pub cca: Option<CcaProjection>,
    pub meta: ModelMeta,
}

impl<F: Real> SnippetModel<F> {
    pub fn new(sheet: EncoderConfig, audio: EncoderConfig, seed_value: u64) -> Result<Self> {
        sheet.validate()?;
        audio.validate()?;
        if sheet.code_dim != audio.code_dim {
            return Err(config("both encoders must produce codes of the same size"));
        }
        let mut rng = seed::stream(seed_value, "init");
        Ok(Self {
            sheet: Encoder::new(Modality::Sheet, sheet, &mut rng),
            audio: Encoder::new(Modality::Audio, audio, &mut rng),
            norm: PerModality::default(),
            cca: None,
            meta: ModelMeta {
                seed: seed_value,
                ..Default::default()
            },
        })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder<F> {
        match m {
            Modality::Sheet => &self.sheet,
            Modality::Audio => &self.audio,
        }
    }

    pub fn encoder_mut(&mut self, m: Modality) -> &mut Encoder<F> {
        match m {
            Modality::Sheet => &mut self.sheet,
            Modality::Audio => &mut self.audio,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.sheet.code_dim()
    }

    /// Embeds individual snippets `(n, rows, cols)` (raw, unnormalised).
    pub fn embed_snippets(&self, modality: Modality, snippets: &Array3<f32>) -> Result<Array2<f32>> {
        let stats = *self.norm.get(modality);
        let (n, r, c) = snippets.dim();
        if (r, c) != modality.snippet_shape() {
            return Err(argument("snippet shape mismatch"));
        }
        let inv = 1.0 / stats.std;
        let x = snippets
            .mapv(|v| F::from_f32((v - stats.mean) * inv).unwrap())
            .into_shape_with_order((n, 1, r, c))
            .unwrap();
        let codes = self.encoder(modality).forward_infer(&x)?;
        let c64 = codes.mapv(|v| v.to_f64().unwrap());
        let out = match &self.cca {
            Some(p) => apply_cca(&c64, modality, p)?,
            None => c64,
        };
        Ok(out.mapv(|v| v as f32))
    }

    pub fn visit_all(&mut self, f: &mut Visitor<'_, F>) {
        self.sheet.visit("sheet.encoder", f);
        self.audio.visit("audio.encoder", f);
    }

    pub fn zero_grad(&mut self) {
        self.sheet.zero_grad();
        self.audio.zero_grad();
    }
}
