//! VGG-style snippet encoder: four blocks of two 3x3 conv + BN + ELU, each
//! followed by 2x2 max pooling, then a 1x1 conv + BN + ELU and a fully
//! connected layer + ELU.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Result};
use crate::geometry::Modality;
use crate::nn::conv::{ConvBnElu, ConvCache};
use crate::nn::linear::Linear;
use crate::nn::pool::{max_pool2, max_pool2_backward};
use crate::nn::{elu, elu_grad_from_output, Real, Visitor};
use crate::seed::Rng;

/// Snippets per inference chunk; bounds peak memory.
const INFER_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature maps of the four 3x3 blocks.
    pub widths: [usize; 4],
    /// Feature maps of the final 1x1 convolution.
    pub proj_maps: usize,
    /// Output size of the fully connected layer.
    pub code_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [24, 48, 96, 96],
            proj_maps: 32,
            code_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| *w == 0) || self.proj_maps == 0 || self.code_dim == 0 {
            return Err(config("encoder widths must be positive"));
        }
        Ok(())
    }

    /// Spatial size after the four floor-division poolings.
    pub fn pooled_shape(modality: Modality) -> (usize, usize) {
        let (mut h, mut w) = modality.snippet_shape();
        for _ in 0..4 {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Flattened length fed to the fully connected layer.
    pub fn flat_len(&self, modality: Modality) -> usize {
        let (h, w) = Self::pooled_shape(modality);
        h * w * self.proj_maps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F: Real> {
    pub modality: Modality,
    pub config: EncoderConfig,
    /// Eight 3x3 layers followed by the 1x1 layer.
    pub convs: Vec<ConvBnElu<F>>,
    pub fc: Linear<F>,
}

enum Stage<F> {
    Conv {
        layer: usize,
        input: usize,
        output: usize,
        cache: ConvCache<F>,
    },
    Pool {
        input: usize,
        argmax: Vec<u32>,
    },
}

/// Activations retained by a training forward pass.
pub struct EncoderCache<F> {
    tensors: Vec<Array4<F>>,
    stages: Vec<Stage<F>>,
    flat: Array2<F>,
    codes: Array2<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new(modality: Modality, config: EncoderConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::with_capacity(9);
        let mut in_ch = 1;
        for w in config.widths {
            convs.push(ConvBnElu::new(in_ch, w, 3, rng));
            convs.push(ConvBnElu::new(w, w, 3, rng));
            in_ch = w;
        }
        convs.push(ConvBnElu::new(in_ch, config.proj_maps, 1, rng));
        let fc = Linear::new(config.flat_len(modality), config.code_dim, rng);
        Self {
            modality,
            config,
            convs,
            fc,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.modality.snippet_shape() {
            return Err(argument(format!(
                "{} encoder expects (n, 1, {:?}), got (n, {c}, {h}, {w})",
                self.modality,
                self.modality.snippet_shape()
            )));
        }
        Ok(())
    }

    /// Flattened features right before the fully connected layer.
    pub fn features_infer(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let mut cur = x.to_owned();
        for b in 0..4 {
            cur = self.convs[2 * b].forward_infer(&cur);
            cur = self.convs[2 * b + 1].forward_infer(&cur);
            cur = max_pool2(&cur).0;
        }
        cur = self.convs[8].forward_infer(&cur);
        let n = cur.len_of(Axis(0));
        let flat_len = cur.len() / n.max(1);
        Ok(cur.into_shape_with_order((n, flat_len)).unwrap())
    }

    /// Inference-mode codes, `(n, code_dim)`.
    pub fn forward_infer(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let n = x.len_of(Axis(0));
        let mut out = Array2::zeros((n, self.code_dim()));
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let flat = self.features_infer(&chunk)?;
            let codes = self.fc.forward(&flat).mapv(elu);
            out.slice_mut(ndarray::s![start..end, ..]).assign(&codes);
            start = end;
        }
        Ok(out)
    }

    /// Training-mode forward over a whole batch of snippets.
    pub fn forward_train(&mut self, x: Array4<F>) -> Result<(Array2<F>, EncoderCache<F>)> {
        self.check_input(&x)?;
        let mut tensors = vec![x];
        let mut stages = Vec::with_capacity(13);
        let conv = |enc: &mut Self, tensors: &mut Vec<Array4<F>>, stages: &mut Vec<Stage<F>>, layer: usize| {
            let input = tensors.len() - 1;
            let (a, cache) = enc.convs[layer].forward_train(&tensors[input]);
            tensors.push(a);
            stages.push(Stage::Conv {
                layer,
                input,
                output: input + 1,
                cache,
            });
        };
        for b in 0..4 {
            conv(self, &mut tensors, &mut stages, 2 * b);
            conv(self, &mut tensors, &mut stages, 2 * b + 1);
            let input = tensors.len() - 1;
            let (p, argmax) = max_pool2(&tensors[input]);
            tensors.push(p);
            stages.push(Stage::Pool { input, argmax });
        }
        conv(self, &mut tensors, &mut stages, 8);
        let last = tensors.last().unwrap();
        let n = last.len_of(Axis(0));
        let flat = last
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, last.len() / n))
            .unwrap();
        let codes = self.fc.forward(&flat).mapv(elu);
        Ok((
            codes.clone(),
            EncoderCache {
                tensors,
                stages,
                flat,
                codes,
            },
        ))
    }

    /// Accumulates gradients for all encoder parameters.
    pub fn backward(&mut self, cache: EncoderCache<F>, dcodes: &Array2<F>) {
        let EncoderCache {
            mut tensors,
            stages,
            flat,
            codes,
        } = cache;
        let dpre = dcodes * &codes.mapv(elu_grad_from_output);
        let dflat = self.fc.backward(&flat, &dpre);
        let last_shape = tensors.last().unwrap().dim();
        let mut grad = dflat.into_shape_with_order(last_shape).unwrap();
        for stage in stages.into_iter().rev() {
            match stage {
                Stage::Conv {
                    layer,
                    input,
                    output,
                    cache,
                } => {
                    let out = tensors.pop().unwrap();
                    debug_assert_eq!(tensors.len(), output);
                    let need_dx = input > 0;
                    match self.convs[layer].backward(&tensors[input], &out, cache, grad, need_dx) {
                        Some(dx) => grad = dx,
                        None => return,
                    }
                }
                Stage::Pool { input, argmax } => {
                    tensors.pop();
                    grad = max_pool2_backward(&grad, &argmax, tensors[input].dim());
                }
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, F>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
        self.fc.visit(&format!("{prefix}.fc"), f);
    }

    /// Non-trainable batch-norm statistics, in a fixed order.
    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("{prefix}.conv{i}.running_mean"), c.running_mean.as_slice_mut().unwrap());
            f(&format!("{prefix}.conv{i}.running_var"), c.running_var.as_slice_mut().unwrap());
        }
    }

    pub fn zero_grad(&mut self) {
        self.convs.iter_mut().for_each(ConvBnElu::zero_grad);
        self.fc.zero_grad();
    }
}
