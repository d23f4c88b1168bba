use rand::Rng as _;

use super::config::ModelConfig;
use super::ModelError;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Conv1dSpec, Graph, Precision, Tensor, Var};

/// Parameters plus architecture of one encoder (teacher or student).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    frozen: bool,
}

/// Forward-pass mode. Dropout is only applied in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl EncoderModel {
    /// Fresh model with every parameter drawn from streams keyed by
    /// `(seed, parameter name)`.
    pub fn build(config: ModelConfig, seed: u64, precision: Precision) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in config.parameter_specs() {
            params.init(name, shape, init, seed, precision);
        }
        Ok(EncoderModel {
            config,
            params,
            frozen: false,
        })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.parameter_specs();
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .names()
                .find(|n| !specs.iter().any(|(s, _, _)| s == n))
                .unwrap_or_default()
                .to_string();
            return Err(ModelError::UnknownParameter(extra));
        }
        // Re-insert in documented order.
        let ordered = specs
            .iter()
            .map(|(n, _, _)| (n.clone(), params.get(n).cloned().unwrap()))
            .collect();
        Ok(EncoderModel {
            config,
            params: ordered,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn depth(&self) -> usize {
        self.config.num_transformer_layers
    }

    /// Exact number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Binds parameters onto `g`, as constants if the model is frozen.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, &self.params, !self.frozen)
    }

    /// Runs the encoder on a 1-D waveform `wave[T_samples]`.
    ///
    /// Returns `upto_layer + 1` hidden states of shape `T'×model_dim`:
    /// index 0 is the input to the transformer stack (post-CNN features with
    /// positional embedding), index `ℓ` the output of transformer layer `ℓ`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        wave: Var,
        upto_layer: usize,
        mut mode: Mode<'_>,
    ) -> Result<Vec<Var>, ModelError> {
        let cfg = &self.config;
        if upto_layer > cfg.num_transformer_layers {
            return Err(ModelError::LayerOutOfRange {
                requested: upto_layer,
                depth: cfg.num_transformer_layers,
            });
        }
        let samples = g.value(wave).numel();
        if cfg.frames_for(samples).is_none() {
            return Err(ModelError::InputTooShort {
                len: samples,
                min: cfg.receptive_field(),
            });
        }

        let mut x = g.reshape(wave, vec![1, samples])?;
        for (i, layer) in cfg.conv_layers.iter().enumerate() {
            let w = p.var(&format!("feature_extractor.conv.{i}.weight"));
            x = g.conv1d(x, w, layer.stride)?;
            if i == 0 {
                let t = g.transpose(x)?;
                let t = g.layer_norm(
                    t,
                    p.var("feature_extractor.norm0.gain"),
                    p.var("feature_extractor.norm0.bias"),
                )?;
                x = g.transpose(t)?;
            }
            x = g.gelu(x)?;
        }

        // [C×T'] → [T'×C] → [T'×D]
        let feats = g.transpose(x)?;
        let feats = g.layer_norm(
            feats,
            p.var("feature_projection.norm.gain"),
            p.var("feature_projection.norm.bias"),
        )?;
        let feats = linear(g, p, "feature_projection.linear", feats)?;
        let feats = dropout(g, feats, cfg.dropout, &mut mode)?;

        let pos = g.transpose(feats)?;
        let pos = g.conv1d_with(
            pos,
            p.var("encoder.pos_conv.weight"),
            Conv1dSpec::same(cfg.pos_conv_kernel, cfg.pos_conv_groups),
        )?;
        let pos = g.transpose(pos)?;
        let pos = g.add(pos, p.var("encoder.pos_conv.bias"))?;
        let pos = g.gelu(pos)?;
        let h = g.add(feats, pos)?;
        let mut h = g.layer_norm(h, p.var("encoder.norm.gain"), p.var("encoder.norm.bias"))?;

        let mut hidden = Vec::with_capacity(upto_layer + 1);
        hidden.push(h);
        for l in 0..upto_layer {
            h = self.transformer_layer(g, p, l, h, &mut mode)?;
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn transformer_layer(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        l: usize,
        h: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let pre = format!("encoder.layers.{l}");
        let q = linear(g, p, &format!("{pre}.attn.q"), h)?;
        let k = linear(g, p, &format!("{pre}.attn.k"), h)?;
        let v = linear(g, p, &format!("{pre}.attn.v"), h)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = g.slice(q, 1, head * dh, dh)?;
            let kh = g.slice(k, 1, head * dh, dh)?;
            let vh = g.slice(v, 1, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat(&heads, 1)?;
        let a = linear(g, p, &format!("{pre}.attn.out"), ctx)?;
        let a = dropout(g, a, cfg.dropout, mode)?;
        let h = g.add(h, a)?;
        let h = g.layer_norm(
            h,
            p.var(&format!("{pre}.attn_norm.gain")),
            p.var(&format!("{pre}.attn_norm.bias")),
        )?;

        let f = linear(g, p, &format!("{pre}.ffn.in"), h)?;
        let f = g.gelu(f)?;
        let f = linear(g, p, &format!("{pre}.ffn.out"), f)?;
        let f = dropout(g, f, cfg.dropout, mode)?;
        let h2 = g.add(h, f)?;
        Ok(g.layer_norm(
            h2,
            p.var(&format!("{pre}.ffn_norm.gain")),
            p.var(&format!("{pre}.ffn_norm.bias")),
        )?)
    }

    /// Evaluation-mode hidden states as plain tensors.
    pub fn forward_hidden(
        &self,
        wave: &Tensor,
        upto_layer: usize,
        precision: Precision,
    ) -> Result<Vec<Tensor>, ModelError> {
        let mut g = Graph::new(precision);
        let p = BoundParams::bind(&mut g, &self.params, false);
        let w = g.constant(wave.clone());
        let hidden = self.forward(&mut g, &p, w, upto_layer, Mode::Eval)?;
        Ok(hidden.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// `x·W + b` for a `[T×in]` input with parameters `{prefix}.weight/bias`.
pub fn linear(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, p.var(&format!("{prefix}.weight")))?;
    Ok(g.add(y, p.var(&format!("{prefix}.bias")))?)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var, ModelError> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    Ok(g.mul(x, m)?)
}
