use super::ModelError;
use crate::params::Init;

/// One layer of the convolutional front-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvLayer {
            channels,
            kernel,
            stride,
        }
    }
}

/// Architecture of a CNN front-end followed by a post-norm transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub conv_layers: Vec<ConvLayer>,
    pub model_dim: usize,
    pub num_transformer_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale encoder used by every training run.
    pub fn toy(num_transformer_layers: usize) -> Self {
        ModelConfig {
            conv_layers: vec![ConvLayer::new(32, 10, 5), ConvLayer::new(32, 3, 2)],
            model_dim: 64,
            num_transformer_layers,
            num_heads: 4,
            ffn_dim: 128,
            pos_conv_kernel: 8,
            pos_conv_groups: 4,
            dropout: 0.0,
        }
    }

    pub fn toy_teacher() -> Self {
        Self::toy(4)
    }

    pub fn toy_student() -> Self {
        Self::toy(2)
    }

    /// The 12-layer BASE configuration of the teacher family. Only used for
    /// parameter accounting.
    pub fn base_reference() -> Self {
        let mut conv_layers = vec![ConvLayer::new(512, 10, 5)];
        conv_layers.extend([ConvLayer::new(512, 3, 2); 4]);
        conv_layers.extend([ConvLayer::new(512, 2, 2); 2]);
        ModelConfig {
            conv_layers,
            model_dim: 768,
            num_transformer_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            dropout: 0.1,
        }
    }

    /// BASE front-end with a two-layer transformer stack.
    pub fn student_reference() -> Self {
        ModelConfig {
            num_transformer_layers: 2,
            ..Self::base_reference()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                return bad(format!("conv layer {i} has a zero extent"));
            }
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("model_dim, num_heads and ffn_dim must be positive".into());
        }
        if self.num_transformer_layers == 0 {
            return bad("num_transformer_layers must be at least 1".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.pos_conv_kernel == 0
            || self.pos_conv_groups == 0
            || self.model_dim % self.pos_conv_groups != 0
        {
            return bad(format!(
                "positional conv needs kernel > 0 and groups dividing model_dim {}",
                self.model_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Channels of the last conv layer.
    pub fn conv_dim(&self) -> usize {
        self.conv_layers.last().map_or(0, |c| c.channels)
    }

    /// Shortest waveform that yields one output frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers
            .iter()
            .rev()
            .fold(1, |len, c| (len - 1) * c.stride + c.kernel)
    }

    /// Number of frames produced from `samples` input samples, or `None` if
    /// the input is too short for some layer.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(samples, |len, c| {
            (len >= c.kernel).then(|| (len - c.kernel) / c.stride + 1)
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Every parameter in enumeration order: name, shape, initializer.
    ///
    /// Order: conv front-end, first-block norm, feature projection,
    /// positional conv, encoder norm, then each transformer layer
    /// (q, k, v, out projections, attention norm, FFN in/out, FFN norm).
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));
        let mut in_ch = 1;
        for (i, c) in self.conv_layers.iter().enumerate() {
            let fan_in = (in_ch * c.kernel) as f64;
            push(
                format!("feature_extractor.conv.{i}.weight"),
                vec![c.channels, in_ch, c.kernel],
                Init::Normal((2.0 / fan_in).sqrt()),
            );
            if i == 0 {
                push("feature_extractor.norm0.gain".into(), vec![c.channels], Init::Ones);
                push("feature_extractor.norm0.bias".into(), vec![c.channels], Init::Zeros);
            }
            in_ch = c.channels;
        }
        let (c, d) = (self.conv_dim(), self.model_dim);
        push("feature_projection.norm.gain".into(), vec![c], Init::Ones);
        push("feature_projection.norm.bias".into(), vec![c], Init::Zeros);
        linear(&mut push, "feature_projection.linear", c, d);

        let per_group = d / self.pos_conv_groups;
        push(
            "encoder.pos_conv.weight".into(),
            vec![d, per_group, self.pos_conv_kernel],
            Init::Normal(1.0 / ((per_group * self.pos_conv_kernel) as f64).sqrt()),
        );
        push("encoder.pos_conv.bias".into(), vec![d], Init::Zeros);
        push("encoder.norm.gain".into(), vec![d], Init::Ones);
        push("encoder.norm.bias".into(), vec![d], Init::Zeros);

        for l in 0..self.num_transformer_layers {
            let p = format!("encoder.layers.{l}");
            for proj in ["q", "k", "v", "out"] {
                linear(&mut push, &format!("{p}.attn.{proj}"), d, d);
            }
            push(format!("{p}.attn_norm.gain"), vec![d], Init::Ones);
            push(format!("{p}.attn_norm.bias"), vec![d], Init::Zeros);
            linear(&mut push, &format!("{p}.ffn.in"), d, self.ffn_dim);
            linear(&mut push, &format!("{p}.ffn.out"), self.ffn_dim, d);
            push(format!("{p}.ffn_norm.gain"), vec![d], Init::Ones);
            push(format!("{p}.ffn_norm.bias"), vec![d], Init::Zeros);
        }
        specs
    }

    /// Parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        self.parameter_specs()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// Weight `[in × out]` with LeCun-normal init plus a zero bias `[out]`.
fn linear(push: &mut impl FnMut(String, Vec<usize>, Init), prefix: &str, fan_in: usize, fan_out: usize) {
    push(
        format!("{prefix}.weight"),
        vec![fan_in, fan_out],
        Init::Normal(1.0 / (fan_in as f64).sqrt()),
    );
    push(format!("{prefix}.bias"), vec![fan_out], Init::Zeros);
}

/// Name prefix shared by all parameters of transformer layer `l` (0-based).
pub fn layer_prefix(l: usize) -> String {
    format!("encoder.layers.{l}.")
}

/// True for parameters that belong to the convolutional front-end, the
/// feature projection or the positional embedding.
pub fn is_front_end(name: &str) -> bool {
    !name.starts_with("encoder.layers.")
}
