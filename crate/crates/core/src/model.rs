//! The CAT-U-Net encoder/decoder.
//!
//! Layout for `depth = n`:
//!
//! ```text
//! enc_j   (j = 1..n):  conv -> relu -> conv -> relu = skip_j, then maxpool 2x2
//! bottleneck:          conv -> relu                    = D_0
//! dec_k   (k = 1..n):  upsample(D_{k-1}) ++ skip_{n-k+1} -> conv -> relu -> dropout = D_k
//! head:                1x1 conv on D_n
//! ```
//!
//! `++` is channel concatenation; the skip partner of decoder level `k` is
//! always at the upsampled resolution. Convolutions use "same" padding.
//! Encoder level `j` has `base * growth^(j-1)` channels, the bottleneck
//! `base * growth^n`, and decoder level `k` mirrors encoder level `n-k+1`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dParams, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatUNetConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub kernel_size: usize,
    pub dropout_rate: f32,
    pub output_channels: usize,
}

impl Default for CatUNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 256,
            depth: 3,
            base_channels: 16,
            channel_growth: 2,
            kernel_size: 3,
            dropout_rate: 0.5,
            output_channels: 1,
        }
    }
}

/// One convolution of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }
}

impl CatUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::invalid("model config", detail));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.channel_growth == 0 {
            return fail("base_channels and channel_growth must be at least 1".into());
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return fail("input and output channels must be at least 1".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let Some(scale) = u32::try_from(self.depth)
            .ok()
            .and_then(|d| 1usize.checked_shl(d))
        else {
            return fail(format!("depth {} too large", self.depth));
        };
        if self.input_size == 0 || !self.input_size.is_multiple_of(scale) {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^depth = {scale}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Channels of encoder levels 1..=depth, followed by the bottleneck.
    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| self.base_channels * self.channel_growth.pow(i as u32))
            .collect()
    }

    /// Every convolution in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let ladder = self.channel_ladder();
        let k = self.kernel_size;
        let n = self.depth;
        let mut layers = Vec::with_capacity(2 * n + 2);
        let mut cin = self.input_channels;
        for j in 1..=n {
            let c = ladder[j - 1];
            layers.push(LayerSpec::new(format!("enc{j}.conv1"), cin, c, k));
            layers.push(LayerSpec::new(format!("enc{j}.conv2"), c, c, k));
            cin = c;
        }
        layers.push(LayerSpec::new("bottleneck.conv", cin, ladder[n], k));
        let mut below = ladder[n];
        for lvl in 1..=n {
            let partner = ladder[n - lvl];
            layers.push(LayerSpec::new(
                format!("dec{lvl}.conv"),
                below + partner,
                partner,
                k,
            ));
            below = partner;
        }
        layers.push(LayerSpec::new("head", below, self.output_channels, 1));
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::param_count).sum()
    }
}

/// Parameters and configuration of a CAT-U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct CatUNetModel {
    config: CatUNetConfig,
    params: IndexMap<String, Tensor>,
}

/// Node handles from one forward pass over a [`Graph`].
#[derive(Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    /// Concatenated feature map of every decoder level, outermost last.
    pub concats: Vec<NodeId>,
    /// Parameter name to graph node, in registration order.
    pub params: Vec<(String, NodeId)>,
}

impl CatUNetModel {
    /// He-normal weights drawn from the init stream of `seed`; zero biases.
    pub fn build(config: CatUNetConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, &mut Rng::new(seed, Stream::Init))
    }

    pub fn build_with(config: CatUNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for layer in config.layers() {
            let fan_in = layer.in_channels * layer.kernel * layer.kernel;
            let std = (2.0 / fan_in as f32).sqrt();
            let weight = Tensor::from_fn(&layer.weight_shape(), |_| std * rng.normal());
            params.insert(layer.weight_name(), weight);
            params.insert(layer.bias_name(), Tensor::zeros(&[layer.out_channels]));
        }
        Ok(Self { config, params })
    }

    /// Assembles a model from explicit parameters, which must match the
    /// layout implied by `config` exactly (names, order and shapes).
    pub fn from_parts(config: CatUNetConfig, params: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.layers();
        let mut names = params.iter();
        for layer in &expected {
            for (name, shape) in [
                (layer.weight_name(), layer.weight_shape().to_vec()),
                (layer.bias_name(), vec![layer.out_channels]),
            ] {
                match names.next() {
                    Some((n, t)) if *n == name && t.shape() == shape.as_slice() => {}
                    Some((n, t)) => {
                        return Err(Error::shape(
                            "model parameters",
                            format!("expected `{name}` {shape:?}, found `{n}` {:?}", t.shape()),
                        ))
                    }
                    None => {
                        return Err(Error::shape(
                            "model parameters",
                            format!("missing `{name}`"),
                        ));
                    }
                }
            }
        }
        if let Some((extra, _)) = names.next() {
            return Err(Error::shape(
                "model parameters",
                format!("unexpected `{extra}`"),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CatUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [_, c, h, w] = batch.dims4("model input")?;
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected [N, {}, {s}, {s}], got {:?}",
                    self.config.input_channels,
                    batch.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Adds every parameter to `g` in registration order, as trainable
    /// leaves when `track_grad` is set and as constants otherwise.
    pub fn register_params(&self, g: &mut Graph, track_grad: bool) -> Vec<NodeId> {
        self.params
            .values()
            .map(|t| {
                if track_grad {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect()
    }

    /// Records a forward pass into `g`, registering parameters first.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        training: bool,
        track_grad: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let ids = self.register_params(g, track_grad);
        let (output, concats) = self.wire(g, input, &ids, training, rng)?;
        Ok(ForwardPass {
            output,
            concats,
            params: self.params.keys().cloned().zip(ids).collect(),
        })
    }

    /// Wires the network over already-registered parameter nodes, given in
    /// the order of [`CatUNetModel::params`]. Returns the output node and
    /// the concatenation node of each decoder level.
    pub fn wire(
        &self,
        g: &mut Graph,
        input: NodeId,
        params: &[NodeId],
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_batch(g.value(input))?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "model parameters",
                format!(
                    "{} nodes for {} parameters",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        let same = Conv2dParams {
            stride: 1,
            padding: self.config.kernel_size / 2,
        };
        // Layers consume (weight, bias) pairs in registration order.
        let mut next = params.chunks_exact(2);
        let mut conv = |g: &mut Graph, x: NodeId, p: Conv2dParams| -> Result<NodeId> {
            let pair = next.next().expect("one (weight, bias) pair per layer");
            g.conv2d(x, pair[0], pair[1], p)
        };

        let n = self.config.depth;
        let mut skips = Vec::with_capacity(n);
        let mut x = input;
        for _ in 1..=n {
            let h = conv(g, x, same)?;
            let h = g.relu(h);
            let h = conv(g, h, same)?;
            let h = g.relu(h);
            skips.push(h);
            x = g.maxpool2d(h, 2, 2)?;
        }
        let h = conv(g, x, same)?;
        let mut d = g.relu(h);

        let mut concats = Vec::with_capacity(n);
        for lvl in 1..=n {
            let up = g.upsample_nearest(d, 2)?;
            let partner = skips[n - lvl];
            let (us, ps) = (g.value(up).shape(), g.value(partner).shape());
            if us[2..] != ps[2..] {
                return Err(Error::shape(
                    format!("dec{lvl}"),
                    format!("upsampled {us:?} and encoder partner {ps:?} differ spatially"),
                ));
            }
            let cat = g.concat_channels(up, partner)?;
            concats.push(cat);
            let h = conv(g, cat, same)?;
            let h = g.relu(h);
            d = g.dropout(h, self.config.dropout_rate, training, rng)?;
        }
        let output = conv(g, d, Conv2dParams::default())?;
        Ok((output, concats))
    }

    /// Reconstruction of `batch` (`[N, C, S, S]`). Dropout is applied only
    /// when `training` is set, drawing from `rng`.
    pub fn forward(&self, batch: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let pass = self.forward_graph(&mut g, x, training, false, rng)?;
        Ok(g.into_value(pass.output))
    }

    /// Inference-mode reconstruction.
    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        // Dropout is inactive at inference, so the stream is never drawn from.
        self.forward(batch, false, &mut Rng::new(0, Stream::Dropout))
    }

    /// L2 norm of the concatenated feature map at each decoder level
    /// (inference mode), outermost level last.
    pub fn feature_norms(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let pass =
            self.forward_graph(&mut g, x, false, false, &mut Rng::new(0, Stream::Dropout))?;
        Ok(pass
            .concats
            .iter()
            .map(|&id| g.value(id).l2_norm())
            .collect())
    }
}
