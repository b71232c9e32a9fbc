//! Per-agent learnable modules: image encoder, message and key generators,
//! and the segmentation decoder.
//!
//! Every agent evaluates the same encoder and key generator. The message
//! generator and decoder belong to the degraded (requesting) agent, so the
//! parameter count does not depend on how many agents take part.
//!
//! Architecture, for an observation of `C_in × H × W`:
//!
//! * encoder: conv3x3(C_in→d_c, /2), ReLU, conv3x3(d_c→d_c, /2), ReLU,
//!   giving a `d_c × H/4 × W/4` feature map;
//! * message / key: a linear head over the flattened feature map;
//! * decoder: channel concat, conv3x3, ReLU, upsample, conv3x3, ReLU,
//!   upsample, conv3x3(→C) producing `C × H × W` logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionVariant, Key, Message};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One agent's view: a `channels × H × W` grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    grid: Tensor,
    degraded: bool,
}

impl Observation {
    pub fn new(grid: Tensor, degraded: bool) -> Result<Self> {
        let (_, h, w) = grid.chw()?;
        for (name, n) in [("height", h), ("width", w)] {
            if n < 8 || !n.is_power_of_two() {
                return Err(Error::Dimension(format!("observation {name} must be a power of two >= 8, got {n}")));
            }
        }
        if grid.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dimension("observation values must lie in [0, 1]".into()));
        }
        Ok(Self { grid, degraded })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.grid.shape()[1]
    }
}

/// Encoder output, `d_c × d_f × d_f`. This is what the connect stage transmits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.chw()?;
        if !t.all_finite() {
            return Err(Error::Dimension("feature map has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Number of scalars sent when this map is transmitted.
    pub fn scalar_count(&self) -> usize {
        self.0.len()
    }
}

/// Segmentation logits, `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    logits: Tensor,
}

impl Prediction {
    pub fn new(logits: Tensor) -> Result<Self> {
        logits.chw()?;
        if !logits.all_finite() {
            return Err(Error::Dimension("non-finite logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Per-cell argmax; ties resolve to the lower class id.
    pub fn labels(&self) -> Vec<usize> {
        let (c, h, w) = self.logits.chw().expect("validated on construction");
        let hw = h * w;
        let d = self.logits.data();
        (0..hw)
            .map(|cell| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * hw + cell] > d[best * hw + cell] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Every method compared in the evaluation, ours included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    SingleNormal,
    SingleDegraded,
    CatAll,
    AttentionCentralized,
    Compression,
    RandomSelection,
    #[default]
    OursWithMsg,
    OursWithoutMsg,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        Self::SingleNormal,
        Self::SingleDegraded,
        Self::CatAll,
        Self::AttentionCentralized,
        Self::Compression,
        Self::RandomSelection,
        Self::OursWithMsg,
        Self::OursWithoutMsg,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown method code {code}")))
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::SingleNormal => "single-normal",
            Self::SingleDegraded => "single-degraded",
            Self::CatAll => "cat-all",
            Self::AttentionCentralized => "attention-centralized",
            Self::Compression => "compression",
            Self::RandomSelection => "random-selection",
            Self::OursWithMsg => "ours-with-msg",
            Self::OursWithoutMsg => "ours-without-msg",
        }
    }

    /// Human-readable name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::SingleNormal => "Single Normal",
            Self::SingleDegraded => "Single Degraded",
            Self::CatAll => "CatAll",
            Self::AttentionCentralized => "Attention",
            Self::Compression => "Compression",
            Self::RandomSelection => "Random Selection",
            Self::OursWithMsg => "Ours w/ msg",
            Self::OursWithoutMsg => "Ours w/o msg",
        }
    }

    /// Whether the method learns message/key/attention parameters.
    pub fn uses_matching(self) -> bool {
        matches!(self, Self::OursWithMsg | Self::OursWithoutMsg | Self::AttentionCentralized)
    }

    pub fn is_single(self) -> bool {
        matches!(self, Self::SingleNormal | Self::SingleDegraded)
    }

    /// Methods that transmit every normal agent's features.
    pub fn is_centralized(self) -> bool {
        matches!(self, Self::CatAll | Self::AttentionCentralized | Self::Compression)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Sizes and architecture choices shared by every agent's model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Message size `m`.
    pub message_size: usize,
    /// Key size `k`.
    pub key_size: usize,
    /// Feature channels `d_c`.
    pub feature_channels: usize,
    /// Class count `C`.
    pub classes: usize,
    pub attention: AttentionVariant,
    /// Hidden width of additive attention; `max(m, k)` when absent.
    pub additive_hidden: Option<usize>,
    /// Agents connected to at inference (`n`).
    pub top_n: usize,
    /// Total agents `N`, the degraded one included.
    pub agents: usize,
    pub obs_channels: usize,
    /// Observation height and width.
    pub obs_size: usize,
    pub method: BaselineKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            message_size: 8,
            key_size: 64,
            feature_channels: 16,
            classes: 6,
            attention: AttentionVariant::General,
            additive_hidden: None,
            top_n: 1,
            agents: 5,
            obs_channels: 3,
            obs_size: 16,
            method: BaselineKind::OursWithMsg,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.check_sizes(self.message_size, self.key_size)?;
        if self.agents < 2 {
            return Err(Error::Config(format!("need at least 2 agents, got {}", self.agents)));
        }
        if self.top_n == 0 || self.top_n > self.agents - 1 {
            return Err(Error::Config(format!(
                "top_n must lie in 1..={}, got {}",
                self.agents - 1,
                self.top_n
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.obs_size < 8 || !self.obs_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "observation size must be a power of two >= 8, got {}",
                self.obs_size
            )));
        }
        if self.feature_channels == 0 || self.obs_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.method == BaselineKind::Compression && !self.feature_channels.is_multiple_of(4) {
            return Err(Error::Config("compression needs feature channels divisible by 4".into()));
        }
        if self.additive_hidden == Some(0) {
            return Err(Error::Config("additive hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extent `d_f` of a feature map.
    pub fn feature_size(&self) -> usize {
        self.obs_size / 4
    }

    pub fn feature_scalars(&self) -> usize {
        self.feature_channels * self.feature_size() * self.feature_size()
    }

    pub fn compressed_channels(&self) -> usize {
        self.feature_channels / 4
    }

    pub fn hidden(&self) -> usize {
        self.additive_hidden
            .unwrap_or_else(|| attention::default_hidden(self.message_size, self.key_size))
    }

    pub fn normal_agents(&self) -> usize {
        self.agents - 1
    }

    /// Input channels of the first decoder convolution.
    pub fn decoder_in_channels(&self) -> usize {
        let dc = self.feature_channels;
        match self.method {
            BaselineKind::CatAll => self.agents * dc,
            BaselineKind::Compression => dc + self.normal_agents() * self.compressed_channels(),
            _ => 2 * dc,
        }
    }

    /// Expected shape of every parameter this configuration owns.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let dc = self.feature_channels;
        let flat = self.feature_scalars();
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("encoder.conv1.weight".into(), vec![dc, self.obs_channels, 3, 3]),
            ("encoder.conv1.bias".into(), vec![dc]),
            ("encoder.conv2.weight".into(), vec![dc, dc, 3, 3]),
            ("encoder.conv2.bias".into(), vec![dc]),
        ];
        if self.method.uses_matching() {
            let (m, k) = (self.message_size, self.key_size);
            v.push(("message.weight".into(), vec![flat, m]));
            v.push(("message.bias".into(), vec![m]));
            v.push(("key.weight".into(), vec![flat, k]));
            v.push(("key.bias".into(), vec![k]));
            match self.attention {
                AttentionVariant::General => v.push(("attention.w_a".into(), vec![m, k])),
                AttentionVariant::ScaledDot => {}
                AttentionVariant::Additive => {
                    let h = self.hidden();
                    v.push(("attention.w_a".into(), vec![h]));
                    v.push(("attention.w_k".into(), vec![h, k]));
                    v.push(("attention.w_m".into(), vec![h, m]));
                }
            }
        }
        if self.method == BaselineKind::Compression {
            let q = self.compressed_channels();
            v.push(("compress.conv1.weight".into(), vec![q, dc, 3, 3]));
            v.push(("compress.conv1.bias".into(), vec![q]));
            v.push(("compress.conv2.weight".into(), vec![q, q, 3, 3]));
            v.push(("compress.conv2.bias".into(), vec![q]));
        }
        v.extend([
            ("decoder.conv1.weight".into(), vec![dc, self.decoder_in_channels(), 3, 3]),
            ("decoder.conv1.bias".into(), vec![dc]),
            ("decoder.conv2.weight".into(), vec![dc, dc, 3, 3]),
            ("decoder.conv2.bias".into(), vec![dc]),
            ("decoder.conv3.weight".into(), vec![self.classes, dc, 3, 3]),
            ("decoder.conv3.bias".into(), vec![self.classes]),
        ]);
        v
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn fans(name: &str, shape: &[usize]) -> (usize, usize) {
    match shape {
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        [rows, cols] if name.ends_with(".weight") => (*rows, *cols),
        // attention matrices map the key side (cols) to the output side (rows)
        [rows, cols] => (*cols, *rows),
        [n] => (*n, 1),
        _ => (1, 1),
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            if name.ends_with(".bias") {
                params.insert_zeros(name, &shape)?;
            } else {
                let (fi, fo) = fans(&name, &shape);
                params.insert_glorot(name, &shape, fi, fo, rng)?;
            }
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every expected shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        for (name, shape) in &expected {
            let found = params.get(name).map_err(|_| Error::Shape {
                field: name.clone(),
                expected: format!("{shape:?}"),
                found: "missing".into(),
            })?;
            if found.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    field: name.clone(),
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", found.shape()),
                });
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .names()
                .find(|n| !expected.iter().any(|(e, _)| e == n))
                .unwrap_or("?")
                .to_string();
            return Err(Error::Shape {
                field: extra,
                expected: "absent".into(),
                found: "present".into(),
            });
        }
        Ok(Self { config, params })
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        let c = &self.config;
        if obs.channels() != c.obs_channels || obs.size() != c.obs_size || obs.grid().shape()[2] != c.obs_size {
            return Err(Error::Dimension(format!(
                "observation {:?} does not match configured {}x{}x{}",
                obs.grid().shape(),
                c.obs_channels,
                c.obs_size,
                c.obs_size
            )));
        }
        Ok(())
    }

    pub fn encode(&self, obs: &Observation) -> Result<FeatureMap> {
        let mut tape = Tape::new(&self.params);
        let f = self.encode_on_tape(&mut tape, obs)?;
        FeatureMap::new(tape.value(f).clone())
    }

    pub fn gen_message(&self, obs: &Observation) -> Result<Message> {
        let mut tape = Tape::new(&self.params);
        let f = self.encode_on_tape(&mut tape, obs)?;
        let m = self.message_on_tape(&mut tape, f)?;
        Message::new(tape.value(m).data().to_vec())
    }

    pub fn gen_key(&self, obs: &Observation) -> Result<Key> {
        let mut tape = Tape::new(&self.params);
        let f = self.encode_on_tape(&mut tape, obs)?;
        let k = self.key_on_tape(&mut tape, f)?;
        Key::new(tape.value(k).data().to_vec())
    }

    /// Decodes `[f_target; f_received]` into logits.
    pub fn decode(&self, target: &FeatureMap, received: &FeatureMap) -> Result<Prediction> {
        if target.tensor().shape() != received.tensor().shape() {
            return Err(Error::Dimension(format!(
                "decoder inputs {:?} and {:?} differ",
                target.tensor().shape(),
                received.tensor().shape()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let a = tape.input(target.tensor().clone());
        let b = tape.input(received.tensor().clone());
        let y = self.decode_on_tape(&mut tape, &[a, b])?;
        Prediction::new(tape.value(y).clone())
    }

    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, obs: &Observation) -> Result<Var> {
        self.check_obs(obs)?;
        let x = tape.input(obs.grid().clone());
        self.encode_var(tape, x)
    }

    pub fn encode_var(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = conv_block(tape, x, "encoder.conv1", 2, true)?;
        conv_block(tape, h, "encoder.conv2", 2, true)
    }

    fn head(&self, tape: &mut Tape<'_>, features: Var, prefix: &str) -> Result<Var> {
        let flat = tape.reshape(features, &[1, self.config.feature_scalars()])?;
        let w = tape.param(&format!("{prefix}.weight"))?;
        let b = tape.param(&format!("{prefix}.bias"))?;
        let y = tape.linear(flat, w, b)?;
        let n = tape.value(y).len();
        tape.reshape(y, &[n])
    }

    /// Request message from the requester's features; all ones when the
    /// message is disabled.
    pub fn message_on_tape(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        if self.config.method == BaselineKind::OursWithoutMsg {
            return Ok(tape.input(Tensor::full(&[self.config.message_size], 1.0)));
        }
        self.head(tape, features, "message")
    }

    pub fn key_on_tape(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        self.head(tape, features, "key")
    }

    pub fn score_on_tape(&self, tape: &mut Tape<'_>, message: Var, key: Var) -> Result<Var> {
        attention::score_on_tape(tape, self.config.attention, message, key)
    }

    /// Two extra convolutions that cut channels to a quarter before transmit.
    pub fn compress_on_tape(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        let h = conv_block(tape, features, "compress.conv1", 1, true)?;
        conv_block(tape, h, "compress.conv2", 1, false)
    }

    /// Channel-concatenates `parts` and runs the decoder.
    pub fn decode_on_tape(&self, tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
        let x = tape.concat_channels(parts)?;
        let h = conv_block(tape, x, "decoder.conv1", 1, true)?;
        let h = tape.upsample2x(h)?;
        let h = conv_block(tape, h, "decoder.conv2", 1, true)?;
        let h = tape.upsample2x(h)?;
        conv_block(tape, h, "decoder.conv3", 1, false)
    }
}

fn conv_block(tape: &mut Tape<'_>, x: Var, prefix: &str, stride: usize, relu: bool) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    let y = tape.conv3x3(x, w, b, stride)?;
    Ok(if relu { tape.relu(y) } else { y })
}
