//! Matching functions between a request message and a local key, softmax
//! fusion weights, and argmax / top-n selection.
//!
//! Three score functions are supported:
//!
//! * general: `μᵀ W_a κ`, with `W_a` of shape `[m, k]`;
//! * scaled dot-product: `μᵀ κ / sqrt(d_n)`, which needs `m == k == d_n`;
//! * additive: `w_aᵀ tanh(W_k κ + W_m μ)`, with a hidden width `h`.
//!
//! The plain functions here operate on values. [`score_on_tape`] records the
//! same computation on a [`Tape`] so it can be trained.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::FeatureMap;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_in_place, Tensor};

/// Index of an agent within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Request vector broadcast by the degraded agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Message(Vec<f64>);

/// Local matching vector of a normal agent. Never transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Key(Vec<f64>);

macro_rules! finite_vector {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.is_empty() {
                    return Err(Error::Config(concat!($what, " must have at least one entry").into()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dimension(concat!($what, " has non-finite entries").into()));
                }
                Ok(Self(values))
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

finite_vector!(Message, "message");
finite_vector!(Key, "key");

impl Message {
    /// The all-ones request used when the message is disabled.
    pub fn ones(m: usize) -> Result<Self> {
        Self::new(vec![1.0; m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    #[default]
    General,
    ScaledDot,
    Additive,
}

impl AttentionVariant {
    pub fn code(self) -> u8 {
        match self {
            Self::General => 0,
            Self::ScaledDot => 1,
            Self::Additive => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::General),
            1 => Ok(Self::ScaledDot),
            2 => Ok(Self::Additive),
            c => Err(Error::Format(format!("unknown attention variant code {c}"))),
        }
    }

    /// Only the general and additive forms allow `m != k`.
    pub fn check_sizes(self, m: usize, k: usize) -> Result<()> {
        if m == 0 || k == 0 {
            return Err(Error::Config("message and key sizes must be at least 1".into()));
        }
        if self == Self::ScaledDot && m != k {
            return Err(Error::Config(format!(
                "scaled dot-product attention requires equal message and key sizes, got m={m}, k={k}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::General => "general",
            Self::ScaledDot => "scaled-dot",
            Self::Additive => "additive",
        })
    }
}

/// Learnable (or fixed) parameters of one matching function.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    General { w_a: Tensor },
    ScaledDot { d_n: usize },
    Additive { w_a: Tensor, w_k: Tensor, w_m: Tensor },
}

impl AttentionParams {
    pub fn variant(&self) -> AttentionVariant {
        match self {
            Self::General { .. } => AttentionVariant::General,
            Self::ScaledDot { .. } => AttentionVariant::ScaledDot,
            Self::Additive { .. } => AttentionVariant::Additive,
        }
    }

    /// Reads the attention parameters registered under `attention.*`.
    pub fn from_store(variant: AttentionVariant, m: usize, store: &ParamStore) -> Result<Self> {
        Ok(match variant {
            AttentionVariant::General => Self::General {
                w_a: store.get("attention.w_a")?.clone(),
            },
            AttentionVariant::ScaledDot => Self::ScaledDot { d_n: m },
            AttentionVariant::Additive => Self::Additive {
                w_a: store.get("attention.w_a")?.clone(),
                w_k: store.get("attention.w_k")?.clone(),
                w_m: store.get("attention.w_m")?.clone(),
            },
        })
    }

    pub fn score(&self, mu: &Message, kappa: &Key) -> Result<f64> {
        match self {
            Self::General { w_a } => match_general(mu, kappa, w_a),
            Self::ScaledDot { d_n } => match_scaled_dot(mu, kappa, *d_n),
            Self::Additive { w_a, w_k, w_m } => match_additive(mu, kappa, w_a, w_k, w_m),
        }
    }
}

/// Default additive hidden width.
pub fn default_hidden(m: usize, k: usize) -> usize {
    m.max(k)
}

/// Registers the parameters `variant` needs under `attention.*`.
pub fn register_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    variant: AttentionVariant,
    m: usize,
    k: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    variant.check_sizes(m, k)?;
    match variant {
        AttentionVariant::General => {
            store.insert_glorot("attention.w_a", &[m, k], k, m, rng)?;
        }
        AttentionVariant::ScaledDot => {}
        AttentionVariant::Additive => {
            store.insert_glorot("attention.w_a", &[hidden], hidden, 1, rng)?;
            store.insert_glorot("attention.w_k", &[hidden, k], k, hidden, rng)?;
            store.insert_glorot("attention.w_m", &[hidden, m], m, hidden, rng)?;
        }
    }
    Ok(())
}

/// `μᵀ W_a κ`.
pub fn match_general(mu: &Message, kappa: &Key, w_a: &Tensor) -> Result<f64> {
    let (m, k) = (mu.len(), kappa.len());
    if w_a.shape() != [m, k] {
        return dim_err(format!("W_a has shape {:?}, expected [{m}, {k}]", w_a.shape()));
    }
    let mut total = 0.0;
    for (i, &mi) in mu.values().iter().enumerate() {
        let row = &w_a.data()[i * k..(i + 1) * k];
        total += mi * row.iter().zip(kappa.values()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// `μᵀ κ / sqrt(d_n)`.
pub fn match_scaled_dot(mu: &Message, kappa: &Key, d_n: usize) -> Result<f64> {
    AttentionVariant::ScaledDot.check_sizes(mu.len(), kappa.len())?;
    if d_n != mu.len() {
        return Err(Error::Config(format!("d_n = {d_n} differs from message size {}", mu.len())));
    }
    let dot: f64 = mu.values().iter().zip(kappa.values()).map(|(a, b)| a * b).sum();
    Ok(dot / (d_n as f64).sqrt())
}

/// `w_aᵀ tanh(W_k κ + W_m μ)`.
pub fn match_additive(mu: &Message, kappa: &Key, w_a: &Tensor, w_k: &Tensor, w_m: &Tensor) -> Result<f64> {
    let h = w_a.len();
    if w_a.rank() != 1 || w_k.shape() != [h, kappa.len()] || w_m.shape() != [h, mu.len()] {
        return dim_err(format!(
            "additive attention shapes w_a {:?}, W_k {:?}, W_m {:?} for m={}, k={}",
            w_a.shape(),
            w_k.shape(),
            w_m.shape(),
            mu.len(),
            kappa.len()
        ));
    }
    let row_dot = |w: &Tensor, r: usize, v: &[f64]| -> f64 {
        let n = v.len();
        w.data()[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()
    };
    Ok((0..h)
        .map(|r| {
            let pre = row_dot(w_k, r, kappa.values()) + row_dot(w_m, r, mu.values());
            w_a.data()[r] * pre.tanh()
        })
        .sum())
}

/// Records the matching score of `mu` and `kappa` on a tape, using the
/// `attention.*` parameters of the tape's store. Returns a `[1]` node.
pub fn score_on_tape(tape: &mut Tape<'_>, variant: AttentionVariant, mu: Var, kappa: Var) -> Result<Var> {
    match variant {
        AttentionVariant::General => {
            let w_a = tape.param("attention.w_a")?;
            let projected = tape.matvec(w_a, kappa)?;
            tape.dot(mu, projected)
        }
        AttentionVariant::ScaledDot => {
            let (m, k) = (tape.value(mu).len(), tape.value(kappa).len());
            variant.check_sizes(m, k)?;
            let d = tape.dot(mu, kappa)?;
            Ok(tape.scale(d, 1.0 / (m as f64).sqrt()))
        }
        AttentionVariant::Additive => {
            let w_a = tape.param("attention.w_a")?;
            let w_k = tape.param("attention.w_k")?;
            let w_m = tape.param("attention.w_m")?;
            let a = tape.matvec(w_k, kappa)?;
            let b = tape.matvec(w_m, mu)?;
            let pre = tape.add(a, b)?;
            let act = tape.tanh(pre);
            tape.dot(w_a, act)
        }
    }
}

/// Scores reported by the normal agents, one per responder.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchScores {
    scores: Vec<f64>,
    agents: Vec<AgentId>,
}

impl MatchScores {
    pub fn new(agents: Vec<AgentId>, scores: Vec<f64>) -> Result<Self> {
        if agents.len() != scores.len() {
            return dim_err(format!("{} agents but {} scores", agents.len(), scores.len()));
        }
        if scores.is_empty() {
            return Err(Error::Config("no normal agents responded".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Dimension("non-finite matching score".into()));
        }
        Ok(Self { scores, agents })
    }

    /// Scores for agents `0..scores.len()`.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        let agents = (0..scores.len()).map(AgentId).collect();
        Self::new(agents, scores)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn weights(&self) -> SelectionWeights {
        let mut w = self.scores.clone();
        softmax_in_place(&mut w);
        SelectionWeights(w)
    }
}

/// Softmax of the matching scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionWeights(Vec<f64>);

impl SelectionWeights {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Softmax restricted to `positions`, renormalised to sum to one.
    pub fn restricted(scores: &MatchScores, positions: &[usize]) -> Self {
        let mut w: Vec<f64> = positions.iter().map(|&p| scores.scores[p]).collect();
        softmax_in_place(&mut w);
        SelectionWeights(w)
    }
}

/// `Σ_i α_i f_i` with `α = softmax(scores)`.
pub fn fuse_softmax(scores: &MatchScores, maps: &[FeatureMap]) -> Result<FeatureMap> {
    if maps.len() != scores.len() {
        return dim_err(format!("{} maps for {} scores", maps.len(), scores.len()));
    }
    fuse_weighted(&scores.weights(), maps)
}

pub(crate) fn fuse_weighted(weights: &SelectionWeights, maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps.first().ok_or_else(|| Error::Dimension("fusion over zero maps".into()))?;
    let mut out = Tensor::zeros(first.tensor().shape());
    for (&w, m) in weights.values().iter().zip(maps) {
        out.axpy(w, m.tensor())?;
    }
    FeatureMap::new(out)
}

/// Positions (into `scores`) of the `n` best scores, best first; ties go to
/// the lower position.
pub fn top_positions(scores: &MatchScores, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > scores.len() {
        return Err(Error::Config(format!("top-n selection needs 1 <= n <= {}, got {n}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .expect("scores are finite")
            .then(scores.agents[a].cmp(&scores.agents[b]))
    });
    order.truncate(n);
    Ok(order)
}

/// Ids of the `n` highest-scoring agents, descending, ties to the lowest id.
pub fn select_argmax(scores: &MatchScores, n: usize) -> Result<Vec<AgentId>> {
    Ok(top_positions(scores, n)?.into_iter().map(|p| scores.agents[p]).collect())
}
