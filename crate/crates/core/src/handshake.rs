//! Request / match / connect over an in-memory network, with a byte ledger.
//!
//! The degraded agent broadcasts its message, every normal agent answers with
//! one matching score, and the best-scoring agents send their feature maps.
//! Every payload crossing the network is recorded in a [`BandwidthLedger`]
//! at [`BYTES_PER_SCALAR`] bytes per scalar.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{fuse_weighted, top_positions, AgentId, AttentionParams, Key, MatchScores, Message, SelectionWeights};
use crate::error::{Error, Result};
use crate::model::{FeatureMap, Model, Observation};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Wire size of one scalar (32-bit encoding).
pub const BYTES_PER_SCALAR: u64 = 4;

/// Scalars in a relative pose (translation and rotation).
pub const POSE_SCALARS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Request,
    Match,
    Connect,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Request => "request",
            Stage::Match => "match",
            Stage::Connect => "connect",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Message,
    Pose,
    Score,
    FeatureMap,
    CompressedMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// All maps are sent and fused by softmax weights.
    Train,
    /// Only the top-n maps are sent.
    Infer,
    /// All maps are sent and fused by softmax weights at inference.
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandshakeState {
    Idle,
    RequestBroadcast,
    ScoresCollected,
    Connected,
    Done,
}

impl HandshakeState {
    pub fn next(self) -> Option<Self> {
        use HandshakeState::*;
        match self {
            Idle => Some(RequestBroadcast),
            RequestBroadcast => Some(ScoresCollected),
            ScoresCollected => Some(Connected),
            Connected => Some(Done),
            Done => None,
        }
    }

    /// Moves to `to`, which must be the immediate successor.
    pub fn advance(&mut self, to: HandshakeState) -> Result<()> {
        if self.next() != Some(to) {
            return Err(Error::State(format!("illegal handshake transition {self:?} -> {to:?}")));
        }
        *self = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub from: usize,
    pub to: usize,
    pub kind: PayloadKind,
    pub bytes: u64,
}

/// Append-only record of every transmitted payload.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandwidthLedger {
    entries: Vec<LedgerEntry>,
    training_only: bool,
}

impl BandwidthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: Stage, from: AgentId, to: AgentId, kind: PayloadKind, scalars: usize) {
        self.entries.push(LedgerEntry {
            stage,
            from: from.0,
            to: to.0,
            kind,
            bytes: scalars as u64 * BYTES_PER_SCALAR,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn stage_bytes(&self, stage: Stage) -> u64 {
        self.entries.iter().filter(|e| e.stage == stage).map(|e| e.bytes).sum()
    }

    pub fn kbpf(&self) -> f64 {
        ledger_total_kbpf(self)
    }

    /// Set for centralized training traffic, which is never reported as
    /// inference bandwidth.
    pub fn is_training_only(&self) -> bool {
        self.training_only
    }

    pub fn mark_training_only(&mut self) {
        self.training_only = true;
    }

    /// True when no match entry precedes a request entry and no connect
    /// entry precedes a match entry.
    pub fn stages_ordered(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].stage <= w[1].stage)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Kilobytes per frame: total bytes / 1024.
pub fn ledger_total_kbpf(ledger: &BandwidthLedger) -> f64 {
    ledger.total_bytes() as f64 / 1024.0
}

/// Lossless in-memory network with optional injected drops.
#[derive(Debug, Clone, Default)]
pub struct SimNetwork {
    ledger: BandwidthLedger,
    drops: HashSet<(Stage, AgentId)>,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes `agent` fail to send anything during `stage`.
    pub fn inject_drop(&mut self, stage: Stage, agent: AgentId) {
        self.drops.insert((stage, agent));
    }

    /// Delivers `payload` and charges it to the ledger.
    pub fn send(&mut self, stage: Stage, from: AgentId, to: AgentId, kind: PayloadKind, payload: &[f64]) -> Result<Vec<f64>> {
        if self.drops.contains(&(stage, from)) {
            return Err(Error::Timeout {
                stage: stage.to_string(),
                agent: from.0,
            });
        }
        self.ledger.record(stage, from, to, kind, payload.len());
        Ok(payload.to_vec())
    }

    /// Charges a payload of `scalars` values without carrying data.
    pub fn charge(&mut self, stage: Stage, from: AgentId, to: AgentId, kind: PayloadKind, scalars: usize) -> Result<()> {
        if self.drops.contains(&(stage, from)) {
            return Err(Error::Timeout {
                stage: stage.to_string(),
                agent: from.0,
            });
        }
        self.ledger.record(stage, from, to, kind, scalars);
        Ok(())
    }

    pub fn ledger(&self) -> &BandwidthLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> BandwidthLedger {
        self.ledger
    }
}

/// One participant: its id and what it sees.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub id: AgentId,
    pub obs: &'a Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeOutcome {
    pub scores: MatchScores,
    /// Connected agents, best first.
    pub selected: Vec<AgentId>,
    pub received: Vec<FeatureMap>,
    /// Weights applied to `received` when fusing them.
    pub weights: SelectionWeights,
    pub fused: FeatureMap,
    pub ledger: BandwidthLedger,
}

/// Runs the three stages for `target` against `peers`.
///
/// When `with_pose` is set the request also carries the requester's pose.
pub fn run_handshake(
    target: AgentView<'_>,
    peers: &[AgentView<'_>],
    model: &Model,
    mode: Mode,
    with_pose: bool,
    net: &mut SimNetwork,
) -> Result<HandshakeOutcome> {
    let cfg = &model.config;
    if peers.is_empty() {
        return Err(Error::Config("handshake needs at least one normal agent".into()));
    }
    if peers.len() + 1 != cfg.agents {
        return Err(Error::Config(format!(
            "model configured for {} agents, episode has {}",
            cfg.agents,
            peers.len() + 1
        )));
    }
    if !cfg.method.uses_matching() {
        return Err(Error::Config(format!("method {} has no matching stage", cfg.method)));
    }
    let start = net.ledger().entries().len();
    let mut state = HandshakeState::Idle;

    let message = model.gen_message(target.obs)?;
    state.advance(HandshakeState::RequestBroadcast)?;
    let mut inbox = Vec::with_capacity(peers.len());
    for p in peers {
        let received = net.send(Stage::Request, target.id, p.id, PayloadKind::Message, message.values())?;
        if with_pose {
            net.charge(Stage::Request, target.id, p.id, PayloadKind::Pose, POSE_SCALARS)?;
        }
        inbox.push(Message::new(received)?);
    }

    let attention = AttentionParams::from_store(cfg.attention, cfg.message_size, &model.params)?;
    let mut features = Vec::with_capacity(peers.len());
    let mut scores = Vec::with_capacity(peers.len());
    for (p, mu) in peers.iter().zip(&inbox) {
        let (f, kappa) = encode_with_key(model, p.obs)?;
        let s = attention.score(mu, &kappa)?;
        let back = net.send(Stage::Match, p.id, target.id, PayloadKind::Score, &[s])?;
        scores.push(back[0]);
        features.push(f);
    }
    let scores = MatchScores::new(peers.iter().map(|p| p.id).collect(), scores)?;
    state.advance(HandshakeState::ScoresCollected)?;

    let positions = match mode {
        Mode::Train | Mode::Centralized => top_positions(&scores, peers.len())?,
        Mode::Infer => top_positions(&scores, cfg.top_n)?,
    };
    let mut received = Vec::with_capacity(positions.len());
    for &pos in &positions {
        let f = &features[pos];
        let data = net.send(Stage::Connect, peers[pos].id, target.id, PayloadKind::FeatureMap, f.tensor().data())?;
        received.push(FeatureMap::new(Tensor::new(f.tensor().shape(), data)?)?);
    }
    state.advance(HandshakeState::Connected)?;

    let weights = SelectionWeights::restricted(&scores, &positions);
    let fused = if received.len() == 1 {
        received[0].clone()
    } else {
        fuse_weighted(&weights, &received)?
    };
    state.advance(HandshakeState::Done)?;

    let mut ledger = BandwidthLedger {
        entries: net.ledger().entries()[start..].to_vec(),
        training_only: false,
    };
    if mode == Mode::Train {
        ledger.mark_training_only();
    }
    Ok(HandshakeOutcome {
        selected: positions.iter().map(|&p| peers[p].id).collect(),
        scores,
        received,
        weights,
        fused,
        ledger,
    })
}

/// Encoder output and key of one observation, sharing the encoder pass.
pub fn encode_with_key(model: &Model, obs: &Observation) -> Result<(FeatureMap, Key)> {
    let mut tape = Tape::new(&model.params);
    let f = model.encode_on_tape(&mut tape, obs)?;
    let k = model.key_on_tape(&mut tape, f)?;
    Ok((FeatureMap::new(tape.value(f).clone())?, Key::new(tape.value(k).data().to_vec())?))
}
