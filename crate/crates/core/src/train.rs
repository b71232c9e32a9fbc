//! Centralized training, decentralized inference, and every compared method.
//!
//! During training the degraded agent fuses all normal agents' feature maps
//! with softmax weights over the matching scores, so the whole pipeline is
//! differentiable. At inference only the argmax agent's map is requested.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::attention::{AgentId, MatchScores};
use crate::error::{Error, Result};
use crate::handshake::{run_handshake, AgentView, BandwidthLedger, HandshakeOutcome, Mode, PayloadKind, SimNetwork, Stage, POSE_SCALARS};
use crate::metrics::{overall_accuracy, selection_accuracy, MetricsRecord};
use crate::model::{BaselineKind, Model, ModelConfig, Observation, Prediction};
use crate::rng::{substream, INIT, SELECTION, TRAINING};
use crate::scenario::{degrade_random, Episode, ScenarioConfig, Split};
use crate::tape::{cross_entropy_value, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation runs every this many iterations.
    pub eval_every: usize,
    /// Draw a fresh degradation of the clean target view for every sample.
    pub redegrade: bool,
    /// Validation episodes used per evaluation (0 = all).
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5_000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            eval_every: 1_000,
            redegrade: true,
            val_episodes: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.eval_every == 0 || !self.iterations.is_multiple_of(self.eval_every) {
            return Err(Error::Config(format!(
                "eval cadence {} must divide iterations {}",
                self.eval_every, self.iterations
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `pred` against per-cell labels.
pub fn loss(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    cross_entropy_value(pred.logits(), labels)
}

/// The differentiable graph of one episode.
pub struct TrainGraph {
    pub logits: Var,
    /// Matching scores, one per normal agent, for matching methods.
    pub scores: Option<Vec<Var>>,
}

fn observation_for_target(episode: &Episode, kind: BaselineKind) -> &Observation {
    if kind == BaselineKind::SingleNormal {
        &episode.clean_target
    } else {
        &episode.target
    }
}

/// Records the training-mode forward pass on `tape`.
///
/// `target` replaces the episode's degraded view when given; `rng` is only
/// read by the random-selection method.
pub fn build_train_graph(
    tape: &mut Tape<'_>,
    model: &Model,
    episode: &Episode,
    target: Option<&Observation>,
    rng: &mut dyn RngCore,
) -> Result<TrainGraph> {
    let kind = model.config.method;
    let target = target.unwrap_or_else(|| observation_for_target(episode, kind));
    check_episode(model, episode)?;
    let ft = model.encode_on_tape(tape, target)?;
    let mut scores = None;
    let received: Vec<Var> = match kind {
        BaselineKind::SingleNormal | BaselineKind::SingleDegraded => vec![ft],
        BaselineKind::CatAll => episode
            .normals
            .iter()
            .map(|o| model.encode_on_tape(tape, o))
            .collect::<Result<_>>()?,
        BaselineKind::Compression => {
            let mut v = Vec::with_capacity(episode.normals.len());
            for o in &episode.normals {
                let f = model.encode_on_tape(tape, o)?;
                v.push(model.compress_on_tape(tape, f)?);
            }
            v
        }
        BaselineKind::RandomSelection => {
            let pick = rng.gen_range(0..episode.normals.len());
            vec![model.encode_on_tape(tape, &episode.normals[pick])?]
        }
        BaselineKind::OursWithMsg | BaselineKind::OursWithoutMsg | BaselineKind::AttentionCentralized => {
            let mu = model.message_on_tape(tape, ft)?;
            let mut maps = Vec::with_capacity(episode.normals.len());
            let mut s = Vec::with_capacity(episode.normals.len());
            for o in &episode.normals {
                let f = model.encode_on_tape(tape, o)?;
                let kappa = model.key_on_tape(tape, f)?;
                s.push(model.score_on_tape(tape, mu, kappa)?);
                maps.push(f);
            }
            let stacked = tape.stack(&s)?;
            let alpha = tape.softmax(stacked)?;
            scores = Some(s);
            vec![tape.weighted_sum(alpha, &maps)?]
        }
    };
    let mut parts = Vec::with_capacity(received.len() + 1);
    parts.push(ft);
    parts.extend(received);
    let logits = model.decode_on_tape(tape, &parts)?;
    Ok(TrainGraph { logits, scores })
}

fn check_episode(model: &Model, episode: &Episode) -> Result<()> {
    if episode.agents() != model.config.agents {
        return Err(Error::Config(format!(
            "episode has {} agents, model expects {}",
            episode.agents(),
            model.config.agents
        )));
    }
    Ok(())
}

/// Training-mode prediction and, for matching methods, the scores.
pub fn forward_train(episode: &Episode, model: &Model, rng: &mut dyn RngCore) -> Result<(Prediction, Option<MatchScores>)> {
    let mut tape = Tape::new(&model.params);
    let g = build_train_graph(&mut tape, model, episode, None, rng)?;
    let scores = match &g.scores {
        Some(s) => Some(MatchScores::new(
            (0..s.len()).map(Episode::normal_id).collect(),
            s.iter().map(|&v| tape.value(v).data()[0]).collect(),
        )?),
        None => None,
    };
    Ok((Prediction::new(tape.value(g.logits).clone())?, scores))
}

/// Result of running one episode at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    /// Agents whose features were used; empty for single-agent methods.
    pub selected: Vec<AgentId>,
    pub handshake: Option<HandshakeOutcome>,
    pub ledger: BandwidthLedger,
}

/// Inference-mode prediction with the method's communication pattern.
pub fn forward_infer(episode: &Episode, model: &Model, rng: &mut dyn RngCore) -> Result<Inference> {
    check_episode(model, episode)?;
    let kind = model.config.method;
    let pose = episode.setting.uses_pose();
    let me = AgentId(0);
    let mut net = SimNetwork::new();
    let mut tape = Tape::new(&model.params);
    let target = observation_for_target(episode, kind);
    let ft = model.encode_on_tape(&mut tape, target)?;

    let send_map = |net: &mut SimNetwork, tape: &mut Tape<'_>, pos: usize, kind: PayloadKind| -> Result<Var> {
        let id = Episode::normal_id(pos);
        let mut f = model.encode_on_tape(tape, &episode.normals[pos])?;
        if kind == PayloadKind::CompressedMap {
            f = model.compress_on_tape(tape, f)?;
        }
        if pose {
            net.charge(Stage::Connect, id, me, PayloadKind::Pose, POSE_SCALARS)?;
        }
        let data = net.send(Stage::Connect, id, me, kind, tape.value(f).data())?;
        let shape = tape.value(f).shape().to_vec();
        Ok(tape.input(crate::tensor::Tensor::new(&shape, data)?))
    };

    let mut handshake = None;
    let (received, selected): (Vec<Var>, Vec<AgentId>) = match kind {
        BaselineKind::SingleNormal | BaselineKind::SingleDegraded => (vec![ft], vec![]),
        BaselineKind::CatAll | BaselineKind::Compression => {
            let pk = if kind == BaselineKind::CatAll {
                PayloadKind::FeatureMap
            } else {
                PayloadKind::CompressedMap
            };
            let maps = (0..episode.normals.len())
                .map(|p| send_map(&mut net, &mut tape, p, pk))
                .collect::<Result<_>>()?;
            (maps, (0..episode.normals.len()).map(Episode::normal_id).collect())
        }
        BaselineKind::RandomSelection => {
            let pos = rng.gen_range(0..episode.normals.len());
            (
                vec![send_map(&mut net, &mut tape, pos, PayloadKind::FeatureMap)?],
                vec![Episode::normal_id(pos)],
            )
        }
        BaselineKind::OursWithMsg | BaselineKind::OursWithoutMsg | BaselineKind::AttentionCentralized => {
            let mode = if kind == BaselineKind::AttentionCentralized {
                Mode::Centralized
            } else {
                Mode::Infer
            };
            let peers: Vec<AgentView<'_>> = episode
                .normals
                .iter()
                .enumerate()
                .map(|(i, o)| AgentView {
                    id: Episode::normal_id(i),
                    obs: o,
                })
                .collect();
            let out = run_handshake(AgentView { id: me, obs: target }, &peers, model, mode, pose, &mut net)?;
            let fused = tape.input(out.fused.tensor().clone());
            let sel = if mode == Mode::Centralized {
                crate::attention::select_argmax(&out.scores, 1)?
            } else {
                out.selected.clone()
            };
            handshake = Some(out);
            (vec![fused], sel)
        }
    };
    let mut parts = vec![ft];
    parts.extend(received);
    let logits = model.decode_on_tape(&mut tape, &parts)?;
    Ok(Inference {
        prediction: Prediction::new(tape.value(logits).clone())?,
        selected,
        handshake,
        ledger: net.into_ledger(),
    })
}

/// Aggregate results over a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub selection_accuracy: Option<f64>,
    /// Mean bandwidth per frame; `None` when nothing is transmitted.
    pub kbpf: Option<f64>,
    pub episodes: usize,
}

pub fn evaluate(model: &Model, episodes: &[Episode], seed: u64) -> Result<Evaluation> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to evaluate".into()));
    }
    let mut rng = substream(seed, SELECTION);
    let mut preds = Vec::with_capacity(episodes.len());
    let mut selected = Vec::with_capacity(episodes.len());
    let mut bytes = 0u64;
    for ep in episodes {
        let inf = forward_infer(ep, model, &mut rng)?;
        preds.push(inf.prediction.labels());
        selected.push(inf.selected);
        bytes += inf.ledger.total_bytes();
    }
    let gt: Vec<Vec<usize>> = episodes.iter().map(|e| e.labels.clone()).collect();
    let kind = model.config.method;
    let selects = !(kind.is_single() || matches!(kind, BaselineKind::CatAll | BaselineKind::Compression));
    let best: Vec<AgentId> = episodes.iter().map(|e| e.best_agent).collect();
    Ok(Evaluation {
        accuracy: overall_accuracy(&preds, &gt)?,
        selection_accuracy: if selects {
            Some(selection_accuracy(&selected, &best)?)
        } else {
            None
        },
        kbpf: (bytes > 0).then(|| bytes as f64 / 1024.0 / episodes.len() as f64),
        episodes: episodes.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_selection_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Fresh parameters for `config` from the init substream of `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::init(config, &mut substream(seed, INIT))
}

/// Trains `model` in place on `split.train`, validating on `split.val`.
///
/// Only observations and segmentation labels are read; the best-agent
/// annotation never enters training.
pub fn train(model: &mut Model, cfg: &TrainConfig, scenario: &ScenarioConfig, split: &Split) -> Result<History> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let val = if cfg.val_episodes == 0 {
        &split.val[..]
    } else {
        &split.val[..cfg.val_episodes.min(split.val.len())]
    };
    let mut rng = substream(cfg.seed, TRAINING);
    let mut opt = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = History::default();
    let mut window = 0.0;
    let scale = 1.0 / cfg.batch_size as f64;
    for it in 1..=cfg.iterations {
        model.params.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ep = &split.train[rng.gen_range(0..split.train.len())];
            let fresh;
            let target = if cfg.redegrade && model.config.method != BaselineKind::SingleNormal {
                fresh = degrade_random(&ep.clean_target, scenario, &mut rng)?;
                Some(&fresh)
            } else {
                None
            };
            let grads = {
                let mut tape = Tape::new(&model.params);
                let g = build_train_graph(&mut tape, model, ep, target, &mut rng)?;
                let l = tape.cross_entropy(g.logits, &ep.labels)?;
                batch_loss += tape.value(l).data()[0];
                tape.backward(l)?
            };
            model.params.accumulate(&grads, scale)?;
        }
        let batch_loss = batch_loss * scale;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: batch_loss,
            });
        }
        opt.step(&mut model.params)?;
        window += batch_loss;
        if it % cfg.eval_every == 0 {
            let ev = evaluate(model, val, cfg.seed)?;
            history.rows.push(HistoryRow {
                iteration: it,
                loss: window / cfg.eval_every as f64,
                val_accuracy: ev.accuracy,
                val_selection_accuracy: ev.selection_accuracy,
            });
            window = 0.0;
        }
    }
    Ok(history)
}

/// Everything needed to train and evaluate one method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
}

/// A trained method with its history and test metrics.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub model: Model,
    pub history: History,
    pub record: MetricsRecord,
}

/// Trains `kind` from scratch and evaluates it on `split.test`.
pub fn run_baseline(kind: BaselineKind, split: &Split, spec: &RunSpec) -> Result<BaselineRun> {
    let config = ModelConfig {
        method: kind,
        ..spec.model
    };
    let mut model = init_model(config, spec.train.seed)?;
    let history = train(&mut model, &spec.train, &spec.scenario, split)?;
    let ev = evaluate(&model, &split.test, spec.train.seed)?;
    Ok(BaselineRun {
        model,
        history,
        record: MetricsRecord {
            method: kind.slug().to_string(),
            overall_acc: ev.accuracy,
            kbpf: ev.kbpf,
            bis: None,
            selection_acc: ev.selection_accuracy,
            episodes: ev.episodes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Coverage};
    use crate::scenario::{build_split, Setting, SplitSeeds, SplitSizes};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_split(setting: Setting) -> Split {
        let sizes = SplitSizes {
            train: 20,
            val: 10,
            test: 10,
        };
        build_split(&ScenarioConfig::default(), setting, &SplitSeeds::default(), &sizes).unwrap()
    }

    fn model(kind: BaselineKind, seed: u64) -> Model {
        init_model(
            ModelConfig {
                method: kind,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn loss_examples() {
        let p = Prediction::new(Tensor::zeros(&[6, 2, 2])).unwrap();
        assert!((loss(&p, &[0, 1, 2, 3]).unwrap() - 6f64.ln()).abs() < 1e-12);
        let mut t = Tensor::zeros(&[3, 1, 2]);
        t.data_mut()[0] = 50.0;
        t.data_mut()[2 * 2 + 1] = 50.0;
        let p = Prediction::new(t).unwrap();
        assert!(loss(&p, &[0, 2]).unwrap() < 1e-20);
    }

    #[test]
    fn loss_matches_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = [2, 0, 1, 1];
        let p = Prediction::new(Tensor::new(&[3, 2, 2], data.clone()).unwrap()).unwrap();
        let mut want = 0.0;
        for (cell, &y) in labels.iter().enumerate() {
            let z: f64 = (0..3).map(|k| data[k * 4 + cell].exp()).sum();
            want -= (data[y * 4 + cell].exp() / z).ln();
        }
        assert!((loss(&p, &labels).unwrap() - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_every_module() {
        let split = tiny_split(Setting::HiddenTarget);
        let m = model(BaselineKind::OursWithMsg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = &split.train[0];
        let mut tape = Tape::new(&m.params);
        let g = build_train_graph(&mut tape, &m, ep, None, &mut rng).unwrap();
        let l = tape.cross_entropy(g.logits, &ep.labels).unwrap();
        let grads = tape.backward(l).unwrap();
        for name in [
            "message.weight",
            "key.weight",
            "attention.w_a",
            "encoder.conv1.weight",
            "decoder.conv3.weight",
        ] {
            let g = grads.get(m.params.id(name).unwrap()).unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn constant_message_gets_no_gradient() {
        let split = tiny_split(Setting::HiddenTarget);
        let m = model(BaselineKind::OursWithoutMsg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = &split.train[1];
        let mut tape = Tape::new(&m.params);
        let g = build_train_graph(&mut tape, &m, ep, None, &mut rng).unwrap();
        let l = tape.cross_entropy(g.logits, &ep.labels).unwrap();
        let grads = tape.backward(l).unwrap();
        for name in ["message.weight", "message.bias"] {
            let id = m.params.id(name).unwrap();
            assert!(grads.get(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn full_pipeline_gradient_check() {
        let split = tiny_split(Setting::HiddenTarget);
        for seed in 0..3 {
            let m = model(BaselineKind::OursWithMsg, seed);
            let ep = &split.train[seed as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let err = finite_diff_check(&m.params, 1e-5, Coverage::Sample(3), &mut rng, |t| {
                let g = build_train_graph(t, &m, ep, None, &mut ChaCha8Rng::seed_from_u64(0))?;
                t.cross_entropy(g.logits, &ep.labels)
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn saturated_softmax_matches_inference() {
        let split = tiny_split(Setting::HiddenTarget);
        let mut m = model(BaselineKind::OursWithMsg, 3);
        // Large attention weights saturate the softmax.
        let id = m.params.id("attention.w_a").unwrap();
        for v in m.params.value_mut(id).data_mut() {
            *v *= 1e4;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        for ep in &split.test {
            let (p_train, scores) = forward_train(ep, &m, &mut rng).unwrap();
            let scores = scores.unwrap();
            let inf = forward_infer(ep, &m, &mut rng).unwrap();
            assert_eq!(inf.selected, crate::attention::select_argmax(&scores, 1).unwrap());
            let top = scores.weights().values().iter().cloned().fold(0.0, f64::max);
            if top >= 1.0 - 1e-9 {
                let d = p_train.logits().max_abs_diff(inf.prediction.logits()).unwrap();
                assert!(d <= 1e-6, "diff {d}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn inference_bandwidth_per_method() {
        let split = tiny_split(Setting::HiddenTarget);
        let ep = &split.test[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes = |k| forward_infer(ep, &model(k, 0), &mut rng.clone()).unwrap().ledger.total_bytes();
        assert_eq!(bytes(BaselineKind::SingleNormal), 0);
        assert_eq!(bytes(BaselineKind::SingleDegraded), 0);
        assert_eq!(bytes(BaselineKind::CatAll), 4 * 1024);
        assert_eq!(bytes(BaselineKind::Compression), 4 * 256);
        assert_eq!(bytes(BaselineKind::RandomSelection), 1024);
        assert_eq!(bytes(BaselineKind::OursWithMsg), 128 + 16 + 1024);
        assert_eq!(bytes(BaselineKind::OursWithoutMsg), 128 + 16 + 1024);
        assert_eq!(bytes(BaselineKind::AttentionCentralized), 128 + 16 + 4096);
        let _ = rng.next_u64();
    }

    #[test]
    fn pose_settings_charge_poses() {
        let split = tiny_split(Setting::AccuratePose);
        let ep = &split.test[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inf = forward_infer(ep, &model(BaselineKind::OursWithMsg, 0), &mut rng).unwrap();
        assert_eq!(inf.ledger.total_bytes(), 4 * (8 + 6) * 4 + 16 + 1024);
        let inf = forward_infer(ep, &model(BaselineKind::CatAll, 0), &mut rng).unwrap();
        assert_eq!(inf.ledger.total_bytes(), 4 * (256 + 6) * 4);
    }

    #[test]
    fn random_selection_draws_from_rng() {
        let split = tiny_split(Setting::HiddenTarget);
        let m = model(BaselineKind::RandomSelection, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let picks: std::collections::HashSet<AgentId> = (0..40)
            .map(|i| forward_infer(&split.test[i % 10], &m, &mut rng).unwrap().selected[0])
            .collect();
        assert_eq!(picks.len(), 4);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let split = tiny_split(Setting::HiddenTarget);
        let mut m = model(BaselineKind::OursWithMsg, 0);
        let before = m.params.clone();
        let cfg = TrainConfig {
            iterations: 4,
            batch_size: 2,
            lr: 0.0,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &cfg, &ScenarioConfig::default(), &split).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(h.rows[0].val_accuracy, h.rows[1].val_accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let split = tiny_split(Setting::HiddenTarget);
        let cfg = TrainConfig {
            iterations: 6,
            batch_size: 2,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model(BaselineKind::OursWithMsg, 0);
            let h = train(&mut m, &cfg, &ScenarioConfig::default(), &split).unwrap();
            (m, h)
        };
        let (ma, ha) = run();
        let (mb, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(ma.params, mb.params);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let split = tiny_split(Setting::HiddenTarget);
        let mut m = model(BaselineKind::SingleDegraded, 0);
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 1,
            lr: 1e300,
            eval_every: 200,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &cfg, &ScenarioConfig::default(), &split);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn bad_cadence_rejected() {
        let cfg = TrainConfig {
            iterations: 10,
            eval_every: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
