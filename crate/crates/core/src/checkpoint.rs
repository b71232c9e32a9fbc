//! Versioned binary checkpoints.
//!
//! Layout: magic `CLBCKPT1`, `u32` version, the model configuration as a
//! fixed block of fields, `u32` tensor count, then each named tensor.

use std::path::Path;

use crate::attention::AttentionVariant;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{BaselineKind, Model, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"CLBCKPT1";
pub const VERSION: u32 = 1;

pub(crate) fn encode_config(e: &mut Encoder, c: &ModelConfig) {
    e.usize(c.message_size);
    e.usize(c.key_size);
    e.usize(c.feature_channels);
    e.usize(c.classes);
    e.u8(c.attention.code());
    e.usize(c.additive_hidden.unwrap_or(0));
    e.usize(c.top_n);
    e.usize(c.agents);
    e.usize(c.obs_channels);
    e.usize(c.obs_size);
    e.u8(c.method.code());
}

pub(crate) fn decode_config(d: &mut Decoder<'_>) -> Result<ModelConfig> {
    let message_size = d.usize("message size")?;
    let key_size = d.usize("key size")?;
    let feature_channels = d.usize("feature channels")?;
    let classes = d.usize("classes")?;
    let attention = AttentionVariant::from_code(d.u8("attention variant")?)?;
    let hidden = d.usize("additive hidden")?;
    let c = ModelConfig {
        message_size,
        key_size,
        feature_channels,
        classes,
        attention,
        additive_hidden: (hidden > 0).then_some(hidden),
        top_n: d.usize("top n")?,
        agents: d.usize("agents")?,
        obs_channels: d.usize("observation channels")?,
        obs_size: d.usize("observation size")?,
        method: BaselineKind::from_code(d.u8("method")?)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(MAGIC);
    e.u32(VERSION);
    encode_config(&mut e, &model.config);
    e.usize(model.params.len());
    for (name, t) in model.params.iter() {
        e.tensor(name, t);
    }
    e.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut d = Decoder::new(bytes);
    d.header(MAGIC, VERSION)?;
    let config = decode_config(&mut d)?;
    let count = d.usize("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, t) = d.tensor()?;
        params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    d.finish()?;
    Model::from_parts(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it against the configuration the caller
/// expects, naming the first field that differs.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    check_config(&model.config, expected)?;
    Ok(model)
}

pub fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let fields: [(&str, String, String); 11] = [
        ("message_size", found.message_size.to_string(), expected.message_size.to_string()),
        ("key_size", found.key_size.to_string(), expected.key_size.to_string()),
        (
            "feature_channels",
            found.feature_channels.to_string(),
            expected.feature_channels.to_string(),
        ),
        ("classes", found.classes.to_string(), expected.classes.to_string()),
        ("attention", found.attention.to_string(), expected.attention.to_string()),
        (
            "additive_hidden",
            format!("{:?}", found.hidden()),
            format!("{:?}", expected.hidden()),
        ),
        ("top_n", found.top_n.to_string(), expected.top_n.to_string()),
        ("agents", found.agents.to_string(), expected.agents.to_string()),
        ("obs_channels", found.obs_channels.to_string(), expected.obs_channels.to_string()),
        ("obs_size", found.obs_size.to_string(), expected.obs_size.to_string()),
        ("method", found.method.to_string(), expected.method.to_string()),
    ];
    for (field, f, e) in fields {
        if f != e {
            return Err(Error::Shape {
                field: format!("model.{field}"),
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Observation, Prediction};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: ModelConfig) -> Model {
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn predict(m: &Model) -> Prediction {
        let obs = Observation::new(Tensor::full(&[3, 16, 16], 0.5), false).unwrap();
        let f = m.encode(&obs).unwrap();
        m.decode(&f, &f).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(ModelConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(predict(&m), predict(&back));
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode_checkpoint(&model(ModelConfig::default()));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn newer_version_is_a_version_error() {
        let mut bytes = encode_checkpoint(&model(ModelConfig::default()));
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(decode_checkpoint(&bytes).unwrap_err(), Error::Version { found: 2, supported: 1 });
    }

    #[test]
    fn truncated_file_is_a_truncation_error() {
        let bytes = encode_checkpoint(&model(ModelConfig::default()));
        for cut in [4, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))));
        }
    }

    #[test]
    fn message_size_mismatch_names_the_field() {
        let m = model(ModelConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let want = ModelConfig {
            message_size: 4,
            ..ModelConfig::default()
        };
        match load_checkpoint_for(&path, &want) {
            Err(Error::Shape { field, .. }) => assert_eq!(field, "model.message_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_shape_disagreeing_with_config_is_rejected() {
        let mut m = model(ModelConfig::default());
        m.config.message_size = 4;
        let bytes = encode_checkpoint(&m);
        match decode_checkpoint(&bytes) {
            Err(Error::Shape { field, .. }) => assert_eq!(field, "message.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
