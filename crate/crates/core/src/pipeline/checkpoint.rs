//! SSPC1 checkpoints: a JSON header followed by raw f32 parameter blobs.
//!
//! Layout: magic `SSPC1`, u32 version, u64 header length, header JSON, then
//! one u64-length-prefixed little-endian f32 blob per parameter in registry
//! order, then (if present) every first moment and every second moment of
//! the optimizer in the same order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::error::{Result, SspError};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::topology::{build_network, NetworkSpec, TopologyConfig};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSPC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal word position; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| SspError::CorruptPayload(format!("rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: NetworkSpec<f32>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<Adam<f32>>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub best_val_mse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    topology: TopologyConfig,
    train: Option<TrainConfig>,
    step: u64,
    rng: Option<RngState>,
    best_val_mse: Option<f64>,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
}

fn put_blob(buf: &mut Vec<u8>, data: &[f32]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(SspError::TruncatedPayload { expected: self.at.saturating_add(n), found: self.bytes.len() })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
        let len = self.u64()? as usize;
        let want: usize = shape.iter().product();
        if len != want {
            return Err(SspError::CorruptPayload(format!("{what}: blob holds {len} values, shape {shape:?} needs {want}")));
        }
        let raw = self.take(len.checked_mul(4).ok_or_else(|| SspError::CorruptPayload(format!("{what}: length overflow")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    /// A fresh checkpoint around an untrained network.
    pub fn initial(net: NetworkSpec<f32>) -> Self {
        Checkpoint { net, train: None, optimizer: None, step: 0, rng: None, best_val_mse: None }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let params = self
            .net
            .params
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect();
        let header = Header {
            topology: self.net.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            best_val_mse: self.best_val_mse,
            params,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry { config: o.config, step: o.step_count() }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in self.net.params.iter() {
            put_blob(&mut buf, p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            for m in opt.first_moments().iter().chain(opt.second_moments()) {
                put_blob(&mut buf, m.data());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(SspError::MalformedHeader("missing SSPC1 magic".into()));
        }
        let mut r = Reader { bytes, at: CHECKPOINT_MAGIC.len() };
        let version = u32::from_le_bytes(r.take(4).map_err(|_| SspError::MalformedHeader("missing version".into()))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(SspError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| SspError::CorruptPayload(format!("checkpoint header: {e}")))?;

        // the graph is rebuilt from the config; stored tensors replace its initialization
        let mut net = build_network::<f32>(&header.topology, 0)?;
        if net.params.len() != header.params.len() {
            return Err(SspError::CorruptPayload(format!("{} stored parameters, topology has {}", header.params.len(), net.params.len())));
        }
        let ids: Vec<_> = net.params.ids().collect();
        for (&id, entry) in ids.iter().zip(&header.params) {
            let p = net.params.get_mut(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(SspError::CorruptPayload(format!(
                    "parameter {} {:?} stored where topology has {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = r.blob(&entry.shape, &entry.name)?;
            p.trainable = entry.trainable;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut moments = Vec::with_capacity(2 * ids.len());
                for _ in 0..2 {
                    for e in &header.params {
                        moments.push(r.blob(&e.shape, &e.name)?);
                    }
                }
                let second = moments.split_off(ids.len());
                Some(Adam::from_state(o.config, o.step, moments, second))
            }
            None => None,
        };
        if r.at != bytes.len() {
            return Err(SspError::CorruptPayload(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        if let Some(rng) = &header.rng {
            rng.restore()?;
        }
        Ok(Checkpoint { net, train: header.train, optimizer, step: header.step, rng: header.rng, best_val_mse: header.best_val_mse })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TopologyKind;
    use crate::verify::random;

    fn tiny() -> Checkpoint {
        let net = build_network::<f32>(&TopologyConfig::tiny(TopologyKind::Hybrid2to3d), 9).unwrap();
        Checkpoint::initial(net)
    }

    #[test]
    fn forward_is_bit_exact_after_reload() {
        let mut ck = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rand::Rng::gen::<u64>(&mut rng);
        ck.rng = Some(RngState::capture(&rng));
        ck.optimizer = Some(Adam::new(&ck.net.params, AdamConfig::default()));
        ck.step = 17;
        let x = random::<f32>(&ck.net.input_shape(2), 1);
        let before = ck.net.predict(&x, &[0, 1]).unwrap();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.net.predict(&x, &[0, 1]).unwrap(), before);
        assert_eq!(back.step, 17);
        assert_eq!(back.optimizer, ck.optimizer);
        let mut a = back.rng.unwrap().restore().unwrap();
        assert_eq!(rand::Rng::gen::<u64>(&mut a), rand::Rng::gen::<u64>(&mut rng));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = tiny().encode().unwrap();
        bytes[5] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(SspError::UnsupportedVersion { found: 9, .. })));
    }

    #[test]
    fn corrupt_payloads() {
        let bytes = tiny().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(SspError::TruncatedPayload { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(SspError::CorruptPayload(_))));
        assert!(matches!(Checkpoint::decode(b"nope"), Err(SspError::MalformedHeader(_))));
        let mut garbled = bytes;
        garbled[20] = b'#';
        assert!(matches!(Checkpoint::decode(&garbled), Err(SspError::CorruptPayload(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sspc");
        let ck = tiny();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for ((_, a), (_, b)) in back.net.params.iter().zip(ck.net.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
