//! Binary checkpoints: weights alone, or a whole resumable search state.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! little-endian `f64` payload, then a SHA-256 of everything before it. The
//! checksum is verified before anything is parsed.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::ga::Population;
use crate::genome::SearchSpaceSpec;
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{stream, Streams};
use crate::search::{SearchHistory, SearchState};
use crate::supernet::{NetworkConfig, SupernetWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GNASCKPT";
pub const WEIGHTS_SCHEMA: &str = "gnas.weights.v1";
pub const STATE_SCHEMA: &str = "gnas.state.v1";
const DIGEST_LEN: usize = 32;

pub fn encode_container<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + head.len() + 8 * payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Splits a container into its parsed header and payload.
pub fn decode_container<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Checkpoint("file is too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let head_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let rest = &body[16..];
    if head_len > rest.len() || !(rest.len() - head_len).is_multiple_of(8) {
        return Err(Error::Checkpoint(
            "header length does not fit the file".into(),
        ));
    }
    let header = serde_json::from_slice(&rest[..head_len])?;
    let payload = rest[head_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub schema: String,
    pub spec: SearchSpaceSpec,
    pub config: NetworkConfig,
    pub params: Vec<ParamEntry>,
}

fn weights_parts(w: &SupernetWeights) -> (WeightsHeader, Vec<f64>) {
    let mut payload = Vec::with_capacity(w.store.total_values());
    let params = w
        .store
        .ids()
        .map(|id| {
            let t = w.store.get(id);
            let entry = ParamEntry {
                name: w.store.name(id).to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            };
            payload.extend_from_slice(t.data());
            entry
        })
        .collect();
    let header = WeightsHeader {
        schema: WEIGHTS_SCHEMA.into(),
        spec: w.spec,
        config: w.config.clone(),
        params,
    };
    (header, payload)
}

/// Rebuilds the layer plan and fills it from the header's index map, which
/// must list exactly the parameters the plan has.
fn restore_weights(header: &WeightsHeader, payload: &[f64]) -> Result<SupernetWeights> {
    let mut w = SupernetWeights::init(
        header.spec,
        header.config.clone(),
        &mut stream(0, "restore"),
    )?;
    if header.params.len() != w.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the network has {}",
            header.params.len(),
            w.store.len()
        )));
    }
    for p in &header.params {
        let id = w
            .store
            .id(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", p.name)))?;
        let n: usize = p.shape.iter().product();
        if w.store.get(id).shape() != p.shape.as_slice() || p.offset + n > payload.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {} does not match the network",
                p.name
            )));
        }
        *w.store.get_mut(id) =
            Tensor::from_vec(&p.shape, payload[p.offset..p.offset + n].to_vec())?;
    }
    Ok(w)
}

pub fn encode_weights(w: &SupernetWeights) -> Result<Vec<u8>> {
    let (header, payload) = weights_parts(w);
    encode_container(&header, &payload)
}

pub fn decode_weights(bytes: &[u8]) -> Result<SupernetWeights> {
    let (header, payload): (WeightsHeader, Vec<f64>) = decode_container(bytes)?;
    if header.schema != WEIGHTS_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported weights schema {}",
            header.schema
        )));
    }
    restore_weights(&header, &payload)
}

pub fn save_weights(path: &Path, w: &SupernetWeights) -> Result<()> {
    write_atomic(path, &encode_weights(w)?)
}

pub fn load_weights(path: &Path) -> Result<SupernetWeights> {
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateHeader {
    schema: String,
    epoch: usize,
    population: Population,
    streams: Streams,
    history: SearchHistory,
    weights: Option<WeightsHeader>,
    optimizer: Option<SgdConfig>,
    /// Parameter ids holding a momentum buffer, stored after the weights.
    momentum: Vec<usize>,
}

pub fn encode_state(state: &SearchState) -> Result<Vec<u8>> {
    let (weights, mut payload) = match &state.weights {
        Some(w) => {
            let (h, p) = weights_parts(w);
            (Some(h), p)
        }
        None => (None, Vec::new()),
    };
    let mut momentum = Vec::new();
    if let Some(sgd) = &state.optimizer {
        for (i, b) in sgd.buffers().iter().enumerate() {
            if let Some(b) = b {
                momentum.push(i);
                payload.extend_from_slice(b);
            }
        }
    }
    let header = StateHeader {
        schema: STATE_SCHEMA.into(),
        epoch: state.epoch,
        population: state.population.clone(),
        streams: state.streams.clone(),
        history: state.history.clone(),
        weights,
        optimizer: state.optimizer.as_ref().map(|s| s.config.clone()),
        momentum,
    };
    encode_container(&header, &payload)
}

pub fn decode_state(bytes: &[u8]) -> Result<SearchState> {
    let (h, payload): (StateHeader, Vec<f64>) = decode_container(bytes)?;
    if h.schema != STATE_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported state schema {}",
            h.schema
        )));
    }
    // rebuild through the validating constructor
    let population = Population::new(h.population.spec, h.population.members().to_vec())?;
    let (weights, mut offset) = match &h.weights {
        Some(wh) => {
            let n: usize = wh
                .params
                .iter()
                .map(|p| p.shape.iter().product::<usize>())
                .sum();
            (Some(restore_weights(wh, &payload)?), n)
        }
        None => (None, 0),
    };
    let optimizer = match (h.optimizer, &weights) {
        (Some(cfg), Some(w)) => {
            let mut buffers = vec![None; w.store.len()];
            for &i in &h.momentum {
                let len = w
                    .store
                    .ids()
                    .nth(i)
                    .map(|id| w.store.get(id).len())
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("momentum for unknown parameter {i}"))
                    })?;
                let chunk = payload
                    .get(offset..offset + len)
                    .ok_or_else(|| Error::Checkpoint("momentum payload is short".into()))?;
                buffers[i] = Some(chunk.to_vec());
                offset += len;
            }
            let mut sgd = Sgd::new(cfg);
            sgd.set_buffers(buffers);
            Some(sgd)
        }
        (None, _) => None,
        (Some(_), None) => return Err(Error::Checkpoint("optimizer state without weights".into())),
    };
    if offset != payload.len() {
        return Err(Error::Checkpoint(
            "payload length does not match the header".into(),
        ));
    }
    Ok(SearchState {
        epoch: h.epoch,
        population,
        weights,
        optimizer,
        streams: h.streams,
        history: h.history,
    })
}

pub fn save_state(path: &Path, state: &SearchState) -> Result<()> {
    write_atomic(path, &encode_state(state)?)
}

pub fn load_state(path: &Path) -> Result<SearchState> {
    decode_state(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::{CellType, GaConfig};
    use crate::landscape::{Landscape, LandscapeConfig};
    use crate::search::{init_state, run_search_epoch, synthetic_config, Evaluator};

    fn small_weights() -> SupernetWeights {
        let spec = SearchSpaceSpec::new(2, 5).unwrap();
        let config = NetworkConfig {
            n_cells: 1,
            channels: 2,
            n_classes: 3,
            image_size: 4,
            dropout: 0.2,
            drop_path: 0.1,
        };
        SupernetWeights::init(spec, config, &mut stream(9, "w")).unwrap()
    }

    #[test]
    fn weights_roundtrip_exactly() {
        let mut w = small_weights();
        let id = w.classifier_w;
        w.store.get_mut(id).data_mut()[0] = -0.0;
        w.store.get_mut(id).data_mut()[1] = 1e-300;
        let back = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back.store.total_values(), w.store.total_values());
        for id in w.store.ids() {
            let a: Vec<u64> = w.store.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back
                .store
                .get(id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b, "{}", w.store.name(id));
        }
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode_weights(&small_weights()).unwrap();
        for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = decode_weights(&bad).unwrap_err();
            assert!(err.to_string().contains("checksum"), "{pos}: {err}");
        }
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let w = small_weights();
        let (mut header, payload) = weights_parts(&w);
        header.schema = "gnas.weights.v0".into();
        let bytes = encode_container(&header, &payload).unwrap();
        assert!(decode_weights(&bytes)
            .unwrap_err()
            .to_string()
            .contains("schema"));
    }

    #[test]
    fn synthetic_state_roundtrip_and_resume() {
        let spec = SearchSpaceSpec::new(2, 3).unwrap();
        let land = Landscape::new(
            spec,
            &LandscapeConfig {
                seed: 2,
                shape: crate::landscape::BlockShape::Bowl { roughness: 0.5 },
                cells: vec![CellType::Normal, CellType::Input],
            },
        )
        .unwrap();
        let config = synthetic_config(spec, &GaConfig::default(), 6, 4);
        let ev = Evaluator::Synthetic(&land);
        let mut a = init_state(&config, ev).unwrap();
        let fresh = decode_state(&encode_state(&a).unwrap()).unwrap();
        assert_eq!(fresh, a);
        for _ in 0..3 {
            run_search_epoch(&mut a, &config, ev).unwrap();
        }
        let mut b = decode_state(&encode_state(&a).unwrap()).unwrap();
        for _ in 0..3 {
            run_search_epoch(&mut a, &config, ev).unwrap();
            run_search_epoch(&mut b, &config, ev).unwrap();
        }
        assert_eq!(a, b);
    }
}
