//! Versioned binary checkpoints: magic bytes "BLAB1", a little-endian shape
//! table (tagged, named entries), then one contiguous 64-bit-float payload.
//! Predictor parameters live under the section tag "IDM0"; the main network
//! under "NET0"; an optional twin branch under "TWN0".

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::StagedNetwork;
use crate::error::{Error, Result};
use crate::idm::RatioPredictor;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::synthdata::atomic_write;

pub const MAGIC: &[u8; 5] = b"BLAB1";
pub const VERSION: u32 = 1;

pub const NET_TAG: &str = "NET0";
pub const IDM_TAG: &str = "IDM0";
pub const TWIN_TAG: &str = "TWN0";

/// A parsed checkpoint: (tag, name) -> tensor.
pub struct Checkpoint {
    entries: Vec<(String, String, Tensor)>,
}

impl Checkpoint {
    pub fn section(&self, tag: &str) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter(|(t, _, _)| t == tag)
            .map(|(_, n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn has_section(&self, tag: &str) -> bool {
        self.entries.iter().any(|(t, _, _)| t == tag)
    }
}

/// Serializes tagged named tensors.
pub fn write_entries(path: &Path, entries: &[(String, String, Tensor)]) -> Result<()> {
    let mut table = Vec::new();
    let mut payload = Vec::new();
    for (tag, name, value) in entries {
        let tag_bytes = tag.as_bytes();
        if tag_bytes.len() != 4 {
            return Err(Error::Checkpoint(format!("tag {tag:?} must be 4 bytes")));
        }
        table.extend_from_slice(tag_bytes);
        let name_bytes = name.as_bytes();
        table.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        table.extend_from_slice(name_bytes);
        table.push(value.shape().len() as u8);
        for &d in value.shape() {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut bytes = Vec::with_capacity(13 + table.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&table);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *at + n > bytes.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

/// Parses a checkpoint file, validating magic, version, and length.
pub fn read_entries(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 13 {
        return Err(fail("file shorter than header"));
    }
    if &bytes[..5] != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let n_entries = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;

    let mut at = 13usize;
    let mut headers = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let tag = String::from_utf8(take(&bytes, &mut at, 4)?.to_vec())
            .map_err(|_| fail("non-utf8 tag"))?;
        let name_len =
            u16::from_le_bytes(take(&bytes, &mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&bytes, &mut at, name_len)?.to_vec())
            .map_err(|_| fail("non-utf8 name"))?;
        let ndim = take(&bytes, &mut at, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().unwrap()) as usize);
        }
        headers.push((tag, name, shape));
    }
    let mut entries = Vec::with_capacity(n_entries);
    for (tag, name, shape) in headers {
        let count: usize = shape.iter().product();
        let raw = take(&bytes, &mut at, count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor {name}: {e}")))?;
        entries.push((tag, name, tensor));
    }
    if at != bytes.len() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(Checkpoint { entries })
}

/// Saves the network (with classifier and buffers), the ratio predictor,
/// and optionally a twin branch.
pub fn save_model(
    path: &Path,
    net: &StagedNetwork,
    predictor: Option<&RatioPredictor>,
    twin: Option<&StagedNetwork>,
    store: &ParamStore,
) -> Result<()> {
    let mut entries = Vec::new();
    for (name, value) in net.state_entries(store) {
        entries.push((NET_TAG.to_string(), name, value));
    }
    if let Some(p) = predictor {
        for (name, value) in p.state_entries(store) {
            entries.push((IDM_TAG.to_string(), name, value));
        }
    }
    if let Some(t) = twin {
        for (name, value) in t.state_entries(store) {
            entries.push((TWIN_TAG.to_string(), name, value));
        }
    }
    write_entries(path, &entries)
}

/// Loaded model: network, parameters, and (when present) the predictor.
pub struct LoadedModel {
    pub net: StagedNetwork,
    pub store: ParamStore,
    pub predictor: Option<RatioPredictor>,
}

/// Reconstructs a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = read_entries(path)?;
    let net_entries = ckpt.section(NET_TAG);
    let meta = net_entries
        .get("meta")
        .ok_or_else(|| Error::Checkpoint("missing network meta".into()))?;
    let (cfg, c_s, _c_t) = StagedNetwork::parse_meta(meta)?;
    let mut store = ParamStore::new();
    // Seed value is irrelevant: every parameter is overwritten by the load.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = StagedNetwork::new(cfg, c_s, &mut store, &mut rng)?;
    net.load_state(&mut store, &net_entries)?;

    let predictor = if ckpt.has_section(IDM_TAG) {
        let idm_entries = ckpt.section(IDM_TAG);
        let meta = idm_entries
            .get("idm/meta")
            .ok_or_else(|| Error::Checkpoint("missing predictor meta".into()))?;
        let (channels, reduction) = RatioPredictor::parse_meta(meta)?;
        let mut p = RatioPredictor::new(channels, reduction, &mut store, &mut rng)?;
        p.load_state(&mut store, &idm_entries)?;
        Some(p)
    } else {
        None
    };
    Ok(LoadedModel {
        net,
        store,
        predictor,
    })
}
