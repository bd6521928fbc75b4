//! Binary checkpoint format.
//!
//! ```text
//! "MEMO"                magic
//! u32 LE                format version
//! u32 LE                manifest length in bytes
//! manifest (UTF-8)      "#config" header line, then one line per parameter:
//!                       name <TAB> dtype <TAB> comma-separated shape
//! payloads              raw little-endian values in manifest order
//! u64 LE                FNV-1a 64 checksum of the payload bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LoraSpec, LoraTargets, MemoNetwork, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEMO";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn config_line(config: &ModelConfig, lora: Option<&LoraSpec>) -> String {
    let channels: Vec<String> = config.channels.iter().map(usize::to_string).collect();
    let mut line = format!(
        "#config channels={} embed_dim={} zero_init_head={}",
        channels.join(","),
        config.embed_dim,
        config.zero_init_head
    );
    if let Some(l) = lora {
        line.push_str(&format!(
            " lora_rank={} lora_alpha={} lora_edge_encoder={} lora_decoder={}",
            l.rank, l.alpha, l.targets.edge_encoder, l.targets.decoder
        ));
    }
    line
}

fn parse_config_line(line: &str) -> std::result::Result<(ModelConfig, Option<LoraSpec>), String> {
    let rest = line.strip_prefix("#config").ok_or("manifest must start with a #config line")?;
    let mut config = ModelConfig::default();
    let (mut rank, mut alpha, mut targets) = (None, None, LoraTargets::default());
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| format!("malformed config field {field:?}"))?;
        let bad = |_| format!("bad value for {k}: {v:?}");
        match k {
            "channels" => {
                config.channels = v
                    .split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(bad)?
            }
            "embed_dim" => config.embed_dim = v.parse().map_err(bad)?,
            "zero_init_head" => config.zero_init_head = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
            "lora_rank" => rank = Some(v.parse().map_err(bad)?),
            "lora_alpha" => alpha = Some(v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?),
            "lora_edge_encoder" => targets.edge_encoder = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
            "lora_decoder" => targets.decoder = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
            _ => return Err(format!("unknown config field {k:?}")),
        }
    }
    let lora = match (rank, alpha) {
        (Some(rank), Some(alpha)) => Some(LoraSpec { rank, alpha, targets }),
        (None, None) => None,
        _ => return Err("lora_rank and lora_alpha must appear together".into()),
    };
    Ok((config, lora))
}

/// Serialise a network. Parameter order follows the registry, so equal
/// networks produce identical bytes.
pub fn encode<T: Scalar>(net: &MemoNetwork<T>) -> Vec<u8> {
    let mut manifest = config_line(net.config(), net.lora());
    let mut payload = Vec::new();
    for (_, p) in net.params().iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("\n{}\t{}\t{}", p.name, T::DTYPE, shape.join(",")));
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out
}

/// Parse a checkpoint. `path` only labels errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<MemoNetwork<T>> {
    let fmt = |m: String| Error::format(path, m);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| fmt("truncated manifest".into()))?;
    let manifest = std::str::from_utf8(manifest).map_err(|e| fmt(format!("manifest is not UTF-8: {e}")))?;
    let mut lines = manifest.lines();
    let (config, lora) = parse_config_line(lines.next().unwrap_or("")).map_err(fmt)?;

    let mut entries = Vec::new();
    let mut payload_len = 0usize;
    for line in lines {
        let mut cols = line.split('\t');
        let (Some(name), Some(dtype), Some(shape), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(fmt(format!("malformed manifest line {line:?}")));
        };
        if dtype != "f32" && dtype != "f64" {
            return Err(fmt(format!("unknown dtype tag {dtype:?} for {name}")));
        }
        if dtype != T::DTYPE {
            return Err(fmt(format!("{name} is stored as {dtype} but {} was requested", T::DTYPE)));
        }
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fmt(format!("bad shape for {name}: {shape:?}")))?;
        payload_len += shape.iter().product::<usize>() * T::BYTES;
        entries.push((name.to_string(), shape));
    }
    let start = 12 + mlen;
    if bytes.len() != start + payload_len + 8 {
        return Err(fmt(format!(
            "expected {} payload bytes plus checksum, file has {}",
            payload_len,
            bytes.len().saturating_sub(start)
        )));
    }
    let payload = &bytes[start..start + payload_len];
    let stored = u64::from_le_bytes(bytes[start + payload_len..].try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut store = ParamStore::new();
    let mut offset = 0;
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + n * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += n * T::BYTES;
        let id = store.register(name.clone(), Tensor::new(&shape, data)?)?;
        store.get_mut(id).trainable = lora.is_none() || name.ends_with(".lora_down") || name.ends_with(".lora_up");
    }
    MemoNetwork::from_parts(config, lora, &store)
}

pub fn save<T: Scalar>(net: &MemoNetwork<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<MemoNetwork<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
