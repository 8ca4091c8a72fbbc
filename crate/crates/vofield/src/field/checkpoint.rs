//! Versioned binary checkpoints for field parameters.
//!
//! Layout: magic `VFCP`, u32 version, u64 FNV-1a hash of the embedded
//! config, the config as length-prefixed TOML, the scene AABB, then named
//! parameter sections (length-prefixed name, u64 element count, f64 LE
//! data). Stable across runs for identical parameters.

use std::io::{Read, Write};

use thiserror::Error;

use super::{FieldConfig, FieldParams, Mlp};
use crate::synth::Aabb;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VFCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("config hash mismatch (file corrupted?)")]
    ConfigHashMismatch,
    #[error("config parse failure: {0}")]
    Config(String),
    #[error("section {name} has {actual} values, expected {expected}")]
    SectionSize {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("missing section {0}")]
    MissingSection(String),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1_0000_0000_01b3);
    }
    hash
}

fn write_section(w: &mut impl Write, name: &str, data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_section(r: &mut impl Read) -> Result<(String, Vec<f64>), CheckpointError> {
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let name_len = u32::from_le_bytes(len4) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let count = u64::from_le_bytes(len8) as usize;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        String::from_utf8(name).map_err(|e| CheckpointError::Config(e.to_string()))?,
        data,
    ))
}

fn mlp_sections(prefix: &str, mlp: &Mlp) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (k, layer) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.w{k}"), layer.weights.clone()));
        out.push((format!("{prefix}.b{k}"), layer.bias.clone()));
    }
    out
}

pub fn save(params: &FieldParams, mut w: impl Write) -> Result<(), CheckpointError> {
    let config_toml =
        toml::to_string(&params.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&fnv1a(config_toml.as_bytes()).to_le_bytes())?;
    w.write_all(&(config_toml.len() as u32).to_le_bytes())?;
    w.write_all(config_toml.as_bytes())?;
    for bound in [params.aabb.min, params.aabb.max] {
        for v in bound {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let mut sections = vec![("hash".to_string(), params.hash_table.clone())];
    sections.extend(mlp_sections("density", &params.density_mlp));
    sections.extend(mlp_sections("color", &params.color_mlp));
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, data) in &sections {
        write_section(&mut w, name, data)?;
    }
    Ok(())
}

pub fn load(mut r: impl Read) -> Result<FieldParams, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let stored_hash = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u32buf)?;
    let config_len = u32::from_le_bytes(u32buf) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    if fnv1a(&config_bytes) != stored_hash {
        return Err(CheckpointError::ConfigHashMismatch);
    }
    let config: FieldConfig = toml::from_str(
        std::str::from_utf8(&config_bytes).map_err(|e| CheckpointError::Config(e.to_string()))?,
    )
    .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut bounds = [0.0f64; 6];
    for b in &mut bounds {
        r.read_exact(&mut u64buf)?;
        *b = f64::from_le_bytes(u64buf);
    }
    let aabb = Aabb::new(
        [bounds[0], bounds[1], bounds[2]],
        [bounds[3], bounds[4], bounds[5]],
    );

    r.read_exact(&mut u32buf)?;
    let section_count = u32::from_le_bytes(u32buf) as usize;
    let mut sections = std::collections::BTreeMap::new();
    for _ in 0..section_count {
        let (name, data) = read_section(&mut r)?;
        sections.insert(name, data);
    }

    let mut params = FieldParams::new(config, aabb, 0);
    let take = |sections: &mut std::collections::BTreeMap<String, Vec<f64>>,
                name: &str,
                expected: usize|
     -> Result<Vec<f64>, CheckpointError> {
        let data = sections
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))?;
        if data.len() != expected {
            return Err(CheckpointError::SectionSize {
                name: name.to_string(),
                expected,
                actual: data.len(),
            });
        }
        Ok(data)
    };
    params.hash_table = take(&mut sections, "hash", params.hash_table.len())?;
    for (k, layer) in params.density_mlp.layers.iter_mut().enumerate() {
        layer.weights = take(&mut sections, &format!("density.w{k}"), layer.weights.len())?;
        layer.bias = take(&mut sections, &format!("density.b{k}"), layer.bias.len())?;
    }
    for (k, layer) in params.color_mlp.layers.iter_mut().enumerate() {
        layer.weights = take(&mut sections, &format!("color.w{k}"), layer.weights.len())?;
        layer.bias = take(&mut sections, &format!("color.b{k}"), layer.bias.len())?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    #[test]
    fn checkpoint_roundtrip_is_exact_and_stable() {
        let params = FieldParams::new(
            FieldConfig::desk(),
            Aabb::new([-1.0, -2.0, 0.0], [1.0, 2.0, 3.0]),
            42,
        );
        let mut buf = Vec::new();
        save(&params, &mut buf).unwrap();
        let loaded = load(buf.as_slice()).unwrap();
        assert_eq!(params.hash_table, loaded.hash_table);
        assert_eq!(params.config, loaded.config);
        assert_eq!(params.aabb, loaded.aabb);
        for (a, b) in params
            .color_mlp
            .params()
            .zip(loaded.color_mlp.params())
        {
            assert_eq!(a, b);
        }
        // Re-serialization is byte-identical.
        let mut buf2 = Vec::new();
        save(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = FieldParams::new(
            FieldConfig::desk(),
            Aabb::new([0.0; 3], [1.0; 3]),
            7,
        );
        let mut buf = Vec::new();
        save(&params, &mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load(bad_magic.as_slice()),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut bad_config = buf.clone();
        // Flip a byte inside the embedded config.
        bad_config[20] ^= 0xff;
        assert!(load(bad_config.as_slice()).is_err());
    }
}
