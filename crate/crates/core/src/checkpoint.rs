//! Checkpoint serialization: magic `I3NT`, a format version, then named
//! arrays (u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian
//! f32 data). Stores the model configuration (as a `meta.model` array),
//! every parameter, and all initialized prototype entries.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::detector::{ModelConfig, ParamStore, FEAT_CHANNELS, LAYER_NAMES};
use crate::rjca::{PrototypeBank, DEFAULT_RHO};
use crate::tensor::Tensor;
use crate::Error;

pub const MAGIC: [u8; 4] = *b"I3NT";
pub const VERSION: u32 = 1;

fn write_array(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<(), Error> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Write model config, parameters, and initialized prototypes.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamStore,
    bank: &PrototypeBank,
) -> Result<(), Error> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let protos = bank.entries();
    let count = 1 + params.len() + protos.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    let meta = [cfg.image_size as f64, cfg.class_count as f64, cfg.fused_dim as f64];
    write_array(&mut w, "meta.model", &[3], &meta)?;
    for (name, t) in params.iter() {
        write_array(&mut w, name, t.shape(), t.data())?;
    }
    for (name, data) in protos {
        write_array(&mut w, &name, &[data.len()], data)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Load a checkpoint back into (config, parameters, prototype bank). The
/// bank comes back with the default EMA momentum; training overrides it
/// from its own config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore, PrototypeBank), Error> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads version {VERSION}"
        )));
    }
    let count = read_u32(&mut r, "array count")? as usize;
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for idx in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated name of array {idx}: {e}")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("array {idx} name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated data of {name:?}: {e}")))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        arrays.push((name, shape, data));
    }

    let meta = arrays
        .iter()
        .find(|(n, _, _)| n == "meta.model")
        .ok_or_else(|| Error::Checkpoint("missing meta.model array".into()))?;
    if meta.2.len() != 3 {
        return Err(Error::Checkpoint(format!("meta.model has {} entries, expected 3", meta.2.len())));
    }
    let cfg = ModelConfig {
        image_size: meta.2[0] as usize,
        class_count: meta.2[1] as usize,
        fused_dim: meta.2[2] as usize,
    };
    let mut params = ParamStore::new();
    let mut bank = PrototypeBank::new(LAYER_NAMES.len(), cfg.class_count, FEAT_CHANNELS, DEFAULT_RHO)?;
    for (name, shape, data) in arrays {
        if name == "meta.model" {
            continue;
        }
        if name.starts_with("proto.") {
            bank.restore(&name, data)?;
        } else {
            params.insert(&name, Tensor::new(shape, data)?);
        }
    }
    Ok((cfg, params, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::detector::DetectionModel;

    #[test]
    fn roundtrip_is_idempotent_and_exact_after_first_save() {
        let dir = tempfile::tempdir().unwrap();
        let model = DetectionModel::new(ModelConfig::default(), 42);
        let mut bank = PrototypeBank::new(2, 3, FEAT_CHANNELS, DEFAULT_RHO).unwrap();
        bank.set(Domain::Source, 0, 1, vec![0.25; FEAT_CHANNELS]).unwrap();
        bank.set(Domain::Target, 1, 0, vec![-1.5; FEAT_CHANNELS]).unwrap();

        let p1 = dir.path().join("a.i3nt");
        save_checkpoint(&p1, &model.cfg, &model.params, &bank).unwrap();
        let (cfg, params, bank2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg.class_count, 3);
        assert_eq!(cfg.image_size, 64);
        assert_eq!(params.len(), model.params.len());
        assert_eq!(bank2.get(Domain::Source, 0, 1).unwrap(), &[0.25; FEAT_CHANNELS]);
        assert!(bank2.get(Domain::Source, 0, 0).is_none());

        // save the loaded state again: the f32 projection is idempotent,
        // so bytes must be identical
        let p2 = dir.path().join("b.i3nt");
        save_checkpoint(&p2, &cfg, &params, &bank2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "second save must reproduce the file byte for byte");

        // the frozen projections were created on the f32 grid, so they
        // round-trip bit exactly
        let (_, params2, _) = load_checkpoint(&p2).unwrap();
        assert_eq!(
            params.get("copm.r1").unwrap().data(),
            params2.get("copm.r1").unwrap().data()
        );
        assert_eq!(
            model.params.get("copm.r1").unwrap().data(),
            params2.get("copm.r1").unwrap().data()
        );
    }

    #[test]
    fn version_mismatch_names_both_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.i3nt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains('7') && err.contains('1'), "error must cite both versions: {err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.i3nt");
        std::fs::write(&path, b"JUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"I3").unwrap();
        assert!(load_checkpoint(&path).is_err());
        // valid header claiming one array, then EOF
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "got: {err}");
    }
}
