//! Versioned binary checkpoints: model config, step counter, and every
//! parameter as shape + flat f64 data. Parameters are written in sorted
//! path order, so identical state produces identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STLABCK1";

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &ModelConfig,
    step: u64,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (path, tensor) in params.iter() {
        let name = path.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.borrow_data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig, u64)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)?;
    let config: ModelConfig =
        serde_json::from_slice(&config_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes)?;
    let step = u64::from_le_bytes(step_bytes);
    let n_params = read_u32(&mut r)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n_params {
        let mut len_bytes = [0u8; 2];
        r.read_exact(&mut len_bytes)?;
        let mut name = vec![0u8; u16::from_le_bytes(len_bytes) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        map.insert(name, Tensor::param(&shape, data)?);
    }
    Ok((ModelParams::from_map(map), config, step))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_byte_stability() {
        let config = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            feature_dim: 4,
            ..Default::default()
        };
        let params = ModelParams::init(&config, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &params, &config, 17).unwrap();
        save_checkpoint(&p2, &params, &config, 17).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (loaded, config2, step) = load_checkpoint(&p1).unwrap();
        assert_eq!(step, 17);
        assert_eq!(config2.vocab_size, config.vocab_size);
        assert_eq!(loaded.len(), params.len());
        for (path, t) in params.iter() {
            assert_eq!(loaded.get(path).to_vec(), t.to_vec(), "param {path}");
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOTACKPTxxxx").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
