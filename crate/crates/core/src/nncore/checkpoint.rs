//! Checkpoints: a versioned binary container of named parameter tensors,
//! little-endian f64 values in visit order.

use super::ParamSource;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"C3DP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, net: &mut dyn ParamSource) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    net.visit(&mut |p| entries.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    let mut seen = std::collections::BTreeSet::new();
    for (name, _, _) in &entries {
        assert!(seen.insert(name.clone()), "duplicate parameter name {name}");
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, value) in &entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(value.len() as u64).to_le_bytes());
        for v in value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint into `net`. Every tensor in the net must be present in
/// the file with a matching shape, and vice versa.
pub fn load_checkpoint(path: &Path, net: &mut dyn ParamSource) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut table: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Format("bad parameter name".into()))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if n != shape.iter().product::<usize>() {
            return Err(Error::Format(format!("tensor {name} size does not match shape")));
        }
        let mut value = Vec::with_capacity(n);
        for _ in 0..n {
            value.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        if table.insert(name.clone(), (shape, value)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let mut missing: Vec<String> = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    net.visit(&mut |p| match table.get(&p.name) {
        Some((shape, value)) if *shape == p.shape => {
            p.value.copy_from_slice(value);
            used.insert(p.name.clone());
        }
        Some(_) => missing.push(format!("{} (shape mismatch)", p.name)),
        None => missing.push(p.name.clone()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint missing tensors: {}", missing.join(", "))));
    }
    if used.len() != table.len() {
        let extra: Vec<&String> = table.keys().filter(|k| !used.contains(*k)).collect();
        return Err(Error::Format(format!(
            "checkpoint has {} unused tensors (e.g. {:?})",
            table.len() - used.len(),
            extra.first()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{Dense, Mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = Dense::new("lin", 7, 5, 1.0, &mut rng);
        let x = Mat::from_vec(2, 7, (0..14).map(|i| i as f64 * 0.1).collect());
        let before = net.forward(&x, false);
        save_checkpoint(&path, &mut net).unwrap();
        let mut other = Dense::new("lin", 7, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
        load_checkpoint(&path, &mut other).unwrap();
        let after = other.forward(&x, false);
        assert_eq!(before.data, after.data, "loaded weights must reproduce bitwise");
    }

    #[test]
    fn shape_and_name_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = Dense::new("lin", 7, 5, 1.0, &mut rng);
        save_checkpoint(&path, &mut net).unwrap();
        let mut wrong_shape = Dense::new("lin", 6, 5, 1.0, &mut rng);
        assert!(load_checkpoint(&path, &mut wrong_shape).is_err());
        let mut wrong_name = Dense::new("other", 7, 5, 1.0, &mut rng);
        assert!(load_checkpoint(&path, &mut wrong_name).is_err());
        assert!(load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt"), &mut net).is_err());
    }
}
