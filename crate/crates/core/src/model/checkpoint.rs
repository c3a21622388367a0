//! Binary checkpoint format. All integers are little-endian `u32`, all
//! values little-endian `f64`.
//!
//! ```text
//! magic        7 bytes  "SUBSEP1"
//! layers       u32 m, then m x (channels u32, kernel u32, relu u8)
//! input shape  u32 H, u32 W
//! classes      u32 c, then c x u32 class size
//! tensors      u32 count, then per tensor: u32 rank, rank x u32 extent,
//!              product(extents) x f64
//! ```
//!
//! Tensors follow declaration order: encoder (weight, bias) per layer, the
//! `N x N` CSSE matrix, then decoder (weight, bias) in application order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ConvLayer, LayerSpec, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SUBSEP1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Checkpoint("truncated file".into())
    } else {
        ModelError::Io(e)
    }
}

pub fn write_checkpoint(model: &ModelParams, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, model.arch().len())?;
    for l in model.arch() {
        put_u32(w, l.channels)?;
        put_u32(w, l.kernel)?;
        w.write_all(&[u8::from(l.relu)])?;
    }
    let (h, wd) = model.input_shape();
    put_u32(w, h)?;
    put_u32(w, wd)?;
    put_u32(w, model.class_sizes().len())?;
    for &n in model.class_sizes() {
        put_u32(w, n)?;
    }
    let tensors = model.tensors();
    put_u32(w, tensors.len())?;
    for t in tensors {
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let m = get_u32(r)?;
    let mut arch = Vec::with_capacity(m);
    for _ in 0..m {
        let channels = get_u32(r)?;
        let kernel = get_u32(r)?;
        let mut relu = [0u8];
        r.read_exact(&mut relu).map_err(truncated)?;
        arch.push(LayerSpec { channels, kernel, relu: relu[0] != 0 });
    }
    let input_shape = (get_u32(r)?, get_u32(r)?);
    let c = get_u32(r)?;
    let sizes = (0..c).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let count = get_u32(r)?;
    if count != 4 * m + 1 {
        return Err(ModelError::Checkpoint(format!("{count} tensors for {m} layers")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?);
    }
    let mut it = tensors.into_iter();
    let mut pairs = |k: usize| -> Vec<ConvLayer> {
        (0..k).map(|_| ConvLayer { weight: it.next().unwrap(), bias: it.next().unwrap() }).collect()
    };
    let encoder = pairs(m);
    let csse = it.next().unwrap();
    let decoder = (0..m).map(|_| ConvLayer { weight: it.next().unwrap(), bias: it.next().unwrap() }).collect();
    ModelParams::from_parts(arch, input_shape, sizes, encoder, csse, decoder)
}

pub fn save_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let arch = [LayerSpec::new(3, 3, false), LayerSpec::new(2, 3, true)];
        let mut m = ModelParams::build(&arch, (6, 5), &[0, 0, 1, 1, 1], 3).unwrap();
        m.csse.data_mut()[1] = 0.25;
        m.decoder[1].bias.data_mut()[0] = -1.5;
        m
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..7], b"SUBSEP1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(ModelError::Checkpoint(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &short[..]), Err(ModelError::Checkpoint(_))));
    }
}
