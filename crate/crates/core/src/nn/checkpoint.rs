//! Binary network checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "MDNN"
//! version      u32      currently 1
//! hidden act   u8       0 identity, 1 relu, 2 tanh
//! output act   u8
//! layer count  u32      number of entries in the size list
//! sizes        u32 x layer count
//! param count  u64
//! params       f64 x param count (IEEE-754 bit patterns)
//! ```

use super::{param_count, Activation, Mlp, NnError};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDNN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_mlp<W: Write>(net: &Mlp, w: &mut W) -> Result<(), NnError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[net.hidden_activation().code(), net.output_activation().code()])?;
    w.write_all(&(net.sizes().len() as u32).to_le_bytes())?;
    for &s in net.sizes() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(net.param_count() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp, NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if &read_array::<4, _>(r)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let [h, o] = read_array::<2, _>(r)?;
    let hidden = Activation::from_code(h).ok_or_else(|| bad("unknown hidden activation"))?;
    let output = Activation::from_code(o).ok_or_else(|| bad("unknown output activation"))?;
    let layers = u32::from_le_bytes(read_array(r)?) as usize;
    if !(2..=64).contains(&layers) {
        return Err(bad("implausible layer count"));
    }
    let sizes = (0..layers)
        .map(|_| read_array::<4, _>(r).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.contains(&0) {
        return Err(bad("zero-width layer"));
    }
    let count = u64::from_le_bytes(read_array(r)?) as usize;
    if count != param_count(&sizes) {
        return Err(bad("parameter count does not match layer sizes"));
    }
    let params = (0..count)
        .map(|_| read_array::<8, _>(r).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>, _>>()?;
    Mlp::from_params(&sizes, hidden, output, params)
}
