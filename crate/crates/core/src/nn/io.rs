//! Binary parameter blob.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "PDPARAM1"
//! layer_count  u32
//! per layer    u32 out, u32 in, u8 activation (0 identity, 1 relu, 2 sigmoid)
//! per layer    out*in f64 weights (row-major), then out f64 biases
//! ```

use std::io::{Read, Write};

use super::{Activation, Layer, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const PARAM_MAGIC: &[u8; 8] = b"PDPARAM1";

pub fn write_layers<T: Real, W: Write>(mut w: W, layers: &[&Layer<T>]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        w.write_all(&(l.output_dim() as u32).to_le_bytes())?;
        w.write_all(&(l.input_dim() as u32).to_le_bytes())?;
        w.write_all(&[l.activation.code()])?;
    }
    for l in layers {
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_layers<T: Real, R: Read>(mut r: R) -> Result<Vec<Layer<T>>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("bad parameter magic".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let out = read_u32(&mut r)? as usize;
        let inp = read_u32(&mut r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let act = Activation::from_code(code[0])
            .ok_or_else(|| Error::Format(format!("layer {i}: unknown activation {}", code[0])))?;
        shapes.push((out, inp, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (out, inp, act) in shapes {
        let mut w = Vec::with_capacity(out * inp);
        for _ in 0..out * inp {
            w.push(T::lit(read_f64(&mut r)?));
        }
        let mut b = Vec::with_capacity(out);
        for _ in 0..out {
            b.push(T::lit(read_f64(&mut r)?));
        }
        layers.push(Layer::new(Matrix::from_vec(out, inp, w)?, b, act)?);
    }
    Ok(layers)
}
