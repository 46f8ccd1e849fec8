//! Hand-rolled differentiable building blocks in `f64`.

mod adam;
pub mod loss;
mod net;

pub use adam::Adam;
pub use net::{sigmoid, Layer, Net, Trace};
pub(crate) use net::dot;

use sha2::{Digest, Sha256};

/// SHA-256 over the little-endian bytes of a parameter vector, hex encoded.
pub fn param_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Adds `src` into `dst` element-wise.
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn scale(v: &mut [f64], k: f64) {
    v.iter_mut().for_each(|x| *x *= k);
}
