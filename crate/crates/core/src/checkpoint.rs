//! Parameter checkpoints: one JSON document, every array stored as base64 of
//! little-endian `f64` values, plus a dims header.
//!
//! ```json
//! {
//!   "format": "routelab-moe-v1",
//!   "dims": {"d": 8, "d_ff": 16, "n": 4},
//!   "activation": "tanh",
//!   "router_weights": "<base64, d*n values, row-major>",
//!   "experts": [{"w_in": "...", "b_in": "...", "w_out": "...", "b_out": "..."}]
//! }
//! ```

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Activation, ExpertParams, LayerDims, MoeLayerParams};
use crate::numerics::Matrix;

pub const FORMAT: &str = "routelab-moe-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ExpertRecord {
    w_in: String,
    b_in: String,
    w_out: String,
    b_out: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    dims: LayerDims,
    activation: Activation,
    router_weights: String,
    experts: Vec<ExpertRecord>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Parse(format!("checkpoint base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Parse(format!(
            "checkpoint array holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn to_json(params: &MoeLayerParams) -> Result<String> {
    let ckpt = Checkpoint {
        format: FORMAT.to_string(),
        dims: params.dims(),
        activation: params.activation,
        router_weights: encode_f64s(params.router_weights.data()),
        experts: params
            .experts
            .iter()
            .map(|e| ExpertRecord {
                w_in: encode_f64s(e.w_in.data()),
                b_in: encode_f64s(&e.b_in),
                w_out: encode_f64s(e.w_out.data()),
                b_out: encode_f64s(&e.b_out),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&ckpt)?)
}

pub fn from_json(text: &str) -> Result<MoeLayerParams> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != FORMAT {
        return Err(Error::Parse(format!("unknown checkpoint format '{}'", ckpt.format)));
    }
    let LayerDims { d, d_ff, n } = ckpt.dims;
    if ckpt.experts.len() != n {
        return Err(Error::Parse(format!(
            "checkpoint declares {n} experts but stores {}",
            ckpt.experts.len()
        )));
    }
    let router = Matrix::new(d, n, decode_f64s(&ckpt.router_weights, d * n)?)?;
    let experts = ckpt
        .experts
        .iter()
        .map(|r| {
            Ok(ExpertParams {
                w_in: Matrix::new(d, d_ff, decode_f64s(&r.w_in, d * d_ff)?)?,
                b_in: decode_f64s(&r.b_in, d_ff)?,
                w_out: Matrix::new(d_ff, d, decode_f64s(&r.w_out, d_ff * d)?)?,
                b_out: decode_f64s(&r.b_out, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MoeLayerParams::new(router, experts, ckpt.activation)
}

pub fn save(params: &MoeLayerParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoeLayerParams> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dims = LayerDims { d: 5, d_ff: 7, n: 3 };
        let p = MoeLayerParams::init(dims, Activation::Tanh, &mut Rng::new(1)).unwrap();
        let text = to_json(&p).unwrap();
        assert_eq!(from_json(&text).unwrap(), p);
        assert!(text.contains("\"routelab-moe-v1\""));
    }

    #[test]
    fn rejects_corrupt_documents() {
        let dims = LayerDims { d: 2, d_ff: 2, n: 1 };
        let p = MoeLayerParams::init(dims, Activation::Identity, &mut Rng::new(1)).unwrap();
        let text = to_json(&p).unwrap();
        assert!(from_json(&text.replace(FORMAT, "other")).is_err());
        assert!(from_json(&text.replace("\"n\": 1", "\"n\": 2")).is_err());
        assert!(decode_f64s("AAAA", 1).is_err());
        assert!(decode_f64s("!!", 1).is_err());
    }

    proptest! {
        #[test]
        fn f64_arrays_round_trip(v in prop::collection::vec(any::<f64>(), 0..40)) {
            let back = decode_f64s(&encode_f64s(&v), v.len()).unwrap();
            prop_assert_eq!(
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
