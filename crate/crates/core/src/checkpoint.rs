//! `TRNW` model checkpoints.
//!
//! All integers and floats are little-endian; parameters are stored as
//! IEEE-754 `f32`.
//!
//! ```text
//! magic        b"TRNW"
//! version      u32 = 1
//! pooling      u32   0 temporal-relation, 1 average-pool, 2 single-frame
//! D H C N k    u32 x 5
//! tuple_seed   u64
//! mlp_count    u32   2 * (N - 1) for relation models (g then h, ascending scale), 1 otherwise
//! per MLP:     u32 layer_count, then per layer:
//!              u32 out_dim, u32 in_dim, u32 activation (0 none, 1 relu),
//!              f32[out_dim * in_dim] weights (row-major), f32[out_dim] bias
//! ```

use std::path::Path;

use crate::data::Cursor;
use crate::model::{Model, ModelConfig, Pooling};
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::relation::{MultiScaleTrn, RelationModule};
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TRNW";
pub const WEIGHTS_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_mlp(out: &mut Vec<u8>, mlp: &Mlp) -> Result<()> {
    put_u32(out, mlp.layers().len())?;
    for layer in mlp.layers() {
        put_u32(out, layer.out_dim())?;
        put_u32(out, layer.in_dim())?;
        put_u32(out, layer.activation().code() as usize)?;
        for &v in layer.weights().iter().chain(layer.bias()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    put_u32(&mut out, c.pooling.code() as usize)?;
    for v in [c.feature_dim, c.hidden, c.classes, c.frames, c.per_scale] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&c.tuple_seed.to_le_bytes());
    match (model.relation(), model.head()) {
        (Some(trn), _) => {
            put_u32(&mut out, 2 * trn.modules().len())?;
            for m in trn.modules() {
                put_mlp(&mut out, m.g())?;
                put_mlp(&mut out, m.h())?;
            }
        }
        (None, Some(head)) => {
            put_u32(&mut out, 1)?;
            put_mlp(&mut out, head)?;
        }
        (None, None) => unreachable!("a model is either relational or a head"),
    }
    Ok(out)
}

fn read_mlp(cur: &mut Cursor<'_>) -> Result<Mlp> {
    let at = cur.offset();
    let count = cur.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::Format {
            offset: at,
            message: "MLP with zero layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let at = cur.offset();
        let out_dim = cur.u32("layer out_dim")? as usize;
        let in_dim = cur.u32("layer in_dim")? as usize;
        let code = cur.u32("activation")?;
        let activation = Activation::from_code(code).ok_or_else(|| Error::Format {
            offset: at + 8,
            message: format!("unknown activation code {code}"),
        })?;
        let weights = cur.f32s(out_dim.saturating_mul(in_dim), "weights")?;
        let bias = cur.f32s(out_dim, "bias")?;
        layers.push(
            DenseLayer::from_parts(in_dim, out_dim, weights, bias, activation).map_err(|e| {
                Error::Format {
                    offset: at,
                    message: e.to_string(),
                }
            })?,
        );
    }
    Mlp::new(layers).map_err(|e| Error::Format {
        offset: at,
        message: e.to_string(),
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor::new(bytes);
    cur.magic(WEIGHTS_MAGIC)?;
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let at = cur.offset();
    let code = cur.u32("pooling")?;
    let pooling = Pooling::from_code(code).ok_or_else(|| Error::Format {
        offset: at,
        message: format!("unknown pooling code {code}"),
    })?;
    let mut dims = [0usize; 5];
    for (slot, name) in dims.iter_mut().zip(["D", "H", "C", "N", "k"]) {
        *slot = cur.u32(name)? as usize;
    }
    let tuple_seed = cur.u64("tuple seed")?;
    let config = ModelConfig {
        pooling,
        feature_dim: dims[0],
        hidden: dims[1],
        classes: dims[2],
        frames: dims[3],
        per_scale: dims[4],
        tuple_seed,
    };
    let header_end = cur.offset();
    let count_at = cur.offset();
    let count = cur.u32("mlp count")? as usize;
    let wrap = |e: Error| match e {
        Error::InvalidInput(message) => Error::Format {
            offset: header_end,
            message,
        },
        other => other,
    };
    let model = if pooling == Pooling::TemporalRelation {
        if count != 2 * config.frames.saturating_sub(1) {
            return Err(Error::Format {
                offset: count_at,
                message: format!("{count} MLPs for N = {}", config.frames),
            });
        }
        let mut modules = Vec::with_capacity(count / 2);
        for scale in 2..=config.frames {
            let g = read_mlp(&mut cur)?;
            let h = read_mlp(&mut cur)?;
            modules.push(RelationModule::from_parts(scale, config.feature_dim, g, h).map_err(wrap)?);
        }
        let trn = MultiScaleTrn::from_modules(modules).map_err(wrap)?;
        Model::from_body(config, crate::model::Body::Relation(trn)).map_err(wrap)?
    } else {
        if count != 1 {
            return Err(Error::Format {
                offset: count_at,
                message: format!("{count} MLPs for a pooled head"),
            });
        }
        let head = read_mlp(&mut cur)?;
        Model::from_body(config, crate::model::Body::Head(head)).map_err(wrap)?
    };
    cur.finish()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}
