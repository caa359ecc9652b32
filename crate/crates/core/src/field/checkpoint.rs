//! `NRF1` checkpoint files.
//!
//! Layout (little-endian): magic `NRF1`; model configuration (`l_pos`,
//! `l_dir`, `n_coarse`, `n_fine`, `n_reference` as u32, `position_scale`,
//! `t_near`, `t_far`,
//! background RGB as f64); layer counts of the proposal and main networks
//! (u32 each); per layer `out`, `in` (u32); then every tensor as f64, each
//! weight row-major followed by its bias, proposal network first.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::encoding::EncodingConfig;
use super::mlp::{Layer, MlpParams};
use super::model::RadianceFieldModel;
use super::render::RenderConfig;
use crate::error::{Error, Result};
use crate::wire::{put_f64, put_u32, Reader};

pub const MAGIC: &[u8; 4] = b"NRF1";

pub(crate) fn write_model_config(out: &mut Vec<u8>, model: &RadianceFieldModel) {
    let r = &model.render;
    for v in [model.encoding.l_pos, model.encoding.l_dir, r.n_coarse, r.n_fine, r.n_reference] {
        put_u32(out, v as u32);
    }
    put_f64(out, model.encoding.position_scale);
    put_f64(out, r.t_near);
    put_f64(out, r.t_far);
    for c in r.background {
        put_f64(out, c);
    }
}

pub(crate) fn read_model_config(r: &mut Reader<'_>) -> Result<(EncodingConfig, RenderConfig)> {
    let l_pos = r.u32()? as usize;
    let l_dir = r.u32()? as usize;
    let n_coarse = r.u32()? as usize;
    let n_fine = r.u32()? as usize;
    let n_reference = r.u32()? as usize;
    let position_scale = r.f64()?;
    let t_near = r.f64()?;
    let t_far = r.f64()?;
    let background = [r.f64()?, r.f64()?, r.f64()?];
    Ok((
        EncodingConfig {
            l_pos,
            l_dir,
            position_scale,
        },
        RenderConfig {
            n_coarse,
            n_fine,
            t_near,
            t_far,
            background,
            n_reference,
        },
    ))
}

/// Layer shapes `(out, in)` of both networks, proposal first.
pub(crate) fn shapes(model: &RadianceFieldModel) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let f = |m: &MlpParams| m.layers.iter().map(|l| (l.outputs(), l.inputs())).collect();
    (f(&model.proposal), f(&model.main))
}

pub fn to_bytes(model: &RadianceFieldModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    write_model_config(&mut out, model);
    let (p, m) = shapes(model);
    put_u32(&mut out, p.len() as u32);
    put_u32(&mut out, m.len() as u32);
    for (o, i) in p.iter().chain(&m) {
        put_u32(&mut out, *o as u32);
        put_u32(&mut out, *i as u32);
    }
    for t in model.proposal.tensors().chain(model.main.tensors()) {
        for &v in t {
            put_f64(&mut out, v);
        }
    }
    out
}

fn read_shapes(r: &mut Reader<'_>, n: usize) -> Result<Vec<(usize, usize)>> {
    (0..n)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect()
}

pub(crate) fn read_mlp(r: &mut Reader<'_>, shapes: &[(usize, usize)]) -> Result<MlpParams> {
    let mut layers = Vec::with_capacity(shapes.len());
    for &(o, i) in shapes {
        let n = o
            .checked_mul(i)
            .filter(|n| n * 8 <= r.remaining())
            .ok_or_else(|| Error::decode(r.position(), format!("layer shape {o}x{i} exceeds file")))?;
        let w: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        let b: Vec<f64> = (0..o).map(|_| r.f64()).collect::<Result<_>>()?;
        layers.push(Layer {
            weight: Array2::from_shape_vec((o, i), w).expect("shape checked"),
            bias: Array1::from(b),
        });
    }
    Ok(MlpParams { layers })
}

pub fn from_bytes(bytes: &[u8]) -> Result<RadianceFieldModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let (encoding, render) = read_model_config(&mut r)?;
    let np = r.u32()? as usize;
    let nm = r.u32()? as usize;
    if np + nm > r.remaining() / 8 {
        return Err(Error::decode(r.position(), "layer count exceeds file size"));
    }
    let ps = read_shapes(&mut r, np)?;
    let ms = read_shapes(&mut r, nm)?;
    let proposal = read_mlp(&mut r, &ps)?;
    let main = read_mlp(&mut r, &ms)?;
    r.finish()?;
    let model = RadianceFieldModel {
        proposal,
        main,
        encoding,
        render,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &RadianceFieldModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<RadianceFieldModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> RadianceFieldModel {
        RadianceFieldModel::new(
            &Architecture {
                main_depth: 2,
                main_width: 5,
                proposal_depth: 1,
                proposal_width: 3,
            },
            EncodingConfig {
                l_pos: 2,
                l_dir: 1,
                position_scale: 2.5,
            },
            RenderConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        assert_eq!(from_bytes(&to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn size_matches_layout() {
        let m = model();
        let header = 4 + 5 * 4 + 6 * 8 + 8 + 8 * (m.proposal.layers.len() + m.main.layers.len());
        assert_eq!(to_bytes(&m).len(), header + 8 * m.param_count());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Decode { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
