//! Compression of radiance-field parameters: per-tensor step sizes from a
//! single QP, uniform or trellis-searched dependent scalar quantization, and
//! context-adaptive binary arithmetic coding of the indices.

use std::path::Path;

use crate::coder::{decode_eg0, encode_eg0, BinSink, Context, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::field::checkpoint::{read_model_config, write_model_config};
use crate::field::{Layer, MlpParams, RadianceFieldModel};
use crate::wire::{put_f64, put_u16, put_u32, Reader};

pub const MAGIC: &[u8; 4] = b"NNCb";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Dimension {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            shape,
            values,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Parameter-codec quantization parameter in `[-64, 64]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nnqp(i8);

impl Nnqp {
    pub const MIN: i32 = -64;
    pub const MAX: i32 = 64;

    pub fn new(qp: i32) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&qp) {
            return Err(Error::InvalidArgument(format!(
                "parameter QP {qp} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )));
        }
        Ok(Self(qp as i8))
    }

    pub fn value(self) -> i32 {
        self.0 as i32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantizerKind {
    Uniform,
    Dependent,
}

impl QuantizerKind {
    fn code(self) -> u8 {
        match self {
            Self::Uniform => 0,
            Self::Dependent => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Uniform),
            1 => Some(Self::Dependent),
            _ => None,
        }
    }
}

impl std::fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Dependent => "dependent",
        })
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "dependent" => Ok(Self::Dependent),
            _ => Err(Error::Config(format!("unknown quantizer kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub step: f64,
    pub indices: Vec<i32>,
    /// How `indices` map to reconstruction levels.
    pub kind: QuantizerKind,
}

impl QuantizedTensor {
    pub fn manifest(&self) -> TensorManifest {
        TensorManifest {
            name: self.name.clone(),
            shape: self.shape.clone(),
            step: self.step,
        }
    }
}

/// What a decoder must know about a tensor before reading its payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub step: f64,
}

impl TensorManifest {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `max_abs * 2^(qp / 4)`, or 1 for an all-zero tensor.
pub fn qp_to_stepsize(qp: Nnqp, tensor: &TensorRecord) -> f64 {
    let m = tensor.max_abs();
    if m == 0.0 {
        1.0
    } else {
        m * 2f64.powf(qp.value() as f64 / 4.0)
    }
}

fn check_step(step: f64) {
    assert!(step > 0.0 && step.is_finite(), "quantizer step must be positive, got {step}");
}

/// Rounds `value / step` to the nearest integer, ties to even.
pub fn quantize_uniform(tensor: &TensorRecord, step: f64) -> QuantizedTensor {
    check_step(step);
    QuantizedTensor {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        step,
        indices: tensor
            .values
            .iter()
            .map(|v| (v / step).round_ties_even() as i32)
            .collect(),
        kind: QuantizerKind::Uniform,
    }
}

/// Next state of the dependent quantizer given the current state and the
/// parity of the coded index. States 0 and 1 use the integer grid, states 2
/// and 3 the half-integer grid (plus zero).
const NEXT_STATE: [[usize; 2]; 4] = [[0, 2], [2, 0], [1, 3], [3, 1]];

fn dq_level(state: usize, k: i32, step: f64) -> f64 {
    if state < 2 {
        k as f64 * step
    } else {
        (k as f64 - 0.5 * k.signum() as f64) * step
    }
}

/// Index candidates for `x` in `state`: the two levels bracketing `x` on the
/// state's grid, plus zero.
fn dq_candidates(state: usize, x: f64, step: f64) -> [i32; 3] {
    let u = x / step;
    let lo = if state < 2 {
        u.floor() as i32
    } else if u >= 0.0 {
        // level(k) = (k - 1/2) step for k > 0
        (u + 0.5).floor() as i32
    } else {
        (u - 0.5).floor() as i32
    };
    [lo, lo + 1, 0]
}

fn squared_error(values: &[f64], recon: &[f64]) -> f64 {
    values.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Viterbi search over the 4-state trellis for the index sequence with the
/// least total squared error. The result always has `kind == Dependent`.
pub fn quantize_trellis(tensor: &TensorRecord, step: f64) -> QuantizedTensor {
    check_step(step);
    let n = tensor.values.len();
    let mut cost = [0.0, f64::INFINITY, f64::INFINITY, f64::INFINITY];
    // back[i][s] = (previous state, index) of the best path into s after i
    let mut back: Vec<[(u8, i32); 4]> = Vec::with_capacity(n);
    for &x in &tensor.values {
        let mut next = [f64::INFINITY; 4];
        let mut bp = [(0u8, 0i32); 4];
        for s in 0..4 {
            if !cost[s].is_finite() {
                continue;
            }
            let cands = dq_candidates(s, x, step);
            for (ci, &k) in cands.iter().enumerate() {
                if cands[..ci].contains(&k) {
                    continue;
                }
                let e = x - dq_level(s, k, step);
                let c = cost[s] + e * e;
                let t = NEXT_STATE[s][(k & 1) as usize];
                if c < next[t] {
                    next[t] = c;
                    bp[t] = (s as u8, k);
                }
            }
        }
        cost = next;
        back.push(bp);
    }
    let mut state = (0..4)
        .min_by(|&a, &b| cost[a].total_cmp(&cost[b]))
        .expect("four states");
    let mut indices = vec![0; n];
    for i in (0..n).rev() {
        let (prev, k) = back[i][state];
        indices[i] = k;
        state = prev as usize;
    }
    QuantizedTensor {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        step,
        indices,
        kind: QuantizerKind::Dependent,
    }
}

/// Dependent quantization: the trellis result, or the uniform quantizer's
/// when that has strictly less squared error (the trellis cannot always
/// follow the uniform grid, since odd indices switch grids).
pub fn quantize_dependent(tensor: &TensorRecord, step: f64) -> QuantizedTensor {
    let dq = quantize_trellis(tensor, step);
    let uq = quantize_uniform(tensor, step);
    let e_dq = squared_error(&tensor.values, &dequantize(&dq));
    let e_uq = squared_error(&tensor.values, &dequantize(&uq));
    if e_uq < e_dq {
        uq
    } else {
        dq
    }
}

pub fn quantize(tensor: &TensorRecord, step: f64, kind: QuantizerKind) -> QuantizedTensor {
    match kind {
        QuantizerKind::Uniform => quantize_uniform(tensor, step),
        QuantizerKind::Dependent => quantize_dependent(tensor, step),
    }
}

pub fn dequantize(qt: &QuantizedTensor) -> Vec<f64> {
    match qt.kind {
        QuantizerKind::Uniform => qt.indices.iter().map(|&k| k as f64 * qt.step).collect(),
        QuantizerKind::Dependent => {
            let mut state = 0;
            qt.indices
                .iter()
                .map(|&k| {
                    let v = dq_level(state, k, qt.step);
                    state = NEXT_STATE[state][(k & 1) as usize];
                    v
                })
                .collect()
        }
    }
}

const EG_CONTEXTS: usize = 8;

struct IndexContexts {
    sig: [Context; 2],
    sign: Context,
    gt1: Context,
    gt2: Context,
    rem: [Context; EG_CONTEXTS],
}

impl IndexContexts {
    fn new() -> Self {
        Self {
            sig: [Context::default(); 2],
            sign: Context::default(),
            gt1: Context::default(),
            gt2: Context::default(),
            rem: [Context::default(); EG_CONTEXTS],
        }
    }
}

/// Payload: one bypass bin for the quantizer kind, then per index a
/// significance flag (context chosen by whether the previous index was zero),
/// sign, `|k| > 1`, `|k| > 2` and an Exp-Golomb remainder of `|k| - 3`.
pub fn entropy_encode(qt: &QuantizedTensor) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.encode_bypass(qt.kind == QuantizerKind::Dependent);
    let mut ctx = IndexContexts::new();
    let mut prev_zero = true;
    for &k in &qt.indices {
        let a = k.unsigned_abs();
        enc.encode(&mut ctx.sig[prev_zero as usize], a != 0);
        prev_zero = a == 0;
        if a == 0 {
            continue;
        }
        enc.encode(&mut ctx.sign, k < 0);
        enc.encode(&mut ctx.gt1, a > 1);
        if a > 1 {
            enc.encode(&mut ctx.gt2, a > 2);
            if a > 2 {
                encode_eg0(&mut enc, &mut ctx.rem, a - 3);
            }
        }
    }
    enc.finish()
}

pub fn entropy_decode(bytes: &[u8], manifest: &TensorManifest) -> Result<QuantizedTensor> {
    entropy_decode_at(bytes, manifest, 0)
}

fn entropy_decode_at(bytes: &[u8], manifest: &TensorManifest, base: usize) -> Result<QuantizedTensor> {
    let mut dec = Decoder::with_offset(bytes, base)?;
    let kind = if dec.decode_bypass()? {
        QuantizerKind::Dependent
    } else {
        QuantizerKind::Uniform
    };
    let mut ctx = IndexContexts::new();
    let mut prev_zero = true;
    let n = manifest.len();
    let mut indices = Vec::with_capacity(n.min(bytes.len() * 64));
    for _ in 0..n {
        let sig = dec.decode(&mut ctx.sig[prev_zero as usize])?;
        prev_zero = !sig;
        if !sig {
            indices.push(0);
            continue;
        }
        let negative = dec.decode(&mut ctx.sign)?;
        let mut a: u32 = 1;
        if dec.decode(&mut ctx.gt1)? {
            a = 2;
            if dec.decode(&mut ctx.gt2)? {
                a = decode_eg0(&mut dec, &mut ctx.rem)?
                    .checked_add(3)
                    .filter(|&a| a <= i32::MAX as u32)
                    .ok_or_else(|| Error::decode(base + dec.position(), "index magnitude overflow"))?;
            }
        }
        indices.push(if negative { -(a as i32) } else { a as i32 });
    }
    dec.finish()?;
    Ok(QuantizedTensor {
        name: manifest.name.clone(),
        shape: manifest.shape.clone(),
        step: manifest.step,
        indices,
        kind,
    })
}

/// Tensors of both networks in a fixed order: proposal layers then main
/// layers, each weight (`out x in`) followed by its bias.
pub fn model_tensors(model: &RadianceFieldModel) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    for (net, params) in [("proposal", &model.proposal), ("main", &model.main)] {
        for (i, layer) in params.layers.iter().enumerate() {
            out.push(TensorRecord {
                name: format!("{net}.{i}.weight"),
                shape: vec![layer.outputs(), layer.inputs()],
                values: layer.weight.iter().copied().collect(),
            });
            out.push(TensorRecord {
                name: format!("{net}.{i}.bias"),
                shape: vec![layer.outputs()],
                values: layer.bias.to_vec(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamHeader {
    pub version: u8,
    pub qp: Nnqp,
    pub kind: QuantizerKind,
    /// Model configuration carried so the client can rebuild the renderer;
    /// the tensors themselves hold no weights here.
    pub config: RadianceFieldModel,
    pub tensors: Vec<TensorManifest>,
    /// Payload size of each tensor in bits (always a multiple of 8).
    pub payload_bits: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBitstream {
    pub header: ParamHeader,
    pub payloads: Vec<Vec<u8>>,
}

impl ParamBitstream {
    /// Total size of the serialized stream, header included.
    pub fn bit_length(&self) -> u64 {
        8 * self.to_bytes().len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = MAGIC.to_vec();
        out.push(h.version);
        out.push(h.qp.0 as u8);
        out.push(h.kind.code());
        write_model_config(&mut out, &h.config);
        put_u32(&mut out, h.tensors.len() as u32);
        for (t, bits) in h.tensors.iter().zip(&h.payload_bits) {
            put_u16(&mut out, t.name.len() as u16);
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            put_f64(&mut out, t.step);
            put_u32(&mut out, *bits);
        }
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = read_header_from(&mut r)?;
        let mut payloads = Vec::with_capacity(header.tensors.len());
        for &bits in &header.payload_bits {
            payloads.push(r.take(bits as usize / 8)?.to_vec());
        }
        r.finish()?;
        Ok(Self { header, payloads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses only the header of a serialized stream.
pub fn read_header(bytes: &[u8]) -> Result<ParamHeader> {
    read_header_from(&mut Reader::new(bytes))
}

fn read_header_from(r: &mut Reader<'_>) -> Result<ParamHeader> {
    r.expect_magic(MAGIC)?;
    let at = r.position();
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::decode(at, format!("unsupported version {version}")));
    }
    let at = r.position();
    let qp = Nnqp::new(r.i8()? as i32).map_err(|e| Error::decode(at, e.to_string()))?;
    let at = r.position();
    let kind = QuantizerKind::from_code(r.u8()?)
        .ok_or_else(|| Error::decode(at, "unknown quantizer kind"))?;
    let (encoding, render) = read_model_config(r)?;
    let count = r.u32()? as usize;
    if count > r.remaining() {
        return Err(Error::decode(r.position(), "tensor count exceeds stream size"));
    }
    let mut tensors = Vec::with_capacity(count);
    let mut payload_bits = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.position();
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::decode(at, "tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let at = r.position();
        let step = r.f64()?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::decode(at, format!("invalid step {step}")));
        }
        let at = r.position();
        let bits = r.u32()?;
        if bits % 8 != 0 {
            return Err(Error::decode(at, "payload bit count not byte aligned"));
        }
        tensors.push(TensorManifest { name, shape, step });
        payload_bits.push(bits);
    }
    Ok(ParamHeader {
        version,
        qp,
        kind,
        config: RadianceFieldModel {
            proposal: MlpParams { layers: vec![] },
            main: MlpParams { layers: vec![] },
            encoding,
            render,
        },
        tensors,
        payload_bits,
    })
}

pub fn encode_model(model: &RadianceFieldModel, qp: Nnqp, kind: QuantizerKind) -> ParamBitstream {
    let mut tensors = Vec::new();
    let mut payload_bits = Vec::new();
    let mut payloads = Vec::new();
    for t in model_tensors(model) {
        let qt = quantize(&t, qp_to_stepsize(qp, &t), kind);
        let bytes = entropy_encode(&qt);
        tensors.push(qt.manifest());
        payload_bits.push(8 * bytes.len() as u32);
        payloads.push(bytes);
    }
    ParamBitstream {
        header: ParamHeader {
            version: VERSION,
            qp,
            kind,
            config: RadianceFieldModel {
                proposal: MlpParams { layers: vec![] },
                main: MlpParams { layers: vec![] },
                encoding: model.encoding,
                render: model.render.clone(),
            },
            tensors,
            payload_bits,
        },
        payloads,
    }
}

/// Byte offset of the first payload in the serialized stream.
fn payload_base(bs: &ParamBitstream) -> usize {
    let total: usize = bs.payloads.iter().map(Vec::len).sum();
    bs.to_bytes().len() - total
}

fn parse_name(name: &str) -> Option<(&str, usize, &str)> {
    let mut parts = name.split('.');
    let net = parts.next()?;
    let idx = parts.next()?.parse().ok()?;
    let what = parts.next()?;
    parts.next().is_none().then_some((net, idx, what))
}

pub fn decode_model(bs: &ParamBitstream) -> Result<RadianceFieldModel> {
    let h = &bs.header;
    if h.tensors.len() != bs.payloads.len() {
        return Err(Error::decode(0, "tensor count does not match payload count"));
    }
    let mut offset = payload_base(bs);
    let mut nets: [Vec<Layer>; 2] = [Vec::new(), Vec::new()];
    for (m, payload) in h.tensors.iter().zip(&bs.payloads) {
        let qt = entropy_decode_at(payload, m, offset)?;
        let values = dequantize(&qt);
        let bad = || Error::decode(offset, format!("unexpected tensor {:?} {:?}", m.name, m.shape));
        let (net, idx, what) = parse_name(&m.name).ok_or_else(bad)?;
        let layers = match net {
            "proposal" => &mut nets[0],
            "main" => &mut nets[1],
            _ => return Err(bad()),
        };
        match (what, m.shape.as_slice()) {
            ("weight", &[o, i]) if idx == layers.len() => layers.push(Layer {
                weight: ndarray::Array2::from_shape_vec((o, i), values).expect("manifest length"),
                bias: ndarray::Array1::zeros(o),
            }),
            ("bias", &[o]) if idx + 1 == layers.len() && layers[idx].outputs() == o => {
                layers[idx].bias = ndarray::Array1::from(values);
            }
            _ => return Err(bad()),
        }
        offset += payload.len();
    }
    let [proposal, main] = nets;
    let model = RadianceFieldModel {
        proposal: MlpParams { layers: proposal },
        main: MlpParams { layers: main },
        encoding: h.config.encoding,
        render: h.config.render.clone(),
    };
    model.validate()?;
    Ok(model)
}
