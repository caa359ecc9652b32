//! Block-transform image and video codec for training frames.
//!
//! Frames are full-range BT.601 YCbCr 4:4:4. Every plane is split into 8x8
//! transform blocks grouped into 16x16 macroblocks, coded in raster order.
//! Intra blocks use DC prediction from reconstructed neighbors; inter
//! macroblocks use one integer motion vector for all three planes. Residuals
//! go through an orthonormal DCT, uniform quantization and context-adaptive
//! arithmetic coding of (run, level, last) triples.

use std::path::Path;
use std::sync::LazyLock;

use crate::coder::{decode_eg0, encode_eg0, BinSink, Context, CostEstimator, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::image::{to_u8, Image};
use crate::scene::{read_poses, write_poses, CameraPose, POSE_RECORD_BYTES};
use crate::wire::{put_u32, Reader};

pub const MAGIC: &[u8; 4] = b"IVSb";
pub const VERSION: u8 = 1;
/// Macroblock size; frame dimensions are padded to a multiple of it.
pub const MB: usize = 16;
pub const SEARCH_RANGE: i32 = 8;

/// Three 8-bit planes (Y, Cb, Cr) of identical size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<u8>; 3],
}

impl Frame {
    /// `width` and `height` must be positive multiples of 16.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(
            width > 0 && height > 0 && width % MB == 0 && height % MB == 0,
            "frame size {width}x{height} is not a multiple of {MB}"
        );
        let n = width * height;
        Self {
            width,
            height,
            planes: [vec![0; n], vec![128; n], vec![128; n]],
        }
    }

    #[inline]
    pub fn at(&self, plane: usize, x: usize, y: usize) -> u8 {
        self.planes[plane][y * self.width + x]
    }

    /// Sample with coordinates clamped to the frame (edge extension).
    #[inline]
    fn at_clamped(&self, plane: usize, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.at(plane, x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VideoQp(u8);

impl VideoQp {
    pub const MAX: u8 = 51;

    pub fn new(qp: i32) -> Result<Self> {
        if !(0..=Self::MAX as i32).contains(&qp) {
            return Err(Error::InvalidArgument(format!("video QP {qp} outside [0, 51]")));
        }
        Ok(Self(qp as u8))
    }

    pub fn value(self) -> i32 {
        self.0 as i32
    }
}

/// `2^((qp - 4) / 6)`.
pub fn qp_to_qstep(qp: VideoQp) -> f64 {
    2f64.powf((qp.value() - 4) as f64 / 6.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MotionVector {
    pub dx: i32,
    pub dy: i32,
}

impl MotionVector {
    pub const ZERO: Self = Self { dx: 0, dy: 0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodingMode {
    Intra,
    Inter,
}

impl CodingMode {
    fn code(self) -> u8 {
        match self {
            Self::Intra => 0,
            Self::Inter => 1,
        }
    }
}

impl std::fmt::Display for CodingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Intra => "intra",
            Self::Inter => "inter",
        })
    }
}

impl std::str::FromStr for CodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            _ => Err(Error::Config(format!("unknown coding mode {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------- color

/// Full-range BT.601.
pub fn rgb_to_ycbcr_pixel([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    [clamp_u8(y), clamp_u8(cb), clamp_u8(cr)]
}

pub fn ycbcr_to_rgb_pixel([y, cb, cr]: [u8; 3]) -> [u8; 3] {
    let (y, cb, cr) = (y as f64, cb as f64 - 128.0, cr as f64 - 128.0);
    [
        clamp_u8(y + 1.402 * cr),
        clamp_u8(y - 0.344136 * cb - 0.714136 * cr),
        clamp_u8(y + 1.772 * cb),
    ]
}

#[inline]
fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Converts to 8 bits and YCbCr, padding to a multiple of 16 by edge
/// replication.
pub fn rgb_to_ycbcr(img: &Image) -> Frame {
    let w = img.width.div_ceil(MB) * MB;
    let h = img.height.div_ceil(MB) * MB;
    let mut f = Frame::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x.min(img.width - 1), y.min(img.height - 1));
            let ycc = rgb_to_ycbcr_pixel([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
            for c in 0..3 {
                f.planes[c][y * w + x] = ycc[c];
            }
        }
    }
    f
}

/// Converts back to RGB in `[0, 1]`, cropping to `width x height`.
pub fn ycbcr_to_rgb(frame: &Frame, width: usize, height: usize) -> Image {
    assert!(width <= frame.width && height <= frame.height);
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let rgb = ycbcr_to_rgb_pixel([frame.at(0, x, y), frame.at(1, x, y), frame.at(2, x, y)]);
            img.set_pixel(x, y, rgb.map(|v| v as f64 / 255.0));
        }
    }
    img
}

// ---------------------------------------------------------------- transform

static DCT_BASIS: LazyLock<[[f64; 8]; 8]> = LazyLock::new(|| {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
});

/// Orthonormal 2-D DCT-II of a row-major 8x8 block.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let c = &*DCT_BASIS;
    let mut tmp = [0.0; 64];
    // rows
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8).map(|n| c[k][n] * block[y * 8 + n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for x in 0..8 {
        for k in 0..8 {
            out[k * 8 + x] = (0..8).map(|n| c[k][n] * tmp[n * 8 + x]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let c = &*DCT_BASIS;
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for n in 0..8 {
            tmp[n * 8 + x] = (0..8).map(|k| c[k][n] * coef[k * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for n in 0..8 {
            out[y * 8 + n] = (0..8).map(|k| c[k][n] * tmp[y * 8 + k]).sum();
        }
    }
    out
}

/// Raster positions in zigzag scan order.
pub static ZIGZAG: LazyLock<[usize; 64]> = LazyLock::new(|| {
    let mut order = [0; 64];
    let mut i = 0;
    for s in 0..15usize {
        let range: Vec<usize> = (s.saturating_sub(7)..=s.min(7)).collect();
        // odd diagonals run top-right to bottom-left
        let iter: Box<dyn Iterator<Item = &usize>> = if s % 2 == 0 {
            Box::new(range.iter().rev())
        } else {
            Box::new(range.iter())
        };
        for &y in iter {
            order[i] = y * 8 + (s - y);
            i += 1;
        }
    }
    order
});

// ---------------------------------------------------------------- residuals

const LUMA: usize = 0;
const CHROMA: usize = 1;

fn plane_type(plane: usize) -> usize {
    if plane == 0 {
        LUMA
    } else {
        CHROMA
    }
}

#[derive(Clone)]
struct Contexts {
    cbf: [Context; 2],
    run: [[Context; 4]; 2],
    gt1: [Context; 2],
    level: [[Context; 6]; 2],
    last: [Context; 2],
    intra: Context,
    /// Whether an inter macroblock has any nonzero level.
    coded: Context,
    mvd_zero: [Context; 2],
    mvd_mag: [[Context; 4]; 2],
}

impl Contexts {
    fn new() -> Self {
        Self {
            cbf: [Context::default(); 2],
            run: [[Context::default(); 4]; 2],
            gt1: [Context::default(); 2],
            level: [[Context::default(); 6]; 2],
            last: [Context::default(); 2],
            intra: Context::default(),
            coded: Context::default(),
            mvd_zero: [Context::default(); 2],
            mvd_mag: [[Context::default(); 4]; 2],
        }
    }
}

/// Levels in zigzag order.
fn code_levels<S: BinSink>(s: &mut S, ctx: &mut Contexts, pt: usize, levels: &[i32; 64]) {
    let last = levels.iter().rposition(|&l| l != 0);
    s.encode(&mut ctx.cbf[pt], last.is_some());
    let Some(last) = last else { return };
    let mut run = 0;
    for (i, &l) in levels[..=last].iter().enumerate() {
        if l == 0 {
            run += 1;
            continue;
        }
        encode_eg0(s, &mut ctx.run[pt], run);
        run = 0;
        let a = l.unsigned_abs();
        s.encode(&mut ctx.gt1[pt], a > 1);
        if a > 1 {
            encode_eg0(s, &mut ctx.level[pt], a - 2);
        }
        s.encode_bypass(l < 0);
        s.encode(&mut ctx.last[pt], i == last);
    }
}

fn decode_levels(d: &mut Decoder<'_>, ctx: &mut Contexts, pt: usize) -> Result<[i32; 64]> {
    let mut levels = [0; 64];
    if !d.decode(&mut ctx.cbf[pt])? {
        return Ok(levels);
    }
    let mut pos = 0usize;
    loop {
        let run = decode_eg0(d, &mut ctx.run[pt])? as usize;
        pos += run;
        if pos >= 64 {
            return Err(Error::decode(d.position(), "coefficient run past end of block"));
        }
        let mut a = 1u32;
        if d.decode(&mut ctx.gt1[pt])? {
            a = decode_eg0(d, &mut ctx.level[pt])?
                .checked_add(2)
                .filter(|&a| a < 1 << 20)
                .ok_or_else(|| Error::decode(d.position(), "coefficient level out of range"))?;
        }
        let negative = d.decode_bypass()?;
        levels[pos] = if negative { -(a as i32) } else { a as i32 };
        pos += 1;
        if d.decode(&mut ctx.last[pt])? {
            return Ok(levels);
        }
        if pos >= 64 {
            return Err(Error::decode(d.position(), "missing last-coefficient flag"));
        }
    }
}

/// Quantized levels (zigzag order) of `src - pred`.
fn quantize_residual(src: &[u8; 64], pred: &[u8; 64], qstep: f64) -> [i32; 64] {
    let mut r = [0.0; 64];
    for i in 0..64 {
        r[i] = src[i] as f64 - pred[i] as f64;
    }
    let coef = dct8(&r);
    let mut levels = [0; 64];
    for (i, &pos) in ZIGZAG.iter().enumerate() {
        levels[i] = (coef[pos] / qstep).round_ties_even() as i32;
    }
    levels
}

/// Shared by encoder and decoder, so reconstructions match exactly.
fn reconstruct(pred: &[u8; 64], levels: &[i32; 64], qstep: f64) -> [u8; 64] {
    let mut out = *pred;
    if levels.iter().all(|&l| l == 0) {
        return out;
    }
    let mut coef = [0.0; 64];
    for (i, &pos) in ZIGZAG.iter().enumerate() {
        coef[pos] = levels[i] as f64 * qstep;
    }
    let r = idct8(&coef);
    for i in 0..64 {
        out[i] = clamp_u8(pred[i] as f64 + r[i]);
    }
    out
}

fn read_block(f: &Frame, plane: usize, bx: usize, by: usize) -> [u8; 64] {
    let mut b = [0; 64];
    for y in 0..8 {
        let row = (by + y) * f.width + bx;
        b[y * 8..y * 8 + 8].copy_from_slice(&f.planes[plane][row..row + 8]);
    }
    b
}

fn write_block(f: &mut Frame, plane: usize, bx: usize, by: usize, b: &[u8; 64]) {
    for y in 0..8 {
        let row = (by + y) * f.width + bx;
        f.planes[plane][row..row + 8].copy_from_slice(&b[y * 8..y * 8 + 8]);
    }
}

/// DC prediction: rounded mean of the reconstructed column to the left and
/// row above, whichever exist; 128 when neither does.
fn dc_prediction(recon: &Frame, plane: usize, bx: usize, by: usize) -> [u8; 64] {
    let mut sum = 0u32;
    let mut n = 0u32;
    if bx > 0 {
        for y in 0..8 {
            sum += recon.at(plane, bx - 1, by + y) as u32;
        }
        n += 8;
    }
    if by > 0 {
        for x in 0..8 {
            sum += recon.at(plane, bx + x, by - 1) as u32;
        }
        n += 8;
    }
    let dc = if n == 0 { 128 } else { ((sum + n / 2) / n) as u8 };
    [dc; 64]
}

fn motion_prediction(reference: &Frame, plane: usize, bx: usize, by: usize, mv: MotionVector) -> [u8; 64] {
    let mut b = [0; 64];
    for y in 0..8 {
        for x in 0..8 {
            b[y * 8 + x] = reference.at_clamped(
                plane,
                (bx + x) as i64 + mv.dx as i64,
                (by + y) as i64 + mv.dy as i64,
            );
        }
    }
    b
}

/// The 8x8 blocks of a macroblock in coding order: per plane, raster order.
fn mb_blocks(mbx: usize, mby: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..3).flat_map(move |p| (0..4).map(move |k| (p, mbx + 8 * (k % 2), mby + 8 * (k / 2))))
}

#[derive(Clone, Copy)]
enum Prediction {
    Dc,
    Motion(MotionVector),
}

/// Codes the residuals of one macroblock and writes its reconstruction.
fn code_mb_residual<S: BinSink>(
    s: &mut S,
    ctx: &mut Contexts,
    src: &Frame,
    recon: &mut Frame,
    reference: Option<&Frame>,
    mbx: usize,
    mby: usize,
    pred: Prediction,
    qstep: f64,
) {
    for (p, bx, by) in mb_blocks(mbx, mby) {
        let prediction = match pred {
            Prediction::Dc => dc_prediction(recon, p, bx, by),
            Prediction::Motion(mv) => motion_prediction(reference.expect("inter needs a reference"), p, bx, by, mv),
        };
        let levels = quantize_residual(&read_block(src, p, bx, by), &prediction, qstep);
        code_levels(s, ctx, plane_type(p), &levels);
        write_block(recon, p, bx, by, &reconstruct(&prediction, &levels, qstep));
    }
}

fn decode_mb_residual(
    d: &mut Decoder<'_>,
    ctx: &mut Contexts,
    recon: &mut Frame,
    reference: Option<&Frame>,
    mbx: usize,
    mby: usize,
    pred: Prediction,
    qstep: f64,
) -> Result<()> {
    for (p, bx, by) in mb_blocks(mbx, mby) {
        let prediction = match pred {
            Prediction::Dc => dc_prediction(recon, p, bx, by),
            Prediction::Motion(mv) => motion_prediction(reference.expect("inter needs a reference"), p, bx, by, mv),
        };
        let levels = decode_levels(d, ctx, plane_type(p))?;
        write_block(recon, p, bx, by, &reconstruct(&prediction, &levels, qstep));
    }
    Ok(())
}

fn mb_ssd(a: &Frame, b: &Frame, mbx: usize, mby: usize) -> f64 {
    let mut acc = 0u64;
    for p in 0..3 {
        for y in mby..mby + MB {
            for x in mbx..mbx + MB {
                let d = a.at(p, x, y) as i64 - b.at(p, x, y) as i64;
                acc += (d * d) as u64;
            }
        }
    }
    acc as f64
}

fn save_mb(f: &Frame, mbx: usize, mby: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * MB * MB);
    for p in 0..3 {
        for y in mby..mby + MB {
            let row = y * f.width + mbx;
            out.extend_from_slice(&f.planes[p][row..row + MB]);
        }
    }
    out
}

fn restore_mb(f: &mut Frame, mbx: usize, mby: usize, saved: &[u8]) {
    let mut i = 0;
    for p in 0..3 {
        for y in mby..mby + MB {
            let row = y * f.width + mbx;
            f.planes[p][row..row + MB].copy_from_slice(&saved[i..i + MB]);
            i += MB;
        }
    }
}

// ---------------------------------------------------------------- motion

fn block_sad(cur: &Frame, reference: &Frame, x: usize, y: usize, size: usize, mv: MotionVector) -> u32 {
    let mut sad = 0u32;
    for j in 0..size {
        let rr = (y as i64 + j as i64 + mv.dy as i64) as usize * reference.width;
        let cr = (y + j) * cur.width;
        for i in 0..size {
            let rx = (x as i64 + i as i64 + mv.dx as i64) as usize;
            sad += (cur.planes[0][cr + x + i] as i32 - reference.planes[0][rr + rx] as i32).unsigned_abs();
        }
    }
    sad
}

/// Full search over `[-range, range]^2` on luma for the `size x size` block
/// at `(x, y)`, considering only displacements that keep the block inside
/// the reference. The prediction for pixel `(u, v)` is `reference(u + dx,
/// v + dy)`. Ties go to the smallest `|dx| + |dy|`, then `dy`, then `dx`.
pub fn motion_search(
    current: &Frame,
    reference: &Frame,
    x: usize,
    y: usize,
    size: usize,
    range: i32,
) -> (MotionVector, u32) {
    assert!(x + size <= current.width && y + size <= current.height, "block outside frame");
    assert_eq!((current.width, current.height), (reference.width, reference.height));
    let mut best: Option<((u32, i32, i32, i32), MotionVector)> = None;
    for dy in -range..=range {
        for dx in -range..=range {
            let (rx, ry) = (x as i64 + dx as i64, y as i64 + dy as i64);
            if rx < 0 || ry < 0 || rx as usize + size > reference.width || ry as usize + size > reference.height {
                continue;
            }
            let mv = MotionVector { dx, dy };
            let key = (block_sad(current, reference, x, y, size, mv), dx.abs() + dy.abs(), dy, dx);
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                best = Some((key, mv));
            }
        }
    }
    let ((sad, ..), mv) = best.expect("zero displacement is always in range");
    (mv, sad)
}

fn code_mvd<S: BinSink>(s: &mut S, ctx: &mut Contexts, mv: MotionVector, pred: MotionVector) {
    for (c, v) in [(0, mv.dx - pred.dx), (1, mv.dy - pred.dy)] {
        s.encode(&mut ctx.mvd_zero[c], v != 0);
        if v != 0 {
            encode_eg0(s, &mut ctx.mvd_mag[c], v.unsigned_abs() - 1);
            s.encode_bypass(v < 0);
        }
    }
}

fn decode_mvd(d: &mut Decoder<'_>, ctx: &mut Contexts, pred: MotionVector) -> Result<MotionVector> {
    let mut comp = [0i32; 2];
    for (c, out) in comp.iter_mut().enumerate() {
        if d.decode(&mut ctx.mvd_zero[c])? {
            let a = decode_eg0(d, &mut ctx.mvd_mag[c])? as i64 + 1;
            *out = if d.decode_bypass()? { -a } else { a }.clamp(-64, 64) as i32;
        }
    }
    let mv = MotionVector {
        dx: pred.dx + comp[0],
        dy: pred.dy + comp[1],
    };
    if mv.dx.abs() > SEARCH_RANGE || mv.dy.abs() > SEARCH_RANGE {
        return Err(Error::decode(d.position(), format!("motion vector {mv:?} out of range")));
    }
    Ok(mv)
}

// ---------------------------------------------------------------- frames

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbMode {
    Inter(MotionVector),
    Intra,
}

/// Payload, decoder-identical reconstruction and per-macroblock modes of one
/// coded frame.
#[derive(Clone, Debug)]
pub struct EncodedFrame {
    pub payload: Vec<u8>,
    pub recon: Frame,
    pub modes: Vec<MbMode>,
}

pub fn encode_intra(frame: &Frame, qp: VideoQp) -> EncodedFrame {
    let qstep = qp_to_qstep(qp);
    let mut enc = Encoder::new();
    let mut ctx = Contexts::new();
    let mut recon = Frame::new(frame.width, frame.height);
    let mut modes = Vec::new();
    for mby in (0..frame.height).step_by(MB) {
        for mbx in (0..frame.width).step_by(MB) {
            code_mb_residual(&mut enc, &mut ctx, frame, &mut recon, None, mbx, mby, Prediction::Dc, qstep);
            modes.push(MbMode::Intra);
        }
    }
    EncodedFrame {
        payload: enc.finish(),
        recon,
        modes,
    }
}

pub fn decode_intra(payload: &[u8], width: usize, height: usize, qp: VideoQp) -> Result<Frame> {
    let qstep = qp_to_qstep(qp);
    let mut d = Decoder::new(payload)?;
    let mut ctx = Contexts::new();
    let mut recon = Frame::new(width, height);
    for mby in (0..height).step_by(MB) {
        for mbx in (0..width).step_by(MB) {
            decode_mb_residual(&mut d, &mut ctx, &mut recon, None, mbx, mby, Prediction::Dc, qstep)?;
        }
    }
    d.finish()?;
    Ok(recon)
}

/// Per macroblock, picks motion-compensated inter or intra by the
/// smallest `SSD + lambda * bits` with `lambda = 0.85 * qstep^2`, where bits
/// are estimated on a copy of the current context state.
pub fn encode_inter(frame: &Frame, reference: &Frame, qp: VideoQp) -> EncodedFrame {
    assert_eq!((frame.width, frame.height), (reference.width, reference.height));
    let qstep = qp_to_qstep(qp);
    let lambda = 0.85 * qstep * qstep;
    let mut enc = Encoder::new();
    let mut ctx = Contexts::new();
    let mut recon = Frame::new(frame.width, frame.height);
    let mut modes = Vec::new();
    let mut pred_mv = MotionVector::ZERO;
    for mby in (0..frame.height).step_by(MB) {
        for mbx in (0..frame.width).step_by(MB) {
            let saved = save_mb(&recon, mbx, mby);
            let (mv, _) = motion_search(frame, reference, mbx, mby, MB, SEARCH_RANGE);
            let candidates = [MbMode::Inter(mv), MbMode::Intra];
            let mut best: Option<(f64, MbMode)> = None;
            for mode in candidates {
                let mut est = CostEstimator::default();
                let mut trial = ctx.clone();
                code_mb(&mut est, &mut trial, frame, &mut recon, reference, mbx, mby, mode, pred_mv, qstep);
                let j = mb_ssd(frame, &recon, mbx, mby) + lambda * est.bits;
                restore_mb(&mut recon, mbx, mby, &saved);
                if best.is_none_or(|(bj, _)| j < bj) {
                    best = Some((j, mode));
                }
            }
            let (_, mode) = best.expect("two candidates");
            code_mb(&mut enc, &mut ctx, frame, &mut recon, reference, mbx, mby, mode, pred_mv, qstep);
            if let MbMode::Inter(mv) = mode {
                pred_mv = mv;
            }
            modes.push(mode);
        }
    }
    EncodedFrame {
        payload: enc.finish(),
        recon,
        modes,
    }
}

#[allow(clippy::too_many_arguments)]
fn code_mb<S: BinSink>(
    s: &mut S,
    ctx: &mut Contexts,
    src: &Frame,
    recon: &mut Frame,
    reference: &Frame,
    mbx: usize,
    mby: usize,
    mode: MbMode,
    pred_mv: MotionVector,
    qstep: f64,
) {
    match mode {
        MbMode::Inter(mv) => {
            s.encode(&mut ctx.intra, false);
            code_mvd(s, ctx, mv, pred_mv);
            let blocks: Vec<_> = mb_blocks(mbx, mby)
                .map(|(p, bx, by)| {
                    let prediction = motion_prediction(reference, p, bx, by, mv);
                    let levels = quantize_residual(&read_block(src, p, bx, by), &prediction, qstep);
                    (p, bx, by, prediction, levels)
                })
                .collect();
            let coded = blocks.iter().any(|b| b.4.iter().any(|&l| l != 0));
            s.encode(&mut ctx.coded, coded);
            for (p, bx, by, prediction, levels) in blocks {
                if coded {
                    code_levels(s, ctx, plane_type(p), &levels);
                }
                write_block(recon, p, bx, by, &reconstruct(&prediction, &levels, qstep));
            }
        }
        MbMode::Intra => {
            s.encode(&mut ctx.intra, true);
            code_mb_residual(s, ctx, src, recon, None, mbx, mby, Prediction::Dc, qstep);
        }
    }
}

pub fn decode_inter(payload: &[u8], reference: &Frame, qp: VideoQp) -> Result<Frame> {
    let qstep = qp_to_qstep(qp);
    let mut d = Decoder::new(payload)?;
    let mut ctx = Contexts::new();
    let mut recon = Frame::new(reference.width, reference.height);
    let mut pred_mv = MotionVector::ZERO;
    for mby in (0..reference.height).step_by(MB) {
        for mbx in (0..reference.width).step_by(MB) {
            if d.decode(&mut ctx.intra)? {
                decode_mb_residual(&mut d, &mut ctx, &mut recon, None, mbx, mby, Prediction::Dc, qstep)?;
            } else {
                let mv = decode_mvd(&mut d, &mut ctx, pred_mv)?;
                if d.decode(&mut ctx.coded)? {
                    decode_mb_residual(&mut d, &mut ctx, &mut recon, Some(reference), mbx, mby, Prediction::Motion(mv), qstep)?;
                } else {
                    for (p, bx, by) in mb_blocks(mbx, mby) {
                        write_block(&mut recon, p, bx, by, &motion_prediction(reference, p, bx, by, mv));
                    }
                }
                pred_mv = mv;
            }
        }
    }
    d.finish()?;
    Ok(recon)
}

// ---------------------------------------------------------------- sequences

/// Coded training images plus their camera poses.
///
/// File layout (little-endian): magic `IVSb`, version, mode, qp (one byte
/// each), frame count, width, height (u32), pose count (u32) and 15 f64 per
/// pose, then per frame a u32 bit count and the payload bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBitstream {
    pub mode: CodingMode,
    pub qp: VideoQp,
    /// Picture size before padding.
    pub width: usize,
    pub height: usize,
    pub poses: Vec<CameraPose>,
    pub frames: Vec<Vec<u8>>,
}

impl ImageBitstream {
    /// Size of the serialized stream including headers and poses.
    pub fn bit_length(&self) -> u64 {
        8 * self.to_bytes().len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend([VERSION, self.mode.code(), self.qp.0]);
        put_u32(&mut out, self.frames.len() as u32);
        put_u32(&mut out, self.width as u32);
        put_u32(&mut out, self.height as u32);
        put_u32(&mut out, self.poses.len() as u32);
        write_poses(&mut out, &self.poses);
        for f in &self.frames {
            put_u32(&mut out, 8 * f.len() as u32);
            out.extend_from_slice(f);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let at = r.position();
        if r.u8()? != VERSION {
            return Err(Error::decode(at, "unsupported version"));
        }
        let at = r.position();
        let mode = match r.u8()? {
            0 => CodingMode::Intra,
            1 => CodingMode::Inter,
            m => return Err(Error::decode(at, format!("unknown mode {m}"))),
        };
        let at = r.position();
        let qp = VideoQp::new(r.u8()? as i32).map_err(|e| Error::decode(at, e.to_string()))?;
        let count = r.u32()? as usize;
        let at = r.position();
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        if width == 0 || height == 0 || width > 1 << 15 || height > 1 << 15 {
            return Err(Error::decode(at, format!("bad frame size {width}x{height}")));
        }
        let at = r.position();
        let pose_count = r.u32()? as usize;
        if pose_count.saturating_mul(POSE_RECORD_BYTES) > r.remaining() {
            return Err(Error::decode(at, "pose block exceeds stream"));
        }
        let poses = read_poses(&mut r, pose_count)?;
        if count > r.remaining() / 4 {
            return Err(Error::decode(at, "frame count exceeds stream"));
        }
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.position();
            let bits = r.u32()? as usize;
            if bits % 8 != 0 {
                return Err(Error::decode(at, "frame bit count not byte aligned"));
            }
            frames.push(r.take(bits / 8)?.to_vec());
        }
        r.finish()?;
        Ok(Self {
            mode,
            qp,
            width,
            height,
            poses,
            frames,
        })
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

    /// Byte offset of each frame payload within [`Self::to_bytes`].
    fn frame_offsets(&self) -> Vec<usize> {
        let mut at = 4 + 3 + 4 * 4 + POSE_RECORD_BYTES * self.poses.len();
        self.frames
            .iter()
            .map(|f| {
                at += 4;
                let o = at;
                at += f.len();
                o
            })
            .collect()
    }
}

/// Encoded stream and the encoder's reconstructed frames.
pub struct EncodedSequence {
    pub bitstream: ImageBitstream,
    pub recon: Vec<Frame>,
}

/// Intra mode codes every frame independently; inter mode codes frame 0
/// intra and each later frame against the previous reconstruction.
pub fn encode_sequence(
    images: &[Image],
    poses: &[CameraPose],
    mode: CodingMode,
    qp: VideoQp,
) -> Result<EncodedSequence> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
    }
    if images.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} poses",
            images.len(),
            poses.len()
        )));
    }
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::InvalidArgument("images differ in size".into()));
    }
    let mut frames = Vec::with_capacity(images.len());
    let mut recon: Vec<Frame> = Vec::with_capacity(images.len());
    for img in images {
        let f = rgb_to_ycbcr(img);
        let coded = match (mode, recon.last()) {
            (CodingMode::Inter, Some(prev)) => encode_inter(&f, prev, qp),
            _ => encode_intra(&f, qp),
        };
        frames.push(coded.payload);
        recon.push(coded.recon);
    }
    Ok(EncodedSequence {
        bitstream: ImageBitstream {
            mode,
            qp,
            width: w,
            height: h,
            poses: poses.to_vec(),
            frames,
        },
        recon,
    })
}

/// Decoded frames at padded size.
pub fn decode_frames(bs: &ImageBitstream) -> Result<Vec<Frame>> {
    let pw = bs.width.div_ceil(MB) * MB;
    let ph = bs.height.div_ceil(MB) * MB;
    let offsets = bs.frame_offsets();
    let mut out: Vec<Frame> = Vec::with_capacity(bs.frames.len());
    for (i, payload) in bs.frames.iter().enumerate() {
        let decoded = match (bs.mode, out.last()) {
            (CodingMode::Inter, Some(prev)) => decode_inter(payload, prev, bs.qp),
            _ => decode_intra(payload, pw, ph, bs.qp),
        };
        let frame = decoded.map_err(|e| Error::FrameDecode {
            frame: i,
            source: Box::new(match e {
                Error::Decode { offset, reason } => Error::Decode {
                    offset: offset + offsets[i],
                    reason,
                },
                e => e,
            }),
        })?;
        out.push(frame);
    }
    Ok(out)
}

pub fn decode_sequence(bs: &ImageBitstream) -> Result<(Vec<Image>, Vec<CameraPose>)> {
    let frames = decode_frames(bs)?;
    Ok((
        frames.iter().map(|f| ycbcr_to_rgb(f, bs.width, bs.height)).collect(),
        bs.poses.clone(),
    ))
}
