//! Rate, distortion and rate-distortion curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::StrategyResult;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// Bits per rendered pixel: `bits / (n * width * height)`.
pub fn rate_bpp(bits: u64, n: usize, width: usize, height: usize) -> Result<f64> {
    if n == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "rate needs positive N, W, H (got {n}, {width}, {height})"
        )));
    }
    Ok(bits as f64 / (n as f64 * width as f64 * height as f64))
}

/// PSNR in dB of the 8-bit quantized images, peak 255; [`PSNR_IDENTICAL`]
/// when they quantize identically.
pub fn psnr(image: &Image, reference: &Image) -> Result<f64> {
    if !image.same_shape(reference) {
        return Err(Error::InvalidArgument(format!(
            "PSNR of {}x{} image against {}x{} reference",
            image.width, image.height, reference.width, reference.height
        )));
    }
    let (a, b) = (image.to_u8(), reference.to_u8());
    let se: u64 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if se == 0 {
        return Ok(PSNR_IDENTICAL);
    }
    let mse = se as f64 / a.len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Mean of the finite values; [`PSNR_IDENTICAL`] if there are none.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        PSNR_IDENTICAL
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub strategy: String,
    pub qp: i32,
    pub bits: u64,
    pub rate_bpp: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub strategy: String,
    /// Strictly ascending in rate.
    pub points: Vec<RdPoint>,
    pub anchor_psnr_db: f64,
}

/// One point per result with `N` = rendered views and distortion the mean
/// PSNR over them, sorted by rate. Of several points with the same rate only
/// the one with the highest PSNR is kept.
pub fn build_curve(results: &[StrategyResult], anchor: &StrategyResult) -> Result<RdCurve> {
    if results.len() < 2 {
        return Err(Error::InvalidArgument("a curve needs at least two results".into()));
    }
    let strategy = results[0].strategy;
    if results.iter().any(|r| r.strategy != strategy) {
        return Err(Error::InvalidArgument("results mix strategies".into()));
    }
    let mut points = Vec::with_capacity(results.len());
    for r in results {
        let qp = r
            .qp
            .ok_or_else(|| Error::InvalidArgument(format!("{} result without a QP", r.strategy)))?;
        points.push(RdPoint {
            strategy: strategy.to_string(),
            qp,
            bits: r.total_bits,
            rate_bpp: rate_bpp(r.total_bits, r.rendered_count(), r.width, r.height)?,
            psnr_db: r.mean_psnr(),
        });
    }
    points.sort_by(|a, b| a.rate_bpp.total_cmp(&b.rate_bpp).then(b.psnr_db.total_cmp(&a.psnr_db)));
    let mut kept: Vec<RdPoint> = Vec::with_capacity(points.len());
    for p in points {
        match kept.last() {
            Some(last) if last.rate_bpp == p.rate_bpp => {
                log::warn!(
                    "{}: qp {} and qp {} share rate {} bpp; keeping qp {}",
                    p.strategy,
                    last.qp,
                    p.qp,
                    p.rate_bpp,
                    last.qp
                );
            }
            _ => kept.push(p),
        }
    }
    Ok(RdCurve {
        strategy: strategy.to_string(),
        points: kept,
        anchor_psnr_db: anchor.mean_psnr(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dominance {
    /// `a` is at least as good everywhere on the overlap.
    A,
    B,
    Crossing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CurveComparison {
    /// The curves share no rate interval.
    Incomparable,
    Compared {
        /// Mean of `psnr_b - psnr_a` over the shared log-rate interval.
        mean_gap_db: f64,
        dominance: Dominance,
        /// Fraction of the shared interval where `b` is above `a`.
        b_above_fraction: f64,
    },
}

/// Least-squares polynomial of degree `min(3, n - 1)` through `(x, y)`;
/// coefficients in ascending powers.
fn fit_poly(x: &[f64], y: &[f64]) -> Vec<f64> {
    let deg = (x.len() - 1).min(3);
    let v = DMatrix::from_fn(x.len(), deg + 1, |i, j| x[i].powi(j as i32));
    let rhs = DVector::from_column_slice(y);
    let svd = v.svd(true, true);
    svd.solve(&rhs, 1e-12).expect("SVD solve").iter().copied().collect()
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| {
        c.iter()
            .enumerate()
            .map(|(j, &k)| k * x.powi(j as i32 + 1) / (j + 1) as f64)
            .sum::<f64>()
    };
    prim(hi) - prim(lo)
}

/// BD-style comparison: cubic least-squares fits of PSNR over `log10(rate)`,
/// averaged over the overlapping rate interval. Points with zero rate or
/// infinite PSNR are ignored.
pub fn compare_curves(a: &RdCurve, b: &RdCurve) -> CurveComparison {
    let usable = |c: &RdCurve| -> (Vec<f64>, Vec<f64>) {
        c.points
            .iter()
            .filter(|p| p.rate_bpp > 0.0 && p.psnr_db.is_finite())
            .map(|p| (p.rate_bpp.log10(), p.psnr_db))
            .unzip()
    };
    let (xa, ya) = usable(a);
    let (xb, yb) = usable(b);
    if xa.len() < 2 || xb.len() < 2 {
        return CurveComparison::Incomparable;
    }
    let range = |x: &[f64]| x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let (la, ha) = range(&xa);
    let (lb, hb) = range(&xb);
    let (lo, hi) = (la.max(lb), ha.min(hb));
    if lo >= hi {
        return CurveComparison::Incomparable;
    }
    let pa = fit_poly(&xa, &ya);
    let pb = fit_poly(&xb, &yb);
    let mean_gap_db = (poly_integral(&pb, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo);
    const SAMPLES: usize = 101;
    let mut above = 0;
    let mut below = 0;
    for k in 0..SAMPLES {
        let x = lo + (hi - lo) * k as f64 / (SAMPLES - 1) as f64;
        let d = poly_eval(&pb, x) - poly_eval(&pa, x);
        if d > 1e-9 {
            above += 1;
        } else if d < -1e-9 {
            below += 1;
        }
    }
    let dominance = match (above, below) {
        (_, 0) if above > 0 => Dominance::B,
        (0, _) => Dominance::A,
        _ => Dominance::Crossing,
    };
    CurveComparison::Compared {
        mean_gap_db,
        dominance,
        b_above_fraction: above as f64 / SAMPLES as f64,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    strategy: String,
    qp: i32,
    bits: u64,
    rate_bpp: f64,
    psnr_db: f64,
    anchor_psnr_db: f64,
}

pub fn write_csv<W: Write>(curves: &[RdCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in curves {
        for p in &c.points {
            w.serialize(CsvRow {
                strategy: c.strategy.clone(),
                qp: p.qp,
                bits: p.bits,
                rate_bpp: p.rate_bpp,
                psnr_db: p.psnr_db,
                anchor_psnr_db: c.anchor_psnr_db,
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Curves in order of first appearance.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<RdCurve>> {
    let mut curves: Vec<RdCurve> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: CsvRow = row?;
        let point = RdPoint {
            strategy: row.strategy.clone(),
            qp: row.qp,
            bits: row.bits,
            rate_bpp: row.rate_bpp,
            psnr_db: row.psnr_db,
        };
        match curves.iter_mut().find(|c| c.strategy == row.strategy) {
            Some(c) => c.points.push(point),
            None => curves.push(RdCurve {
                strategy: row.strategy,
                points: vec![point],
                anchor_psnr_db: row.anchor_psnr_db,
            }),
        }
    }
    Ok(curves)
}

pub fn export_csv(curves: &[RdCurve], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(curves, std::io::BufWriter::new(f))
}

pub fn import_csv(path: impl AsRef<Path>) -> Result<Vec<RdCurve>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// SVG plot: log-scale rate on x, PSNR on y, one polyline per curve and a
/// dashed line for each distinct anchor PSNR.
pub fn render_svg(curves: &[RdCurve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 150.0, 20.0, 50.0);
    let pts = curves
        .iter()
        .flat_map(|c| &c.points)
        .filter(|p| p.rate_bpp > 0.0 && p.psnr_db.is_finite());
    let anchors: Vec<f64> = {
        let mut v: Vec<f64> = curves.iter().map(|c| c.anchor_psnr_db).filter(|v| v.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let x = p.rate_bpp.log10();
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(p.psnr_db);
        y1 = y1.max(p.psnr_db);
    }
    for &a in &anchors {
        y0 = y0.min(a);
        y1 = y1.max(a);
    }
    if !x0.is_finite() {
        (x0, x1) = (-3.0, 0.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 40.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = ((y0 - 1.0).floor(), (y1 + 1.0).ceil());
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{ml}" y1="{}" x2="{}" y2="{}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}"/></g>"#,
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    for e in x0 as i32..=x1 as i32 {
        let x = sx(e as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#,
            h - mb,
            h - mb + 4.0,
            h - mb + 16.0
        );
    }
    let step = ((y1 - y0) / 8.0).ceil().max(1.0);
    let mut y = y0;
    while y <= y1 + 1e-9 {
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.1}" x2="{ml}" y2="{py:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{y}</text>"#,
            ml - 4.0,
            ml - 6.0,
            py + 4.0
        );
        y += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">rate (bpp)</text>"#,
        (ml + w - mr) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">PSNR (dB)</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    );
    for &a in &anchors {
        let py = sy(a);
        let _ = writeln!(
            s,
            r#"<line class="anchor" x1="{ml}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="gray" stroke-dasharray="6 4"/>"#,
            w - mr
        );
    }
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = c
            .points
            .iter()
            .filter(|p| p.rate_bpp > 0.0 && p.psnr_db.is_finite())
            .map(|p| format!("{:.1},{:.1}", sx(p.rate_bpp.log10()), sy(p.psnr_db)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for xy in &coords {
            let (px, py) = xy.split_once(',').expect("x,y");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = mt + 16.0 * i as f64 + 10.0;
        let lx = w - mr + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            xml_escape(&c.strategy)
        );
    }
    if !anchors.is_empty() {
        let ly = mt + 16.0 * curves.len() as f64 + 10.0;
        let lx = w - mr + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="gray" stroke-dasharray="6 4"/><text x="{}" y="{}">anchor</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn export_plot(curves: &[RdCurve], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_svg(curves)).map_err(|e| Error::io(path, e))
}

/// Per-strategy curves from a flat result list, in a fixed order.
pub fn curves_from_results(results: &[StrategyResult], anchor: &StrategyResult) -> Vec<RdCurve> {
    let mut groups: BTreeMap<String, Vec<StrategyResult>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.qp.is_some()) {
        groups.entry(r.strategy.to_string()).or_default().push(r.clone());
    }
    groups
        .values()
        .filter_map(|g| match build_curve(g, anchor) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("skipping curve: {e}");
                None
            }
        })
        .collect()
}
