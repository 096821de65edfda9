//! Deterministic SVG charts: scatter plots and pair grids of reduced
//! latents, norm line charts and histograms. Every numeric series is also
//! written to `data-*` attributes so the documents can be checked by
//! parsing.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::{Histogram, NormReport};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{CaptureTag, Component};
use crate::store::{AxisLabel, CaptureLabel, RowLabel};

pub const ATTENTION_HUE: f64 = 220.0;
pub const MLP_HUE: f64 = 0.0;
pub const POSITION_HUE: f64 = 140.0;
pub const SATURATION: f64 = 0.75;
pub const LIGHTNESS_FIRST: f64 = 0.30;
pub const LIGHTNESS_LAST: f64 = 0.80;
pub const NEUTRAL: &str = "#666666";
pub const DEFAULT_MAX_POINTS: usize = 50_000;

const MARGIN_LEFT: f64 = 56.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 16.0;
const MARGIN_BOTTOM: f64 = 44.0;
const TITLE_HEIGHT: f64 = 30.0;
const N_TICKS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorBy {
    #[default]
    ComponentDepth,
    PositionGradient,
    None,
}

impl std::str::FromStr for ColorBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" | "component_depth" => Ok(ColorBy::ComponentDepth),
            "position" | "position_gradient" => Ok(ColorBy::PositionGradient),
            "none" => Ok(ColorBy::None),
            other => Err(Error::Validation(format!(
                "unknown colour scheme {other:?} (component, position, none)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "axis limits must be finite with min < max, got {self:?}"
            )))
        }
    }

    /// Data range padded by 5% on each side.
    pub fn around(xs: &[f64], ys: &[f64]) -> Self {
        let (xmin, xmax) = padded(xs);
        let (ymin, ymax) = padded(ys);
        Self {
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }
}

fn padded(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - span / 2.0, hi + span / 2.0) };
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Parses `"min,max"`.
pub fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Validation(format!("expected min,max but got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSpec {
    pub color_by: ColorBy,
    /// Fixed limits for every panel.
    pub limits: Option<Limits>,
    /// Fixed limits per panel (e.g. read from an earlier plot); wins over
    /// `limits`.
    pub panel_limits: Option<Vec<Limits>>,
    pub point_size: f64,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Dimension pairs for a pair grid; default is every pair in order.
    pub pairs: Option<Vec<(usize, usize)>>,
    /// Block count for the depth colouring; default is inferred from tags.
    pub n_blocks: Option<usize>,
    pub max_points: usize,
    pub seed: u64,
    pub log_y: bool,
    pub panel_size: f64,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            color_by: ColorBy::ComponentDepth,
            limits: None,
            panel_limits: None,
            point_size: 2.0,
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            pairs: None,
            n_blocks: None,
            max_points: DEFAULT_MAX_POINTS,
            seed: 0,
            log_y: false,
            panel_size: 400.0,
        }
    }
}

/// What a plotted point stands for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PointTag {
    pub capture: Option<CaptureTag>,
    pub position: Option<usize>,
}

impl From<&RowLabel> for PointTag {
    fn from(l: &RowLabel) -> Self {
        Self {
            capture: match l.capture {
                CaptureLabel::Tag(t) => Some(t),
                CaptureLabel::Collapsed => None,
            },
            position: match l.position {
                AxisLabel::Index(p) => Some(p),
                AxisLabel::Collapsed => None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsl {
    pub h: f64,
    pub s: f64,
    pub l: f64,
}

impl Hsl {
    pub fn to_hex(self) -> String {
        let c = (1.0 - (2.0 * self.l - 1.0).abs()) * self.s;
        let hp = (self.h.rem_euclid(360.0)) / 60.0;
        let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
        let (r, g, b) = match hp as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = self.l - c / 2.0;
        let to = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
        format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
    }
}

/// Linear ramp from the first to the last lightness.
pub fn depth_lightness(index: usize, count: usize) -> f64 {
    if count <= 1 {
        return LIGHTNESS_FIRST;
    }
    LIGHTNESS_FIRST + (LIGHTNESS_LAST - LIGHTNESS_FIRST) * index as f64 / (count - 1) as f64
}

/// Attention-side captures are blue, MLP-side red, darker for earlier
/// blocks. Embedding and final-norm captures get no family colour.
pub fn component_color(tag: &CaptureTag, n_blocks: usize) -> Option<Hsl> {
    let hue = match tag.component {
        Component::NormPreAttn | Component::Attn | Component::ResidPostAttn => ATTENTION_HUE,
        Component::NormPreMlp | Component::Mlp | Component::ResidPostMlp => MLP_HUE,
        _ => return None,
    };
    let b = tag.block_index()? as usize;
    Some(Hsl {
        h: hue,
        s: SATURATION,
        l: depth_lightness(b, n_blocks),
    })
}

pub fn position_color(position: usize, max_position: usize) -> Hsl {
    Hsl {
        h: POSITION_HUE,
        s: SATURATION,
        l: depth_lightness(position, max_position + 1),
    }
}

fn point_color(t: &PointTag, spec: &PlotSpec, n_blocks: usize, max_pos: usize) -> Option<Hsl> {
    match spec.color_by {
        ColorBy::ComponentDepth => t.capture.as_ref().and_then(|c| component_color(c, n_blocks)),
        ColorBy::PositionGradient => t.position.map(|p| position_color(p, max_pos)),
        ColorBy::None => None,
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Short tick label.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Frame {
    width: f64,
    height: f64,
    plot_w: f64,
    plot_h: f64,
}

impl Frame {
    fn new(size: f64) -> Self {
        Self {
            width: size,
            height: size,
            plot_w: size - MARGIN_LEFT - MARGIN_RIGHT,
            plot_h: size - MARGIN_TOP - MARGIN_BOTTOM,
        }
    }

    fn px(&self, lim: &Limits, x: f64) -> f64 {
        MARGIN_LEFT + (x - lim.xmin) / (lim.xmax - lim.xmin) * self.plot_w
    }

    fn py(&self, lim: &Limits, y: f64) -> f64 {
        MARGIN_TOP + (lim.ymax - y) / (lim.ymax - lim.ymin) * self.plot_h
    }
}

/// Frame, ticks at evenly spaced values from min to max inclusive, and
/// axis labels. `y_transform` maps tick labels for log axes.
fn axes(out: &mut String, f: &Frame, lim: &Limits, spec: &PlotSpec, log_y: bool) {
    let _ = writeln!(
        out,
        r##"<rect class="frame" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="#999999"/>"##,
        f.plot_w, f.plot_h
    );
    out.push_str("<g class=\"xticks\" font-size=\"10\" text-anchor=\"middle\">\n");
    for i in 0..N_TICKS {
        let v = lim.xmin + (lim.xmax - lim.xmin) * i as f64 / (N_TICKS - 1) as f64;
        let x = f.px(lim, v);
        let y0 = MARGIN_TOP + f.plot_h;
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="#999999"/><text x="{x:.2}" y="{:.2}" data-tick="{v}">{}</text>"##,
            y0 + 4.0,
            y0 + 16.0,
            tick_label(v)
        );
    }
    out.push_str("</g>\n<g class=\"yticks\" font-size=\"10\" text-anchor=\"end\">\n");
    for i in 0..N_TICKS {
        let v = lim.ymin + (lim.ymax - lim.ymin) * i as f64 / (N_TICKS - 1) as f64;
        let y = f.py(lim, v);
        let label = if log_y { tick_label(10f64.powf(v)) } else { tick_label(v) };
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="#999999"/><text x="{:.2}" y="{:.2}" data-tick="{v}">{label}</text>"##,
            MARGIN_LEFT - 4.0,
            MARGIN_LEFT - 6.0,
            y + 3.0
        );
    }
    out.push_str("</g>\n");
    if !spec.x_label.is_empty() {
        let _ = writeln!(
            out,
            r#"<text class="xlabel" x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + f.plot_w / 2.0,
            f.height - 8.0,
            esc(&spec.x_label)
        );
    }
    if !spec.y_label.is_empty() {
        let _ = writeln!(
            out,
            r#"<text class="ylabel" x="12" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {:.2})">{}</text>"#,
            MARGIN_TOP + f.plot_h / 2.0,
            MARGIN_TOP + f.plot_h / 2.0,
            esc(&spec.y_label)
        );
    }
}

fn document(kind: &str, width: f64, height: f64, meta: &str, title: &str, extra_attrs: &str, body: &str) -> String {
    let mut out = String::with_capacity(body.len() + 512);
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-kind="{kind}"{extra_attrs}>"#
    );
    let _ = writeln!(out, "<metadata>{}</metadata>", esc(meta));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if !title.is_empty() {
        let _ = writeln!(
            out,
            r#"<text class="title" x="{:.2}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
            width / 2.0,
            esc(title)
        );
    }
    out.push_str(body);
    out.push_str("</svg>\n");
    out
}

fn check_points(points: &Matrix, tags: &[PointTag]) -> Result<()> {
    if tags.len() != points.rows() {
        return Err(Error::Shape(format!(
            "{} tags for {} points",
            tags.len(),
            points.rows()
        )));
    }
    if let Some(i) = (0..points.rows()).find(|&i| points.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
    }
    Ok(())
}

/// Seeded subset of at most `max` indices, ascending.
fn downsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max || max == 0 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Every unordered pair of `k` dimensions in row-major order.
pub fn all_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn scatter_panel(
    index: usize,
    pair: (usize, usize),
    points: &Matrix,
    keep: &[usize],
    tags: &[PointTag],
    lim: &Limits,
    spec: &PlotSpec,
    n_blocks: usize,
    max_pos: usize,
    origin: (f64, f64),
) -> String {
    let f = Frame::new(spec.panel_size);
    let mut out = String::with_capacity(keep.len() * 120 + 2048);
    let _ = writeln!(
        out,
        r#"<g class="panel" data-index="{index}" data-pair="{},{}" data-xlim="{},{}" data-ylim="{},{}" data-plot-area="{},{},{},{}" transform="translate({},{})">"#,
        pair.0,
        pair.1,
        lim.xmin,
        lim.xmax,
        lim.ymin,
        lim.ymax,
        MARGIN_LEFT,
        MARGIN_TOP,
        f.plot_w,
        f.plot_h,
        origin.0,
        origin.1
    );
    axes(&mut out, &f, lim, spec, false);
    out.push_str("<g class=\"points\">\n");
    for &i in keep {
        let (x, y) = (points.get(i, pair.0), points.get(i, pair.1));
        let (cx, cy) = (f.px(lim, x), f.py(lim, y));
        match point_color(&tags[i], spec, n_blocks, max_pos) {
            Some(c) => {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{}" fill="{}" data-x="{x}" data-y="{y}" data-h="{}" data-l="{}"/>"#,
                    spec.point_size,
                    c.to_hex(),
                    c.h,
                    c.l
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{}" fill="{NEUTRAL}" data-x="{x}" data-y="{y}"/>"#,
                    spec.point_size
                );
            }
        }
    }
    out.push_str("</g>\n</g>\n");
    out
}

fn render_panels(kind: &str, points: &Matrix, tags: &[PointTag], pairs: &[(usize, usize)], spec: &PlotSpec) -> Result<String> {
    check_points(points, tags)?;
    if pairs.is_empty() {
        return Err(Error::Validation("no panels to draw".into()));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= points.cols() || b >= points.cols() || a == b) {
        return Err(Error::Validation(format!(
            "panel pair ({a},{b}) invalid for {} dimensions",
            points.cols()
        )));
    }
    if let Some(l) = &spec.limits {
        l.validate()?;
    }
    if let Some(pl) = &spec.panel_limits {
        if pl.len() != pairs.len() {
            return Err(Error::Validation(format!(
                "{} stored panel limits for {} panels",
                pl.len(),
                pairs.len()
            )));
        }
        pl.iter().try_for_each(Limits::validate)?;
    }
    let n_blocks = spec.n_blocks.unwrap_or_else(|| {
        tags.iter()
            .filter_map(|t| t.capture.and_then(|c| c.block_index()))
            .max()
            .map_or(1, |b| b as usize + 1)
    });
    let max_pos = tags.iter().filter_map(|t| t.position).max().unwrap_or(0);
    let keep = downsample(points.rows(), spec.max_points, spec.seed);

    let cols = (pairs.len() as f64).sqrt().ceil() as usize;
    let rows = pairs.len().div_ceil(cols);
    let top = if spec.title.is_empty() { 0.0 } else { TITLE_HEIGHT };
    let size = spec.panel_size;
    let panels: Vec<String> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &pair)| {
            let lim = match (&spec.panel_limits, &spec.limits) {
                (Some(pl), _) => pl[i],
                (None, Some(l)) => *l,
                (None, None) => {
                    let xs: Vec<f64> = keep.iter().map(|&r| points.get(r, pair.0)).collect();
                    let ys: Vec<f64> = keep.iter().map(|&r| points.get(r, pair.1)).collect();
                    Limits::around(&xs, &ys)
                }
            };
            let origin = ((i % cols) as f64 * size, top + (i / cols) as f64 * size);
            scatter_panel(i, pair, points, &keep, tags, &lim, spec, n_blocks, max_pos, origin)
        })
        .collect();
    let meta = serde_json::json!({
        "kind": kind,
        "points": points.rows(),
        "kept": keep.len(),
        "seed": spec.seed,
        "color_by": spec.color_by,
    })
    .to_string();
    let extra = format!(
        r#" data-panels="{}" data-points="{}" data-kept="{}""#,
        pairs.len(),
        points.rows(),
        keep.len()
    );
    Ok(document(
        kind,
        cols as f64 * size,
        top + rows as f64 * size,
        &meta,
        &spec.title,
        &extra,
        &panels.concat(),
    ))
}

/// Scatter of a `[n, 2]` point set.
pub fn render_scatter(points: &Matrix, tags: &[PointTag], spec: &PlotSpec) -> Result<String> {
    if points.cols() != 2 {
        return Err(Error::Shape(format!(
            "scatter needs 2 columns, got {}",
            points.cols()
        )));
    }
    render_panels("scatter", points, tags, &[(0, 1)], spec)
}

/// One scatter panel per dimension pair of a `[n, k]` point set.
pub fn render_pair_grid(points: &Matrix, tags: &[PointTag], spec: &PlotSpec) -> Result<String> {
    if points.cols() < 2 {
        return Err(Error::Validation(format!(
            "pair grid needs at least 2 dimensions, got {}",
            points.cols()
        )));
    }
    let pairs = spec.pairs.clone().unwrap_or_else(|| all_pairs(points.cols()));
    if points.cols() == 2 && pairs == [(0, 1)] {
        return render_panels("scatter", points, tags, &pairs, spec);
    }
    render_panels("pair_grid", points, tags, &pairs, spec)
}

/// Norm curve over the report's index axis.
pub fn render_line(report: &NormReport, spec: &PlotSpec) -> Result<String> {
    if report.is_empty() {
        return Err(Error::Validation("empty norm report".into()));
    }
    if let Some(v) = report.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite norm {v}")));
    }
    if spec.log_y {
        if let Some(i) = report.values.iter().position(|&v| v <= 0.0) {
            return Err(Error::Domain(format!(
                "log scale needs positive values; entry {i} is {}",
                report.values[i]
            )));
        }
    }
    let xs: Vec<f64> = report.indices.iter().map(|&i| i as f64).collect();
    let ys: Vec<f64> = if spec.log_y {
        report.values.iter().map(|v| v.log10()).collect()
    } else {
        report.values.clone()
    };
    let lim = match spec.limits {
        Some(l) => {
            l.validate()?;
            l
        }
        None => Limits::around(&xs, &ys),
    };
    let f = Frame::new(spec.panel_size);
    let mut body = String::new();
    let top = if spec.title.is_empty() { 0.0 } else { TITLE_HEIGHT };
    let _ = writeln!(
        body,
        r#"<g class="panel" data-index="0" data-xlim="{},{}" data-ylim="{},{}" data-log-y="{}" transform="translate(0,{top})">"#,
        lim.xmin, lim.xmax, lim.ymin, lim.ymax, spec.log_y
    );
    axes(&mut body, &f, &lim, spec, spec.log_y);
    let pts: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", f.px(&lim, x), f.py(&lim, y)))
        .collect();
    let join = |v: &[String]| v.join(" ");
    let _ = writeln!(
        body,
        r##"<polyline class="series" fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{}" data-x="{}" data-y="{}" data-counts="{}" data-labels="{}"/>"##,
        join(&pts),
        join(&report.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>()),
        join(&report.values.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        join(&report.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>()),
        esc(&report.labels.join(" "))
    );
    body.push_str("</g>\n");
    let meta = serde_json::json!({"kind": "line", "axis": report.axis, "points": report.len()}).to_string();
    Ok(document(
        "line",
        f.width,
        top + f.height,
        &meta,
        &spec.title,
        "",
        &body,
    ))
}

/// Bar chart of a histogram; bar heights are the bin counts.
pub fn render_histogram(hist: &Histogram, spec: &PlotSpec) -> Result<String> {
    if hist.counts.is_empty() || hist.edges.len() != hist.counts.len() + 1 {
        return Err(Error::Validation("histogram has no bins".into()));
    }
    let max_count = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let lim = match spec.limits {
        Some(l) => {
            l.validate()?;
            l
        }
        None => Limits {
            xmin: hist.edges[0],
            xmax: *hist.edges.last().expect("non-empty"),
            ymin: 0.0,
            ymax: max_count * 1.05,
        },
    };
    let f = Frame::new(spec.panel_size);
    let top = if spec.title.is_empty() { 0.0 } else { TITLE_HEIGHT };
    let mut body = String::new();
    let _ = writeln!(
        body,
        r#"<g class="panel" data-index="0" data-xlim="{},{}" data-ylim="{},{}" data-total="{}" transform="translate(0,{top})">"#,
        lim.xmin,
        lim.xmax,
        lim.ymin,
        lim.ymax,
        hist.total()
    );
    axes(&mut body, &f, &lim, spec, false);
    body.push_str("<g class=\"bars\">\n");
    for (i, &c) in hist.counts.iter().enumerate() {
        let x0 = f.px(&lim, hist.edges[i]);
        let x1 = f.px(&lim, hist.edges[i + 1]);
        let y = f.py(&lim, c as f64);
        let base = f.py(&lim, 0.0);
        let _ = writeln!(
            body,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#9c1f1f" data-lo="{}" data-hi="{}" data-count="{c}"/>"##,
            (x1 - x0).max(0.0),
            (base - y).max(0.0),
            hist.edges[i],
            hist.edges[i + 1]
        );
    }
    body.push_str("</g>\n</g>\n");
    let meta = serde_json::json!({"kind": "histogram", "bins": hist.counts.len(), "total": hist.total()}).to_string();
    Ok(document(
        "histogram",
        f.width,
        top + f.height,
        &meta,
        &spec.title,
        "",
        &body,
    ))
}

/// Panel limits recorded in an SVG written by this module, in panel order.
pub fn limits_from_svg(svg: &str) -> Result<Vec<Limits>> {
    let mut out = Vec::new();
    for part in svg.split("<g class=\"panel\"").skip(1) {
        let head = part.split('>').next().unwrap_or_default();
        let attr = |name: &str| -> Result<(f64, f64)> {
            let key = format!("{name}=\"");
            let start = head
                .find(&key)
                .ok_or_else(|| Error::Validation(format!("panel without {name}")))?
                + key.len();
            let end = head[start..]
                .find('"')
                .ok_or_else(|| Error::Validation(format!("unterminated {name}")))?;
            parse_range(&head[start..start + end])
        };
        let (xmin, xmax) = attr("data-xlim")?;
        let (ymin, ymax) = attr("data-ylim")?;
        let l = Limits {
            xmin,
            xmax,
            ymin,
            ymax,
        };
        l.validate()?;
        out.push(l);
    }
    if out.is_empty() {
        return Err(Error::Validation("no panel limits found in SVG".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colours_follow_family_and_depth() {
        let a = component_color(&CaptureTag::block_point(0, 2), 12).unwrap();
        assert_eq!((a.h, a.l), (ATTENTION_HUE, 0.30));
        let m = component_color(&CaptureTag::block_point(11, 5), 12).unwrap();
        assert_eq!(m.h, MLP_HUE);
        assert!((m.l - 0.80).abs() < 1e-15);
        assert!(component_color(&CaptureTag::embedding(), 12).is_none());
        assert_eq!(
            Hsl {
                h: 0.0,
                s: 1.0,
                l: 0.5
            }
            .to_hex(),
            "#ff0000"
        );
    }

    #[test]
    fn pairs_order() {
        assert_eq!(all_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(all_pairs(6).len(), 15);
    }

    #[test]
    fn limits_round_trip() {
        let pts = Matrix::from_rows(&[vec![0.2, 0.3], vec![0.7, 0.9]]).unwrap();
        let tags = vec![PointTag::default(); 2];
        let spec = PlotSpec {
            limits: Some(Limits {
                xmin: 0.0,
                xmax: 1.0,
                ymin: 0.0,
                ymax: 1.0,
            }),
            ..PlotSpec::default()
        };
        let svg = render_scatter(&pts, &tags, &spec).unwrap();
        assert_eq!(limits_from_svg(&svg).unwrap(), vec![spec.limits.unwrap()]);
        assert!(svg.contains("data-tick=\"0\"") && svg.contains("data-tick=\"1\""));
    }
}
