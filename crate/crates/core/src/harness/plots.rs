//! Deterministic PNG plots over stored results: contour heatmaps, an
//! accuracy-vs-ASR scatter, overlap histograms, and query-budget curves.
//!
//! Every plot embeds the run id and writes a JSON sidecar holding the exact
//! plotted arrays; verification recomputes each sidecar from the stored
//! artifacts and demands equality. Rendering is pure rasterization with a
//! built-in 5×7 font, so identical inputs produce identical bytes.

use super::{read_attack_report, read_train_summary, ResultStore, StoreEntry, VerifyCheck};
use crate::attacks::{aggregates_from_records, extraction::QueryEvent};
use crate::diagnostics::{ContourGrid, OverlapHistogram};
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Contour,
    Scatter,
    Histogram,
    BudgetCurve,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::Contour,
        PlotKind::Scatter,
        PlotKind::Histogram,
        PlotKind::BudgetCurve,
    ];
}

/// What `emit_plots` produced and what it declined to produce.
#[derive(Debug, Clone, Default)]
pub struct PlotOutcome {
    pub written: Vec<PathBuf>,
    /// Human-readable reasons for plots that were skipped for missing data.
    pub skipped: Vec<String>,
}

// ---------------------------------------------------------------------------
// Sidecar payloads (the exact plotted data)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSidecar {
    pub run_id: String,
    pub stage: String,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// +∞ cells serialize as JSON null.
    pub matrix: Vec<Vec<f64>>,
    pub baseline: f64,
    pub nonfinite_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub train_stage: String,
    pub attack_stage: String,
    pub accuracy_pct: f64,
    pub asr_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSidecar {
    pub run_id: String,
    pub points: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSidecar {
    pub run_id: String,
    pub stage: String,
    /// Bar k = number of inputs compromised on exactly k models.
    pub counts: Vec<usize>,
    pub models: usize,
    pub inputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSidecar {
    pub run_id: String,
    pub stage: String,
    pub queries: Vec<usize>,
    /// Cumulative mean reward after each query.
    pub mean_reward: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Raster primitives
// ---------------------------------------------------------------------------

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 48]);
const GRID: Rgb<u8> = Rgb([205, 205, 210]);

fn palette(i: usize) -> Rgb<u8> {
    const P: [[u8; 3]; 8] = [
        [31, 119, 180],
        [214, 39, 40],
        [44, 160, 44],
        [255, 127, 14],
        [148, 103, 189],
        [140, 86, 75],
        [23, 190, 207],
        [188, 189, 34],
    ];
    Rgb(P[i % P.len()])
}

fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, BG)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, c);
        }
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(
            img,
            (x0 + t * (x1 - x0)).round() as i64,
            (y0 + t * (y1 - y0)).round() as i64,
            c,
        );
    }
}

fn draw_circle(img: &mut RgbImage, cx: i64, cy: i64, r: i64, c: Rgb<u8>, filled: bool) {
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dx * dx + dy * dy;
            let on = if filled {
                d2 <= r * r
            } else {
                d2 <= r * r && d2 >= (r - 1) * (r - 1)
            };
            if on {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// 5×7 bitmap glyphs; each byte is one row, bit 4 = leftmost column.
fn glyph(c: char) -> [u8; 7] {
    let c = c.to_ascii_lowercase();
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F], // unknown: box
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, c: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    put(img, cx + col as i64, y + row as i64, c);
                }
            }
        }
        cx += 6;
    }
}

fn text_width(s: &str) -> i64 {
    6 * s.chars().count() as i64
}

/// Two-stop diverging ramp for loss magnitudes: deep blue → paper → rust.
fn ramp(t: f64) -> Rgb<u8> {
    let lerp = |a: f64, b: f64, u: f64| (a + (b - a) * u).round() as u8;
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let u = t / 0.5;
        Rgb([lerp(25.0, 238.0, u), lerp(45.0, 236.0, u), lerp(120.0, 230.0, u)])
    } else {
        let u = (t - 0.5) / 0.5;
        Rgb([lerp(238.0, 170.0, u), lerp(236.0, 35.0, u), lerp(230.0, 40.0, u)])
    }
}

const NONFINITE: Rgb<u8> = Rgb([64, 8, 8]);

fn stamp_run_id(img: &mut RgbImage, run_id: &str) {
    let text = format!("run {run_id}");
    let y = img.height() as i64 - 10;
    draw_text(img, 4, y, &text, Rgb([120, 120, 128]));
}

fn save_png(img: &RgbImage, path: &PathBuf) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Sidecar construction (shared by emit and verify)
// ---------------------------------------------------------------------------

fn contour_entries<'s>(store: &'s ResultStore) -> Vec<&'s StoreEntry> {
    store
        .latest_entries()
        .into_iter()
        .filter(|e| {
            e.kind == "diagnose" && e.artifacts.iter().any(|a| a.path.ends_with("contour.csv"))
        })
        .collect()
}

fn contour_sidecar(store: &ResultStore, stage: &str) -> Result<(ContourSidecar, ContourGrid)> {
    let grid = ContourGrid::read_files(&store.stage_dir(stage).join("contour"))?;
    let sidecar = ContourSidecar {
        run_id: store.run_id.clone(),
        stage: stage.to_string(),
        alphas: grid.alphas.clone(),
        betas: grid.betas.clone(),
        matrix: grid.matrix.clone(),
        baseline: grid.baseline,
        nonfinite_cells: grid.nonfinite_cells,
    };
    Ok((sidecar, grid))
}

/// Accuracy/ASR pairs: each train stage joined with every evasion attack
/// that ran against it, aggregates recomputed from raw records.
fn scatter_sidecar(store: &ResultStore) -> Result<ScatterSidecar> {
    let entries = store.latest_entries();
    let mut points = Vec::new();
    for train in entries.iter().filter(|e| e.kind == "train") {
        let Ok(summary) = read_train_summary(store, &train.stage_id) else {
            continue;
        };
        for atk in entries
            .iter()
            .filter(|e| e.kind == "attack" && e.upstream.contains(&train.stage_id))
        {
            let Ok(report) = read_attack_report(store, &atk.stage_id) else {
                continue;
            };
            if report.name != "pgd" && report.name != "nes" {
                continue;
            }
            let agg = aggregates_from_records(&report.records);
            if let Some(asr) = agg.get("asr") {
                points.push(ScatterPoint {
                    train_stage: train.stage_id.clone(),
                    attack_stage: atk.stage_id.clone(),
                    accuracy_pct: 100.0 * summary.test_accuracy,
                    asr_pct: 100.0 * asr,
                });
            }
        }
    }
    Ok(ScatterSidecar {
        run_id: store.run_id.clone(),
        points,
    })
}

fn histogram_entries<'s>(store: &'s ResultStore) -> Vec<&'s StoreEntry> {
    store
        .latest_entries()
        .into_iter()
        .filter(|e| {
            e.kind == "diagnose" && e.artifacts.iter().any(|a| a.path.ends_with("overlap.json"))
        })
        .collect()
}

fn histogram_sidecar(store: &ResultStore, stage: &str) -> Result<HistogramSidecar> {
    let path = store.stage_dir(stage).join("overlap.json");
    let hist: OverlapHistogram = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(HistogramSidecar {
        run_id: store.run_id.clone(),
        stage: stage.to_string(),
        counts: hist.counts,
        models: hist.models,
        inputs: hist.inputs,
    })
}

fn budget_entries<'s>(store: &'s ResultStore) -> Vec<&'s StoreEntry> {
    store
        .latest_entries()
        .into_iter()
        .filter(|e| {
            e.kind == "attack" && e.artifacts.iter().any(|a| a.path.ends_with("queries.json"))
        })
        .collect()
}

fn budget_sidecar(store: &ResultStore, stage: &str) -> Result<BudgetSidecar> {
    let path = store.stage_dir(stage).join("queries.json");
    let log: Vec<QueryEvent> = serde_json::from_slice(&std::fs::read(path)?)?;
    let mut queries = Vec::with_capacity(log.len());
    let mut mean_reward = Vec::with_capacity(log.len());
    let mut sum = 0.0;
    for (i, ev) in log.iter().enumerate() {
        sum += ev.reward;
        queries.push(i + 1);
        mean_reward.push(sum / (i + 1) as f64);
    }
    Ok(BudgetSidecar {
        run_id: store.run_id.clone(),
        stage: stage.to_string(),
        queries,
        mean_reward,
    })
}

// ---------------------------------------------------------------------------
// Renderers
// ---------------------------------------------------------------------------

fn render_contour(sc: &ContourSidecar) -> RgbImage {
    let rows = sc.alphas.len().max(1);
    let cols = sc.betas.len().max(1);
    let cell = (360 / rows.max(cols)).clamp(3, 16) as i64;
    let (ml, mt, mr, mb) = (14i64, 18i64, 14i64, 16i64);
    let w = (ml + mr + cell * cols as i64) as u32;
    let h = (mt + mb + cell * rows as i64 + 12) as u32;
    let mut img = blank(w, h);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &sc.matrix {
        for &v in row {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let span = (hi - lo).max(1e-12);
    for (i, row) in sc.matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let c = if v.is_finite() {
                ramp((v - lo) / span)
            } else {
                NONFINITE
            };
            fill_rect(&mut img, ml + cell * j as i64, mt + cell * i as i64, cell, cell, c);
        }
    }
    // Crosshair plus numeric annotation at the grid center (the baseline).
    let ci = rows as i64 / 2;
    let cj = cols as i64 / 2;
    let cx = ml + cell * cj + cell / 2;
    let cy = mt + cell * ci + cell / 2;
    draw_line(&mut img, (cx - 5) as f64, cy as f64, (cx + 5) as f64, cy as f64, INK);
    draw_line(&mut img, cx as f64, (cy - 5) as f64, cx as f64, (cy + 5) as f64, INK);
    let label = format!("center loss = {:.4}", sc.baseline);
    draw_text(&mut img, ml, 4, &label, INK);
    let title = format!("contour {}", sc.stage);
    draw_text(&mut img, w as i64 - text_width(&title) - 4, 4, &title, INK);
    stamp_run_id(&mut img, &sc.run_id);
    img
}

fn render_scatter(sc: &ScatterSidecar) -> RgbImage {
    let (w, h) = (560u32, 330u32);
    let (ml, mt, mr, mb) = (46i64, 20i64, 170i64, 34i64);
    let (pw, ph) = (w as i64 - ml - mr, h as i64 - mt - mb);
    let mut img = blank(w, h);

    // Frame and gridlines at quartiles of [0, 100].
    for q in 0..=4 {
        let gx = ml + pw * q / 4;
        let gy = mt + ph * q / 4;
        draw_line(&mut img, gx as f64, mt as f64, gx as f64, (mt + ph) as f64, GRID);
        draw_line(&mut img, ml as f64, gy as f64, (ml + pw) as f64, gy as f64, GRID);
        let xv = 25 * q;
        draw_text(&mut img, gx - 6, mt + ph + 4, &format!("{xv}"), INK);
        draw_text(&mut img, ml - 26, mt + ph - ph * q / 4 - 3, &format!("{xv}"), INK);
    }
    draw_text(&mut img, ml + pw / 2 - 30, h as i64 - 12, "accuracy %", INK);
    draw_text(&mut img, 4, mt - 14, "asr %", INK);

    // Coincident points stay visible: repeats at a pixel grow as rings.
    let mut seen: Vec<(i64, i64)> = Vec::new();
    for (i, p) in sc.points.iter().enumerate() {
        let px = ml + (p.accuracy_pct.clamp(0.0, 100.0) / 100.0 * pw as f64).round() as i64;
        let py = mt + ph - (p.asr_pct.clamp(0.0, 100.0) / 100.0 * ph as f64).round() as i64;
        let dups = seen.iter().filter(|&&q| q == (px, py)).count() as i64;
        seen.push((px, py));
        if dups == 0 {
            draw_circle(&mut img, px, py, 3, palette(i), true);
        } else {
            draw_circle(&mut img, px, py, 3 + 2 * dups, palette(i), false);
        }
        // Legend row: swatch plus stage names.
        let ly = mt + 12 * i as i64;
        fill_rect(&mut img, w as i64 - mr + 6, ly, 8, 8, palette(i));
        let label = format!("{}/{}", p.train_stage, p.attack_stage);
        draw_text(&mut img, w as i64 - mr + 18, ly, &label, INK);
    }
    stamp_run_id(&mut img, &sc.run_id);
    img
}

fn render_histogram(sc: &HistogramSidecar) -> RgbImage {
    let bars = sc.counts.len().max(1) as i64;
    let bar_w = 34i64;
    let gap = 10i64;
    let (ml, mt, mr, mb) = (20i64, 34i64, 14i64, 40i64);
    let w = (ml + mr + bars * (bar_w + gap)) as u32;
    let h = 300u32;
    let ph = h as i64 - mt - mb;
    let mut img = blank(w, h);

    let max_count = sc.counts.iter().copied().max().unwrap_or(0).max(1);
    for (k, &count) in sc.counts.iter().enumerate() {
        let x = ml + k as i64 * (bar_w + gap);
        let bh = (count as i64) * ph / max_count as i64;
        fill_rect(&mut img, x, mt + ph - bh, bar_w, bh, palette(0));
        let label = format!("{count}");
        draw_text(&mut img, x + bar_w / 2 - text_width(&label) / 2, mt + ph - bh - 10, &label, INK);
        let tick = format!("k={k}");
        draw_text(&mut img, x + bar_w / 2 - text_width(&tick) / 2, mt + ph + 6, &tick, INK);
    }
    let title = format!(
        "inputs compromised on exactly k of {} models ({})",
        sc.models, sc.stage
    );
    draw_text(&mut img, ml, 8, &title, INK);
    draw_line(&mut img, ml as f64, (mt + ph) as f64, (w as i64 - mr) as f64, (mt + ph) as f64, INK);
    stamp_run_id(&mut img, &sc.run_id);
    img
}

fn render_budget(sc: &BudgetSidecar) -> RgbImage {
    let (w, h) = (480u32, 300u32);
    let (ml, mt, mr, mb) = (46i64, 22i64, 16i64, 36i64);
    let (pw, ph) = (w as i64 - ml - mr, h as i64 - mt - mb);
    let mut img = blank(w, h);

    let n = sc.queries.len().max(1) as f64;
    let y_max = sc
        .mean_reward
        .iter()
        .copied()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    for q in 0..=4 {
        let gy = mt + ph * q / 4;
        draw_line(&mut img, ml as f64, gy as f64, (ml + pw) as f64, gy as f64, GRID);
    }
    let mut prev: Option<(f64, f64)> = None;
    for (&q, &r) in sc.queries.iter().zip(&sc.mean_reward) {
        let x = ml as f64 + (q as f64 / n) * pw as f64;
        let y = (mt + ph) as f64 - (r / y_max).clamp(0.0, 1.0) * ph as f64;
        if let Some((px, py)) = prev {
            draw_line(&mut img, px, py, x, y, palette(1));
        } else if sc.queries.len() == 1 {
            draw_circle(&mut img, x as i64, y as i64, 2, palette(1), true);
        }
        prev = Some((x, y));
    }
    draw_line(&mut img, ml as f64, (mt + ph) as f64, (ml + pw) as f64, (mt + ph) as f64, INK);
    draw_line(&mut img, ml as f64, mt as f64, ml as f64, (mt + ph) as f64, INK);
    draw_text(&mut img, ml + pw / 2 - 24, h as i64 - 12, "queries", INK);
    draw_text(&mut img, 4, mt - 14, &format!("mean reward (max {y_max:.3})"), INK);
    draw_text(&mut img, ml + pw - text_width(&format!("{}", sc.queries.len())), mt + ph + 4, &format!("{}", sc.queries.len()), INK);
    let title = format!("query budget {}", sc.stage);
    draw_text(&mut img, ml, 8, &title, INK);
    stamp_run_id(&mut img, &sc.run_id);
    img
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

fn write_pair<T: Serialize>(
    out: &mut PlotOutcome,
    dir: &PathBuf,
    name: &str,
    sidecar: &T,
    img: &RgbImage,
) -> Result<()> {
    let png = dir.join(format!("{name}.png"));
    let json = dir.join(format!("{name}.json"));
    save_png(img, &png)?;
    std::fs::write(&json, serde_json::to_vec_pretty(sidecar)?)?;
    out.written.push(png);
    out.written.push(json);
    Ok(())
}

/// Emit the requested plot families. Plots with no backing data are skipped
/// and listed in [`PlotOutcome::skipped`]; no placeholder files appear.
pub fn emit_plots(store: &ResultStore, kinds: &[PlotKind]) -> Result<PlotOutcome> {
    let dir = store.root.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut out = PlotOutcome::default();

    for kind in kinds {
        match kind {
            PlotKind::Contour => {
                let entries = contour_entries(store);
                if entries.is_empty() {
                    out.skipped.push("contour: no stored contour grids".into());
                }
                for e in entries {
                    let (sc, _) = contour_sidecar(store, &e.stage_id)?;
                    let img = render_contour(&sc);
                    write_pair(&mut out, &dir, &format!("contour_{}", e.stage_id), &sc, &img)?;
                }
            }
            PlotKind::Scatter => {
                let sc = scatter_sidecar(store)?;
                if sc.points.is_empty() {
                    out.skipped
                        .push("scatter: no (train, evasion) pairs in the store".into());
                } else {
                    let img = render_scatter(&sc);
                    write_pair(&mut out, &dir, "scatter_acc_asr", &sc, &img)?;
                }
            }
            PlotKind::Histogram => {
                let entries = histogram_entries(store);
                if entries.is_empty() {
                    out.skipped.push("histogram: no overlap probes stored".into());
                }
                for e in entries {
                    let sc = histogram_sidecar(store, &e.stage_id)?;
                    let img = render_histogram(&sc);
                    write_pair(&mut out, &dir, &format!("overlap_{}", e.stage_id), &sc, &img)?;
                }
            }
            PlotKind::BudgetCurve => {
                let entries = budget_entries(store);
                if entries.is_empty() {
                    out.skipped.push("budget_curve: no query logs stored".into());
                }
                for e in entries {
                    let sc = budget_sidecar(store, &e.stage_id)?;
                    let img = render_budget(&sc);
                    write_pair(&mut out, &dir, &format!("budget_{}", e.stage_id), &sc, &img)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn emit_all_plots(store: &ResultStore) -> Result<PlotOutcome> {
    emit_plots(store, &PlotKind::ALL)
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

fn json_value<T: Serialize>(t: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(t)?)
}

/// Recompute every plot sidecar under `plots/` from the stored artifacts and
/// compare exactly (JSON value equality; +∞ compares as null on both sides).
/// Also checks that each sidecar's PNG sibling exists.
pub fn verify_sidecars(store: &ResultStore) -> Result<Vec<VerifyCheck>> {
    let dir = store.root.join("plots");
    let mut checks = Vec::new();
    if !dir.is_dir() {
        return Ok(checks);
    }
    let mut names: Vec<String> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();

    for name in names {
        let stem = name.trim_end_matches(".json").to_string();
        let disk: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(&name))?)?;
        let recomputed: Result<serde_json::Value> = if let Some(stage) =
            stem.strip_prefix("contour_")
        {
            contour_sidecar(store, stage).and_then(|(sc, _)| json_value(&sc))
        } else if stem == "scatter_acc_asr" {
            scatter_sidecar(store).and_then(|sc| json_value(&sc))
        } else if let Some(stage) = stem.strip_prefix("overlap_") {
            histogram_sidecar(store, stage).and_then(|sc| json_value(&sc))
        } else if let Some(stage) = stem.strip_prefix("budget_") {
            budget_sidecar(store, stage).and_then(|sc| json_value(&sc))
        } else {
            checks.push(VerifyCheck {
                name: format!("plots/{name}"),
                ok: false,
                detail: "unrecognized sidecar".into(),
            });
            continue;
        };
        match recomputed {
            Ok(fresh) => {
                let ok = fresh == disk;
                checks.push(VerifyCheck {
                    name: format!("plots/{name}"),
                    ok,
                    detail: if ok {
                        "sidecar matches recomputation".into()
                    } else {
                        "sidecar differs from stored artifacts".into()
                    },
                });
            }
            Err(e) => checks.push(VerifyCheck {
                name: format!("plots/{name}"),
                ok: false,
                detail: format!("recomputation failed: {e}"),
            }),
        }
        let png = dir.join(format!("{stem}.png"));
        checks.push(VerifyCheck {
            name: format!("plots/{stem}.png"),
            ok: png.exists(),
            detail: if png.exists() { "present".into() } else { "missing".into() },
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::ContourSpace;
    use crate::harness::{Artifact, TrainSummary};
    use std::path::Path;

    fn fake_store(root: &Path) -> ResultStore {
        ResultStore {
            root: root.to_path_buf(),
            run_id: "0a1b2c3d4e5f".into(),
            entries: Vec::new(),
        }
    }

    fn push_stage(store: &mut ResultStore, id: &str, kind: &str, upstream: &[&str], files: &[&str]) {
        store.entries.push(StoreEntry {
            seq: store.entries.len(),
            stage_id: id.into(),
            kind: kind.into(),
            cache_key: format!("key-{id}"),
            upstream: upstream.iter().map(|s| s.to_string()).collect(),
            artifacts: files
                .iter()
                .map(|f| Artifact {
                    path: format!("stages/{id}/{f}"),
                    sha256: String::new(),
                })
                .collect(),
        });
    }

    #[test]
    fn histogram_sidecar_holds_the_exact_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = fake_store(tmp.path());
        push_stage(&mut store, "ov", "diagnose", &[], &["overlap.json"]);
        let dir = store.stage_dir("ov");
        std::fs::create_dir_all(&dir).unwrap();
        let hist = OverlapHistogram {
            counts: vec![3, 1, 0, 2],
            models: 3,
            inputs: 6,
        };
        std::fs::write(dir.join("overlap.json"), serde_json::to_vec(&hist).unwrap()).unwrap();

        let out = emit_plots(&store, &[PlotKind::Histogram]).unwrap();
        assert_eq!(out.written.len(), 2);
        assert!(out.skipped.is_empty());
        let sc: HistogramSidecar = serde_json::from_slice(
            &std::fs::read(store.root.join("plots").join("overlap_ov.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(sc.counts, vec![3, 1, 0, 2]);
        assert_eq!(sc.run_id, store.run_id);

        let checks = verify_sidecars(&store).unwrap();
        assert!(checks.iter().all(|c| c.ok), "{checks:#?}");

        // Tampering with the sidecar is caught exactly.
        let path = store.root.join("plots").join("overlap_ov.json");
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        v["counts"][0] = serde_json::json!(4);
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        let checks = verify_sidecars(&store).unwrap();
        assert!(checks.iter().any(|c| !c.ok));
    }

    #[test]
    fn coincident_scatter_points_are_both_visible() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = fake_store(tmp.path());
        for (t, a) in [("m0", "a0"), ("m1", "a1")] {
            push_stage(&mut store, t, "train", &[], &["metrics.json"]);
            push_stage(&mut store, a, "attack", &[t], &["report.json"]);
            let tdir = store.stage_dir(t);
            std::fs::create_dir_all(&tdir).unwrap();
            let summary = TrainSummary {
                arch: "chain_cnn".into(),
                test_accuracy: 0.60,
                train_accuracy: 0.9,
                final_train_loss: 0.4,
                epochs_run: 1,
                poison_fraction: 0.0,
                poisoned_count: 0,
            };
            std::fs::write(tdir.join("metrics.json"), serde_json::to_vec(&summary).unwrap())
                .unwrap();
            let adir = store.stage_dir(a);
            std::fs::create_dir_all(&adir).unwrap();
            let records = vec![
                crate::attacks::AttackRecord::Evasion { id: 0, success: true, linf: 0.03 },
                crate::attacks::AttackRecord::Evasion { id: 1, success: false, linf: 0.03 },
            ];
            let rep = crate::attacks::AttackReport::new(
                "pgd",
                &crate::attacks::EvasionConfig::most_likely(),
                records,
            )
            .unwrap();
            std::fs::write(adir.join("report.json"), serde_json::to_vec(&rep).unwrap()).unwrap();
        }

        let out = emit_plots(&store, &[PlotKind::Scatter]).unwrap();
        assert_eq!(out.written.len(), 2);
        let sc: ScatterSidecar = serde_json::from_slice(
            &std::fs::read(store.root.join("plots").join("scatter_acc_asr.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(sc.points.len(), 2);
        assert_eq!(sc.points[0].accuracy_pct, sc.points[1].accuracy_pct);
        assert_eq!(sc.points[0].asr_pct, sc.points[1].asr_pct);

        // Both palette colors appear: the second point renders as a ring
        // around the first, and both legend swatches are drawn.
        let img = image::open(store.root.join("plots").join("scatter_acc_asr.png"))
            .unwrap()
            .to_rgb8();
        let mut c0 = 0usize;
        let mut c1 = 0usize;
        for p in img.pixels() {
            if *p == palette(0) {
                c0 += 1;
            }
            if *p == palette(1) {
                c1 += 1;
            }
        }
        assert!(c0 > 0 && c1 > 0, "palette0={c0} palette1={c1}");
        assert!(verify_sidecars(&store).unwrap().iter().all(|c| c.ok));
    }

    #[test]
    fn budget_curve_is_the_cumulative_mean_and_renders_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = fake_store(tmp.path());
        push_stage(&mut store, "ko", "attack", &["m0"], &["report.json", "queries.json"]);
        let dir = store.stage_dir("ko");
        std::fs::create_dir_all(&dir).unwrap();
        let log = vec![
            QueryEvent { pool_idx: 4, arm: 0, reward: 1.0 },
            QueryEvent { pool_idx: 9, arm: 1, reward: 0.0 },
            QueryEvent { pool_idx: 2, arm: 0, reward: 1.0 },
        ];
        std::fs::write(dir.join("queries.json"), serde_json::to_vec(&log).unwrap()).unwrap();

        let out = emit_plots(&store, &[PlotKind::BudgetCurve]).unwrap();
        assert_eq!(out.written.len(), 2);
        let sc: BudgetSidecar = serde_json::from_slice(
            &std::fs::read(store.root.join("plots").join("budget_ko.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(sc.queries, vec![1, 2, 3]);
        assert_eq!(sc.mean_reward, vec![1.0, 0.5, 2.0 / 3.0]);

        // Re-emission is byte-identical.
        let png = store.root.join("plots").join("budget_ko.png");
        let first = std::fs::read(&png).unwrap();
        emit_plots(&store, &[PlotKind::BudgetCurve]).unwrap();
        assert_eq!(first, std::fs::read(&png).unwrap());
    }

    #[test]
    fn contour_sidecar_round_trips_inf_as_null_and_verifies() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = fake_store(tmp.path());
        push_stage(&mut store, "ct", "diagnose", &[], &["contour.csv", "contour.meta.json"]);
        let grid = ContourGrid {
            space: ContourSpace::Parameter,
            alphas: vec![-1.0, 0.0, 1.0],
            betas: vec![-1.0, 0.0, 1.0],
            matrix: vec![
                vec![1.0, 2.0, f64::INFINITY],
                vec![0.5, 0.25, 1.5],
                vec![3.0, 1.0, 2.0],
            ],
            baseline: 0.25,
            nonfinite_cells: 1,
            direction_seed: 7,
        };
        grid.write_files(&store.stage_dir("ct").join("contour")).unwrap();

        let out = emit_plots(&store, &[PlotKind::Contour]).unwrap();
        assert_eq!(out.written.len(), 2);
        let v: serde_json::Value = serde_json::from_slice(
            &std::fs::read(store.root.join("plots").join("contour_ct.json")).unwrap(),
        )
        .unwrap();
        assert!(v["matrix"][0][2].is_null(), "inf must serialize as null");
        assert_eq!(v["baseline"], serde_json::json!(0.25));
        assert!(verify_sidecars(&store).unwrap().iter().all(|c| c.ok));
    }

    #[test]
    fn missing_data_is_skipped_without_placeholder_files() {
        let tmp = tempfile::tempdir().unwrap();
        let store = fake_store(tmp.path());
        let out = emit_all_plots(&store).unwrap();
        assert!(out.written.is_empty());
        assert_eq!(out.skipped.len(), 4);
        let n = std::fs::read_dir(store.root.join("plots")).unwrap().count();
        assert_eq!(n, 0);
    }
}
