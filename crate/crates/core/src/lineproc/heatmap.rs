use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::extract::baseline_mean_y;
use super::LineError;
use crate::corpus::Point;

/// Start, baseline and end probability maps of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTriple {
    pub width: usize,
    pub height: usize,
    pub starts: Vec<f32>,
    pub baselines: Vec<f32>,
    pub ends: Vec<f32>,
}

impl HeatmapTriple {
    pub fn new(
        width: usize,
        height: usize,
        starts: Vec<f32>,
        baselines: Vec<f32>,
        ends: Vec<f32>,
    ) -> Result<Self, LineError> {
        let n = width * height;
        for m in [&starts, &baselines, &ends] {
            if m.len() != n {
                return Err(LineError::PixelCount {
                    expected: n,
                    got: m.len(),
                });
            }
        }
        Ok(HeatmapTriple {
            width,
            height,
            starts,
            baselines,
            ends,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        HeatmapTriple {
            width,
            height,
            starts: vec![0.0; n],
            baselines: vec![0.0; n],
            ends: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorizeConfig {
    /// Baseline map values above this belong to a line.
    pub baseline_threshold: f32,
    /// Start/end responses above this inside a component split it.
    pub split_threshold: f32,
    /// Douglas–Peucker tolerance for the output polylines, in pixels.
    pub simplify_tolerance: f64,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        VectorizeConfig {
            baseline_threshold: 0.3,
            split_threshold: 0.5,
            simplify_tolerance: 0.5,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Column {
    sum_y: f64,
    count: usize,
    start: f32,
    end: f32,
}

/// Turns heatmaps into baseline polylines ordered top to bottom.
pub fn vectorize_heatmaps(maps: &HeatmapTriple, cfg: &VectorizeConfig) -> Vec<Vec<Point>> {
    let (w, h) = (maps.width, maps.height);
    let on: Vec<bool> = maps
        .baselines
        .iter()
        .map(|&v| v > cfg.baseline_threshold)
        .collect();
    let mut label = vec![usize::MAX; w * h];
    let mut polylines = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..w * h {
        if !on[seed] || label[seed] != usize::MAX {
            continue;
        }
        let id = seed;
        label[seed] = id;
        queue.push_back(seed);
        let mut columns: BTreeMap<usize, Column> = BTreeMap::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let col = columns.entry(x).or_default();
            col.sum_y += y as f64;
            col.count += 1;
            col.start = col.start.max(maps.starts[i]);
            col.end = col.end.max(maps.ends[i]);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on[j] && label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        polylines.extend(split_component(&columns, cfg));
    }
    let mut keyed: Vec<(f64, Vec<Point>)> = polylines
        .into_iter()
        .map(|p| (baseline_mean_y(&p), p))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1[0].x.cmp(&b.1[0].x)));
    keyed.into_iter().map(|(_, p)| p).collect()
}

fn split_component(columns: &BTreeMap<usize, Column>, cfg: &VectorizeConfig) -> Vec<Vec<Point>> {
    let cols: Vec<(usize, Column)> = columns.iter().map(|(&x, &c)| (x, c)).collect();
    let last = cols.len().saturating_sub(1);
    let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
    for (k, (x, col)) in cols.iter().enumerate() {
        let interior = k > 0 && k < last;
        if interior && col.start > cfg.split_threshold && !segments.last().unwrap().is_empty() {
            segments.push(Vec::new());
        }
        segments
            .last_mut()
            .unwrap()
            .push((*x as f64, col.sum_y / col.count as f64));
        if interior && col.end > cfg.split_threshold {
            segments.push(Vec::new());
        }
    }
    segments
        .into_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let keep = douglas_peucker(&s, cfg.simplify_tolerance);
            keep.into_iter()
                .map(|i| Point::new(s[i].0 as i32, s[i].1.round() as i32))
                .collect()
        })
        .collect()
}

/// Indices of the points kept by Douglas–Peucker simplification.
fn douglas_peucker(pts: &[(f64, f64)], tol: f64) -> Vec<usize> {
    fn recurse(pts: &[(f64, f64)], lo: usize, hi: usize, tol: f64, keep: &mut Vec<usize>) {
        if hi <= lo + 1 {
            return;
        }
        let (x0, y0) = pts[lo];
        let (x1, y1) = pts[hi];
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len = (dx * dx + dy * dy).sqrt();
        let mut best = (0.0, lo);
        for (i, &(x, y)) in pts.iter().enumerate().take(hi).skip(lo + 1) {
            let d = ((x - x0) * dy - (y - y0) * dx).abs() / len;
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > tol {
            recurse(pts, lo, best.1, tol, keep);
            keep.push(best.1);
            recurse(pts, best.1, hi, tol, keep);
        }
    }
    let mut keep = vec![0];
    recurse(pts, 0, pts.len() - 1, tol, &mut keep);
    keep.push(pts.len() - 1);
    keep
}
