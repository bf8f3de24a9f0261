//! Deterministic color + shape detector for registry categories.
//!
//! Pixels are labeled with the nearest registry color (or none), labeled
//! pixels are grouped into 4-connected components, small components are
//! dropped, and the remaining pixels of each color are matched against the
//! category's shape template. Template pixels covered by other colors count
//! as possibly occluded and are left out of the union.

use std::collections::BTreeSet;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::dataset::render_samples;
use crate::data::registry::{CategoryRegistry, ShapeKind};
use crate::data::scene::SceneSampler;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Largest RGB distance to a registry color for a pixel to be labeled.
    pub color_tolerance: f64,
    /// Smallest component area in pixels.
    pub min_area: usize,
    /// Smallest template IoU for a shape match.
    pub shape_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { color_tolerance: 60.0, min_area: 6, shape_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category: String,
    pub area: usize,
    pub shape_iou: f64,
}

pub struct OracleDetector {
    registry: CategoryRegistry,
    config: DetectorConfig,
}

impl OracleDetector {
    pub fn new(registry: CategoryRegistry, config: DetectorConfig) -> Self {
        Self { registry, config }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Color label per pixel: index into the registry, or `None`.
    fn labels(&self, img: &RgbImage) -> Vec<Option<usize>> {
        let tol2 = self.config.color_tolerance * self.config.color_tolerance;
        img.pixels()
            .map(|p| {
                let d2 = |rgb: [u8; 3]| -> f64 { (0..3).map(|i| (p.0[i] as f64 - rgb[i] as f64).powi(2)).sum() };
                if d2(self.registry.background) <= tol2 {
                    return None;
                }
                let (best, dist) = self
                    .registry
                    .categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, d2(c.rgb)))
                    .fold((usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                (dist <= tol2).then_some(best)
            })
            .collect()
    }

    pub fn detect_all(&self, img: &RgbImage) -> Vec<Detection> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels = self.labels(img);
        let comps = components(&labels, w, h);
        let mut out = Vec::new();
        for (ci, cat) in self.registry.categories.iter().enumerate() {
            let region: Vec<bool> = {
                let mut r = vec![false; w * h];
                for comp in comps.iter().filter(|c| c.label == ci && c.pixels.len() >= self.config.min_area) {
                    for &p in &comp.pixels {
                        r[p] = true;
                    }
                }
                r
            };
            let area = region.iter().filter(|&&b| b).count();
            if area == 0 {
                continue;
            }
            let others: Vec<bool> = labels.iter().map(|l| l.is_some_and(|l| l != ci)).collect();
            let iou = best_template_iou(cat.shape, &region, &others, w, h);
            if iou >= self.config.shape_threshold {
                out.push(Detection { category: cat.name.clone(), area, shape_iou: iou });
            }
        }
        out
    }

    pub fn detect(&self, img: &RgbImage) -> BTreeSet<String> {
        self.detect_all(img).into_iter().map(|d| d.category).collect()
    }

    /// Fraction of `n` clean rendered scenes whose detected set equals the
    /// rendered category set.
    pub fn validation_accuracy(&self, n: usize, seed: u64) -> Result<f64> {
        let sampler = SceneSampler::default();
        let samples = render_samples(n, &self.registry, &sampler, seed)?;
        let exact = samples
            .iter()
            .filter(|s| self.detect(&s.image) == s.groundings.iter().map(|g| g.category.clone()).collect())
            .count();
        Ok(exact as f64 / n as f64)
    }

    /// Fails unless [`validation_accuracy`](Self::validation_accuracy) reaches
    /// [`GATE_ACCURACY`] on [`GATE_SCENES`] scenes.
    pub fn check_gate(&self) -> Result<f64> {
        let acc = self.validation_accuracy(GATE_SCENES, GATE_SEED)?;
        if acc < GATE_ACCURACY {
            return Err(Error::Invalid(format!(
                "detector validation accuracy {:.2}% is below {:.0}%; refusing to report scores",
                100.0 * acc,
                100.0 * GATE_ACCURACY
            )));
        }
        Ok(acc)
    }
}

pub const GATE_SCENES: usize = 1000;
pub const GATE_ACCURACY: f64 = 0.99;
const GATE_SEED: u64 = 0x6a7e;

struct Component {
    label: usize,
    pixels: Vec<usize>,
}

fn components(labels: &[Option<usize>], w: usize, h: usize) -> Vec<Component> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let Some(label) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut push = |q: usize| {
                if !seen[q] && labels[q] == Some(label) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        out.push(Component { label, pixels });
    }
    out
}

/// Occlusion-aware IoU of `region` with the best-fitting template of `shape`.
fn best_template_iou(shape: ShapeKind, region: &[bool], others: &[bool], w: usize, h: usize) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (p, _) in region.iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = (p % w, p / w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        n += 1.0;
    }
    let area = n as usize;
    let margin = 9usize;
    let bx0 = x0.saturating_sub(margin);
    let by0 = y0.saturating_sub(margin);
    let bx1 = (x1 + margin).min(w - 1);
    let by1 = (y1 + margin).min(h - 1);
    let score = |cx: f64, cy: f64, r: f64| -> f64 {
        let template = shape.at_radius(r);
        let mut inter = 0usize;
        let mut union = area;
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                let inside = template.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !inside {
                    continue;
                }
                let p = y * w + x;
                if region[p] {
                    inter += 1;
                } else if !others[p] {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    };
    let centers = [((x0 + x1 + 1) as f64 / 2.0, (y0 + y1 + 1) as f64 / 2.0), (sx / n, sy / n)];
    let mut best = (0.0, 0.0, 0.0, 0.0);
    for (cx, cy) in centers {
        for dy in -3..=3 {
            for dx in -3..=3 {
                for r in 3..=8 {
                    let (x, y, r) = (cx + dx as f64, cy + dy as f64, r as f64);
                    let s = score(x, y, r);
                    if s > best.0 {
                        best = (s, x, y, r);
                    }
                }
            }
        }
    }
    for step in [0.5, 0.25] {
        let (_, bx, by, br) = best;
        for dy in -2..=2 {
            for dx in -2..=2 {
                for dr in -1..=1 {
                    let (x, y, r) = (bx + step * dx as f64, by + step * dy as f64, br + step * dr as f64);
                    let s = score(x, y, r);
                    if s > best.0 {
                        best = (s, x, y, r);
                    }
                }
            }
        }
    }
    best.0
}
