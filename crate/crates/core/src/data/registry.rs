use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Diamond,
    Star,
    Pentagon,
    Crescent,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Diamond,
        ShapeKind::Star,
        ShapeKind::Pentagon,
        ShapeKind::Crescent,
    ];

    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Star => "star",
            ShapeKind::Pentagon => "pentagon",
            ShapeKind::Crescent => "crescent",
        }
    }

    /// Whether the offset `(dx, dy)` from the shape center (y pointing down)
    /// lies inside the shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        self.at_radius(r).contains(dx, dy)
    }

    /// Membership test for a fixed radius, with polygon vertices computed once.
    pub fn at_radius(self, r: f64) -> ShapeAtRadius {
        let polygon = match self {
            ShapeKind::Triangle => regular_polygon(3, r, 1.0),
            ShapeKind::Star => regular_polygon(5, r, 0.45),
            ShapeKind::Pentagon => regular_polygon(5, r, 1.0),
            _ => Vec::new(),
        };
        ShapeAtRadius { kind: self, r, polygon }
    }
}

pub struct ShapeAtRadius {
    kind: ShapeKind,
    r: f64,
    polygon: Vec<(f64, f64)>,
}

impl ShapeAtRadius {
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        let r = self.r;
        let (ax, ay) = (dx.abs(), dy.abs());
        let d2 = dx * dx + dy * dy;
        match self.kind {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            ShapeKind::Triangle | ShapeKind::Star | ShapeKind::Pentagon => d2 <= r * r && in_polygon(dx, dy, &self.polygon),
            ShapeKind::Ring => d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r),
            ShapeKind::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            ShapeKind::Bar => ax <= r && ay <= 0.4 * r,
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Crescent => {
                let ox = dx - 0.45 * r;
                d2 <= r * r && ox * ox + dy * dy > (0.8 * r) * (0.8 * r)
            }
        }
    }
}

/// Vertices of an upward-pointing regular polygon (or star when
/// `inner_ratio < 1`, alternating outer and inner radii).
fn regular_polygon(points: usize, r: f64, inner_ratio: f64) -> Vec<(f64, f64)> {
    let star = inner_ratio < 1.0;
    let n = if star { 2 * points } else { points };
    (0..n)
        .map(|i| {
            let angle = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / n as f64;
            let radius = if star && i % 2 == 1 { r * inner_ratio } else { r };
            (radius * angle.cos(), radius * angle.sin())
        })
        .collect()
}

fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// `"<color> <shape>"`, e.g. `"red circle"`.
    pub name: String,
    pub color: String,
    pub shape: ShapeKind,
    pub rgb: [u8; 3],
}

impl Category {
    pub fn new(color: &str, shape: ShapeKind, rgb: [u8; 3]) -> Self {
        Self { name: format!("{color} {}", shape.noun()), color: color.to_string(), shape, rgb }
    }

    pub fn noun(&self) -> &'static str {
        self.shape.noun()
    }

    /// File-name friendly form of the name.
    pub fn slug(&self) -> String {
        self.name.replace(' ', "-")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRegistry {
    pub categories: Vec<Category>,
    pub background: [u8; 3],
}

impl Default for CategoryRegistry {
    fn default() -> Self {
        use ShapeKind::*;
        Self {
            categories: vec![
                Category::new("red", Circle, [230, 30, 30]),
                Category::new("blue", Square, [30, 60, 230]),
                Category::new("green", Triangle, [30, 200, 40]),
                Category::new("yellow", Ring, [240, 230, 30]),
                Category::new("purple", Cross, [130, 40, 200]),
                Category::new("orange", Bar, [250, 140, 10]),
                Category::new("cyan", Diamond, [20, 220, 230]),
                Category::new("magenta", Star, [240, 40, 220]),
                Category::new("brown", Pentagon, [130, 80, 30]),
                Category::new("gray", Crescent, [140, 140, 140]),
            ],
            background: [0, 0, 0],
        }
    }
}

impl CategoryRegistry {
    pub fn new(categories: Vec<Category>, background: [u8; 3]) -> Result<Self> {
        let reg = Self { categories, background };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("category registry is empty".into()));
        }
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                if a.name == b.name || a.shape == b.shape {
                    return Err(Error::Config(format!(
                        "categories {:?} and {:?} share a name or shape noun",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Category> {
        self.get(name).ok_or_else(|| Error::Invalid(format!("unknown category {name:?}")))
    }

    /// Words of every category name, in registry order, without duplicates.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.categories {
            for w in [c.color.as_str(), c.noun()] {
                if !out.iter().any(|o| o == w) {
                    out.push(w.to_string());
                }
            }
        }
        out
    }
}
