//! Synthetic compositional scenes rasterized with exact, occlusion-aware
//! per-object masks and templated captions.

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::registry::CategoryRegistry;
use crate::error::{Error, Result};
use crate::grounding::{BinaryMask, GroundingEntry, TokenGroundingSet};
use crate::nn::seeded_rng;

pub const MAX_OBJECTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    /// `(x, y)` in pixels, origin at the top-left corner.
    pub center: (f64, f64),
    /// Circumradius in pixels.
    pub size: f64,
    /// Painting order; larger values are in front.
    pub z: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    pub token_position: usize,
    pub category: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundedSample {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
    pub groundings: Vec<Grounding>,
}

impl GroundedSample {
    pub fn grounding_set(&self) -> Result<TokenGroundingSet> {
        TokenGroundingSet::new(
            self.groundings
                .iter()
                .map(|g| GroundingEntry { token_position: g.token_position, mask: g.mask.clone() })
                .collect(),
        )
    }
}

/// Lowercased whitespace tokenization with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// `"a <c1>, a <c2> and a <c3>"`; returns the caption and the token
/// position of each category's shape noun.
pub fn caption_for(categories: &[&str]) -> (String, Vec<usize>) {
    let mut caption = String::new();
    let mut positions = Vec::with_capacity(categories.len());
    let mut tokens = 0usize;
    for (i, cat) in categories.iter().enumerate() {
        if i > 0 {
            if i + 1 == categories.len() {
                caption.push_str(" and ");
                tokens += 1;
            } else {
                caption.push_str(", ");
            }
        }
        caption.push_str("a ");
        caption.push_str(cat);
        let words = cat.split_whitespace().count();
        tokens += 1 + words;
        positions.push(tokens - 1);
    }
    (caption, positions)
}

/// Rasterizes a scene. The caption lists the objects in an order drawn from
/// `seed`; painting order follows `z`.
pub fn render(spec: &SceneSpec, registry: &CategoryRegistry, seed: u64) -> Result<GroundedSample> {
    if spec.objects.is_empty() || spec.objects.len() > MAX_OBJECTS {
        return Err(Error::Invalid(format!(
            "a scene needs 1 to {MAX_OBJECTS} objects, got {}",
            spec.objects.len()
        )));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Invalid("canvas must be at least 1x1".into()));
    }
    let mut seen = BTreeSet::new();
    let mut cats = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        let cat = registry.require(&obj.category)?;
        if !seen.insert(obj.category.as_str()) {
            return Err(Error::Invalid(format!("category {:?} appears twice in one scene", obj.category)));
        }
        let (x, y) = obj.center;
        let r = obj.size;
        if !(r > 0.0) || x - r < 0.0 || y - r < 0.0 || x + r > spec.width as f64 || y + r > spec.height as f64 {
            return Err(Error::Invalid(format!(
                "object {:?} at ({x}, {y}) with size {r} is not inside the {}x{} canvas",
                obj.category, spec.width, spec.height
            )));
        }
        cats.push(cat);
    }

    let owners = paint_owners(spec, registry);
    let mut image = RgbImage::from_pixel(spec.width as u32, spec.height as u32, Rgb(spec.background));
    for (i, owner) in owners.iter().enumerate() {
        if let Some(o) = owner {
            image.put_pixel((i % spec.width) as u32, (i / spec.width) as u32, Rgb(cats[*o].rgb));
        }
    }

    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.shuffle(&mut seeded_rng(seed, "caption-order"));
    let names: Vec<&str> = order.iter().map(|&i| spec.objects[i].category.as_str()).collect();
    let (caption, positions) = caption_for(&names);

    let mut groundings = Vec::with_capacity(order.len());
    for (&obj, &pos) in order.iter().zip(&positions) {
        let mask = BinaryMask::from_fn(spec.height, spec.width, |y, x| owners[y * spec.width + x] == Some(obj));
        if mask.is_empty() {
            return Err(Error::Invalid(format!(
                "object {:?} is fully occluded",
                spec.objects[obj].category
            )));
        }
        groundings.push(Grounding { token_position: pos, category: spec.objects[obj].category.clone(), mask });
    }
    Ok(GroundedSample { id: String::new(), image, caption, groundings })
}

/// Index of the front-most object covering each pixel center.
fn paint_owners(spec: &SceneSpec, registry: &CategoryRegistry) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by_key(|&i| spec.objects[i].z);
    let mut owners = vec![None; spec.height * spec.width];
    for &i in &order {
        let obj = &spec.objects[i];
        let shape = registry.get(&obj.category).map(|c| c.shape.at_radius(obj.size)).expect("validated category");
        for y in 0..spec.height {
            for x in 0..spec.width {
                let dx = x as f64 + 0.5 - obj.center.0;
                let dy = y as f64 + 0.5 - obj.center.1;
                if shape.contains(dx, dy) {
                    owners[y * spec.width + x] = Some(i);
                }
            }
        }
    }
    owners
}

/// Parameters of the random scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Every object keeps at least this fraction of its own pixels visible.
    pub min_visible: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self { resolution: 32, min_objects: 1, max_objects: 5, min_size: 4.0, max_size: 7.0, min_visible: 0.6 }
    }
}

impl SceneSampler {
    /// Draws categories uniformly without replacement, then places them;
    /// placement is redrawn (categories kept) until visibility holds.
    pub fn sample<R: Rng>(&self, registry: &CategoryRegistry, rng: &mut R) -> Result<SceneSpec> {
        let max = self.max_objects.min(registry.len()).min(MAX_OBJECTS);
        if self.min_objects == 0 || self.min_objects > max {
            return Err(Error::Config(format!(
                "object count range {}..={} is not satisfiable",
                self.min_objects, self.max_objects
            )));
        }
        let n = rng.random_range(self.min_objects..=max);
        let names = registry.names();
        let chosen: Vec<String> = names.choose_multiple(rng, n).cloned().collect();
        let res = self.resolution as f64;
        for _ in 0..1000 {
            let mut z: Vec<i32> = (0..n as i32).collect();
            z.shuffle(rng);
            let objects: Vec<SceneObject> = chosen
                .iter()
                .zip(z)
                .map(|(cat, z)| {
                    let size = rng.random_range(self.min_size..=self.max_size).min(res / 2.0);
                    let x = rng.random_range(size..=res - size);
                    let y = rng.random_range(size..=res - size);
                    SceneObject { category: cat.clone(), center: (x, y), size, z }
                })
                .collect();
            let spec = SceneSpec {
                height: self.resolution,
                width: self.resolution,
                background: registry.background,
                objects,
            };
            if self.visibility_ok(&spec, registry) {
                return Ok(spec);
            }
        }
        Err(Error::Config("could not place objects with the requested visibility".into()))
    }

    fn visibility_ok(&self, spec: &SceneSpec, registry: &CategoryRegistry) -> bool {
        let owners = paint_owners(spec, registry);
        spec.objects.iter().enumerate().all(|(i, obj)| {
            let alone = SceneSpec { objects: vec![obj.clone()], ..spec.clone() };
            let own = paint_owners(&alone, registry).iter().filter(|o| o.is_some()).count();
            let visible = owners.iter().filter(|o| **o == Some(i)).count();
            own > 0 && visible as f64 >= self.min_visible * own as f64
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(cat: &str, x: f64, y: f64, size: f64, z: i32) -> SceneObject {
        SceneObject { category: cat.into(), center: (x, y), size, z }
    }

    fn spec(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec { height: 32, width: 32, background: [0, 0, 0], objects }
    }

    #[test]
    fn single_circle() {
        let reg = CategoryRegistry::default();
        let s = render(&spec(vec![obj("red circle", 16.0, 16.0, 6.0, 0)]), &reg, 0).unwrap();
        assert_eq!(s.caption, "a red circle");
        assert_eq!(s.groundings.len(), 1);
        assert_eq!(s.groundings[0].token_position, 2);
        let disk = (0..32 * 32)
            .filter(|i| {
                let dx = (i % 32) as f64 + 0.5 - 16.0;
                let dy = (i / 32) as f64 + 0.5 - 16.0;
                dx * dx + dy * dy <= 36.0
            })
            .count();
        assert_eq!(s.groundings[0].mask.count(), disk);
        let red = s.image.pixels().filter(|p| p.0 == [230, 30, 30]).count();
        assert_eq!(red, disk);
    }

    #[test]
    fn occlusion_follows_z_order() {
        let reg = CategoryRegistry::default();
        let front = obj("blue square", 14.0, 14.0, 6.0, 1);
        let back = obj("red circle", 18.0, 18.0, 6.0, 0);
        let both = render(&spec(vec![back.clone(), front.clone()]), &reg, 3).unwrap();
        let alone_front = render(&spec(vec![front]), &reg, 0).unwrap();
        let alone_back = render(&spec(vec![back]), &reg, 0).unwrap();
        let mask_of = |s: &GroundedSample, cat: &str| s.groundings.iter().find(|g| g.category == cat).unwrap().mask.clone();
        let f = mask_of(&both, "blue square");
        let b = mask_of(&both, "red circle");
        assert_eq!(f, mask_of(&alone_front, "blue square"));
        let full_back = mask_of(&alone_back, "red circle");
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(b.get(y, x), full_back.get(y, x) && !f.get(y, x));
            }
        }
        assert_eq!(f.intersection_count(&b), 0);
        assert!(f.union_count(&b) <= 32 * 32);
    }

    #[test]
    fn caption_template_and_positions() {
        let (c, p) = caption_for(&["red circle", "blue square", "green triangle"]);
        assert_eq!(c, "a red circle, a blue square and a green triangle");
        assert_eq!(p, vec![2, 5, 9]);
        let toks = tokenize(&c);
        assert_eq!(toks[2], "circle");
        assert_eq!(toks[5], "square");
        assert_eq!(toks[9], "triangle");
        let (c2, p2) = caption_for(&["red circle", "blue square"]);
        assert_eq!(c2, "a red circle and a blue square");
        assert_eq!(p2, vec![2, 6]);
    }

    #[test]
    fn rejects_bad_scenes() {
        let reg = CategoryRegistry::default();
        assert!(render(&spec(vec![]), &reg, 0).is_err());
        assert!(render(&spec(vec![obj("red circle", 2.0, 16.0, 6.0, 0)]), &reg, 0).is_err());
        assert!(render(
            &spec(vec![obj("red circle", 16.0, 16.0, 6.0, 0), obj("red circle", 8.0, 8.0, 4.0, 1)]),
            &reg,
            0
        )
        .is_err());
        assert!(render(&spec(vec![obj("teal hexagon", 16.0, 16.0, 6.0, 0)]), &reg, 0).is_err());
    }

    #[test]
    fn sampled_scenes_render() {
        let reg = CategoryRegistry::default();
        let sampler = SceneSampler::default();
        let mut rng = seeded_rng(11, "scenes");
        for i in 0..50 {
            let s = sampler.sample(&reg, &mut rng).unwrap();
            let r = render(&s, &reg, i).unwrap();
            let toks = tokenize(&r.caption);
            for g in &r.groundings {
                assert_eq!(toks[g.token_position], reg.get(&g.category).unwrap().noun());
            }
        }
    }
}
