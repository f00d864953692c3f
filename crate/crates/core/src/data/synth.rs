//! Procedural DEM scenes with exact building and road ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::raster::{DemTile, LabelMask, IGNORE};
use crate::error::{Error, Result};
use crate::rng;

/// Inclusive `[lo, hi]` range.
pub type Span<T> = (T, T);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub size: usize,
    pub base_elevation: f64,
    /// Peak-to-peak amplitude of the rolling terrain, metres.
    pub roughness: f64,
    /// Spacing of the coarse terrain control grid, pixels.
    pub terrain_cell: usize,
    pub building_count: Span<usize>,
    pub building_height: Span<f64>,
    pub building_side: Span<usize>,
    pub road_count: Span<usize>,
    pub road_width: Span<usize>,
    pub road_depth: f64,
}

impl SceneParams {
    /// Defaults sized for `size`-pixel tiles.
    pub fn for_size(size: usize, seed: u64) -> Self {
        let side_hi = (size / 4).max(3);
        SceneParams {
            seed,
            size,
            base_elevation: 100.0,
            roughness: 4.0,
            terrain_cell: (size / 4).max(2),
            building_count: (1, 4),
            building_height: (4.0, 15.0),
            building_side: ((side_hi / 2).max(2), side_hi),
            road_count: (0, 2),
            road_width: (2, 3),
            road_depth: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scene parameter {what} invalid: {self:?}")));
        if self.size < 4 || self.terrain_cell == 0 {
            return bad("size");
        }
        if !(self.roughness >= 0.0 && self.road_depth >= 0.0 && self.base_elevation.is_finite()) {
            return bad("roughness/road_depth");
        }
        if self.building_count.0 > self.building_count.1 || self.road_count.0 > self.road_count.1 {
            return bad("count range");
        }
        let (h0, h1) = self.building_height;
        if !(h0 > 0.0 && h0 <= h1) {
            return bad("building_height");
        }
        let (s0, s1) = self.building_side;
        if s0 == 0 || s0 > s1 || s1 >= self.size {
            return bad("building_side");
        }
        let (w0, w1) = self.road_width;
        if w0 == 0 || w0 > w1 || w1 >= self.size {
            return bad("road_width");
        }
        Ok(())
    }
}

/// Raw elevations plus building and road masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dem: DemTile,
    pub buildings: LabelMask,
    pub roads: LabelMask,
}

fn terrain(p: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = p.size;
    let cells = n.div_ceil(p.terrain_cell) + 1;
    let coarse: Vec<f64> = (0..cells * cells)
        .map(|_| p.roughness * (rng.gen::<f64>() - 0.5))
        .collect();
    let step = p.terrain_cell as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        let (fr, ir) = ((r as f64 / step).fract(), r / p.terrain_cell);
        for c in 0..n {
            let (fc, ic) = ((c as f64 / step).fract(), c / p.terrain_cell);
            let at = |i: usize, j: usize| coarse[i * cells + j];
            let top = at(ir, ic) * (1.0 - fc) + at(ir, ic + 1) * fc;
            let bottom = at(ir + 1, ic) * (1.0 - fc) + at(ir + 1, ic + 1) * fc;
            out.push(p.base_elevation + top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Axis-aligned corridor `[r0, r1) × [c0, c1)` with a flat cross-section
/// taken from the terrain on its centre line.
struct Corridor {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    horizontal: bool,
}

/// One straight or L-shaped road running from one edge to another.
fn road(p: &SceneParams, rng: &mut ChaCha8Rng) -> Vec<Corridor> {
    let n = p.size;
    let w = rng.gen_range(p.road_width.0..=p.road_width.1);
    let horizontal = rng.gen_bool(0.5);
    let at = rng.gen_range(0..=n - w);
    let bend = rng.gen_bool(0.5);
    let seg = |horizontal: bool, at: usize, from: usize, to: usize| {
        if horizontal {
            Corridor { r0: at, r1: at + w, c0: from, c1: to, horizontal }
        } else {
            Corridor { r0: from, r1: to, c0: at, c1: at + w, horizontal }
        }
    };
    if !bend {
        return vec![seg(horizontal, at, 0, n)];
    }
    let turn = rng.gen_range(0..=n - w);
    let to_far = rng.gen_bool(0.5);
    let (first, second) = if to_far {
        (seg(horizontal, at, turn, n), seg(!horizontal, turn, 0, at + w))
    } else {
        (seg(horizontal, at, 0, turn + w), seg(!horizontal, turn, at, n))
    };
    vec![first, second]
}

/// Generates one scene. Roads are laid first; buildings are placed at
/// random without touching roads or each other, with at most 200 attempts
/// per building.
pub fn synth_scene(p: &SceneParams) -> Result<Scene> {
    p.validate()?;
    let n = p.size;
    let mut rng = rng::stream(p.seed, &[0x5343_454e]);
    let ground = terrain(p, &mut rng);
    let mut elev = ground.clone();
    let mut roads = vec![0u8; n * n];
    let n_roads = rng.gen_range(p.road_count.0..=p.road_count.1);
    for _ in 0..n_roads {
        for c in road(p, &mut rng) {
            for r in c.r0..c.r1 {
                for col in c.c0..c.c1 {
                    let centre = if c.horizontal {
                        ((c.r0 + c.r1) / 2) * n + col
                    } else {
                        r * n + (c.c0 + c.c1) / 2
                    };
                    elev[r * n + col] = ground[centre] - p.road_depth;
                    roads[r * n + col] = 1;
                }
            }
        }
    }
    let mut buildings = vec![0u8; n * n];
    let n_buildings = rng.gen_range(p.building_count.0..=p.building_count.1);
    for b in 0..n_buildings {
        let mut placed = false;
        for _ in 0..200 {
            let h = rng.gen_range(p.building_side.0..=p.building_side.1);
            let w = rng.gen_range(p.building_side.0..=p.building_side.1);
            let r0 = rng.gen_range(0..=n - h);
            let c0 = rng.gen_range(0..=n - w);
            let height = rng.gen_range(p.building_height.0..=p.building_height.1);
            let (gr0, gr1) = (r0.saturating_sub(1), (r0 + h + 1).min(n));
            let (gc0, gc1) = (c0.saturating_sub(1), (c0 + w + 1).min(n));
            let clear = (gr0..gr1).all(|r| (gc0..gc1).all(|c| roads[r * n + c] == 0 && buildings[r * n + c] == 0));
            if !clear {
                continue;
            }
            let top = (r0..r0 + h)
                .flat_map(|r| (c0..c0 + w).map(move |c| r * n + c))
                .map(|i| ground[i])
                .fold(f64::NEG_INFINITY, f64::max)
                + height;
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    elev[r * n + c] = top;
                    buildings[r * n + c] = 1;
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place building {} of {n_buildings} in a {n}x{n} scene (seed {})",
                b + 1,
                p.seed
            )));
        }
    }
    debug_assert!(!buildings.contains(&IGNORE));
    Ok(Scene {
        dem: DemTile::new(n, elev.into_iter().map(|v| v as f32).collect())?,
        buildings: LabelMask::binary(n, n, buildings, "building")?,
        roads: LabelMask::binary(n, n, roads, "road")?,
    })
}

/// 4-connected components of non-background, non-ignore pixels, each as a
/// list of pixel indices in scan order.
pub fn components(mask: &LabelMask) -> Vec<Vec<usize>> {
    let (rows, cols) = (mask.rows, mask.cols);
    let fg = |i: usize| mask.classes[i] != 0 && mask.classes[i] != IGNORE;
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || !fg(start) {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut push = |j: usize| {
                if !seen[j] && fg(j) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - cols);
            }
            if r + 1 < rows {
                push(i + cols);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < cols {
                push(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Number of components removed from `n` at `drop_fraction`: `f·n` with
/// the fractional part rounded up with matching probability, drawn from `u`.
pub fn drop_count(n: usize, drop_fraction: f64, u: f64) -> usize {
    ((drop_fraction * n as f64 + u).floor() as usize).min(n)
}

/// Relabels a seeded random subset of foreground components to background,
/// simulating missing annotations.
pub fn corrupt_labels(mask: &LabelMask, drop_fraction: f64, rng: &mut ChaCha8Rng) -> Result<LabelMask> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop fraction {drop_fraction} outside [0, 1]")));
    }
    let mut comps = components(mask);
    let k = drop_count(comps.len(), drop_fraction, rng.gen::<f64>());
    let mut out = mask.clone();
    for i in 0..k {
        let j = rng.gen_range(i..comps.len());
        comps.swap(i, j);
        for &px in &comps[i] {
            out.classes[px] = 0;
        }
    }
    Ok(out)
}
