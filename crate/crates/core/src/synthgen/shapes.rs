use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributeSpec, Family};
use crate::geometry::{Point, PointCloud};
use crate::{Error, Result};

/// Which primitive group a sampled point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Top,
    Leg,
    Back,
    Body,
    Wing,
    Tail,
}

#[derive(Clone, Debug)]
pub struct LabeledShape {
    pub family: Family,
    pub cloud: PointCloud,
    pub parts: Vec<Part>,
}

const TOP_THICKNESS: f64 = 0.06;
const LEG_RADIUS: f64 = 0.03;
const LEG_INSET: f64 = 0.05;
const SEAT_DEPTH: f64 = 0.5;
const BACK_THICKNESS: f64 = 0.05;
const FUSELAGE_HALF: f64 = 0.8;
const FUSELAGE_RADIUS: f64 = 0.09;
const WING_CHORD: f64 = 0.3;
const WING_THICKNESS: f64 = 0.02;
const TAIL_CHORD: f64 = 0.15;

#[derive(Clone, Debug)]
enum Primitive {
    /// Axis-aligned box surface.
    Box { lo: Point, hi: Point },
    /// Vertical tube hanging down from `top`, its axis bowed along +x so the
    /// foot sits `bend` away from the top.
    Tube { top: Point, length: f64, bend: f64, radius: f64 },
    /// Cylinder along x.
    Fuselage { center: Point, half: f64, radius: f64 },
    /// Flat plate from `root` out along `side * z`, swept by `sweep` in x at the tip.
    Wing { root: Point, span: f64, side: f64, sweep: f64, chord: f64, thickness: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { lo, hi } => {
                let (a, b, c) = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
                2.0 * (a * b + b * c + c * a)
            }
            Primitive::Tube { length, bend, radius, .. } => TAU * radius * length.hypot(bend),
            Primitive::Fuselage { half, radius, .. } => TAU * radius * 2.0 * half,
            Primitive::Wing { span, sweep, chord, .. } => 2.0 * chord * span.hypot(sweep),
        }
    }

    fn bounds(&self) -> (Point, Point) {
        match *self {
            Primitive::Box { lo, hi } => (lo, hi),
            Primitive::Tube { top, length, bend, radius } => (
                [top[0] + bend.min(0.0) - radius, top[1] - length, top[2] - radius],
                [top[0] + bend.max(0.0) + radius, top[1], top[2] + radius],
            ),
            Primitive::Fuselage { center, half, radius } => (
                [center[0] - half, center[1] - radius, center[2] - radius],
                [center[0] + half, center[1] + radius, center[2] + radius],
            ),
            Primitive::Wing { root, span, side, sweep, chord, thickness } => {
                let z_end = root[2] + side * span;
                (
                    [root[0] + sweep.min(0.0) - chord / 2.0, root[1] - thickness / 2.0, root[2].min(z_end)],
                    [root[0] + sweep.max(0.0) + chord / 2.0, root[1] + thickness / 2.0, root[2].max(z_end)],
                )
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Primitive::Box { lo, hi } => {
                let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                // Face pairs normal to x, y, z.
                let areas = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
                let axis = pick_weighted(rng, &areas);
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if rng.random_bool(0.5) { hi[a] } else { lo[a] }
                    } else {
                        lo[a] + ext[a] * rng.random::<f64>()
                    };
                }
                p
            }
            Primitive::Tube { top, length, bend, radius } => {
                let t: f64 = rng.random();
                let theta = TAU * rng.random::<f64>();
                [
                    top[0] + bend * t * t + radius * theta.cos(),
                    top[1] - length * t,
                    top[2] + radius * theta.sin(),
                ]
            }
            Primitive::Fuselage { center, half, radius } => {
                let s = rng.random_range(-half..=half);
                let theta = TAU * rng.random::<f64>();
                [center[0] + s, center[1] + radius * theta.cos(), center[2] + radius * theta.sin()]
            }
            Primitive::Wing { root, span, side, sweep, chord, thickness } => {
                let t: f64 = rng.random();
                let c = rng.random_range(-0.5..=0.5) * chord;
                let face = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
                [root[0] + sweep * t * t + c, root[1] + face * thickness, root[2] + side * span * t]
            }
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn legs(at_height: f64, half_x: f64, half_z: f64, length: f64, bend: f64) -> Vec<(Part, Primitive)> {
    let mut out = Vec::with_capacity(4);
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            out.push((
                Part::Leg,
                Primitive::Tube {
                    top: [sx * (half_x - LEG_INSET), at_height, sz * (half_z - LEG_INSET)],
                    length,
                    bend,
                    radius: LEG_RADIUS,
                },
            ));
        }
    }
    out
}

fn primitives(spec: &AttributeSpec) -> Vec<(Part, Primitive)> {
    let leg = spec.factor("leg_length");
    // Bends are expressed per unit leg length.
    let bend = spec.factor("leg_bend") * leg;
    let width = spec.factor("top_width");
    match spec.family {
        Family::Table => {
            let depth = spec.factor("top_depth");
            let mut parts = vec![(
                Part::Top,
                Primitive::Box {
                    lo: [-width / 2.0, leg, -depth / 2.0],
                    hi: [width / 2.0, leg + TOP_THICKNESS, depth / 2.0],
                },
            )];
            parts.extend(legs(leg, width / 2.0, depth / 2.0, leg, bend));
            parts
        }
        Family::Chair => {
            let back = spec.factor("back_height");
            let seat_top = leg + TOP_THICKNESS;
            let mut parts = vec![
                (
                    Part::Top,
                    Primitive::Box {
                        lo: [-width / 2.0, leg, -SEAT_DEPTH / 2.0],
                        hi: [width / 2.0, seat_top, SEAT_DEPTH / 2.0],
                    },
                ),
                (
                    Part::Back,
                    Primitive::Box {
                        lo: [-width / 2.0, seat_top, -SEAT_DEPTH / 2.0],
                        hi: [width / 2.0, seat_top + back, -SEAT_DEPTH / 2.0 + BACK_THICKNESS],
                    },
                ),
            ];
            parts.extend(legs(leg, width / 2.0, SEAT_DEPTH / 2.0, leg, bend));
            parts
        }
        Family::Plane => {
            let tail = spec.factor("tail_height");
            let tail_x = -FUSELAGE_HALF + TAIL_CHORD;
            let mut parts = vec![(
                Part::Body,
                Primitive::Fuselage {
                    center: [0.0; 3],
                    half: FUSELAGE_HALF,
                    radius: FUSELAGE_RADIUS,
                },
            )];
            for side in [-1.0, 1.0] {
                parts.push((
                    Part::Wing,
                    Primitive::Wing {
                        root: [0.1, 0.0, 0.0],
                        span: leg,
                        side,
                        sweep: bend,
                        chord: WING_CHORD,
                        thickness: WING_THICKNESS,
                    },
                ));
            }
            parts.push((
                Part::Tail,
                Primitive::Box {
                    lo: [tail_x - TAIL_CHORD / 2.0, -WING_THICKNESS / 2.0, -width / 2.0],
                    hi: [tail_x + TAIL_CHORD / 2.0, WING_THICKNESS / 2.0, width / 2.0],
                },
            ));
            parts.push((
                Part::Tail,
                Primitive::Box {
                    lo: [tail_x - TAIL_CHORD / 2.0, FUSELAGE_RADIUS * 0.5, -WING_THICKNESS / 2.0],
                    hi: [tail_x + TAIL_CHORD / 2.0, FUSELAGE_RADIUS * 0.5 + tail, WING_THICKNESS / 2.0],
                },
            ));
            parts
        }
    }
}

/// Samples `n_points` uniformly by area over the family's primitives and
/// translates the analytic bounding box to the origin. Every valid spec
/// fits inside `[-1, 1]^3`.
pub fn generate_labeled(spec: &AttributeSpec, n_points: usize, seed: u64) -> Result<LabeledShape> {
    spec.validate()?;
    if n_points < 64 {
        return Err(Error::invalid(format!("shape needs at least 64 points, got {n_points}")));
    }
    let prims = primitives(spec);
    let areas: Vec<f64> = prims.iter().map(|(_, p)| p.area()).collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, p) in &prims {
        let (a, b) = p.bounds();
        for k in 0..3 {
            lo[k] = lo[k].min(a[k]);
            hi[k] = hi[k].max(b[k]);
        }
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut parts = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let i = pick_weighted(&mut rng, &areas);
        let p = prims[i].1.sample(&mut rng);
        points.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        parts.push(prims[i].0);
    }
    Ok(LabeledShape {
        family: spec.family,
        cloud: PointCloud::new(points)?,
        parts,
    })
}

pub fn generate_shape(spec: &AttributeSpec, n_points: usize, seed: u64) -> Result<PointCloud> {
    generate_labeled(spec, n_points, seed).map(|s| s.cloud)
}

/// Extent of the leg-like parts along their own axis: the vertical extent
/// of the legs for tables and chairs, the tip-to-tip span for planes.
pub fn leg_extent(shape: &LabeledShape) -> f64 {
    let (part, axis) = match shape.family {
        Family::Table | Family::Chair => (Part::Leg, 1),
        Family::Plane => (Part::Wing, 2),
    };
    let (lo, hi) = shape
        .cloud
        .points()
        .iter()
        .zip(&shape.parts)
        .filter(|(_, p)| **p == part)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (pt, _)| {
            (lo.min(pt[axis]), hi.max(pt[axis]))
        });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_l1;

    fn spec(family: Family, overrides: &[(&str, f64)]) -> AttributeSpec {
        let mut s = AttributeSpec::midpoint(family);
        for &(k, v) in overrides {
            s = s.with(k, v).unwrap();
        }
        s
    }

    #[test]
    fn halving_leg_length_halves_leg_extent() {
        let long = generate_labeled(&spec(Family::Table, &[("leg_length", 1.0), ("leg_bend", 0.0)]), 4096, 5).unwrap();
        let short = generate_labeled(&spec(Family::Table, &[("leg_length", 0.5), ("leg_bend", 0.0)]), 4096, 5).unwrap();
        let ratio = leg_extent(&short) / leg_extent(&long);
        assert!((ratio - 0.5).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn leg_extent_is_monotone_in_leg_length() {
        for family in Family::ALL {
            let extents: Vec<f64> = [0.3, 0.45, 0.6, 0.8, 1.0]
                .iter()
                .map(|&l| leg_extent(&generate_labeled(&spec(family, &[("leg_length", l)]), 2048, 3).unwrap()))
                .collect();
            assert!(extents.windows(2).all(|w| w[1] > w[0]), "{family}: {extents:?}");
        }
    }

    fn legs_only(shape: &LabeledShape) -> Vec<Point> {
        shape
            .cloud
            .points()
            .iter()
            .zip(&shape.parts)
            .filter(|(_, p)| **p == Part::Leg)
            .map(|(pt, _)| *pt)
            .collect()
    }

    #[test]
    fn straight_legs_are_mirror_symmetric() {
        let straight = generate_labeled(&spec(Family::Table, &[("leg_bend", 0.0)]), 8192, 1).unwrap();
        let bent = generate_labeled(&spec(Family::Table, &[("leg_bend", 0.4)]), 8192, 1).unwrap();
        let mirror_gap = |s: &LabeledShape| {
            let legs = legs_only(s);
            let mirrored: Vec<Point> = legs.iter().map(|p| [-p[0], p[1], p[2]]).collect();
            chamfer_l1(&legs, &mirrored).unwrap()
        };
        let (a, b) = (mirror_gap(&straight), mirror_gap(&bent));
        assert!(a < 0.03, "straight legs mirror gap {a}");
        assert!(b > 3.0 * a, "bent {b} vs straight {a}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = AttributeSpec::midpoint(Family::Chair);
        let a = generate_shape(&s, 500, 9).unwrap();
        let b = generate_shape(&s, 500, 9).unwrap();
        assert_eq!(a.to_flat_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn extreme_specs_fit_the_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for family in Family::ALL {
            for corner in 0..16u32 {
                let mut s = AttributeSpec::midpoint(family);
                for (i, &(name, lo, hi)) in family.factor_ranges().iter().enumerate() {
                    s = s.with(name, if corner >> i & 1 == 1 { hi } else { lo }).unwrap();
                }
                let cloud = generate_shape(&s, 2000, rng.random()).unwrap();
                let (lo, hi) = cloud.bounds();
                assert!(lo.iter().chain(hi.iter()).all(|v| v.abs() <= 1.0), "{family} {lo:?} {hi:?}");
            }
        }
    }

    #[test]
    fn rejects_invalid_requests() {
        let s = AttributeSpec::midpoint(Family::Plane);
        assert!(generate_shape(&s, 10, 0).is_err());
        let mut bad = s.clone();
        bad.factors.insert("leg_length".into(), 2.0);
        assert!(matches!(generate_shape(&bad, 100, 0), Err(Error::InvalidArgument(_))));
    }
}
