//! Parametric shapes: an icosphere mapped onto an ellipsoid with Gaussian
//! lobes and a parabolic bend.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geom::{self, Vec3};
use crate::mesh::TriMesh;

pub const MAX_LOBES: usize = 4;
pub const MAX_RESAMPLES: usize = 100;
const MAX_SUBDIVISION: usize = 6;

/// Unit icosphere after `level` rounds of 4-way subdivision. Vertex 0 sits
/// exactly at `(1, 0, 0)`; vertex order is deterministic.
pub fn icosphere(level: usize) -> TriMesh {
    let (vertices, faces) = icosphere_raw(level);
    TriMesh::new(vertices, faces).expect("icosphere is a valid closed mesh")
}

fn icosphere_raw(level: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    // Pole-aligned icosahedron: poles on ±x, two staggered rings of five.
    let h = 1.0 / 5f64.sqrt();
    let r = 2.0 * h;
    let mut v = vec![[1.0, 0.0, 0.0]];
    for k in 0..5 {
        let a = 2.0 * PI * k as f64 / 5.0;
        v.push([h, r * a.cos(), r * a.sin()]);
    }
    for k in 0..5 {
        let a = 2.0 * PI * k as f64 / 5.0 + PI / 5.0;
        v.push([-h, r * a.cos(), r * a.sin()]);
    }
    v.push([-1.0, 0.0, 0.0]);
    let mut faces = Vec::with_capacity(20);
    for k in 0..5 {
        let (u0, u1) = (1 + k, 1 + (k + 1) % 5);
        let (l0, l1) = (6 + k, 6 + (k + 1) % 5);
        faces.extend([[0, u0, u1], [u0, l0, u1], [u1, l0, l1], [l0, 11, l1]]);
    }
    orient_outward(&v, &mut faces);

    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vec3>| {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = geom::scale(geom::add(v[a], v[b]), 0.5);
                v.push(geom::scale(m, 1.0 / geom::norm(m)));
                v.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            next.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        faces = next;
    }
    (v, faces)
}

/// Flips faces whose winding points towards the origin (star-shaped input).
fn orient_outward(v: &[Vec3], faces: &mut [[usize; 3]]) {
    for f in faces {
        let n = geom::cross(geom::sub(v[f[1]], v[f[0]]), geom::sub(v[f[2]], v[f[0]]));
        let c = geom::add(geom::add(v[f[0]], v[f[1]]), v[f[2]]);
        if geom::dot(n, c) < 0.0 {
            f.swap(1, 2);
        }
    }
}

/// Radial Gaussian bump centred on `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lobe {
    /// Unit vector.
    pub direction: Vec3,
    /// Peak radial displacement, mm.
    pub amplitude: f64,
    /// Angular standard deviation, radians.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub seed: u64,
    /// Ellipsoid semi-axes along x, y, z (mm).
    pub semi_axes: [f64; 3],
    pub lobes: Vec<Lobe>,
    /// Parabolic centreline bend, radians at the tip.
    pub bend_angle: f64,
    pub subdivision: usize,
    /// Keep the icosphere vertex order. Otherwise vertices are shuffled by `seed`.
    pub template_mode: bool,
    /// Multiplies every shear vector.
    pub magnitude_scale: f64,
    /// Relative per-vertex magnitude jitter in `[0, 1)`; zero disables it.
    pub noise: f64,
}

impl ShapeParams {
    /// Plain ellipsoid with no lobes or bend.
    pub fn ellipsoid(semi_axes: [f64; 3], subdivision: usize) -> Self {
        Self {
            seed: 0,
            semi_axes,
            lobes: Vec::new(),
            bend_angle: 0.0,
            subdivision,
            template_mode: true,
            magnitude_scale: 1.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad(format!("semi-axes must be positive, got {:?}", self.semi_axes));
        }
        if self.lobes.len() > MAX_LOBES {
            return bad(format!("at most {MAX_LOBES} lobes, got {}", self.lobes.len()));
        }
        if self.subdivision > MAX_SUBDIVISION {
            return bad(format!("subdivision {} exceeds {MAX_SUBDIVISION}", self.subdivision));
        }
        if !(self.magnitude_scale.is_finite() && self.magnitude_scale > 0.0) {
            return bad("magnitude_scale must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(self.bend_angle.is_finite() && self.bend_angle.abs() <= PI / 4.0) {
            return bad(format!("bend angle {} outside [-π/4, π/4]", self.bend_angle));
        }
        let min_axis = self.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, l) in self.lobes.iter().enumerate() {
            if (geom::norm(l.direction) - 1.0).abs() > 1e-9 {
                return bad(format!("lobe {i} direction is not a unit vector"));
            }
            if !(l.width.is_finite() && l.width > 0.0) {
                return bad(format!("lobe {i} width must be positive"));
            }
            if !(l.amplitude >= 0.0 && l.amplitude < min_axis / 2.0) {
                return Err(SynthError::SelfIntersection(format!(
                    "lobe {i} amplitude {} not in [0, {})",
                    l.amplitude,
                    min_axis / 2.0
                )));
            }
        }
        Ok(())
    }

    fn unbend(&self, q: Vec3) -> Vec3 {
        let mut p = q;
        p[0] -= self.bend_offset(q[2]);
        p
    }

    fn bend_offset(&self, z: f64) -> f64 {
        let c = self.semi_axes[2];
        let t = (z / c).clamp(-1.0, 1.0);
        0.5 * self.bend_angle * c * t * t
    }
}

/// Summed lobe displacement (mm) in template direction `p` (unit).
pub fn lobe_displacement(params: &ShapeParams, p: Vec3) -> f64 {
    params
        .lobes
        .iter()
        .map(|l| {
            let angle = geom::norm(geom::cross(p, l.direction)).atan2(geom::dot(p, l.direction));
            l.amplitude * (-angle * angle / (2.0 * l.width * l.width)).exp()
        })
        .sum()
}

/// Lobe displacement under a generated vertex position, recovered by undoing
/// the bend and projecting radially onto the template sphere.
pub fn pocket_depth(params: &ShapeParams, position: Vec3) -> f64 {
    let q = params.unbend(position);
    match geom::normalized(q, 1e-12) {
        Some(p) => lobe_displacement(params, p),
        None => 0.0,
    }
}

fn ellipsoid_radius(axes: &[f64; 3], p: Vec3) -> f64 {
    let s: f64 = (0..3).map(|i| (p[i] / axes[i]).powi(2)).sum();
    1.0 / s.sqrt()
}

pub fn generate_mesh(params: &ShapeParams) -> Result<TriMesh, SynthError> {
    params.validate()?;
    let (template, faces) = icosphere_raw(params.subdivision);
    let mut vertices: Vec<Vec3> = template
        .iter()
        .map(|&p| {
            let r = ellipsoid_radius(&params.semi_axes, p) + lobe_displacement(params, p);
            let mut q = geom::scale(p, r);
            q[0] += params.bend_offset(q[2]);
            q
        })
        .collect();
    let mut faces = faces;
    if !params.template_mode {
        let perm = vertex_permutation(vertices.len(), params.seed);
        let mut shuffled = vec![[0.0; 3]; vertices.len()];
        for (old, &new) in perm.iter().enumerate() {
            shuffled[new] = vertices[old];
        }
        vertices = shuffled;
        for f in &mut faces {
            *f = f.map(|i| perm[i]);
        }
    }
    Ok(TriMesh::new(vertices, faces).map_err(crate::mesh::MeshError::from)?)
}

/// `perm[old] = new`.
fn vertex_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e3f_1a7e));
    perm
}

/// Closed interval `[lo, hi]` for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.1 > self.0 {
            rng.gen_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn scaled(&self, s: f64) -> Self {
        Range(self.0 * s, self.1 * s)
    }
}

/// Sampling ranges for [`ShapeParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeDistribution {
    pub semi_axis: Range,
    pub n_lobes: [usize; 2],
    pub amplitude: Range,
    pub width: Range,
    pub bend_angle: Range,
    pub subdivision: usize,
    pub template_mode: bool,
    pub magnitude_scale: f64,
    pub noise: f64,
}

impl Default for ShapeDistribution {
    /// Regime A: semi-axes 12–16 mm, 1–3 lobes of 1.5–3 mm, 642 vertices.
    fn default() -> Self {
        Self {
            semi_axis: Range(12.0, 16.0),
            n_lobes: [1, 3],
            amplitude: Range(1.5, 3.0),
            width: Range(0.35, 0.6),
            bend_angle: Range(-0.3, 0.3),
            subdivision: 3,
            template_mode: true,
            magnitude_scale: 1.0,
            noise: 0.0,
        }
    }
}

impl ShapeDistribution {
    /// Regime B: lobe amplitudes 1.5x those of `self`.
    pub fn amplified(&self, factor: f64) -> Self {
        Self {
            amplitude: self.amplitude.scaled(factor),
            ..self.clone()
        }
    }

    /// Draws parameters for `seed`, redrawing up to [`MAX_RESAMPLES`] times
    /// when a draw violates the injectivity bound.
    pub fn sample(&self, seed: u64) -> Result<ShapeParams, SynthError> {
        if self.n_lobes[0] > self.n_lobes[1] || self.n_lobes[1] > MAX_LOBES {
            return Err(SynthError::InvalidParams(format!("n_lobes range {:?}", self.n_lobes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_RESAMPLES {
            let semi_axes = [(); 3].map(|_| self.semi_axis.draw(&mut rng));
            let n_lobes = rng.gen_range(self.n_lobes[0]..=self.n_lobes[1]);
            let lobes = (0..n_lobes)
                .map(|_| {
                    let z: f64 = rng.gen_range(-1.0..=1.0);
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let rho = (1.0 - z * z).max(0.0).sqrt();
                    let direction = geom::normalized([rho * phi.cos(), rho * phi.sin(), z], 1e-12)
                        .unwrap_or([0.0, 0.0, 1.0]);
                    Lobe {
                        direction,
                        amplitude: self.amplitude.draw(&mut rng),
                        width: self.width.draw(&mut rng),
                    }
                })
                .collect();
            let params = ShapeParams {
                seed,
                semi_axes,
                lobes,
                bend_angle: self.bend_angle.draw(&mut rng),
                subdivision: self.subdivision,
                template_mode: self.template_mode,
                magnitude_scale: self.magnitude_scale,
                noise: self.noise,
            };
            match params.validate() {
                Ok(()) => return Ok(params),
                Err(SynthError::SelfIntersection(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(SynthError::Exhausted(MAX_RESAMPLES))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{vertex_normals, write_off};

    #[test]
    fn icosphere_counts_and_radius() {
        for level in 0..4 {
            let m = icosphere(level);
            let f = 20 * 4usize.pow(level as u32);
            assert_eq!(m.n_faces(), f);
            assert_eq!(m.n_vertices(), f / 2 + 2);
            for v in m.vertices() {
                assert!((geom::norm(*v) - 1.0).abs() < 1e-12);
            }
            assert_eq!(m.vertices()[0], [1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn icosphere_normals_point_outward() {
        let m = icosphere(2);
        for (n, v) in vertex_normals(&m).unwrap().iter().zip(m.vertices()) {
            assert!(geom::dot(*n, *v) > 0.99);
        }
    }

    #[test]
    fn plain_sphere_is_identity_deformation() {
        let m = generate_mesh(&ShapeParams::ellipsoid([7.5; 3], 2)).unwrap();
        for v in m.vertices() {
            assert!((geom::norm(*v) - 7.5).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_mesh() {
        let d = ShapeDistribution::default();
        for seed in [0, 1, 99] {
            let a = generate_mesh(&d.sample(seed).unwrap()).unwrap();
            let b = generate_mesh(&d.sample(seed).unwrap()).unwrap();
            assert_eq!(write_off(&a), write_off(&b));
        }
    }

    #[test]
    fn template_mode_preserves_order_across_seeds() {
        let d = ShapeDistribution {
            subdivision: 2,
            ..Default::default()
        };
        let a = generate_mesh(&d.sample(3).unwrap()).unwrap();
        let b = generate_mesh(&d.sample(4).unwrap()).unwrap();
        assert_eq!(a.faces(), b.faces());
        assert_eq!(a.faces(), icosphere(2).faces());
    }

    #[test]
    fn shuffled_mode_permutes_vertices() {
        let d = ShapeDistribution {
            subdivision: 1,
            template_mode: false,
            ..Default::default()
        };
        let p = d.sample(5).unwrap();
        let shuffled = generate_mesh(&p).unwrap();
        let ordered = generate_mesh(&ShapeParams {
            template_mode: true,
            ..p.clone()
        })
        .unwrap();
        assert_ne!(shuffled.faces(), ordered.faces());
        let mut a: Vec<_> = shuffled.vertices().iter().map(|v| v.map(f64::to_bits)).collect();
        let mut b: Vec<_> = ordered.vertices().iter().map(|v| v.map(f64::to_bits)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_lobes_are_rejected() {
        let mut p = ShapeParams::ellipsoid([10.0, 12.0, 14.0], 1);
        p.lobes.push(Lobe {
            direction: [0.0, 0.0, 1.0],
            amplitude: 5.0,
            width: 0.4,
        });
        assert!(matches!(p.validate(), Err(SynthError::SelfIntersection(_))));
        let d = ShapeDistribution {
            amplitude: Range(9.0, 10.0),
            ..Default::default()
        };
        assert!(matches!(d.sample(0), Err(SynthError::Exhausted(MAX_RESAMPLES))));
    }

    #[test]
    fn pocket_depth_recovers_displacement() {
        let p = ShapeDistribution::default().sample(11).unwrap();
        let (template, _) = icosphere_raw(p.subdivision);
        let m = generate_mesh(&p).unwrap();
        for (t, v) in template.iter().zip(m.vertices()) {
            assert!((pocket_depth(&p, *v) - lobe_displacement(&p, *t)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_shapes_validate() {
        let d = ShapeDistribution {
            subdivision: 2,
            n_lobes: [0, 4],
            ..Default::default()
        };
        for seed in 0..40 {
            let p = d.sample(seed).unwrap();
            let m = generate_mesh(&p).unwrap();
            crate::mesh::VertexAttributes::compute(&m).unwrap();
        }
    }
}
