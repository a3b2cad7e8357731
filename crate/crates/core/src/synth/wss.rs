//! Procedural wall shear stress.
//!
//! Each vertex gets a tangential shear `τ(t) = m·(b + cos(2πt/P))·e` where the
//! pocket factor `D = 1 − exp(−depth/depth_ref)` lowers the magnitude
//! `m = M₀·s·(1 − 0.8·D)` and the bias `b = 1 − 0.9·D`. With `b < 1` the sign
//! of `τ` flips for part of the cycle, so OSI grows with depth while TAWSS
//! shrinks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shape::{generate_mesh, pocket_depth, ShapeParams};
use super::SynthError;
use crate::geom::{self, Vec3};
use crate::hemo::{compute_indices, EcapField, WssSeries, DEFAULT_FLOOR};
use crate::mesh::{vertex_normals, TriMesh};

pub const MIN_TIMES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WssModel {
    pub n_times: usize,
    /// Cardiac period, s.
    pub period: f64,
    /// Shear magnitude away from lobes, Pa.
    pub base_magnitude: f64,
    /// Depth at which the pocket factor reaches `1 − 1/e`, mm.
    pub depth_ref: f64,
}

impl Default for WssModel {
    fn default() -> Self {
        Self {
            n_times: 32,
            period: 0.8,
            base_magnitude: 0.5,
            depth_ref: 1.5,
        }
    }
}

impl WssModel {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_times < MIN_TIMES {
            return Err(SynthError::InvalidParams(format!(
                "n_times {} below {MIN_TIMES}",
                self.n_times
            )));
        }
        if !(self.period > 0.0 && self.base_magnitude > 0.0 && self.depth_ref > 0.0) {
            return Err(SynthError::InvalidParams("wss model values must be positive".into()));
        }
        Ok(())
    }

    pub fn pocket_factor(&self, depth: f64) -> f64 {
        1.0 - (-depth.max(0.0) / self.depth_ref).exp()
    }
}

/// Unit tangent: the z axis projected onto the tangent plane, or the x axis
/// where z is (nearly) normal.
fn tangent(normal: Vec3) -> Vec3 {
    for axis in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]] {
        let t = geom::sub(axis, geom::scale(normal, geom::dot(axis, normal)));
        if let Some(t) = geom::normalized(t, 0.1) {
            return t;
        }
    }
    unreachable!("z and x cannot both be parallel to a unit normal")
}

pub fn generate_wss(mesh: &TriMesh, params: &ShapeParams, model: &WssModel) -> Result<WssSeries, SynthError> {
    params.validate()?;
    model.validate()?;
    let normals = vertex_normals(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x0a11_ce5e_ed00_0001);
    let per_vertex: Vec<(f64, f64, Vec3)> = mesh
        .vertices()
        .iter()
        .zip(&normals)
        .map(|(&v, &n)| {
            let d = model.pocket_factor(pocket_depth(params, v));
            let jitter = if params.noise > 0.0 {
                1.0 + params.noise * rng.gen_range(-1.0..=1.0)
            } else {
                1.0
            };
            let m = model.base_magnitude * params.magnitude_scale * (1.0 - 0.8 * d) * jitter;
            (m, 1.0 - 0.9 * d, tangent(n))
        })
        .collect();
    let n = model.n_times;
    let times: Vec<f64> = (0..n).map(|k| model.period * k as f64 / (n - 1) as f64).collect();
    let mut samples = Vec::with_capacity(n * per_vertex.len());
    for &t in &times {
        let c = (2.0 * PI * t / model.period).cos();
        samples.extend(per_vertex.iter().map(|&(m, b, e)| geom::scale(e, m * (b + c))));
    }
    Ok(WssSeries::new(times, mesh.n_vertices(), samples)?)
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub params: ShapeParams,
    pub mesh: TriMesh,
    pub wss: WssSeries,
    pub ecap: EcapField,
}

pub fn generate_sample(params: &ShapeParams, model: &WssModel) -> Result<SynthSample, SynthError> {
    let mesh = generate_mesh(params)?;
    let wss = generate_wss(&mesh, params, model)?;
    let ecap = compute_indices(&wss, DEFAULT_FLOOR).field;
    Ok(SynthSample {
        params: params.clone(),
        mesh,
        wss,
        ecap,
    })
}
