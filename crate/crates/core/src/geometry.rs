//! Planar forward kinematics, exact capsule/circle clearance, and a signed
//! configuration distance lower bound.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::arm::ArmParams;
use crate::error::{Error, Result};
use crate::linalg::serde_vector;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn diagonal(&self) -> f64 {
        ((self.max[0] - self.min[0]).powi(2) + (self.max[1] - self.min[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub obstacles: Vec<Circle>,
    pub workspace_bounds: Bounds,
}

impl Scene {
    pub fn empty(half_extent: f64) -> Self {
        Self {
            obstacles: Vec::new(),
            workspace_bounds: Bounds { min: [-half_extent; 2], max: [half_extent; 2] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.obstacles {
            if !(o.radius > 0.0) || !o.center.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument("obstacle radius must be positive and center finite".into()));
            }
        }
        Ok(())
    }
}

/// Links modeled as capsules around the segments between consecutive joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub link_lengths: Vec<f64>,
    pub link_radii: Vec<f64>,
    pub base_position: Point,
}

impl ArmGeometry {
    pub fn from_params(params: &ArmParams, link_radius: f64) -> Self {
        Self {
            link_lengths: params.link_lengths.clone(),
            link_radii: vec![link_radius; params.dof()],
            base_position: [0.0, 0.0],
        }
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.len() != self.link_radii.len() || self.link_lengths.is_empty() {
            return Err(Error::InvalidArgument("one radius per link required".into()));
        }
        if self.link_lengths.iter().chain(&self.link_radii).any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("link lengths and radii must be positive".into()));
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Joint positions, base first and tip last.
    pub fn joint_positions(&self, q: &DVector<f64>) -> Vec<Point> {
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let mut p = self.base_position;
        let mut phi = 0.0;
        pts.push(p);
        for (l, qi) in self.link_lengths.iter().zip(q.iter()) {
            phi += qi;
            p = [p[0] + l * phi.cos(), p[1] + l * phi.sin()];
            pts.push(p);
        }
        pts
    }

    /// Lipschitz constant of every body point w.r.t. `|q|`.
    ///
    /// A point beyond joint `j` moves with speed at most `R_j |dq_j|`, where
    /// `R_j` is the total link length from joint `j` outward. Each Jacobian
    /// column therefore has norm at most `R_j`, so `|J|_2 <= |J|_F <= |R|_2`.
    pub fn lipschitz(&self) -> f64 {
        let n = self.dof();
        (0..n)
            .map(|j| self.link_lengths[j..].iter().sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn segment_point_distance(a: Point, b: Point, p: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Smallest surface distance between link capsules and obstacle circles [m];
/// negative means penetration. The workspace diagonal stands in for "no obstacles".
pub fn workspace_clearance(geom: &ArmGeometry, scene: &Scene, q: &DVector<f64>) -> f64 {
    let mut best = scene.workspace_bounds.diagonal();
    let mut a = geom.base_position;
    let mut phi = 0.0;
    for ((l, r_link), qi) in geom.link_lengths.iter().zip(&geom.link_radii).zip(q.iter()) {
        phi += qi;
        let (s, c) = phi.sin_cos();
        let b = [a[0] + l * c, a[1] + l * s];
        for o in &scene.obstacles {
            best = best.min(segment_point_distance(a, b, o.center) - r_link - o.radius);
        }
        a = b;
    }
    best
}

/// Same answer as `workspace_clearance(..) < 0.0`, stopping at the first penetrating pair.
pub fn in_collision(geom: &ArmGeometry, scene: &Scene, q: &DVector<f64>) -> bool {
    let mut a = geom.base_position;
    let mut phi = 0.0;
    for ((l, r_link), qi) in geom.link_lengths.iter().zip(&geom.link_radii).zip(q.iter()) {
        phi += qi;
        let (s, c) = phi.sin_cos();
        let b = [a[0] + l * c, a[1] + l * s];
        if scene.obstacles.iter().any(|o| segment_point_distance(a, b, o.center) - r_link - o.radius < 0.0) {
            return true;
        }
        a = b;
    }
    false
}

/// Lower bound of the configuration-space distance to collision [rad], same sign as the clearance.
pub fn scdf(geom: &ArmGeometry, scene: &Scene, q: &DVector<f64>) -> f64 {
    workspace_clearance(geom, scene, q) / geom.lipschitz()
}

/// Euclidean ball in configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    #[serde(with = "serde_vector")]
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn margin(&self, q: &DVector<f64>) -> f64 {
        self.radius - (q - &self.center).norm()
    }

    pub fn contains(&self, q: &DVector<f64>) -> bool {
        self.margin(q) >= 0.0
    }
}

pub fn make_ball(geom: &ArmGeometry, scene: &Scene, c: &DVector<f64>) -> Result<Ball> {
    let r = scdf(geom, scene, c);
    if !(r > 0.0) {
        return Err(Error::CenterInCollision(r));
    }
    Ok(Ball { center: c.clone(), radius: r })
}
