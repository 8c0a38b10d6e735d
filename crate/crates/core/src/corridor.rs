//! Collision-free corridors: RRT-Connect with clearance, discretization into
//! configuration-space balls, ball assignment and virtual-goal selection.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scdf, ArmGeometry, Ball, Scene};
use crate::linalg::serde_vectors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub step: f64,
    pub node_budget: usize,
    pub shortcut_iterations: usize,
    /// Sampling box is `|q_i| <= q_limit`.
    pub q_limit: f64,
    pub seed: u64,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            step: 0.05,
            node_budget: 50_000,
            shortcut_iterations: 200,
            q_limit: std::f64::consts::PI - 0.1,
            seed: 0,
        }
    }
}

const MIN_ADVANCE: f64 = 1e-4;

/// Whether every point of the segment has `scdf >= clearance`.
///
/// `scdf` is 1-Lipschitz, so from a point with value `s` the next
/// `s - clearance` of the segment is certified without evaluation. Points
/// closer than `MIN_ADVANCE` to the clearance level reject the segment.
pub fn segment_clear(geom: &ArmGeometry, scene: &Scene, a: &DVector<f64>, b: &DVector<f64>, clearance: f64) -> bool {
    let len = (b - a).norm();
    let mut t = 0.0;
    loop {
        let p = if len > 0.0 { a + (b - a) * (t / len) } else { a.clone() };
        let slack = scdf(geom, scene, &p) - clearance;
        if slack < 0.0 {
            return false;
        }
        if t >= len {
            return true;
        }
        if slack < MIN_ADVANCE {
            return false;
        }
        t = (t + slack).min(len);
    }
}

struct Tree {
    nodes: Vec<DVector<f64>>,
    parents: Vec<usize>,
    /// Node coordinates back to back, for a cache-friendly nearest scan.
    flat: Vec<f64>,
}

impl Tree {
    fn new(root: DVector<f64>) -> Self {
        let mut t = Self { nodes: Vec::new(), parents: Vec::new(), flat: Vec::new() };
        t.push(root, usize::MAX);
        t
    }

    fn push(&mut self, q: DVector<f64>, parent: usize) -> usize {
        self.flat.extend(q.iter());
        self.nodes.push(q);
        self.parents.push(parent);
        self.nodes.len() - 1
    }

    /// Nearest node, lowest index on ties.
    fn nearest(&self, q: &DVector<f64>) -> usize {
        let q = q.as_slice();
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.flat.chunks_exact(q.len()).enumerate() {
            let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn path_to_root(&self, mut i: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i].clone());
            i = self.parents[i];
        }
        out
    }
}

#[derive(PartialEq)]
enum Extend {
    Trapped,
    Advanced(usize),
    Reached(usize),
}

struct Planner<'a> {
    geom: &'a ArmGeometry,
    scene: &'a Scene,
    clearance: f64,
    step: f64,
}

impl Planner<'_> {
    fn extend(&self, tree: &mut Tree, target: &DVector<f64>) -> Extend {
        let near = tree.nearest(target);
        let from = tree.nodes[near].clone();
        let gap = (target - &from).norm();
        let (q_new, reached) = if gap <= self.step {
            (target.clone(), true)
        } else {
            (&from + (target - &from) * (self.step / gap), false)
        };
        if !segment_clear(self.geom, self.scene, &from, &q_new, self.clearance) {
            return Extend::Trapped;
        }
        let idx = tree.push(q_new, near);
        if reached {
            Extend::Reached(idx)
        } else {
            Extend::Advanced(idx)
        }
    }

    fn connect(&self, tree: &mut Tree, target: &DVector<f64>) -> Extend {
        loop {
            match self.extend(tree, target) {
                Extend::Advanced(_) => continue,
                other => return other,
            }
        }
    }
}

/// Bidirectional RRT-Connect followed by random shortcutting; every returned
/// segment keeps `scdf >= clearance` everywhere.
pub fn plan_path(
    geom: &ArmGeometry,
    scene: &Scene,
    q_start: &DVector<f64>,
    q_goal: &DVector<f64>,
    clearance: f64,
    opts: &PlannerOptions,
) -> Result<Vec<DVector<f64>>> {
    let n = geom.dof();
    if q_start.len() != n || q_goal.len() != n {
        return Err(Error::InvalidArgument("configuration dimension does not match the arm".into()));
    }
    for (name, q) in [("start", q_start), ("goal", q_goal)] {
        let s = scdf(geom, scene, q);
        if !(s > clearance) {
            return Err(Error::InvalidArgument(format!("{name} has scdf {s:.4} below clearance {clearance}")));
        }
    }
    if segment_clear(geom, scene, q_start, q_goal, clearance) {
        return Ok(vec![q_start.clone(), q_goal.clone()]);
    }
    let planner = Planner { geom, scene, clearance, step: opts.step };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trees = [Tree::new(q_start.clone()), Tree::new(q_goal.clone())];
    let mut a = 0;
    let mut iterations = 0;
    let raw = loop {
        // trapped extensions add no nodes, so the budget counts samples
        iterations += 1;
        if iterations > opts.node_budget {
            return Err(Error::PlanningFailed(format!("budget of {} samples exhausted", opts.node_budget)));
        }
        let sample = DVector::from_fn(n, |_, _| rng.random_range(-opts.q_limit..=opts.q_limit));
        let (ta, tb) = if a == 0 {
            let (x, y) = trees.split_at_mut(1);
            (&mut x[0], &mut y[0])
        } else {
            let (x, y) = trees.split_at_mut(1);
            (&mut y[0], &mut x[0])
        };
        let new = match planner.extend(ta, &sample) {
            Extend::Trapped => None,
            Extend::Advanced(i) | Extend::Reached(i) => Some(i),
        };
        if let Some(i) = new {
            let q_new = ta.nodes[i].clone();
            if let Extend::Reached(j) = planner.connect(tb, &q_new) {
                let mut from_a = ta.path_to_root(i);
                from_a.reverse();
                let to_b = tb.path_to_root(j);
                // q_new appears at the end of from_a and the start of to_b
                from_a.extend(to_b.into_iter().skip(1));
                if a == 1 {
                    from_a.reverse();
                }
                break from_a;
            }
        }
        a = 1 - a;
    };
    Ok(shortcut(geom, scene, raw, clearance, opts.shortcut_iterations, &mut rng))
}

fn shortcut(
    geom: &ArmGeometry,
    scene: &Scene,
    mut path: Vec<DVector<f64>>,
    clearance: f64,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    for _ in 0..iterations {
        if path.len() < 3 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        if segment_clear(geom, scene, &path[i], &path[j], clearance) {
            path.drain(i + 1..j);
        }
    }
    path
}

pub fn path_length(path: &[DVector<f64>]) -> f64 {
    path.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
}

/// Point at arclength `s` along a piecewise-linear path.
fn point_at(path: &[DVector<f64>], mut s: f64) -> DVector<f64> {
    for w in path.windows(2) {
        let len = (&w[1] - &w[0]).norm();
        if s <= len {
            return if len > 0.0 { &w[0] + (&w[1] - &w[0]) * (s / len) } else { w[0].clone() };
        }
        s -= len;
    }
    path.last().expect("nonempty path").clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    #[serde(with = "serde_vectors")]
    pub centers: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
    pub step_size: f64,
}

/// Equidistant discretization with spacing at most `step_size`, radii from the SCDF.
pub fn build_corridor(geom: &ArmGeometry, scene: &Scene, path: &[DVector<f64>], step_size: f64) -> Result<Corridor> {
    if path.is_empty() || !(step_size > 0.0) {
        return Err(Error::InvalidArgument("empty path or nonpositive step".into()));
    }
    let length = path_length(path);
    let segments = ((length / step_size) - 1e-9).ceil().max(0.0) as usize;
    let mut centers = Vec::with_capacity(segments + 1);
    let mut radii = Vec::with_capacity(segments + 1);
    for k in 0..=segments {
        let c = if segments == 0 { path[0].clone() } else { point_at(path, length * k as f64 / segments as f64) };
        let r = scdf(geom, scene, &c);
        if !(r > 0.0) {
            return Err(Error::CorridorInvalid(format!("center {k} has scdf {r:e}")));
        }
        centers.push(c);
        radii.push(r);
    }
    if segments > 0 {
        *centers.last_mut().unwrap() = path.last().unwrap().clone();
    }
    Ok(Corridor { centers, radii, step_size })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallAssignment {
    pub indices: Vec<usize>,
    pub margins: Vec<f64>,
}

impl Corridor {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn ball(&self, i: usize) -> Ball {
        Ball { center: self.centers[i].clone(), radius: self.radii[i] }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.centers.len() != c.radii.len() || c.centers.is_empty() {
            return Err(Error::CorridorInvalid("centers and radii differ in length".into()));
        }
        Ok(c)
    }
}

/// Ball with the largest margin `r_j - |q - c_j|` for each configuration; lowest index on ties.
pub fn assign_balls(corridor: &Corridor, qs: &[DVector<f64>]) -> Result<BallAssignment> {
    let mut indices = Vec::with_capacity(qs.len());
    let mut margins = Vec::with_capacity(qs.len());
    for (i, q) in qs.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, (c, r)) in corridor.centers.iter().zip(&corridor.radii).enumerate() {
            let m = r - (q - c).norm();
            if m > best.1 {
                best = (j, m);
            }
        }
        if best.1 < 0.0 {
            return Err(Error::TrajectoryLeftCorridor { index: i, margin: best.1 });
        }
        indices.push(best.0);
        margins.push(best.1);
    }
    Ok(BallAssignment { indices, margins })
}

/// Largest corridor index whose center lies in ball `last` shrunk by `tighten`;
/// `last` itself when none qualifies.
pub fn select_virtual_goal(corridor: &Corridor, last: usize, tighten: f64) -> usize {
    let ball = corridor.ball(last);
    let limit = ball.radius - tighten;
    (0..corridor.len())
        .rev()
        .find(|&i| (&corridor.centers[i] - &ball.center).norm() <= limit)
        .unwrap_or(last)
}
