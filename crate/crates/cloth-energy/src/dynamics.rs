//! Implicit time stepping by incremental-potential minimization.
//!
//! One backward-Euler step solves
//!   x_{t+1} = argmin_x  1/(2h^2) sum_i m_i |x_i - y_i|^2 + U(x) + D(x; x_t)
//! with y_i = 2 x_t - x_{t-1} the inertial prediction, U the sum of
//! gravity, collision penalty, external work, and the elastic potential,
//! and D the dissipation potential evaluated against the frame-t
//! positions. The elastic/dissipation pair comes either from the
//! analytic reference material or from the learned per-edge units.

use nalgebra::Vector3;

use crate::analytic::{AnalyticEnergy, AnalyticMaterial};
use crate::error::{Error, Result};
use crate::mesh::{ClothMesh, DeformedState};
use crate::model::{EnergyUnitModel, FeatureExtractor, MaterialAttr};

/// Gravitational acceleration, m/s^2, acting along -z.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Solver and contact parameters for one implicit step.
#[derive(Debug, Clone)]
pub struct StepConfig {
    /// Contact activation thickness, m.
    pub collision_epsilon: f64,
    /// Cubic penalty stiffness, J/m^3.
    pub collision_stiffness: f64,
    /// Radius for collecting vertex/obstacle-face pairs before the solve, m.
    pub proximity_radius: f64,
    /// Convergence threshold on the infinity norm of the free gradient, J/m.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of curvature pairs kept by the quasi-Newton update.
    pub history: usize,
    pub gravity: Vector3<f64>,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            collision_epsilon: 0.002,
            collision_stiffness: 1.0e4,
            proximity_radius: 0.03,
            tolerance: 1.0e-6,
            max_iterations: 200,
            history: 8,
            gravity: GRAVITY,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("collision_epsilon", self.collision_epsilon),
            ("collision_stiffness", self.collision_stiffness),
            ("proximity_radius", self.proximity_radius),
            ("tolerance", self.tolerance),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be finite and positive")));
            }
        }
        if self.max_iterations == 0 || self.history == 0 {
            return Err(Error::Config(
                "max_iterations and history must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Obstacle sampled as face centers with outward unit normals, posed per
/// animation frame by rigid translation.
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub centers: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// Translation applied at each frame; the last entry holds afterwards.
    /// Empty means static.
    pub motion: Vec<Vector3<f64>>,
}

impl Obstacle {
    /// UV-sphere sampling with outward normals.
    pub fn sphere(center: Vector3<f64>, radius: f64, stacks: usize, slices: usize) -> Self {
        let mut verts = Vec::new();
        for s in 0..=stacks {
            let phi = std::f64::consts::PI * s as f64 / stacks as f64;
            for l in 0..slices {
                let theta = 2.0 * std::f64::consts::PI * l as f64 / slices as f64;
                verts.push(
                    center
                        + radius
                            * Vector3::new(
                                phi.sin() * theta.cos(),
                                phi.sin() * theta.sin(),
                                phi.cos(),
                            ),
                );
            }
        }
        let idx = |s: usize, l: usize| s * slices + (l % slices);
        let mut centers = Vec::new();
        let mut normals = Vec::new();
        let mut push = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
            let centroid = (a + b + c) / 3.0;
            let out = centroid - center;
            let n = out.norm();
            if n > 1e-12 {
                centers.push(centroid);
                normals.push(out / n);
            }
        };
        for s in 0..stacks {
            for l in 0..slices {
                let (a, b, c, d) = (
                    verts[idx(s, l)],
                    verts[idx(s, l + 1)],
                    verts[idx(s + 1, l + 1)],
                    verts[idx(s + 1, l)],
                );
                push(a, b, c);
                push(a, c, d);
            }
        }
        Self {
            centers,
            normals,
            motion: Vec::new(),
        }
    }

    /// Square patch of face samples in the plane through `origin` with
    /// unit `normal`, covering `[-half_extent, half_extent]^2`.
    pub fn plane(
        origin: Vector3<f64>,
        normal: Vector3<f64>,
        half_extent: f64,
        resolution: usize,
    ) -> Self {
        let n = normal.normalize();
        let helper = if n.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = n.cross(&helper).normalize();
        let v = n.cross(&u);
        let mut centers = Vec::new();
        let mut normals = Vec::new();
        for i in 0..resolution {
            for j in 0..resolution {
                let su = -half_extent + (2.0 * half_extent) * (i as f64 + 0.5) / resolution as f64;
                let sv = -half_extent + (2.0 * half_extent) * (j as f64 + 0.5) / resolution as f64;
                centers.push(origin + su * u + sv * v);
                normals.push(n);
            }
        }
        Self {
            centers,
            normals,
            motion: Vec::new(),
        }
    }

    pub fn with_motion(mut self, motion: Vec<Vector3<f64>>) -> Self {
        self.motion = motion;
        self
    }

    fn offset_at(&self, frame: usize) -> Vector3<f64> {
        if self.motion.is_empty() {
            Vector3::zeros()
        } else {
            self.motion[frame.min(self.motion.len() - 1)]
        }
    }
}

/// One active vertex/obstacle-face pair, frozen for the whole solve.
#[derive(Debug, Clone, Copy)]
pub struct ContactPair {
    pub vertex: usize,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Collect contact candidates at the pre-step positions: for each cloth
/// vertex, the nearest obstacle face center within the proximity radius.
pub fn contact_pairs(
    positions: &[Vector3<f64>],
    obstacles: &[Obstacle],
    frame: usize,
    radius: f64,
) -> Vec<ContactPair> {
    let mut pairs = Vec::new();
    for (vi, x) in positions.iter().enumerate() {
        let mut best: Option<(f64, ContactPair)> = None;
        for obs in obstacles {
            let off = obs.offset_at(frame);
            for (c, n) in obs.centers.iter().zip(&obs.normals) {
                let p = c + off;
                let dist = (x - p).norm();
                if dist <= radius && best.map_or(true, |(d, _)| dist < d) {
                    best = Some((
                        dist,
                        ContactPair {
                            vertex: vi,
                            point: p,
                            normal: *n,
                        },
                    ));
                }
            }
        }
        if let Some((_, pair)) = best {
            pairs.push(pair);
        }
    }
    pairs
}

/// Cubic one-sided penalty k_c * sum max(eps - d, 0)^3 with
/// d = (x_i - p) . n, plus its gradient on the cloth vertices.
pub fn collision_energy(
    positions: &[Vector3<f64>],
    pairs: &[ContactPair],
    epsilon: f64,
    stiffness: f64,
) -> (f64, Vec<Vector3<f64>>) {
    let mut energy = 0.0;
    let mut grad = vec![Vector3::zeros(); positions.len()];
    for pair in pairs {
        let d = (positions[pair.vertex] - pair.point).dot(&pair.normal);
        let pen = epsilon - d;
        if pen > 0.0 {
            energy += stiffness * pen * pen * pen;
            grad[pair.vertex] -= 3.0 * stiffness * pen * pen * pair.normal;
        }
    }
    (energy, grad)
}

/// The constitutive source used by the stepper.
pub enum EnergySource<'a> {
    Analytic {
        energy: &'a AnalyticEnergy,
        material: &'a AnalyticMaterial,
    },
    Learned {
        model: &'a EnergyUnitModel,
        extractor: &'a FeatureExtractor,
        attrs: MaterialAttr,
    },
}

impl EnergySource<'_> {
    /// Elastic plus dissipation energy and gradient at `positions`,
    /// with the dissipation referenced to `prev` over step `h`.
    pub fn evaluate(
        &self,
        positions: &[Vector3<f64>],
        prev: &[Vector3<f64>],
        h: f64,
    ) -> Result<(f64, Vec<Vector3<f64>>)> {
        match self {
            EnergySource::Analytic { energy, material } => {
                let (e_m, g_m) = energy.stvk_membrane(positions, material.mu, material.lambda);
                let (e_b, g_b) = energy.dihedral_bending(positions, material.bend);
                // The drag term is a Rayleigh dissipation function: it is
                // quadratic in the step displacement, so the work its force
                // extracts over a step is twice the function value. Entering
                // it at half strength makes the energy removed per step equal
                // the recorded dissipation value, closing the budget.
                let (e_d, g_d) = energy.drag_dissipation(positions, prev, h, material.drag);
                let mut grad = g_m;
                for (g, (b, d)) in grad.iter_mut().zip(g_b.iter().zip(&g_d)) {
                    *g += b + 0.5 * d;
                }
                Ok((e_m + e_b + 0.5 * e_d, grad))
            }
            EnergySource::Learned {
                model,
                extractor,
                attrs,
            } => {
                let state = DeformedState::new(positions.to_vec(), prev.to_vec(), h)?;
                let breakdown = model.total_energy(extractor, &state, attrs)?;
                let grad = model.energy_position_gradient(extractor, &state, attrs)?;
                Ok((breakdown.total(), grad))
            }
        }
    }

    /// Elastic potential alone (no dissipation), for energy accounting.
    pub fn potential_only(&self, positions: &[Vector3<f64>]) -> Result<f64> {
        match self {
            EnergySource::Analytic { energy, material } => {
                let (e_m, _) = energy.stvk_membrane(positions, material.mu, material.lambda);
                let (e_b, _) = energy.dihedral_bending(positions, material.bend);
                Ok(e_m + e_b)
            }
            EnergySource::Learned {
                model,
                extractor,
                attrs,
            } => {
                let state =
                    DeformedState::new(positions.to_vec(), positions.to_vec(), 1.0)?;
                Ok(model.total_energy(extractor, &state, attrs)?.potential)
            }
        }
    }
}

/// Outcome of one minimization.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective value at the starting iterate.
    pub initial_energy: f64,
    /// Objective value at the returned iterate.
    pub energy: f64,
}

/// Minimize a smooth objective with limited-memory BFGS and Armijo
/// backtracking. Components flagged in `frozen` never move and their
/// gradient entries are ignored. Returns the best iterate seen.
pub fn minimize<F>(
    objective: F,
    x0: &[Vector3<f64>],
    frozen: &[bool],
    cfg: &StepConfig,
) -> Result<(Vec<Vector3<f64>>, SolveReport)>
where
    F: Fn(&[Vector3<f64>]) -> Result<(f64, Vec<Vector3<f64>>)>,
{
    minimize_with_metric(objective, x0, frozen, None, cfg)
}

/// `minimize` with an optional diagonal initial inverse Hessian (one
/// scalar per vertex). For incremental potentials, h^2/m_i is the
/// natural choice and sharply reduces iteration counts.
pub fn minimize_with_metric<F>(
    objective: F,
    x0: &[Vector3<f64>],
    frozen: &[bool],
    h0_diag: Option<&[f64]>,
    cfg: &StepConfig,
) -> Result<(Vec<Vector3<f64>>, SolveReport)>
where
    F: Fn(&[Vector3<f64>]) -> Result<(f64, Vec<Vector3<f64>>)>,
{
    let n = x0.len();
    let mask = |g: &mut Vec<Vector3<f64>>| {
        for (gi, &f) in g.iter_mut().zip(frozen) {
            if f {
                *gi = Vector3::zeros();
            }
        }
    };
    let dot = |a: &[Vector3<f64>], b: &[Vector3<f64>]| -> f64 {
        a.iter().zip(b).map(|(u, w)| u.dot(w)).sum()
    };
    let inf_norm =
        |a: &[Vector3<f64>]| -> f64 { a.iter().map(|v| v.amax()).fold(0.0_f64, f64::max) };

    let mut x = x0.to_vec();
    let (mut fx, mut gx) = objective(&x)?;
    if !fx.is_finite() {
        return Err(Error::Numerical {
            term: "incremental potential".into(),
            detail: "non-finite energy at the initial iterate".into(),
        });
    }
    mask(&mut gx);

    let initial_energy = fx;
    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut s_list: Vec<Vec<Vector3<f64>>> = Vec::new();
    let mut y_list: Vec<Vec<Vector3<f64>>> = Vec::new();
    let mut rho_list: Vec<f64> = Vec::new();

    let mut iterations = 0;
    let mut converged = inf_norm(&gx) <= cfg.tolerance;
    // Below this gradient level even a full quasi-Newton step changes
    // the energy by less than one rounding ulp, so no line search can
    // make measurable progress: 0.5 * g^2 * h0_max <= eps * |f|.
    let h0_max = h0_diag
        .map(|d| d.iter().cloned().fold(0.0_f64, f64::max))
        .unwrap_or(1.0);
    // The 4x headroom covers quasi-Newton directions being worse than
    // the ideal step the bound assumes.
    let grad_floor = |f: f64| 4.0 * (2.0 * f64::EPSILON * f.abs().max(1e-30) / h0_max).sqrt();
    let mut stalled = 0usize;

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;

        // Two-loop recursion for the search direction.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(s_list.len());
        for k in (0..s_list.len()).rev() {
            let alpha = rho_list[k] * dot(&s_list[k], &q);
            for (qi, yi) in q.iter_mut().zip(&y_list[k]) {
                *qi -= alpha * yi;
            }
            alphas.push(alpha);
        }
        // Initial inverse Hessian: optional diagonal metric, scaled by
        // the usual curvature ratio once pairs are available.
        let gamma = if let (Some(s), Some(y)) = (s_list.last(), y_list.last()) {
            let denom = match h0_diag {
                Some(d) => y.iter().zip(d).map(|(yi, &di)| di * yi.norm_squared()).sum(),
                None => dot(y, y),
            };
            dot(s, y) / f64::max(denom, 1e-300)
        } else {
            1.0
        };
        match h0_diag {
            Some(d) => {
                for (qi, &di) in q.iter_mut().zip(d) {
                    *qi *= gamma * di;
                }
            }
            None => {
                for qi in q.iter_mut() {
                    *qi *= gamma;
                }
            }
        }
        for k in 0..s_list.len() {
            let beta = rho_list[k] * dot(&y_list[k], &q);
            let alpha = alphas[s_list.len() - 1 - k];
            for (qi, si) in q.iter_mut().zip(&s_list[k]) {
                *qi += (alpha - beta) * si;
            }
        }
        let mut dir: Vec<Vector3<f64>> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &gx);
        if !slope.is_finite() || slope >= 0.0 {
            // Fall back to steepest descent and drop stale curvature.
            dir = gx.iter().map(|v| -v).collect();
            slope = -dot(&gx, &gx);
            s_list.clear();
            y_list.clear();
            rho_list.clear();
        }

        // Armijo backtracking.
        let mut t = 1.0;
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<Vector3<f64>> =
                x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
            match objective(&xt) {
                Ok((ft, mut gt)) if ft.is_finite() => {
                    if ft <= fx + c1 * t * slope {
                        mask(&mut gt);
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                }
                // Non-finite energies and transient geometric collapse
                // (degenerate faces or normals at a wild trial point)
                // just shrink the step.
                Ok(_)
                | Err(Error::Numerical { .. }
                | Error::ZeroNormal(_)
                | Error::DegenerateTriangle { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            // Line search exhausted: return the best point found so far.
            break;
        };

        let s: Vec<Vector3<f64>> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<Vector3<f64>> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let ss = dot(&s, &s).sqrt();
        let yy = dot(&yv, &yv).sqrt();
        if sy > 1e-12 * ss * yy {
            s_list.push(s);
            y_list.push(yv);
            rho_list.push(1.0 / sy);
            if s_list.len() > cfg.history {
                s_list.remove(0);
                y_list.remove(0);
                rho_list.remove(0);
            }
        }

        let progress = fx - ft;
        x = xt;
        fx = ft;
        gx = gt;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
        converged = inf_norm(&gx) <= cfg.tolerance;
        // Stop once the iterate sits at the rounding floor: many
        // consecutive accepted steps without measurable decrease, with
        // the gradient already too small to produce one. Tolerances
        // tighter than machine precision allows are treated as met.
        if progress <= 4.0 * f64::EPSILON * fx.abs() {
            stalled += 1;
            if stalled >= 30 && !converged {
                converged = inf_norm(&gx) <= grad_floor(fx);
                break;
            }
        } else {
            stalled = 0;
        }
    }
    debug_assert_eq!(best_x.len(), n);

    let grad_norm = inf_norm(&gx);
    Ok((
        best_x,
        SolveReport {
            iterations,
            converged,
            grad_norm,
            initial_energy,
            energy: best_f,
        },
    ))
}

/// Advance one frame. `pinned_targets`, when given, prescribes the new
/// positions of the pinned vertices (same order as `mesh.pinned`).
/// `external` is an optional per-vertex constant force, N.
#[allow(clippy::too_many_arguments)]
pub fn step(
    mesh: &ClothMesh,
    state: &DeformedState,
    source: &EnergySource,
    obstacles: &[Obstacle],
    frame: usize,
    pinned_targets: Option<&[Vector3<f64>]>,
    external: Option<&[Vector3<f64>]>,
    cfg: &StepConfig,
) -> Result<(DeformedState, SolveReport)> {
    cfg.validate()?;
    let h = state.h;
    let n = mesh.num_vertices();
    if let Some(f) = external {
        if f.len() != n {
            return Err(Error::DimensionMismatch {
                got: f.len(),
                expected: n,
            });
        }
    }
    if let Some(p) = pinned_targets {
        if p.len() != mesh.pinned.len() {
            return Err(Error::DimensionMismatch {
                got: p.len(),
                expected: mesh.pinned.len(),
            });
        }
    }

    // Inertial prediction and starting iterate.
    let mut x0: Vec<Vector3<f64>> = state
        .positions
        .iter()
        .zip(&state.prev_positions)
        .map(|(xt, xp)| 2.0 * xt - xp)
        .collect();
    let mut frozen = vec![false; n];
    for (k, &v) in mesh.pinned.iter().enumerate() {
        frozen[v] = true;
        x0[v] = pinned_targets.map_or(state.positions[v], |p| p[k]);
    }
    let target = x0.clone();

    let pairs = contact_pairs(&state.positions, obstacles, frame, cfg.proximity_radius);

    let check = |name: &str, v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical {
                term: name.into(),
                detail: "non-finite energy".into(),
            })
        }
    };
    let objective = |x: &[Vector3<f64>]| -> Result<(f64, Vec<Vector3<f64>>)> {
        let mut energy = 0.0;
        let mut grad = vec![Vector3::zeros(); n];
        // Inertia against the prediction.
        let mut e_in = 0.0;
        for i in 0..n {
            let d = x[i] - target[i];
            e_in += 0.5 * mesh.masses[i] * d.norm_squared();
            grad[i] += mesh.masses[i] * d / (h * h);
        }
        energy += check("inertia", e_in / (h * h))?;
        // Gravity and external forces.
        let mut e_f = 0.0;
        for i in 0..n {
            let f = mesh.masses[i] * cfg.gravity + external.map_or(Vector3::zeros(), |e| e[i]);
            e_f -= f.dot(&x[i]);
            grad[i] -= f;
        }
        energy += check("gravity/external", e_f)?;
        // Contact penalty.
        let (e_c, g_c) = collision_energy(x, &pairs, cfg.collision_epsilon, cfg.collision_stiffness);
        energy += check("collision penalty", e_c)?;
        for (g, gc) in grad.iter_mut().zip(&g_c) {
            *g += gc;
        }
        // Constitutive energy, dissipation referenced to frame t.
        let (e_m, g_m) = source.evaluate(x, &state.positions, h)?;
        energy += check("constitutive energy", e_m)?;
        for (g, gm) in grad.iter_mut().zip(&g_m) {
            *g += gm;
        }
        Ok((energy, grad))
    };

    let metric: Vec<f64> = mesh.masses.iter().map(|&m| h * h / m).collect();
    let (next, report) = minimize_with_metric(objective, &x0, &frozen, Some(&metric), cfg)?;
    let new_state = DeformedState::new(next, state.positions.clone(), h)?;
    Ok((new_state, report))
}

/// A full rollout: repeatedly step from the given state. `pinned_motion`
/// maps a frame index to the prescribed pinned positions for that frame.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Positions after each step (frame 1..=num_steps).
    pub frames: Vec<Vec<Vector3<f64>>>,
    pub reports: Vec<SolveReport>,
}

impl Rollout {
    pub fn nonconverged_fraction(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().filter(|r| !r.converged).count() as f64 / self.reports.len() as f64
    }

    /// A rollout is unreliable when too many steps failed to converge.
    pub fn is_reliable(&self, max_nonconverged_fraction: f64) -> bool {
        self.nonconverged_fraction() <= max_nonconverged_fraction
    }
}

#[allow(clippy::too_many_arguments)]
pub fn rollout<P>(
    mesh: &ClothMesh,
    initial: &DeformedState,
    source: &EnergySource,
    obstacles: &[Obstacle],
    num_steps: usize,
    mut pinned_motion: P,
    external: Option<&[Vector3<f64>]>,
    cfg: &StepConfig,
) -> Result<Rollout>
where
    P: FnMut(usize) -> Option<Vec<Vector3<f64>>>,
{
    let mut state = initial.clone();
    let mut frames = Vec::with_capacity(num_steps);
    let mut reports = Vec::with_capacity(num_steps);
    for k in 0..num_steps {
        let targets = pinned_motion(k + 1);
        let (next, report) = step(
            mesh,
            &state,
            source,
            obstacles,
            k + 1,
            targets.as_deref(),
            external,
            cfg,
        )?;
        frames.push(next.positions.clone());
        reports.push(report);
        state = next;
    }
    Ok(Rollout { frames, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::check_fd;
    use crate::mesh::grid_faces;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn grid_mesh(rows: usize, cols: usize, spacing: f64, pins: Vec<usize>) -> ClothMesh {
        let (n, faces) = grid_faces(rows, cols);
        let mut pos = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                // Vertical sheet in the x/z plane.
                pos.push(v(c as f64 * spacing, 0.0, -(r as f64) * spacing));
            }
        }
        ClothMesh::new(pos, faces, vec![0.005; n], pins).unwrap()
    }

    fn soft_material() -> AnalyticMaterial {
        AnalyticMaterial {
            mu: 30.0,
            lambda: 20.0,
            bend: 1e-5,
            drag: 1e-3,
            density: 0.2,
        }
    }

    #[test]
    fn collision_energy_closed_form() {
        // One vertex at height d above a single face sample with +z normal.
        let eps = 0.002;
        let k = 1.0e4;
        let pair = ContactPair {
            vertex: 0,
            point: v(0., 0., 0.),
            normal: v(0., 0., 1.),
        };
        // Outside the activation thickness: zero.
        let (e, g) = collision_energy(&[v(0., 0., 0.01)], &[pair], eps, k);
        assert_eq!(e, 0.0);
        assert_eq!(g[0], Vector3::zeros());
        // Inside: k * (eps - d)^3 with gradient -3k(eps-d)^2 n.
        let d = 0.0005;
        let (e, g) = collision_energy(&[v(0., 0., d)], &[pair], eps, k);
        let pen = eps - d;
        assert!((e - k * pen.powi(3)).abs() < 1e-15);
        assert!((g[0] - v(0., 0., -3.0 * k * pen * pen)).norm() < 1e-12);
    }

    #[test]
    fn collision_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<ContactPair> = (0..6)
            .map(|i| ContactPair {
                vertex: i % 3,
                point: v(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), 0.0),
                normal: v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0).normalize(),
            })
            .collect();
        let pos: Vec<Vector3<f64>> = (0..3)
            .map(|_| v(rng.gen_range(-0.002..0.002), 0.0, rng.gen_range(-0.001..0.003)))
            .collect();
        let (_, grad) = collision_energy(&pos, &pairs, 0.002, 1.0e4);
        check_fd(&pos, &grad, 1e-8, 5e-4, |p| {
            collision_energy(p, &pairs, 0.002, 1.0e4).0
        });
    }

    #[test]
    fn minimizer_solves_quadratic_exactly_enough() {
        // f(x) = sum_i a_i |x_i - c_i|^2 with distinct curvatures.
        let c: Vec<Vector3<f64>> = (0..5).map(|i| v(i as f64, -(i as f64), 0.5)).collect();
        let a: Vec<f64> = (0..5).map(|i| 1.0 + i as f64).collect();
        let obj = |x: &[Vector3<f64>]| -> Result<(f64, Vec<Vector3<f64>>)> {
            let mut e = 0.0;
            let mut g = vec![Vector3::zeros(); x.len()];
            for i in 0..x.len() {
                let d = x[i] - c[i];
                e += a[i] * d.norm_squared();
                g[i] = 2.0 * a[i] * d;
            }
            Ok((e, g))
        };
        let x0 = vec![Vector3::zeros(); 5];
        let frozen = vec![false; 5];
        let cfg = StepConfig {
            tolerance: 1e-10,
            ..StepConfig::default()
        };
        let (x, report) = minimize(obj, &x0, &frozen, &cfg).unwrap();
        assert!(report.converged, "grad norm {}", report.grad_norm);
        for i in 0..5 {
            assert!((x[i] - c[i]).norm() < 1e-8);
        }
    }

    #[test]
    fn minimizer_respects_frozen_components() {
        let obj = |x: &[Vector3<f64>]| -> Result<(f64, Vec<Vector3<f64>>)> {
            let e: f64 = x.iter().map(|p| p.norm_squared()).sum();
            Ok((e, x.iter().map(|p| 2.0 * p).collect()))
        };
        let x0 = vec![v(1., 2., 3.), v(4., 5., 6.)];
        let (x, report) = minimize(obj, &x0, &[true, false], &StepConfig::default()).unwrap();
        assert_eq!(x[0], x0[0]);
        assert!(x[1].norm() < 1e-6);
        assert!(report.converged);
    }

    #[test]
    fn free_fall_matches_closed_form_update() {
        // With no elasticity, no pins, and no contact, the minimizer of
        // the incremental potential is y + h^2 g exactly.
        let mesh = grid_mesh(3, 3, 0.05, vec![]);
        let material = AnalyticMaterial {
            mu: 0.0,
            lambda: 0.0,
            bend: 0.0,
            drag: 0.0,
            density: 0.2,
        };
        let energy = AnalyticEnergy::new(&mesh).unwrap();
        let source = EnergySource::Analytic {
            energy: &energy,
            material: &material,
        };
        let h = 1.0 / 30.0;
        let vel = v(0.1, 0.0, -0.05);
        let prev: Vec<_> = mesh.rest_positions.iter().map(|p| p - h * vel).collect();
        let state = DeformedState::new(mesh.rest_positions.clone(), prev, h).unwrap();
        let cfg = StepConfig {
            tolerance: 1e-10,
            ..StepConfig::default()
        };
        let (next, report) = step(&mesh, &state, &source, &[], 1, None, None, &cfg).unwrap();
        assert!(report.converged);
        for (i, p) in next.positions.iter().enumerate() {
            let y = mesh.rest_positions[i] + h * vel;
            let expect = y + h * h * GRAVITY;
            assert!((p - expect).norm() < 1e-8, "vertex {i}");
        }
    }

    #[test]
    fn pinned_corners_hold_while_cloth_sags() {
        let mesh = grid_mesh(6, 6, 0.04, vec![0, 5]);
        let energy = AnalyticEnergy::new(&mesh).unwrap();
        let material = soft_material();
        let source = EnergySource::Analytic {
            energy: &energy,
            material: &material,
        };
        let state = DeformedState::new(
            mesh.rest_positions.clone(),
            mesh.rest_positions.clone(),
            1.0 / 30.0,
        )
        .unwrap();
        let roll = rollout(
            &mesh,
            &state,
            &source,
            &[],
            8,
            |_| None,
            None,
            &StepConfig::default(),
        )
        .unwrap();
        let last = roll.frames.last().unwrap();
        assert_eq!(last[0], mesh.rest_positions[0]);
        assert_eq!(last[5], mesh.rest_positions[5]);
        // Free bottom row has fallen below its rest height.
        let bottom = 30; // row 5, col 0
        assert!(last[bottom].z < mesh.rest_positions[bottom].z - 1e-4);
        // Solver reports finite energies and makes progress every frame.
        for r in &roll.reports {
            assert!(r.energy.is_finite());
            assert!(r.grad_norm.is_finite());
        }
    }

    #[test]
    fn sphere_contact_keeps_vertices_outside_thickness() {
        // Drop a small free patch onto a sphere directly below it.
        let mesh = grid_mesh(4, 4, 0.02, vec![]);
        // Recenter so the patch is horizontal above the sphere.
        let pos: Vec<Vector3<f64>> = mesh
            .rest_positions
            .iter()
            .map(|p| v(p.x - 0.03, -p.z - 0.03, 0.12))
            .collect();
        let mesh = ClothMesh::new(
            pos,
            mesh.topology.faces.clone(),
            mesh.masses.clone(),
            vec![],
        )
        .unwrap();
        let sphere = Obstacle::sphere(v(0., 0., 0.), 0.1, 24, 32);
        let energy = AnalyticEnergy::new(&mesh).unwrap();
        let material = soft_material();
        let source = EnergySource::Analytic {
            energy: &energy,
            material: &material,
        };
        let state = DeformedState::new(
            mesh.rest_positions.clone(),
            mesh.rest_positions.clone(),
            1.0 / 30.0,
        )
        .unwrap();
        let roll = rollout(
            &mesh,
            &state,
            &source,
            &[sphere],
            25,
            |_| None,
            None,
            &StepConfig::default(),
        )
        .unwrap();
        // By the end the patch has landed: every vertex stays at or above
        // the sphere surface minus a small fraction of the thickness.
        let last = roll.frames.last().unwrap();
        let min_r = last.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
        assert!(
            min_r > 0.1 - 0.002,
            "deepest vertex at radius {min_r} penetrated beyond the contact thickness"
        );
        // And it actually rests near the sphere rather than falling past it.
        assert!(min_r < 0.12, "patch never landed (min radius {min_r})");
    }

    #[test]
    fn incremental_potential_gradient_matches_fd_with_learned_source() {
        let mesh = grid_mesh(4, 4, 0.05, vec![0]);
        let fx = FeatureExtractor::new(&mesh).unwrap();
        let model = EnergyUnitModel::init(&[16, 16], 11).unwrap();
        let attrs = MaterialAttr([0.3, 0.6, 0.2, 0.7, 0.4]);
        let source = EnergySource::Learned {
            model: &model,
            extractor: &fx,
            attrs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut jig = |p: &Vector3<f64>| {
            p + v(
                rng.gen_range(-0.003..0.003),
                rng.gen_range(-0.003..0.003),
                rng.gen_range(-0.003..0.003),
            )
        };
        let pos: Vec<_> = mesh.rest_positions.iter().map(&mut jig).collect();
        let prev: Vec<_> = mesh.rest_positions.iter().map(&mut jig).collect();
        let h = 1.0 / 30.0;
        let (_, grad) = source.evaluate(&pos, &prev, h).unwrap();
        check_fd(&pos, &grad, 1e-6, 2e-4, |p| {
            source.evaluate(p, &prev, h).unwrap().0
        });
    }

    #[test]
    fn step_rejects_bad_argument_shapes() {
        let mesh = grid_mesh(3, 3, 0.05, vec![0]);
        let energy = AnalyticEnergy::new(&mesh).unwrap();
        let material = soft_material();
        let source = EnergySource::Analytic {
            energy: &energy,
            material: &material,
        };
        let state = DeformedState::new(
            mesh.rest_positions.clone(),
            mesh.rest_positions.clone(),
            1.0 / 30.0,
        )
        .unwrap();
        let bad_pins = vec![v(0., 0., 0.); 3];
        let err = step(
            &mesh,
            &state,
            &source,
            &[],
            1,
            Some(&bad_pins),
            None,
            &StepConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
