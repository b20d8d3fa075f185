//! The learned per-edge energy model: feature extraction, the potential
//! and dissipation units, mesh-level assembly, and exact gradients of the
//! total energy with respect to vertex positions.
//!
//! Each edge contributes a potential unit phi_p(dl, dtheta, a) and an
//! area-scaled dissipation unit gamma * phi_d(speed, a). Both units are
//! anchored so they vanish exactly at the rest feature for any parameter
//! values, and phi_d is rectified to be non-negative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{
    relative_angles, relative_angles_vjp, vertex_normal_sums, ClothMesh, DeformedState,
    DEGENERATE_AREA_TOL,
};
use crate::nn::{softplus, Mlp, MlpHeader};

/// Input width of the potential unit: dl + 4 angle components + 5 attrs.
pub const POTENTIAL_IN: usize = 10;
/// Input width of the dissipation unit: speed + 5 attrs.
pub const DISSIPATION_IN: usize = 6;

pub const MODEL_MAGIC: &[u8; 4] = b"EUMF";
pub const MODEL_VERSION: u32 = 1;

/// Normalized material attribute vector conditioning both energy units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialAttr(pub [f64; 5]);

impl MaterialAttr {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(
                "material attributes must be finite and within [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-edge inputs to the energy units.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeFeatures {
    /// Deformed minus rest edge length, m.
    pub dl: f64,
    /// (cos a, sin a, cos b, sin b) deformed minus rest.
    pub dtheta: [f64; 4],
    /// Edge-midpoint speed |mid_t - mid_prev| / h, m/s.
    pub speed: f64,
    /// Incident face area sum at the current positions, m^2.
    pub gamma: f64,
}

/// Per-feature scales fixed from the training set, plus output scales
/// converting raw network units to joules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub dl_scale: f64,
    pub dtheta_scale: [f64; 4],
    pub speed_scale: f64,
    /// Joules per raw unit of the potential network output.
    pub potential_scale: f64,
    /// Joules per m^2 per raw unit of the dissipation network output.
    pub dissipation_scale: f64,
}

impl Default for FeatureNorm {
    fn default() -> Self {
        Self {
            dl_scale: 1.0,
            dtheta_scale: [1.0; 4],
            speed_scale: 1.0,
            potential_scale: 1.0,
            dissipation_scale: 1.0,
        }
    }
}

impl FeatureNorm {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dl_scale,
            self.speed_scale,
            self.potential_scale,
            self.dissipation_scale,
        ]
        .into_iter()
        .chain(self.dtheta_scale);
        for v in all {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(
                    "normalization constants must be finite and positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Rest-state cache for feature extraction on one mesh.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub mesh: ClothMesh,
    rest_len: Vec<f64>,
    rest_angles: Vec<[f64; 4]>,
}

impl FeatureExtractor {
    pub fn new(mesh: &ClothMesh) -> Result<Self> {
        let topo = &mesh.topology;
        let rest_normals = crate::mesh::vertex_normals(&mesh.rest_positions, topo)?;
        let mut rest_len = Vec::with_capacity(topo.num_edges());
        let mut rest_angles = Vec::with_capacity(topo.num_edges());
        for &(i, j) in &topo.edges {
            let d = mesh.rest_positions[j] - mesh.rest_positions[i];
            let l = d.norm();
            rest_len.push(l);
            rest_angles.push(relative_angles(
                &rest_normals[i],
                &rest_normals[j],
                &(d / l),
            )?);
        }
        Ok(Self {
            mesh: mesh.clone(),
            rest_len,
            rest_angles,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.rest_len.len()
    }

    pub fn rest_length(&self, eid: usize) -> f64 {
        self.rest_len[eid]
    }

    pub fn normals(&self, positions: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        crate::mesh::vertex_normals(positions, &self.mesh.topology)
    }

    /// Features for every edge of the mesh.
    pub fn features(&self, state: &DeformedState) -> Result<Vec<EdgeFeatures>> {
        let normals = self.normals(&state.positions)?;
        let all: Vec<usize> = (0..self.num_edges()).collect();
        self.features_for_edges(
            &state.positions,
            &state.prev_positions,
            state.h,
            &normals,
            &all,
        )
    }

    /// Features for a subset of edges, given precomputed unit vertex
    /// normals for the same positions.
    pub fn features_for_edges(
        &self,
        positions: &[Vector3<f64>],
        prev_positions: &[Vector3<f64>],
        h: f64,
        normals: &[Vector3<f64>],
        edge_ids: &[usize],
    ) -> Result<Vec<EdgeFeatures>> {
        let topo = &self.mesh.topology;
        let mut out = Vec::with_capacity(edge_ids.len());
        for &eid in edge_ids {
            let (i, j) = topo.edges[eid];
            let d = positions[j] - positions[i];
            let l = d.norm();
            if l < 1e-15 {
                return Err(Error::Numerical {
                    term: "edge_features".into(),
                    detail: format!("edge ({i},{j}) collapsed to zero length"),
                });
            }
            let angles = relative_angles(&normals[i], &normals[j], &(d / l))?;
            let rest = &self.rest_angles[eid];
            let mid =
                ((positions[i] - prev_positions[i]) + (positions[j] - prev_positions[j])) / 2.0;
            out.push(EdgeFeatures {
                dl: l - self.rest_len[eid],
                dtheta: [
                    angles[0] - rest[0],
                    angles[1] - rest[1],
                    angles[2] - rest[2],
                    angles[3] - rest[3],
                ],
                speed: mid.norm() / h,
                gamma: crate::mesh::edge_area_weight(eid, positions, topo),
            });
        }
        Ok(out)
    }
}

/// Convenience wrapper matching the flat per-edge feature contract.
pub fn edge_features(mesh: &ClothMesh, state: &DeformedState) -> Result<Vec<EdgeFeatures>> {
    FeatureExtractor::new(mesh)?.features(state)
}

/// Smooth absolute value built from softplus: sp(x) + sp(-x) - 2 ln 2.
/// Non-negative, exactly zero at zero, derivative tanh(x/2).
pub fn smooth_abs(x: f64) -> f64 {
    let a = x.abs();
    a + 2.0 * softplus(-a) - 2.0 * std::f64::consts::LN_2
}

pub fn smooth_abs_derivative(x: f64) -> f64 {
    (0.5 * x).tanh()
}

/// Mesh-level energy split into the two unit families.
#[derive(Debug, Clone)]
pub struct EnergyBreakdown {
    pub potential: f64,
    pub dissipation: f64,
    /// (phi_p, gamma * phi_d) per edge.
    pub per_edge: Vec<(f64, f64)>,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.potential + self.dissipation
    }
}

/// The learned constitutive model: two anchored MLP energy units plus
/// their normalization constants.
#[derive(Debug, Clone)]
pub struct EnergyUnitModel {
    pub potential_net: Mlp,
    pub dissipation_net: Mlp,
    pub norm: FeatureNorm,
}

impl EnergyUnitModel {
    pub fn init(hidden: &[usize], seed: u64) -> Result<Self> {
        let mut p_dims = vec![POTENTIAL_IN];
        p_dims.extend_from_slice(hidden);
        p_dims.push(1);
        let mut d_dims = vec![DISSIPATION_IN];
        d_dims.extend_from_slice(hidden);
        d_dims.push(1);
        Ok(Self {
            potential_net: Mlp::init(&p_dims, seed)?,
            dissipation_net: Mlp::init(&d_dims, seed.wrapping_add(1))?,
            norm: FeatureNorm::default(),
        })
    }

    /// Normalized input row for the potential unit.
    pub fn potential_row(&self, dl: f64, dtheta: &[f64; 4], a: &MaterialAttr) -> [f64; POTENTIAL_IN] {
        let n = &self.norm;
        [
            dl / n.dl_scale,
            dtheta[0] / n.dtheta_scale[0],
            dtheta[1] / n.dtheta_scale[1],
            dtheta[2] / n.dtheta_scale[2],
            dtheta[3] / n.dtheta_scale[3],
            a.0[0],
            a.0[1],
            a.0[2],
            a.0[3],
            a.0[4],
        ]
    }

    /// Normalized input row for the dissipation unit.
    pub fn dissipation_row(&self, speed: f64, a: &MaterialAttr) -> [f64; DISSIPATION_IN] {
        [
            speed / self.norm.speed_scale,
            a.0[0],
            a.0[1],
            a.0[2],
            a.0[3],
            a.0[4],
        ]
    }

    /// Raw potential-network output at the rest feature for attrs `a`.
    pub fn potential_anchor(&self, a: &MaterialAttr) -> Result<f64> {
        self.potential_net
            .forward(&self.potential_row(0.0, &[0.0; 4], a))
    }

    /// Raw dissipation-network output at zero speed for attrs `a`.
    pub fn dissipation_anchor(&self, a: &MaterialAttr) -> Result<f64> {
        self.dissipation_net.forward(&self.dissipation_row(0.0, a))
    }

    /// Potential energy unit, J. Exactly zero at the rest feature.
    pub fn phi_p(&self, dl: f64, dtheta: &[f64; 4], a: &MaterialAttr) -> Result<f64> {
        let raw = self.potential_net.forward(&self.potential_row(dl, dtheta, a))?;
        Ok((raw - self.potential_anchor(a)?) * self.norm.potential_scale)
    }

    /// Dissipation energy unit per unit area, J/m^2. Non-negative and
    /// exactly zero at zero speed; the caller applies the gamma factor.
    pub fn phi_d(&self, speed: f64, a: &MaterialAttr) -> Result<f64> {
        let raw = self.dissipation_net.forward(&self.dissipation_row(speed, a))?;
        Ok(smooth_abs(raw - self.dissipation_anchor(a)?) * self.norm.dissipation_scale)
    }

    /// Batched potential rows for a feature slice.
    pub fn potential_batch(&self, feats: &[EdgeFeatures], a: &MaterialAttr) -> Array2<f64> {
        let mut x = Array2::zeros((feats.len(), POTENTIAL_IN));
        for (r, f) in feats.iter().enumerate() {
            let row = self.potential_row(f.dl, &f.dtheta, a);
            x.row_mut(r).assign(&Array1::from_iter(row));
        }
        x
    }

    pub fn dissipation_batch(&self, feats: &[EdgeFeatures], a: &MaterialAttr) -> Array2<f64> {
        let mut x = Array2::zeros((feats.len(), DISSIPATION_IN));
        for (r, f) in feats.iter().enumerate() {
            let row = self.dissipation_row(f.speed, a);
            x.row_mut(r).assign(&Array1::from_iter(row));
        }
        x
    }

    /// Per-edge energies for a feature slice: (phi_p, gamma * phi_d).
    pub fn edge_energies(
        &self,
        feats: &[EdgeFeatures],
        a: &MaterialAttr,
    ) -> Result<Vec<(f64, f64)>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let xp = self.potential_batch(feats, a);
        let (zp, _) = self.potential_net.forward_batch(xp.view())?;
        let xd = self.dissipation_batch(feats, a);
        let (zd, _) = self.dissipation_net.forward_batch(xd.view())?;
        let p0 = self.potential_anchor(a)?;
        let d0 = self.dissipation_anchor(a)?;
        Ok(feats
            .iter()
            .enumerate()
            .map(|(e, f)| {
                let p = (zp[e] - p0) * self.norm.potential_scale;
                let d = f.gamma * smooth_abs(zd[e] - d0) * self.norm.dissipation_scale;
                (p, d)
            })
            .collect())
    }

    /// Total energy Phi = Phi_p + Phi_d with the per-edge breakdown.
    pub fn total_energy(
        &self,
        fx: &FeatureExtractor,
        state: &DeformedState,
        a: &MaterialAttr,
    ) -> Result<EnergyBreakdown> {
        let feats = fx.features(state)?;
        let per_edge = self.edge_energies(&feats, a)?;
        let potential = per_edge.iter().map(|e| e.0).sum();
        let dissipation = per_edge.iter().map(|e| e.1).sum();
        Ok(EnergyBreakdown {
            potential,
            dissipation,
            per_edge,
        })
    }

    /// Exact gradient of the total energy with respect to the current
    /// vertex positions, by reverse-mode chaining through edge lengths,
    /// midpoint speeds, face areas, vertex normals, and the relative-angle
    /// decomposition.
    pub fn energy_position_gradient(
        &self,
        fx: &FeatureExtractor,
        state: &DeformedState,
        a: &MaterialAttr,
    ) -> Result<Vec<Vector3<f64>>> {
        let topo = &fx.mesh.topology;
        let pos = &state.positions;
        let n_vertices = pos.len();
        let raw_sums = vertex_normal_sums(pos, topo);
        let mut unit_normals = Vec::with_capacity(n_vertices);
        for (v, s) in raw_sums.iter().enumerate() {
            let n = s.norm();
            if n < DEGENERATE_AREA_TOL {
                return Err(Error::ZeroNormal(v));
            }
            unit_normals.push(s / n);
        }
        let all: Vec<usize> = (0..fx.num_edges()).collect();
        let feats =
            fx.features_for_edges(pos, &state.prev_positions, state.h, &unit_normals, &all)?;

        // Batched forward + input-backward for both units.
        let xp = self.potential_batch(&feats, a);
        let (_, cache_p) = self.potential_net.forward_batch(xp.view())?;
        let dyp = Array1::from_elem(feats.len(), self.norm.potential_scale);
        let (dxp, _) = self.potential_net.backward_batch(&cache_p, dyp.view());

        let xd = self.dissipation_batch(&feats, a);
        let (zd, cache_d) = self.dissipation_net.forward_batch(xd.view())?;
        let d0 = self.dissipation_anchor(a)?;
        let dyd = Array1::from_shape_fn(feats.len(), |e| {
            feats[e].gamma * smooth_abs_derivative(zd[e] - d0) * self.norm.dissipation_scale
        });
        let (dxd, _) = self.dissipation_net.backward_batch(&cache_d, dyd.view());

        let mut grad = vec![Vector3::zeros(); n_vertices];
        // Adjoint on unit vertex normals, accumulated across edges.
        let mut g_normals = vec![Vector3::zeros(); n_vertices];

        for (e, &(i, j)) in topo.edges.iter().enumerate() {
            let d = pos[j] - pos[i];
            let l = d.norm();
            let e_dir = d / l;

            // Edge length.
            let g_dl = dxp[(e, 0)] / self.norm.dl_scale;
            grad[j] += g_dl * e_dir;
            grad[i] -= g_dl * e_dir;

            // Relative angles.
            let up = [
                dxp[(e, 1)] / self.norm.dtheta_scale[0],
                dxp[(e, 2)] / self.norm.dtheta_scale[1],
                dxp[(e, 3)] / self.norm.dtheta_scale[2],
                dxp[(e, 4)] / self.norm.dtheta_scale[3],
            ];
            let (g_ni, g_nj, g_e) =
                relative_angles_vjp(&unit_normals[i], &unit_normals[j], &e_dir, &up);
            g_normals[i] += g_ni;
            g_normals[j] += g_nj;
            let g_d = (g_e - e_dir * e_dir.dot(&g_e)) / l;
            grad[j] += g_d;
            grad[i] -= g_d;

            // Midpoint speed.
            let mid = ((pos[i] - state.prev_positions[i])
                + (pos[j] - state.prev_positions[j]))
                / 2.0;
            let mid_norm = mid.norm();
            if mid_norm > 1e-15 {
                let g_speed = dxd[(e, 0)] / self.norm.speed_scale;
                let gv = g_speed * mid / (mid_norm * 2.0 * state.h);
                grad[i] += gv;
                grad[j] += gv;
            }

            // Incident-area factor of the dissipation term.
            let unit_d = smooth_abs(zd[e] - d0) * self.norm.dissipation_scale;
            if unit_d != 0.0 {
                for &f in &topo.edge_faces[e] {
                    let [a0, b0, c0] = topo.faces[f];
                    let nr = (pos[b0] - pos[a0]).cross(&(pos[c0] - pos[a0]));
                    let nn = nr.norm();
                    if nn < DEGENERATE_AREA_TOL {
                        continue;
                    }
                    let nh = nr / nn;
                    grad[a0] += 0.5 * unit_d * nh.cross(&(pos[c0] - pos[b0]));
                    grad[b0] += 0.5 * unit_d * nh.cross(&(pos[a0] - pos[c0]));
                    grad[c0] += 0.5 * unit_d * nh.cross(&(pos[b0] - pos[a0]));
                }
            }
        }

        // Normal adjoints back to positions: n_hat = normalize(sum of face
        // cross products), then each cross product back to its corners.
        for v in 0..n_vertices {
            let gn = g_normals[v];
            if gn == Vector3::zeros() {
                continue;
            }
            let nh = unit_normals[v];
            let w_m = (gn - nh * nh.dot(&gn)) / raw_sums[v].norm();
            for &f in &topo.vertex_faces[v] {
                let [a0, b0, c0] = topo.faces[f];
                let area2 = (pos[b0] - pos[a0]).cross(&(pos[c0] - pos[a0])).norm();
                if area2 < 2.0 * DEGENERATE_AREA_TOL {
                    continue; // near-degenerate face: contribution zeroed
                }
                grad[a0] += w_m.cross(&(pos[c0] - pos[b0]));
                grad[b0] += w_m.cross(&(pos[a0] - pos[c0]));
                grad[c0] += w_m.cross(&(pos[b0] - pos[a0]));
            }
        }
        Ok(grad)
    }

    /// Dense phi_p grid over a (dl, angle) sweep; the angle bends the
    /// normals in-plane (beta) with alpha held at zero.
    pub fn potential_sweep(
        &self,
        a: &MaterialAttr,
        dl_range: (f64, f64),
        angle_range: (f64, f64),
        resolution: usize,
    ) -> Result<SweepGrid> {
        let mut dls = Vec::with_capacity(resolution);
        let mut angles = Vec::with_capacity(resolution);
        for k in 0..resolution {
            let t = if resolution == 1 {
                0.5
            } else {
                k as f64 / (resolution - 1) as f64
            };
            dls.push(dl_range.0 + t * (dl_range.1 - dl_range.0));
            angles.push(angle_range.0 + t * (angle_range.1 - angle_range.0));
        }
        let mut values = vec![vec![0.0; resolution]; resolution];
        for (r, &ang) in angles.iter().enumerate() {
            let dtheta = [0.0, 0.0, ang.cos() - 1.0, ang.sin()];
            for (c, &dl) in dls.iter().enumerate() {
                values[r][c] = self.phi_p(dl, &dtheta, a)?;
            }
        }
        Ok(SweepGrid {
            dls,
            angles,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let (ph, pf) = self.potential_net.to_parts();
        let (dh, df) = self.dissipation_net.to_parts();
        let header = ModelHeader {
            format_version: MODEL_VERSION,
            feature_layout: FEATURE_LAYOUT.to_string(),
            residual_blocks: false,
            potential: ph,
            dissipation: dh,
            norm: self.norm.clone(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("header serialization: {e}")))?;
        let io = |e| Error::io(path.display().to_string(), e);
        w.write_all(MODEL_MAGIC).map_err(io)?;
        w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(hjson.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&hjson).map_err(io)?;
        for blob in [&pf, &df] {
            w.write_all(&(blob.len() as u64).to_le_bytes()).map_err(io)?;
            for v in blob {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&p, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io(&p, e))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                path: p,
                expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
            });
        }
        let version = read_u32(&mut r, &p)?;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                path: p,
                got: version,
                expected: MODEL_VERSION,
            });
        }
        let hlen = read_u64(&mut r, &p)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)
            .map_err(|e| truncated(&p, "header", e))?;
        let header: ModelHeader = serde_json::from_slice(&hbuf).map_err(|e| Error::TruncatedPayload {
            path: p.clone(),
            detail: format!("header parse: {e}"),
        })?;
        header.norm.validate()?;
        let pf = read_f64_block(&mut r, &p)?;
        let df = read_f64_block(&mut r, &p)?;
        Ok(Self {
            potential_net: Mlp::from_parts(&header.potential, &pf)?,
            dissipation_net: Mlp::from_parts(&header.dissipation, &df)?,
            norm: header.norm,
        })
    }
}

pub const FEATURE_LAYOUT: &str = "potential: dl, dtheta[4], attr[5]; dissipation: speed, attr[5]";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    feature_layout: String,
    /// Plain feed-forward blocks; no residual connections.
    residual_blocks: bool,
    potential: MlpHeader,
    dissipation: MlpHeader,
    norm: FeatureNorm,
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub dls: Vec<f64>,
    pub angles: Vec<f64>,
    /// values[angle_idx][dl_idx]
    pub values: Vec<Vec<f64>>,
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(path, "u32", e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| truncated(path, "u64", e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64_block(r: &mut impl Read, path: &str) -> Result<Vec<f64>> {
    let n = read_u64(r, path)? as usize;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| truncated(path, "f64 block", e))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn truncated(path: &str, what: &str, e: std::io::Error) -> Error {
    Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("{what}: {e}"),
    }
}
