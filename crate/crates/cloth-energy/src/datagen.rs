//! Synthetic training data: pinned-sheet meshes, trajectory synthesis
//! with the analytic reference material, and all persistence formats
//! (binary trajectories, OBJ export, dataset manifests).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticEnergy, AnalyticMaterial};
use crate::config::{material_attrs, DatagenSection, SimConfig};
use crate::dynamics::{rollout, EnergySource, StepConfig};
use crate::error::{Error, Result};
use crate::mesh::{ClothMesh, DeformedState};
use crate::model::MaterialAttr;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"EUTR";
pub const TRAJECTORY_VERSION: u32 = 1;

/// An observed (or simulated) sheet trajectory with optional recorded
/// ground-truth energies.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub mesh: ClothMesh,
    /// Per-frame vertex positions, m. At least two frames.
    pub frames: Vec<Vec<Vector3<f64>>>,
    /// Time step, s.
    pub h: f64,
    pub material_name: String,
    pub attrs: MaterialAttr,
    /// Per-frame elastic potential (membrane + bending), J.
    pub v_p: Option<Vec<f64>>,
    /// Per-frame dissipated energy over the step into that frame, J;
    /// entry 0 is zero by convention.
    pub v_d: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mesh.num_vertices();
        if self.frames.len() < 2 {
            return Err(Error::Config("trajectory needs at least 2 frames".into()));
        }
        for f in &self.frames {
            if f.len() != n {
                return Err(Error::DimensionMismatch {
                    got: f.len(),
                    expected: n,
                });
            }
        }
        for &p in &self.mesh.pinned {
            for f in &self.frames[1..] {
                if (f[p] - self.frames[0][p]).norm() > 1e-12 {
                    return Err(Error::Config(format!(
                        "pinned vertex {p} moves across frames"
                    )));
                }
            }
        }
        for arr in [&self.v_p, &self.v_d].into_iter().flatten() {
            if arr.len() != self.frames.len() {
                return Err(Error::DimensionMismatch {
                    got: arr.len(),
                    expected: self.frames.len(),
                });
            }
        }
        Ok(())
    }

    /// State (positions at `t`, positions at `t-1`) for t >= 1.
    pub fn state_at(&self, t: usize) -> Result<DeformedState> {
        DeformedState::new(self.frames[t].clone(), self.frames[t - 1].clone(), self.h)
    }
}

/// Regular triangulated sheet hanging in the x/z plane, pinned at the
/// two maximal-height corners, with uniform masses from density x area.
pub fn make_pinned_grid(rows: usize, cols: usize, size: f64, density: f64) -> Result<ClothMesh> {
    if rows < 2 || cols < 2 {
        return Err(Error::Config("grid must be at least 2x2".into()));
    }
    if !(size.is_finite() && size > 0.0 && density.is_finite() && density > 0.0) {
        return Err(Error::Config("size and density must be finite and positive".into()));
    }
    let dx = size / (cols - 1) as f64;
    let dz = size / (rows - 1) as f64;
    let mut pos = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            pos.push(Vector3::new(c as f64 * dx, 0.0, -(r as f64) * dz));
        }
    }
    let (n, faces) = grid_faces(rows, cols);
    // Uniform mass from total sheet mass; area from the rest mesh.
    let area: f64 = faces
        .iter()
        .map(|&[a, b, c]| crate::mesh::triangle_area(&pos[a], &pos[b], &pos[c]))
        .sum();
    let mass = density * area / n as f64;
    ClothMesh::new(pos, faces, vec![mass; n], vec![0, cols - 1])
}

/// Two triangles per grid cell, consistent winding.
pub fn grid_faces(rows: usize, cols: usize) -> (usize, Vec<[usize; 3]>) {
    let mut faces = Vec::new();
    let idx = |r: usize, c: usize| r * cols + c;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let (a, b, d, e) = (idx(r, c), idx(r, c + 1), idx(r + 1, c), idx(r + 1, c + 1));
            faces.push([a, b, d]);
            faces.push([b, e, d]);
        }
    }
    (rows * cols, faces)
}

/// Synthesize one trajectory: tilt the sheet about the pinned top edge,
/// jitter, give the free vertices a random initial velocity, then roll
/// out with the analytic material. Rejects non-converged runs and draws
/// a fresh seed, up to a retry budget.
pub fn synthesize_sequence(
    mesh: &ClothMesh,
    material: &AnalyticMaterial,
    gen: &DatagenSection,
    step_cfg: &StepConfig,
    n_frames: usize,
    seed: u64,
) -> Result<(Vec<Vec<Vector3<f64>>>, Vec<f64>, Vec<f64>)> {
    if n_frames < 3 {
        return Err(Error::Config("sequences need at least 3 frames".into()));
    }
    let energy = AnalyticEnergy::new(mesh)?;
    let source = EnergySource::Analytic {
        energy: &energy,
        material,
    };
    let mean_edge = mesh.mean_rest_edge_length();
    const ATTEMPTS: u64 = 10;
    let mut last_err = None;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9e3779b97f4a7c15)));
        // Frame 0: rigid tilt about the axis through the two pins (the
        // top edge lies on the x axis), plus small per-vertex jitter.
        let tilt = rng.gen_range(-1.0..1.0) * gen.max_tilt_deg.to_radians();
        let (s, c) = tilt.sin_cos();
        let jit = gen.jitter_fraction * mean_edge;
        let mut frame0: Vec<Vector3<f64>> = mesh
            .rest_positions
            .iter()
            .map(|p| Vector3::new(p.x, c * p.y - s * p.z, s * p.y + c * p.z))
            .collect();
        for (v, p) in frame0.iter_mut().enumerate() {
            if !mesh.is_pinned(v) && jit > 0.0 {
                *p += Vector3::new(
                    rng.gen_range(-jit..jit),
                    rng.gen_range(-jit..jit),
                    rng.gen_range(-jit..jit),
                );
            }
        }
        // Frame 1 encodes a random spatially uniform initial velocity,
        // capped in speed and shared by every free vertex.
        let mut frame1 = frame0.clone();
        if gen.max_speed > 0.0 {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = dir.norm();
            if n > 1e-12 {
                let shift = gen.h * rng.gen_range(0.0..gen.max_speed) * dir / n;
                for (v, p) in frame1.iter_mut().enumerate() {
                    if !mesh.is_pinned(v) {
                        *p += shift;
                    }
                }
            }
        }
        let state = DeformedState::new(frame1.clone(), frame0.clone(), gen.h)?;
        match rollout(mesh, &state, &source, &[], n_frames - 2, |_| None, None, step_cfg) {
            Ok(roll) if roll.reports.iter().all(|r| r.converged) => {
                let mut frames = vec![frame0, frame1];
                frames.extend(roll.frames);
                // Record ground-truth energies per frame.
                let mut v_p = Vec::with_capacity(n_frames);
                let mut v_d = Vec::with_capacity(n_frames);
                for (t, f) in frames.iter().enumerate() {
                    let (e_m, _) = energy.stvk_membrane(f, material.mu, material.lambda);
                    let (e_b, _) = energy.dihedral_bending(f, material.bend);
                    v_p.push(e_m + e_b);
                    v_d.push(if t == 0 {
                        0.0
                    } else {
                        energy
                            .drag_dissipation(f, &frames[t - 1], gen.h, material.drag)
                            .0
                    });
                }
                return Ok((frames, v_p, v_d));
            }
            Ok(roll) => {
                let bad = roll.reports.iter().filter(|r| !r.converged).count();
                last_err = Some(Error::NonConverged(format!(
                    "seed {seed} attempt {attempt}: {bad}/{} steps exceeded the iteration budget",
                    roll.reports.len()
                )));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::NonConverged("no attempt produced a converged sequence".into())
    }))
}

/// One dataset entry: a trajectory on disk with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub material: String,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_digest: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == name).collect()
    }
}

/// Generate the full train/test dataset described by the config,
/// cycling materials round-robin across sequences. Deterministic in
/// (config, seed).
pub fn generate_dataset(cfg: &SimConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let gen = &cfg.datagen;
    let step_cfg = cfg.solver.step_config();
    let attrs = material_attrs(&cfg.materials);
    let names: Vec<&String> = cfg.materials.keys().collect();
    let total = gen.train_sequences + gen.test_sequences;
    let mut entries = Vec::with_capacity(total);
    for k in 0..total {
        let name = names[k % names.len()];
        let material = &cfg.materials[name];
        let mesh = make_pinned_grid(gen.rows, gen.cols, gen.size, material.density)?;
        let seq_seed = seed.wrapping_add(1 + k as u64);
        let (frames, v_p, v_d) =
            synthesize_sequence(&mesh, material, gen, &step_cfg, gen.frames, seq_seed)?;
        let traj = Trajectory {
            mesh,
            frames,
            h: gen.h,
            material_name: name.clone(),
            attrs: attrs[name],
            v_p: Some(v_p),
            v_d: Some(v_d),
        };
        let split = if k < gen.train_sequences { "train" } else { "test" };
        let file = format!("seq_{k:04}_{name}_{split}.eutr");
        write_trajectory(&out_dir.join(&file), &traj)?;
        entries.push(ManifestEntry {
            file,
            material: name.clone(),
            seed: seq_seed,
            split: split.to_string(),
        });
    }
    let manifest = DatasetManifest {
        config_digest: cfg.digest(),
        seed,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load every trajectory of one manifest split.
pub fn load_split(manifest: &DatasetManifest, dir: &Path, split: &str) -> Result<Vec<Trajectory>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| read_trajectory(&dir.join(&e.file)))
        .collect()
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&p, e);
    let nv = traj.mesh.num_vertices() as u32;
    let nf = traj.frames.len() as u32;
    w.write_all(TRAJECTORY_MAGIC).map_err(io)?;
    w.write_all(&TRAJECTORY_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&nv.to_le_bytes()).map_err(io)?;
    w.write_all(&nf.to_le_bytes()).map_err(io)?;
    w.write_all(&traj.h.to_le_bytes()).map_err(io)?;
    let name = traj.material_name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(name).map_err(io)?;
    for a in traj.attrs.0 {
        w.write_all(&a.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(traj.mesh.pinned.len() as u32).to_le_bytes())
        .map_err(io)?;
    for &pin in &traj.mesh.pinned {
        w.write_all(&(pin as u32).to_le_bytes()).map_err(io)?;
    }
    // Mesh block: faces, rest positions, masses.
    w.write_all(&(traj.mesh.topology.faces.len() as u32).to_le_bytes())
        .map_err(io)?;
    for f in &traj.mesh.topology.faces {
        for &v in f {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
        }
    }
    for pnt in &traj.mesh.rest_positions {
        for k in 0..3 {
            w.write_all(&pnt[k].to_le_bytes()).map_err(io)?;
        }
    }
    for &m in &traj.mesh.masses {
        w.write_all(&m.to_le_bytes()).map_err(io)?;
    }
    // Frames.
    for frame in &traj.frames {
        for pnt in frame {
            for k in 0..3 {
                w.write_all(&pnt[k].to_le_bytes()).map_err(io)?;
            }
        }
    }
    // Optional recorded energies.
    let has = traj.v_p.is_some() && traj.v_d.is_some();
    w.write_all(&[has as u8]).map_err(io)?;
    if has {
        for arr in [traj.v_p.as_ref().unwrap(), traj.v_d.as_ref().unwrap()] {
            for &v in arr {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::BadMagic {
            path: p,
            expected: String::from_utf8_lossy(TRAJECTORY_MAGIC).into_owned(),
        });
    }
    let version = read_u32(&mut r, &p)?;
    if version != TRAJECTORY_VERSION {
        return Err(Error::VersionMismatch {
            path: p,
            got: version,
            expected: TRAJECTORY_VERSION,
        });
    }
    let nv = read_u32(&mut r, &p)? as usize;
    let nf = read_u32(&mut r, &p)? as usize;
    let h = read_f64(&mut r, &p)?;
    let name_len = read_u32(&mut r, &p)? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)
        .map_err(|e| truncated(&p, "material name", e))?;
    let material_name = String::from_utf8(name_buf).map_err(|e| Error::TruncatedPayload {
        path: p.clone(),
        detail: format!("material name not UTF-8: {e}"),
    })?;
    let mut attrs = [0.0; 5];
    for a in &mut attrs {
        *a = read_f64(&mut r, &p)?;
    }
    let n_pins = read_u32(&mut r, &p)? as usize;
    let mut pinned = Vec::with_capacity(n_pins);
    for _ in 0..n_pins {
        pinned.push(read_u32(&mut r, &p)? as usize);
    }
    let n_faces = read_u32(&mut r, &p)? as usize;
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        faces.push([
            read_u32(&mut r, &p)? as usize,
            read_u32(&mut r, &p)? as usize,
            read_u32(&mut r, &p)? as usize,
        ]);
    }
    let read_points = |r: &mut BufReader<File>, p: &str| -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::with_capacity(nv);
        for _ in 0..nv {
            out.push(Vector3::new(
                read_f64(r, p)?,
                read_f64(r, p)?,
                read_f64(r, p)?,
            ));
        }
        Ok(out)
    };
    let rest = read_points(&mut r, &p)?;
    let mut masses = Vec::with_capacity(nv);
    for _ in 0..nv {
        masses.push(read_f64(&mut r, &p)?);
    }
    let mesh = ClothMesh::new(rest, faces, masses, pinned)?;
    let mut frames = Vec::with_capacity(nf);
    for _ in 0..nf {
        frames.push(read_points(&mut r, &p)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|e| truncated(&p, "energy presence flag", e))?;
    let (v_p, v_d) = if flag[0] == 1 {
        let mut read_arr = || -> Result<Vec<f64>> {
            (0..nf).map(|_| read_f64(&mut r, &p)).collect()
        };
        (Some(read_arr()?), Some(read_arr()?))
    } else {
        (None, None)
    };
    let traj = Trajectory {
        mesh,
        frames,
        h,
        material_name,
        attrs: MaterialAttr(attrs),
        v_p,
        v_d,
    };
    traj.validate()?;
    Ok(traj)
}

/// One OBJ file per frame: `prefix_XXXX.obj` with `v x y z` and 1-based
/// `f a b c` lines. Returns the written paths.
pub fn export_obj(path_prefix: &Path, traj: &Trajectory) -> Result<Vec<PathBuf>> {
    traj.validate()?;
    let mut written = Vec::with_capacity(traj.frames.len());
    for (t, frame) in traj.frames.iter().enumerate() {
        let path = PathBuf::from(format!("{}_{t:04}.obj", path_prefix.display()));
        let p = path.display().to_string();
        let file = File::create(&path).map_err(|e| Error::io(&p, e))?;
        let mut w = BufWriter::new(file);
        for v in frame {
            // Default float formatting round-trips exactly.
            writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(|e| Error::io(&p, e))?;
        }
        for f in &traj.mesh.topology.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)
                .map_err(|e| Error::io(&p, e))?;
        }
        written.push(path);
    }
    Ok(written)
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(path, "u32", e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| truncated(path, "f64", e))?;
    Ok(f64::from_le_bytes(b))
}

fn truncated(path: &str, what: &str, e: std::io::Error) -> Error {
    Error::TruncatedPayload {
        path: path.to_string(),
        detail: format!("{what}: {e}"),
    }
}
