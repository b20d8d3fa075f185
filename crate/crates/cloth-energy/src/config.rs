//! Structured run configuration: material presets, solver, data
//! generation, training, and sweep settings, loadable from TOML with
//! per-field defaults.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticMaterial;
use crate::dynamics::StepConfig;
use crate::error::{Error, Result};
use crate::model::MaterialAttr;

/// Built-in material presets. Bending stiffness orders leather/denim
/// above cotton/silk; all values are defaults, not measurements.
pub fn builtin_materials() -> BTreeMap<String, AnalyticMaterial> {
    let mut m = BTreeMap::new();
    m.insert(
        "silk".to_string(),
        AnalyticMaterial {
            mu: 15.0,
            lambda: 10.0,
            bend: 5.0e-7,
            drag: 5.0e-4,
            density: 0.08,
        },
    );
    m.insert(
        "cotton".to_string(),
        AnalyticMaterial {
            mu: 50.0,
            lambda: 35.0,
            bend: 2.0e-6,
            drag: 1.0e-3,
            density: 0.15,
        },
    );
    m.insert(
        "denim".to_string(),
        AnalyticMaterial {
            mu: 250.0,
            lambda: 180.0,
            bend: 1.0e-5,
            drag: 2.0e-3,
            density: 0.40,
        },
    );
    m.insert(
        "leather".to_string(),
        AnalyticMaterial {
            mu: 600.0,
            lambda: 450.0,
            bend: 8.0e-5,
            drag: 4.0e-3,
            density: 0.60,
        },
    );
    m
}

/// Min-max normalize the five material constants across a preset table,
/// producing the attribute vector that conditions the energy units.
/// Deterministic: presets are iterated in name order.
pub fn material_attrs(
    materials: &BTreeMap<String, AnalyticMaterial>,
) -> BTreeMap<String, MaterialAttr> {
    let raw: Vec<(&String, [f64; 5])> = materials
        .iter()
        .map(|(n, m)| (n, [m.mu, m.lambda, m.bend, m.drag, m.density]))
        .collect();
    let mut lo = [f64::INFINITY; 5];
    let mut hi = [f64::NEG_INFINITY; 5];
    for (_, v) in &raw {
        for k in 0..5 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    raw.into_iter()
        .map(|(n, v)| {
            let mut a = [0.0; 5];
            for k in 0..5 {
                let span = hi[k] - lo[k];
                a[k] = if span > 0.0 { (v[k] - lo[k]) / span } else { 0.5 };
            }
            (n.clone(), MaterialAttr(a))
        })
        .collect()
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub collision_epsilon: f64,
    pub collision_stiffness: f64,
    pub proximity_radius: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub history: usize,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    /// A rollout with more than this fraction of non-converged steps is
    /// flagged unreliable.
    pub max_nonconverged_fraction: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = StepConfig::default();
        Self {
            collision_epsilon: s.collision_epsilon,
            collision_stiffness: s.collision_stiffness,
            proximity_radius: s.proximity_radius,
            tolerance: s.tolerance,
            // The bare StepConfig default (200) is too small for stiff
            // sheets; runs driven by a config file get a budget that
            // actually converges.
            max_iterations: 3000,
            history: s.history,
            gravity: default_gravity(),
            max_nonconverged_fraction: 0.1,
        }
    }
}

impl SolverSection {
    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            collision_epsilon: self.collision_epsilon,
            collision_stiffness: self.collision_stiffness,
            proximity_radius: self.proximity_radius,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            history: self.history,
            gravity: Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenSection {
    pub rows: usize,
    pub cols: usize,
    /// Physical side length of the square sheet, m.
    pub size: f64,
    pub frames: usize,
    /// Time step, s.
    pub h: f64,
    /// Maximum initial tilt about the pinned top edge, degrees.
    pub max_tilt_deg: f64,
    /// Initial per-vertex jitter as a fraction of mean rest edge length.
    pub jitter_fraction: f64,
    /// Cap on random initial vertex speed, m/s.
    pub max_speed: f64,
    pub train_sequences: usize,
    pub test_sequences: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            rows: 15,
            cols: 15,
            size: 0.3,
            frames: 30,
            h: 1.0 / 30.0,
            max_tilt_deg: 60.0,
            jitter_fraction: 0.01,
            max_speed: 0.5,
            train_sequences: 96,
            test_sequences: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the contrastive term.
    pub lambda_con: f64,
    /// Number of noise scales in the ladder sigma/10 .. sigma.
    pub noise_scales: usize,
    pub disturbance_fraction: f64,
    pub min_hops: usize,
    /// Noise base sigma as a fraction of mean rest edge length.
    pub sigma_fraction: f64,
    /// Hidden layer widths for both energy-unit networks.
    pub hidden: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 2.0e-4,
            lr_decay: 0.5,
            lr_decay_every: 4,
            batch_size: 4,
            epochs: 6,
            lambda_con: 1.0e6,
            noise_scales: 10,
            disturbance_fraction: 0.1,
            min_hops: 4,
            sigma_fraction: 0.1,
            hidden: vec![128; 7],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Edge-length offset range, m.
    pub dl_min: f64,
    pub dl_max: f64,
    /// Bend angle range, radians.
    pub angle_min: f64,
    pub angle_max: f64,
    pub resolution: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            dl_min: -0.005,
            dl_max: 0.005,
            angle_min: -std::f64::consts::FRAC_PI_2,
            angle_max: std::f64::consts::FRAC_PI_2,
            resolution: 41,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    #[serde(default = "builtin_materials")]
    pub materials: BTreeMap<String, AnalyticMaterial>,
    pub solver: SolverSection,
    pub datagen: DatagenSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            materials: builtin_materials(),
            solver: SolverSection::default(),
            datagen: DatagenSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: SimConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.materials.is_empty() {
            return Err(Error::Config("at least one material preset required".into()));
        }
        for (name, m) in &self.materials {
            m.validate()
                .map_err(|e| Error::Config(format!("material '{name}': {e}")))?;
        }
        self.solver.step_config().validate()?;
        let d = &self.datagen;
        if d.rows < 2 || d.cols < 2 {
            return Err(Error::Config("grid must be at least 2x2".into()));
        }
        if d.frames < 3 {
            return Err(Error::Config(
                "sequences need at least 3 frames for training triplets".into(),
            ));
        }
        if !(d.h.is_finite() && d.h > 0.0 && d.size.is_finite() && d.size > 0.0) {
            return Err(Error::Config("h and size must be finite and positive".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.noise_scales == 0 {
            return Err(Error::Config(
                "batch_size and noise_scales must be positive".into(),
            ));
        }
        let positives = [
            ("learning_rate", t.learning_rate),
            ("lr_decay", t.lr_decay),
            ("lambda_con", t.lambda_con + 1.0), // lambda may be 0
            ("disturbance_fraction", t.disturbance_fraction),
            ("sigma_fraction", t.sigma_fraction),
        ];
        for (name, v) in positives {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be finite and positive")));
            }
        }
        if self.sweep.resolution < 2 {
            return Err(Error::Config("sweep resolution must be at least 2".into()));
        }
        Ok(())
    }

    /// Config hash embedded in result files for reproducibility.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        // FNV-1a, enough for an identity stamp.
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_presets_validate_and_order_bending() {
        let m = builtin_materials();
        assert_eq!(m.len(), 4);
        for mat in m.values() {
            mat.validate().unwrap();
        }
        assert!(m["leather"].bend > m["silk"].bend);
        assert!(m["denim"].bend > m["cotton"].bend);
    }

    #[test]
    fn attrs_are_min_max_normalized() {
        let m = builtin_materials();
        let attrs = material_attrs(&m);
        for a in attrs.values() {
            a.validate().unwrap();
        }
        // Each column attains 0 and 1 somewhere.
        for k in 0..5 {
            let col: Vec<f64> = attrs.values().map(|a| a.0[k]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
        }
        // Softest and stiffest in shear sit at the column extremes.
        assert_eq!(attrs["silk"].0[0], 0.0);
        assert_eq!(attrs["leather"].0[0], 1.0);
    }

    #[test]
    fn default_config_is_valid_and_roundtrips_toml() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: SimConfig = toml::from_str(
            "[train]\nepochs = 2\n\n[datagen]\nrows = 8\ncols = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.datagen.rows, 8);
        assert_eq!(cfg.materials.len(), 4);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = SimConfig::default();
        cfg.datagen.frames = 2;
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));
        let mut cfg = SimConfig::default();
        cfg.solver.tolerance = -1.0;
        assert!(cfg.validate().is_err());
    }
}
