//! Scenario files: schema, `--set` overrides and construction of the plant,
//! the designed core and the controller.

use std::path::Path;
use std::sync::Arc;

use asdinv_core::analysis::{bound_report, AssumptionConstants};
use asdinv_core::plants::{self, QuadrotorConfig, UncertainPlant};
use asdinv_core::{AntiWindup, ControllerSpec, GainSource, LinearCore, Matrix, Realization, SimConfig, Vector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Bundled scenario files, by name.
pub const BUNDLED: [(&str, &str); 7] = [
    ("siso", include_str!("../scenarios/siso.json")),
    ("f16", include_str!("../scenarios/f16.json")),
    ("quadrotor", include_str!("../scenarios/quadrotor.json")),
    ("quadrotor_payload", include_str!("../scenarios/quadrotor_payload.json")),
    ("synthetic", include_str!("../scenarios/synthetic.json")),
    ("deadzone", include_str!("../scenarios/deadzone.json")),
    ("delay_demo", include_str!("../scenarios/delay_demo.json")),
];

/// Short names accepted by `--set`.
const ALIASES: [(&str, &str); 4] = [
    ("epsilon", "epsilon"),
    ("J_scale", "plant.j_scale"),
    ("dt", "sim.dt"),
    ("t_final", "sim.t_final"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantSpec,
    pub design: DesignSpec,
    pub epsilon: EpsilonSpec,
    /// Symmetric input limit; absent means no saturation.
    #[serde(default)]
    pub saturation: Option<f64>,
    pub sim: SimSpec,
    #[serde(default)]
    pub realization: RealizationSpec,
    #[serde(default)]
    pub anti_windup: AntiWindupSpec,
    /// User-supplied constants; replaces whatever the plant knows.
    #[serde(default)]
    pub constants: Option<AssumptionConstants>,
    /// Norm level used for `time_to_threshold` in the metrics.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    1e-2
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Siso,
    F16 {
        #[serde(default)]
        f2_typo_fix: bool,
    },
    Quadrotor {
        #[serde(default = "one")]
        j_scale: f64,
        #[serde(default)]
        omega: Option<f64>,
        /// Per-channel inner gain; placed at {−15, −3, −1} when absent.
        #[serde(default)]
        channel_gain: Option<[f64; 3]>,
    },
    Synthetic {
        #[serde(default = "one")]
        g: f64,
        s: Vec<Vec<f64>>,
        #[serde(default)]
        d_amp: f64,
        #[serde(default = "one")]
        d_freq: f64,
        /// Base pair; a double integrator when absent.
        #[serde(default)]
        a0: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b: Option<Vec<Vec<f64>>>,
    },
    DeadZone {
        mu: f64,
        inner: Box<PlantSpec>,
    },
    Delay {
        tau: f64,
        inner: Box<PlantSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSpec {
    /// Closed-loop poles for Ackermann placement (single input only).
    Poles(Vec<f64>),
    /// Rows of the n×m gain.
    Matrix(Vec<Vec<f64>>),
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub gain: GainSpec,
    /// Eigenvalues of `A0 + BKᵀ` whose eigenvectors form `C`.
    pub selected: Vec<f64>,
    /// Lyapunov weight rows; identity when absent.
    #[serde(default)]
    pub m_weight: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSpec {
    Value(f64),
    /// A fraction of the admissible bound, which needs assumption constants.
    OfMax {
        fraction_of_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Value(f64),
    /// `dt = per_epsilon·ε`
    PerEpsilon {
        per_epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub dt: StepSpec,
    pub t_final: f64,
    pub x0: Vec<f64>,
    /// Unit of `x0`; degrees are converted to radians.
    #[serde(default)]
    pub x0_unit: AngleUnit,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleUnit {
    #[default]
    Rad,
    Deg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealizationSpec {
    #[default]
    Observer,
    PiClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntiWindupSpec {
    #[default]
    None,
    ConditionalIntegration,
}

/// Everything a command needs, built from a scenario.
pub struct Built {
    pub scenario: Scenario,
    pub plant: Box<dyn UncertainPlant>,
    pub core: Arc<LinearCore>,
    pub spec: ControllerSpec,
    pub sim: SimConfig,
    pub constants: Option<AssumptionConstants>,
}

impl std::fmt::Debug for Built {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Built")
            .field("scenario", &self.scenario.name)
            .field("plant", &self.plant.name())
            .field("epsilon", &self.spec.epsilon)
            .finish()
    }
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Reads a bundled scenario by name, or a JSON file by path.
pub fn load_text(name_or_path: &str) -> Result<String, CliError> {
    if let Some(text) = bundled(name_or_path) {
        return Ok(text.to_owned());
    }
    let path = Path::new(name_or_path);
    if path.is_file() {
        return std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())));
    }
    let known: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
    Err(CliError::Config(format!(
        "scenario `{name_or_path}` is neither a bundled name ({}) nor a readable file",
        known.join(", ")
    )))
}

/// Parses a scenario after applying `key=value` overrides.
pub fn parse(text: &str, overrides: &[String]) -> Result<Scenario, CliError> {
    let mut doc: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed scenario JSON: {e}")))?;
    for item in overrides {
        apply_override(&mut doc, item)?;
    }
    let scenario: Scenario = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(e.into_inner().to_string())
        } else {
            CliError::Config(format!("field `{path}`: {}", e.into_inner()))
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load(name_or_path: &str, overrides: &[String]) -> Result<Scenario, CliError> {
    parse(&load_text(name_or_path)?, overrides)
}

fn apply_override(doc: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let path = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is empty")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_owned()));
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_owned(), value);
                    return Ok(());
                }
                map.entry((*part).to_owned())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("field `{path}`: `{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("field `{path}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Config(format!(
                    "field `{path}`: `{part}` is inside a non-object value"
                )))
            }
        };
    }
    Ok(())
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(CliError::Config(format!("field `{field}`: matrix is empty")));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!(
            "field `{field}`: rows have different lengths"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("field `{field}`: entries must be finite")));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "field `{field}`: must be positive and finite, got {v}"
        )))
    }
}

impl Scenario {
    fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(CliError::Config(format!(
                "field `name`: `{}` is not a valid directory name",
                self.name
            )));
        }
        match self.epsilon {
            EpsilonSpec::Value(e) => positive("epsilon", e)?,
            EpsilonSpec::OfMax { fraction_of_max } => positive("epsilon.fraction_of_max", fraction_of_max)?,
        }
        if let Some(s) = self.saturation {
            positive("saturation", s)?;
        }
        match self.sim.dt {
            StepSpec::Value(dt) => positive("sim.dt", dt)?,
            StepSpec::PerEpsilon { per_epsilon } => positive("sim.dt.per_epsilon", per_epsilon)?,
        }
        positive("sim.t_final", self.sim.t_final)?;
        if self.sim.record_stride == 0 {
            return Err(CliError::Config("field `sim.record_stride`: must be at least 1".into()));
        }
        if self.sim.x0.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config("field `sim.x0`: entries must be finite".into()));
        }
        positive("threshold", self.threshold)?;
        if let Some(c) = &self.constants {
            c.validate()
                .map_err(|e| CliError::Config(format!("field `constants`: {e}")))?;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Built, CliError> {
        let plant = build_plant(&self.plant, "plant")?;
        let (n, m) = (plant.n(), plant.m());
        let gain = match &self.design.gain {
            GainSpec::Poles(p) => GainSource::Poles(p.clone()),
            GainSpec::Matrix(rows) => GainSource::Explicit(matrix("design.gain.matrix", rows)?),
            GainSpec::Zero => GainSource::Explicit(Matrix::zeros(n, m)),
        };
        let m_weight = self
            .design
            .m_weight
            .as_deref()
            .map(|rows| matrix("design.m_weight", rows))
            .transpose()?;
        let core = asdinv_core::build_core(plant.a0(), plant.b(), &gain, &self.design.selected, m_weight)
            .map_err(|e| CliError::Config(format!("field `design`: {e}")))?;
        let core = Arc::new(core);
        let constants = self.constants.or_else(|| plant.constants());

        let epsilon = match self.epsilon {
            EpsilonSpec::Value(e) => e,
            EpsilonSpec::OfMax { fraction_of_max } => {
                let c = constants.ok_or_else(|| {
                    CliError::MissingConstants(format!(
                        "`epsilon.fraction_of_max` needs assumption constants, but plant `{}` has none",
                        plant.name()
                    ))
                })?;
                let rep =
                    bound_report(&core, &c, None).map_err(|e| CliError::Config(format!("field `constants`: {e}")))?;
                if !rep.epsilon_max.is_finite() {
                    return Err(CliError::Config(
                        "field `epsilon.fraction_of_max`: the admissible bound is unlimited".into(),
                    ));
                }
                fraction_of_max * rep.epsilon_max
            }
        };

        let mut spec = ControllerSpec::new(Arc::clone(&core), epsilon)
            .map_err(|e| CliError::Config(format!("field `epsilon`: {e}")))?
            .with_realization(match self.realization {
                RealizationSpec::Observer => Realization::Observer,
                RealizationSpec::PiClosed => Realization::PiClosed,
            })
            .with_anti_windup(match self.anti_windup {
                AntiWindupSpec::None => AntiWindup::None,
                AntiWindupSpec::ConditionalIntegration => AntiWindup::ConditionalIntegration,
            });
        if let Some(limit) = self.saturation {
            spec = spec
                .with_symmetric_limit(limit)
                .map_err(|e| CliError::Config(format!("field `saturation`: {e}")))?;
        }

        if self.sim.x0.len() != n {
            return Err(CliError::Config(format!(
                "field `sim.x0`: plant `{}` has {n} states, got {} values",
                plant.name(),
                self.sim.x0.len()
            )));
        }
        let x0 = Vector::from_iterator(
            n,
            self.sim.x0.iter().map(|&v| match self.sim.x0_unit {
                AngleUnit::Rad => v,
                AngleUnit::Deg => v.to_radians(),
            }),
        );
        let dt = match self.sim.dt {
            StepSpec::Value(dt) => dt,
            StepSpec::PerEpsilon { per_epsilon } => per_epsilon * epsilon,
        };
        let sim = SimConfig::new(dt, self.sim.t_final, x0).with_stride(self.sim.record_stride);
        sim.validate()
            .map_err(|e| CliError::Config(format!("field `sim`: {e}")))?;

        Ok(Built {
            scenario: self.clone(),
            plant,
            core,
            spec,
            sim,
            constants,
        })
    }
}

fn build_plant(spec: &PlantSpec, field: &str) -> Result<Box<dyn UncertainPlant>, CliError> {
    let bad = |e: plants::PlantError| CliError::Config(format!("field `{field}`: {e}"));
    Ok(match spec {
        PlantSpec::Siso => Box::new(plants::benchmark_siso()),
        PlantSpec::F16 { f2_typo_fix } => Box::new(plants::f16_rollyaw().with_f2_typo_fix(*f2_typo_fix)),
        PlantSpec::Quadrotor {
            j_scale,
            omega,
            channel_gain,
        } => {
            positive(&format!("{field}.j_scale"), *j_scale)?;
            let mut cfg = QuadrotorConfig::nominal();
            if let Some(w) = omega {
                positive(&format!("{field}.omega"), *w)?;
                let k0 = plants::placed_channel_gain(*w).map_err(|e| bad(e.into()))?;
                cfg.omega = *w;
                cfg = cfg.with_channel_gain(&[k0[0], k0[1], k0[2]]);
            }
            if let Some(k0) = channel_gain {
                cfg = cfg.with_channel_gain(k0);
            }
            Box::new(plants::quadrotor_attitude(cfg.with_inertia_scale(*j_scale)).map_err(bad)?)
        }
        PlantSpec::Synthetic {
            g,
            s,
            d_amp,
            d_freq,
            a0,
            b,
        } => {
            let s = matrix(&format!("{field}.s"), s)?;
            let (a0, b) = match (a0, b) {
                (None, None) => plants::double_integrator(),
                (Some(a0), Some(b)) => (matrix(&format!("{field}.a0"), a0)?, matrix(&format!("{field}.b"), b)?),
                _ => {
                    return Err(CliError::Config(format!(
                        "field `{field}`: `a0` and `b` must be given together"
                    )))
                }
            };
            Box::new(plants::SyntheticPlant::with_base(a0, b, *g, s, *d_amp, *d_freq).map_err(bad)?)
        }
        PlantSpec::DeadZone { mu, inner } => {
            let inner = build_plant(inner, &format!("{field}.inner"))?;
            Box::new(plants::dead_zone(inner, *mu).map_err(bad)?)
        }
        PlantSpec::Delay { tau, inner } => {
            let inner = build_plant(inner, &format!("{field}.inner"))?;
            Box::new(plants::input_delay(inner, *tau).map_err(bad)?)
        }
    })
}
