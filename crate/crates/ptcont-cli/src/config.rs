//! Experiment configuration: a JSON file merged with command-line flags,
//! flags winning. The resolved form is fully populated, serializes
//! deterministically (sorted keys), and is what the provenance file records.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ptcont::model::{ModelDef, Perturbation, PerturbationKind};

use crate::CliError;

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub perturbation: PerturbationSection,
    pub phase: PhaseSection,
    pub numerics: NumericsSection,
    pub outputs: OutputSection,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: Option<String>,
    /// Overrides for named model parameters, e.g. {"a": 0.25}.
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSection {
    pub direction: Option<Vec<f64>>,
    pub amplitude: Option<f64>,
    /// Upper end of an amplitude range (sweep command).
    pub amplitude_max: Option<f64>,
    pub pulse: bool,
    /// Pulse duration. Values not below the orbit period are read as
    /// milliseconds — no physical pulse lasts a whole cycle.
    pub dt: Option<f64>,
    /// Applied-current shorthand for the sinoatrial model: drives the
    /// voltage component with |I_app|/C_m.
    pub iapp: Option<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    /// Fixed kick phase for amplitude sweeps.
    pub theta: Option<f64>,
    /// How many evenly spaced phases the isochron command traces.
    pub phases: Option<usize>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    pub ntst: Option<usize>,
    pub ncol: Option<usize>,
    pub tol: Option<f64>,
    pub eta_max: Option<f64>,
    pub k_max: Option<usize>,
    pub ds_max: Option<f64>,
    /// Oracle sample budget (diff mode subsamples the curve to this).
    pub samples: Option<usize>,
    pub prominence: Option<f64>,
    /// Isochron arclength budget.
    pub budget: Option<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output path prefix; files are <prefix>.csv, <prefix>.json, ….
    pub prefix: Option<String>,
    pub gnuplot: bool,
    /// Also write the curve re-parameterized by normalized arclength.
    pub arclength: bool,
    /// Periodic-orbit record file: loaded if present, else computed and
    /// saved there.
    pub record: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &PathBuf) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Build the model with parameter overrides applied.
    pub fn model(&self) -> Result<ModelDef, CliError> {
        let name = self
            .model
            .name
            .as_deref()
            .ok_or_else(|| CliError::Usage("no model given (--model or config)".into()))?;
        let mut m = ModelDef::by_name(name).map_err(|e| CliError::Usage(e.to_string()))?;
        for (k, v) in &self.model.params {
            m.set_param(k, *v)
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(m)
    }

    /// Assemble the perturbation once the orbit period is known (the pulse
    /// duration unit heuristic needs it).
    pub fn perturbation(&self, model: &ModelDef, period: f64) -> Result<Perturbation, CliError> {
        let p = &self.perturbation;
        let n = {
            use ptcont::model::VectorField;
            model.dim()
        };
        let (direction, amplitude) = match (p.iapp, &p.direction) {
            (Some(iapp), _) => {
                let c_m = match model {
                    ModelDef::Sinoatrial(m) => m.c_m,
                    _ => {
                        return Err(CliError::Usage(
                            "--Iapp only applies to the sinoatrial model".into(),
                        ))
                    }
                };
                let mut d = vec![0.0; n];
                d[0] = 1.0;
                (d, -iapp / c_m)
            }
            (None, Some(d)) => {
                if d.len() != n {
                    return Err(CliError::Usage(format!(
                        "direction has {} components, model needs {n}",
                        d.len()
                    )));
                }
                let a = p
                    .amplitude
                    .or(p.amplitude_max)
                    .ok_or_else(|| CliError::Usage("no amplitude given (--A)".into()))?;
                (d.clone(), a)
            }
            (None, None) => {
                return Err(CliError::Usage(
                    "no perturbation direction given (--d or --Iapp)".into(),
                ))
            }
        };
        let kind = if p.pulse || p.dt.is_some() {
            let mut dt = p.dt.unwrap_or(0.02);
            if dt >= period {
                dt /= 1000.0; // milliseconds
            }
            if dt <= 0.0 || dt >= period {
                return Err(CliError::Usage(format!(
                    "pulse duration {dt} does not fit inside one period {period}"
                )));
            }
            PerturbationKind::Pulse { dt }
        } else {
            PerturbationKind::Instantaneous
        };
        Ok(Perturbation {
            direction,
            amplitude,
            kind,
        })
    }

    pub fn prefix(&self, default: &str) -> String {
        self.outputs
            .prefix
            .clone()
            .unwrap_or_else(|| default.to_string())
    }
}
