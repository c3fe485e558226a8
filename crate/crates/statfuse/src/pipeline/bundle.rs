//! Bundle persistence: a directory holding the manifest, the fusion spec,
//! serialized ensembles (versioned text), scaling parameters, and donor
//! pools (JSON, shortest round-trip floats — reload is prediction-exact).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::implicates::SimColumn;
use super::{
    BlockVarModels, ContinuousMachinery, FusionBundle, FusionSpec, FusionStep, StepModels,
    TrainedStep,
};
use crate::error::{Error, Result};
use crate::gbdt::{ensemble_from_str, ensemble_to_string, TreeEnsemble};
use crate::matchcore::{DonorPools, ScalingParams};
use crate::matrix::Matrix;
use crate::microdata::{load_schema, write_schema};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPEC_FILE: &str = "spec.toml";
pub const FUSION_SCHEMA_FILE: &str = "fusion_variables.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub variable: String,
    pub predictors: Vec<String>,
    pub deviance: f64,
    pub null_model: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub engine: String,
    #[serde(default)]
    pub entries: BTreeMap<String, String>,
    #[serde(default)]
    pub screens: Vec<ScreenRecord>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            version: "1".into(),
            engine: format!("statfuse {}", env!("CARGO_PKG_VERSION")),
            entries: BTreeMap::new(),
            screens: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StepFile {
    kind: String,
    variables: Vec<String>,
    screens: Vec<ScreenRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_floor: Option<f64>,
    #[serde(default)]
    has_conditional: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    block_var_kinds: Vec<String>,
    #[serde(default)]
    n_quantiles: usize,
}

pub fn save_bundle(bundle: &FusionBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = bundle.manifest.clone();
    manifest.screens = bundle
        .steps
        .iter()
        .flat_map(|s| s.screens.iter().cloned())
        .collect();
    write_toml(&dir.join(MANIFEST_FILE), &manifest)?;
    fs::write(dir.join(SPEC_FILE), bundle.spec.to_toml())
        .map_err(|e| Error::io(dir.join(SPEC_FILE), e))?;
    write_schema(&dir.join(FUSION_SCHEMA_FILE), &bundle.fusion_specs)?;

    for (ix, step) in bundle.steps.iter().enumerate() {
        let sdir = dir.join(format!("step_{ix:03}"));
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        save_step(step, &sdir)?;
    }
    Ok(())
}

fn save_step(step: &TrainedStep, dir: &Path) -> Result<()> {
    let variables: Vec<String> = step
        .step
        .variables()
        .into_iter()
        .map(str::to_string)
        .collect();
    match &step.models {
        StepModels::Categorical { model } => {
            write_text(&dir.join("class.gbm"), &ensemble_to_string(model))?;
            write_toml(
                &dir.join("step.json"),
                &StepFile {
                    kind: "categorical".into(),
                    variables,
                    screens: step.screens.clone(),
                    sigma_floor: None,
                    has_conditional: false,
                    block_var_kinds: Vec::new(),
                    n_quantiles: 0,
                },
            )
        }
        StepModels::Continuous(m) => {
            save_machinery(m, dir, "")?;
            write_toml(
                &dir.join("step.json"),
                &StepFile {
                    kind: "continuous".into(),
                    variables,
                    screens: step.screens.clone(),
                    sigma_floor: Some(m.sigma_floor),
                    has_conditional: false,
                    block_var_kinds: Vec::new(),
                    n_quantiles: m.quantile_models.len(),
                },
            )
        }
        StepModels::Semicontinuous { zero_model, cont } => {
            write_text(&dir.join("zero.gbm"), &ensemble_to_string(zero_model))?;
            if let Some(m) = cont {
                save_machinery(m, dir, "")?;
            }
            write_toml(
                &dir.join("step.json"),
                &StepFile {
                    kind: "semicontinuous".into(),
                    variables,
                    screens: step.screens.clone(),
                    sigma_floor: cont.as_ref().map(|m| m.sigma_floor),
                    has_conditional: cont.is_some(),
                    block_var_kinds: Vec::new(),
                    n_quantiles: cont.as_ref().map_or(0, |m| m.quantile_models.len()),
                },
            )
        }
        StepModels::Block {
            vars,
            scaling,
            donor_scaled,
            donor_records,
        } => {
            let mut kinds = Vec::with_capacity(vars.len());
            let mut n_quantiles = 0;
            for (v, bv) in vars.iter().enumerate() {
                match bv {
                    BlockVarModels::Categorical { model } => {
                        kinds.push("categorical".to_string());
                        write_text(
                            &dir.join(format!("var{v:02}_class.gbm")),
                            &ensemble_to_string(model),
                        )?;
                    }
                    BlockVarModels::Continuous {
                        mean_model,
                        quantile_models,
                    } => {
                        kinds.push("continuous".to_string());
                        n_quantiles = quantile_models.len();
                        write_text(
                            &dir.join(format!("var{v:02}_mean.gbm")),
                            &ensemble_to_string(mean_model),
                        )?;
                        for (q, qm) in quantile_models.iter().enumerate() {
                            write_text(
                                &dir.join(format!("var{v:02}_q{q:02}.gbm")),
                                &ensemble_to_string(qm),
                            )?;
                        }
                    }
                    BlockVarModels::Semicontinuous {
                        zero_model,
                        mean_model,
                        quantile_models,
                    } => {
                        kinds.push("semicontinuous".to_string());
                        n_quantiles = quantile_models.len();
                        write_text(
                            &dir.join(format!("var{v:02}_zero.gbm")),
                            &ensemble_to_string(zero_model),
                        )?;
                        write_text(
                            &dir.join(format!("var{v:02}_mean.gbm")),
                            &ensemble_to_string(mean_model),
                        )?;
                        for (q, qm) in quantile_models.iter().enumerate() {
                            write_text(
                                &dir.join(format!("var{v:02}_q{q:02}.gbm")),
                                &ensemble_to_string(qm),
                            )?;
                        }
                    }
                }
            }
            write_json(&dir.join("scaling.json"), scaling)?;
            write_json(&dir.join("donor_scaled.json"), donor_scaled)?;
            write_json(&dir.join("donor_records.json"), donor_records)?;
            write_toml(
                &dir.join("step.json"),
                &StepFile {
                    kind: "block".into(),
                    variables,
                    screens: step.screens.clone(),
                    sigma_floor: None,
                    has_conditional: false,
                    block_var_kinds: kinds,
                    n_quantiles,
                },
            )
        }
    }
}

fn save_machinery(m: &ContinuousMachinery, dir: &Path, prefix: &str) -> Result<()> {
    write_text(
        &dir.join(format!("{prefix}mean.gbm")),
        &ensemble_to_string(&m.mean_model),
    )?;
    for (q, qm) in m.quantile_models.iter().enumerate() {
        write_text(
            &dir.join(format!("{prefix}q{q:02}.gbm")),
            &ensemble_to_string(qm),
        )?;
    }
    write_json(&dir.join(format!("{prefix}scaling.json")), &m.scaling)?;
    write_json(&dir.join(format!("{prefix}pools.json")), &m.pools)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<FusionBundle> {
    let manifest: Manifest = read_toml(&dir.join(MANIFEST_FILE))?;
    let spec_text = fs::read_to_string(dir.join(SPEC_FILE))
        .map_err(|e| Error::io(dir.join(SPEC_FILE), e))?;
    let spec = FusionSpec::from_toml(&spec_text)?;
    let fusion_specs = load_schema(&dir.join(FUSION_SCHEMA_FILE))?;

    let mut steps = Vec::with_capacity(spec.steps.len());
    for ix in 0..spec.steps.len() {
        let sdir = dir.join(format!("step_{ix:03}"));
        steps.push(load_step(&sdir)?);
    }
    Ok(FusionBundle {
        spec,
        fusion_specs,
        steps,
        manifest,
    })
}

fn load_step(dir: &Path) -> Result<TrainedStep> {
    let file: StepFile = read_toml(&dir.join("step.json"))?;
    let step = if file.variables.len() == 1 {
        FusionStep::Single(file.variables[0].clone())
    } else {
        FusionStep::Block(file.variables.clone())
    };
    let models = match file.kind.as_str() {
        "categorical" => StepModels::Categorical {
            model: read_model(&dir.join("class.gbm"))?,
        },
        "continuous" => StepModels::Continuous(load_machinery(
            dir,
            "",
            file.n_quantiles,
            file.sigma_floor.unwrap_or(1e-6),
        )?),
        "semicontinuous" => {
            let zero_model = read_model(&dir.join("zero.gbm"))?;
            let cont = if file.has_conditional {
                Some(load_machinery(
                    dir,
                    "",
                    file.n_quantiles,
                    file.sigma_floor.unwrap_or(1e-6),
                )?)
            } else {
                None
            };
            StepModels::Semicontinuous { zero_model, cont }
        }
        "block" => {
            let mut vars = Vec::with_capacity(file.block_var_kinds.len());
            for (v, kind) in file.block_var_kinds.iter().enumerate() {
                let bv = match kind.as_str() {
                    "categorical" => BlockVarModels::Categorical {
                        model: read_model(&dir.join(format!("var{v:02}_class.gbm")))?,
                    },
                    "continuous" => BlockVarModels::Continuous {
                        mean_model: read_model(&dir.join(format!("var{v:02}_mean.gbm")))?,
                        quantile_models: read_quantiles(dir, v, file.n_quantiles)?,
                    },
                    "semicontinuous" => BlockVarModels::Semicontinuous {
                        zero_model: read_model(&dir.join(format!("var{v:02}_zero.gbm")))?,
                        mean_model: read_model(&dir.join(format!("var{v:02}_mean.gbm")))?,
                        quantile_models: read_quantiles(dir, v, file.n_quantiles)?,
                    },
                    other => {
                        return Err(Error::Serialize(format!(
                            "unknown block variable kind '{other}'"
                        )))
                    }
                };
                vars.push(bv);
            }
            let scaling: ScalingParams = read_json(&dir.join("scaling.json"))?;
            let donor_scaled: Matrix = read_json(&dir.join("donor_scaled.json"))?;
            let donor_records: Vec<SimColumn> = read_json(&dir.join("donor_records.json"))?;
            StepModels::Block {
                vars,
                scaling,
                donor_scaled,
                donor_records,
            }
        }
        other => return Err(Error::Serialize(format!("unknown step kind '{other}'"))),
    };
    Ok(TrainedStep {
        step,
        screens: file.screens,
        models,
    })
}

fn load_machinery(
    dir: &Path,
    prefix: &str,
    n_quantiles: usize,
    sigma_floor: f64,
) -> Result<ContinuousMachinery> {
    let mean_model = read_model(&dir.join(format!("{prefix}mean.gbm")))?;
    let mut quantile_models = Vec::with_capacity(n_quantiles);
    for q in 0..n_quantiles {
        quantile_models.push(read_model(&dir.join(format!("{prefix}q{q:02}.gbm")))?);
    }
    let scaling: ScalingParams = read_json(&dir.join(format!("{prefix}scaling.json")))?;
    let pools: DonorPools = read_json(&dir.join(format!("{prefix}pools.json")))?;
    Ok(ContinuousMachinery {
        mean_model,
        quantile_models,
        scaling,
        pools,
        sigma_floor,
    })
}

fn read_quantiles(dir: &Path, v: usize, n: usize) -> Result<Vec<TreeEnsemble>> {
    (0..n)
        .map(|q| read_model(&dir.join(format!("var{v:02}_q{q:02}.gbm"))))
        .collect()
}

fn read_model(path: &Path) -> Result<TreeEnsemble> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ensemble_from_str(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}
