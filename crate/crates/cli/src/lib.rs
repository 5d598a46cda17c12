//! Scenario loading, mode dispatch, and artifact emission behind the `steer`
//! binary.

pub mod artifacts;
pub mod modes;

use std::path::{Path, PathBuf};

use steer_core::scenario::{Mode, Scenario};
use steer_core::{Result, SteerError};

pub use modes::Outcome;

/// Command-line values that override the loaded scenario.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub output_dir: Option<PathBuf>,
    pub snapshots: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub max_iter: Option<usize>,
    pub tolerance: Option<f64>,
}

pub fn parse_times(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| SteerError::config("snapshots", format!("`{s}`: {e}")))
        })
        .collect()
}

pub fn load_scenario(
    config: Option<&Path>,
    builtin: Option<&str>,
    ovr: &Overrides,
) -> Result<Scenario> {
    let mut scn = match (config, builtin) {
        (Some(_), Some(_)) => {
            return Err(SteerError::config(
                "$",
                "give either --config or --builtin; a config may name a built-in as \"base\"",
            ))
        }
        (None, None) => return Err(SteerError::config("$", "no scenario given")),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SteerError::config("$", format!("{}: {e}", path.display())))?;
            Scenario::from_json(&text)?
        }
        (None, Some(name)) => Scenario::builtin(name).ok_or_else(|| {
            SteerError::config(
                "builtin",
                format!(
                    "unknown built-in `{name}`; known: {:?}",
                    steer_core::scenario::BUILTINS
                ),
            )
        })?,
    };
    if let Some(m) = ovr.mode {
        scn.mode = m;
    }
    if let Some(d) = &ovr.output_dir {
        scn.output_dir = Some(d.to_string_lossy().into_owned());
    }
    if let Some(t) = &ovr.snapshots {
        scn.snapshots = t.clone();
    }
    if let Some(e) = ovr.epsilon {
        scn.epsilon = e;
    }
    if let Some(m) = ovr.max_iter {
        scn.max_iter = m;
    }
    if let Some(t) = ovr.tolerance {
        scn.tolerance = t;
    }
    scn.validate()?;
    Ok(scn)
}

pub fn output_dir(scn: &Scenario) -> PathBuf {
    scn.output_dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out").join(&scn.name))
}

/// Runs the scenario and moves its artifacts into place. Returns the output
/// directory with the outcome.
pub fn run(scn: &Scenario) -> Result<(PathBuf, Outcome)> {
    let staging = artifacts::Staging::new(&output_dir(scn))?;
    staging.json("scenario.json", &serde_json::to_value(scn)?)?;
    let outcome = modes::run_mode(scn, &staging)?;
    let dir = staging.commit()?;
    Ok((dir, outcome))
}
