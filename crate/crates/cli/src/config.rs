use std::path::Path;

use metalwan::disentangle::GlueConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Command parameters read from `--config`; command-line flags override
/// individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Band index `N`: bands `1..=N` are kept exactly.
    pub band: usize,
    /// Output grid for fields, frames and hoppings.
    pub grid: [usize; 3],
    /// Grid used to locate band crossings.
    pub crossing_grid: [usize; 3],
    /// Crossing clearance for the region search.
    pub margin: Option<f64>,
    pub epsilon: f64,
    pub assumption2: bool,
    pub transport_steps: usize,
    /// Sphere radius for Weyl charges; chosen from the crossing spacing when
    /// unset.
    pub radius: Option<f64>,
    pub probes: usize,
    /// Crossing neighbourhood excluded from interpolation statistics.
    pub probe_exclusion: f64,
    /// Enforce `Φ(−k) = θΦ(k)` when the model carries a time reversal.
    pub trs: bool,
    /// Band path endpoints and sample count for `bands`.
    pub path_from: [f64; 3],
    pub path_to: [f64; 3],
    pub path_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let glue = GlueConfig::default();
        RunConfig {
            seed: 0,
            band: 0,
            grid: glue.grid,
            crossing_grid: [16, 16, 16],
            margin: None,
            epsilon: glue.epsilon,
            assumption2: false,
            transport_steps: glue.transport_steps,
            radius: None,
            probes: 100,
            probe_exclusion: 0.02,
            trs: false,
            path_from: [0.0; 3],
            path_to: [0.5, 0.5, 0.5],
            path_points: 101,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::parse(p, &e))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let positive = [("epsilon", self.epsilon), ("probe_exclusion", self.probe_exclusion)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Failure::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("margin", self.margin), ("radius", self.radius)] {
            if let Some(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(Failure::config(format!("{name} must be positive, got {x}")));
                }
            }
        }
        if self.grid.contains(&0) || self.crossing_grid.contains(&0) {
            return Err(Failure::config("grid sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn glue(&self) -> GlueConfig {
        GlueConfig {
            epsilon: self.epsilon,
            grid: self.grid,
            assumption2: self.assumption2,
            seed: self.seed,
            transport_steps: self.transport_steps,
            margin: self.margin,
            ..GlueConfig::default()
        }
    }
}

/// `"8"` or `"8,8,16"`.
pub fn parse_grid(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("bad grid `{s}`: {e}"))).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [n] if *n > 0 => Ok([*n; 3]),
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok([*a, *b, *c]),
        _ => Err(format!("grid must be `n` or `n1,n2,n3` with positive entries, got `{s}`")),
    }
}
