//! Canned experiments shipped with the crate as versioned JSON configs.

use crate::config::{ConfigError, RunConfig};
use crate::protocol::Experiment;

const FILES: &[(&str, &str)] = &[
    ("fig1b", include_str!("../scenarios/fig1b.json")),
    ("fig2a", include_str!("../scenarios/fig2a.json")),
    ("fig2b_fig3", include_str!("../scenarios/fig2b_fig3.json")),
    ("fig2b_fig3_leak", include_str!("../scenarios/fig2b_fig3_leak.json")),
    ("figS4_volatile", include_str!("../scenarios/figS4_volatile.json")),
    ("figS5_arrhenius", include_str!("../scenarios/figS5_arrhenius.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    FILES.iter().map(|(n, _)| *n)
}

/// Raw JSON of a scenario.
pub fn source(name: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn scenario_config(name: &str) -> Result<RunConfig, ConfigError> {
    let text = source(name).ok_or_else(|| ConfigError::UnknownScenario(name.to_string()))?;
    let cfg = RunConfig::from_json(text)?;
    if cfg.scenario.is_some() {
        return Err(ConfigError::Conflict(format!("scenario `{name}` refers to another scenario")));
    }
    Ok(cfg)
}

/// Fully parameterised experiment for a scenario.
pub fn scenario(name: &str) -> Result<Experiment, ConfigError> {
    Ok(scenario_config(name)?.resolve()?.experiment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermo::SolutionKind;

    #[test]
    fn every_scenario_resolves() {
        for name in names() {
            let e = scenario(name).unwrap_or_else(|err| panic!("{name}: {err}"));
            assert_eq!(e.name.as_deref(), Some(name));
        }
    }

    #[test]
    fn unknown_scenario() {
        assert_eq!(scenario("fig9").unwrap_err(), ConfigError::UnknownScenario("fig9".into()));
    }

    #[test]
    fn volatile_scenario_is_ideal() {
        assert_eq!(scenario("figS4_volatile").unwrap().model.kind, SolutionKind::Ideal);
        assert_eq!(scenario("fig2a").unwrap().model.kind, SolutionKind::Regular);
    }
}
