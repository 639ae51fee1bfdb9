//! Scenario files: one base configuration plus optional sweep axes.

use std::path::Path;

use ironwan_core::netsim::{Load, ScenarioConfig, System};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: ScenarioConfig,
    pub sweep: Sweep,
}

/// Each empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Gateway counts, laid out on the generated grid.
    pub gateways: Vec<usize>,
    pub networks: Vec<u32>,
    pub loads: Vec<Load>,
    pub systems: Vec<System>,
    pub retx_limit: Vec<u32>,
    pub seeds: Vec<u64>,
}

/// The sweep coordinates of one run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CellKey {
    pub gateways: usize,
    pub networks: u32,
    /// Load name, or the raw fraction when the base value is not a named load.
    pub load: String,
    pub system: System,
    pub retx_limit: u32,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    pub key: CellKey,
    pub seed: u64,
    pub config: ScenarioConfig,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read scenario {}: {e}", path.display()))
        })?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| e.to_string())?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.sweep.gateways.is_empty() && !self.scenario.gateways.is_empty() {
            return Err("sweep.gateways cannot be combined with explicit scenario.gateways".into());
        }
        if !self.sweep.networks.is_empty()
            && (!self.scenario.gateways.is_empty() || !self.scenario.nodes.is_empty())
        {
            return Err(
                "sweep.networks cannot be combined with explicit gateway or node sites".into(),
            );
        }
        for cell in self.cells() {
            cell.config
                .validate()
                .map_err(|e| format!("cell {}: {e}", cell.index))?;
        }
        Ok(())
    }

    /// Every run of the sweep. Seeds vary fastest; the order is fixed by
    /// the file alone.
    pub fn cells(&self) -> Vec<Cell> {
        let base = &self.scenario;
        let or = |axis: &[usize], v: usize| {
            if axis.is_empty() {
                vec![v]
            } else {
                axis.to_vec()
            }
        };
        let gateways = or(&self.sweep.gateways, base.gateway_sites().len());
        let networks = if self.sweep.networks.is_empty() {
            vec![base.networks]
        } else {
            self.sweep.networks.clone()
        };
        let loads: Vec<Option<Load>> = if self.sweep.loads.is_empty() {
            vec![None]
        } else {
            self.sweep.loads.iter().copied().map(Some).collect()
        };
        let systems = if self.sweep.systems.is_empty() {
            vec![base.system]
        } else {
            self.sweep.systems.clone()
        };
        let retx = if self.sweep.retx_limit.is_empty() {
            vec![base.node.retx_limit]
        } else {
            self.sweep.retx_limit.clone()
        };
        let seeds = if self.sweep.seeds.is_empty() {
            vec![base.seed]
        } else {
            self.sweep.seeds.clone()
        };

        let mut out = Vec::new();
        for &g in &gateways {
            for &net in &networks {
                for &load in &loads {
                    for &system in &systems {
                        for &r in &retx {
                            for &seed in &seeds {
                                let mut config = base.clone();
                                if !self.sweep.gateways.is_empty() {
                                    config.gateway_count = g;
                                }
                                config.networks = net;
                                if let Some(l) = load {
                                    config.load = l.ack_fraction();
                                }
                                config.system = system;
                                config.node.retx_limit = r;
                                config.seed = seed;
                                let load = match load {
                                    Some(l) => l.name().to_string(),
                                    None => load_label(base.load),
                                };
                                out.push(Cell {
                                    index: out.len(),
                                    key: CellKey {
                                        gateways: g,
                                        networks: net,
                                        load,
                                        system,
                                        retx_limit: r,
                                    },
                                    seed,
                                    config,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn load_label(fraction: f64) -> String {
    Load::ALL
        .into_iter()
        .find(|l| l.ack_fraction() == fraction)
        .map_or_else(|| fraction.to_string(), |l| l.name().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioFile::parse("[scenario]\nnode_count = 5\nbogus = 1\n").is_err());
        assert!(ScenarioFile::parse("[sweep]\nsize = [1]\n").is_err());
        assert!(ScenarioFile::parse("[scenario.link]\ngain = 3\n").is_err());
    }

    #[test]
    fn empty_file_is_one_default_cell() {
        let f = ScenarioFile::parse("").unwrap();
        let cells = f.cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].config, ScenarioConfig::default());
    }

    #[test]
    fn sweep_order_and_size() {
        let f = ScenarioFile::parse(
            r#"
[sweep]
gateways = [6, 8, 10]
loads = ["low", "medium", "high"]
systems = ["lorawan", "ironwan"]
seeds = [1, 2, 3, 4, 5]
"#,
        )
        .unwrap();
        let cells = f.cells();
        assert_eq!(cells.len(), 90);
        assert_eq!((cells[0].key.gateways, cells[0].seed), (6, 1));
        assert_eq!(cells[1].seed, 2);
        assert_eq!(cells[5].key.system, System::Ironwan);
        assert_eq!(cells[89].key.gateways, 10);
        assert_eq!(cells[89].config.gateway_sites().len(), 10);
        assert_eq!(cells[89].config.load, 0.9);
    }

    #[test]
    fn invalid_cells_are_config_errors() {
        assert!(ScenarioFile::parse("[sweep]\nnetworks = [0]\n").is_err());
        assert!(ScenarioFile::parse("[scenario]\nload = 2.0\n").is_err());
    }
}
