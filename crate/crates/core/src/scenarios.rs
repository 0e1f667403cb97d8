//! Bundled road networks and their signal plans.

use std::path::Path;
use std::sync::Arc;

use crate::network::{Complexity, Junction, NetworkDocument, RoadEdge, RoadNetwork, RoadType};
use crate::sim::{LightPlan, SimConfig, SimError, Simulation, TrafficLight};
use crate::Error;

pub const BUILTIN: [&str; 3] = ["grid4x4", "grid4x4-trap", "twolane-vs-onelane"];

const GRID_SPACING: f64 = 100.0;
const URBAN_LIMIT: f64 = 13.89;

/// A network together with its signal plans.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Arc<RoadNetwork>,
    pub lights: Vec<TrafficLight>,
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<Scenario> {
        match name {
            "grid4x4" => Some(grid_scenario(grid4x4(), 30.0)),
            "grid4x4-trap" => Some(grid_scenario(grid4x4_trap(), 45.0)),
            "twolane-vs-onelane" => Some(Scenario { network: Arc::new(twolane_vs_onelane()), lights: Vec::new() }),
            _ => None,
        }
    }

    /// Resolves a bundled name, or a path to a network JSON file. Signal plans
    /// for a file-based network are read from `lights` when given, otherwise
    /// every signalized junction gets a 30 s/30 s two-phase plan.
    pub fn resolve(name_or_path: &str, lights: Option<&Path>) -> Result<Scenario, Error> {
        if let Some(s) = Scenario::builtin(name_or_path) {
            if let Some(path) = lights {
                return Scenario::with_light_file(s.network, path);
            }
            return Ok(s);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::Io(format!("reading network {name_or_path}: {e}")))?;
        let network = Arc::new(RoadNetwork::from_json(&text)?);
        match lights {
            Some(path) => Scenario::with_light_file(network, path),
            None => {
                let lights = default_lights(&network, 30.0);
                Ok(Scenario { network, lights })
            }
        }
    }

    fn with_light_file(network: Arc<RoadNetwork>, path: &Path) -> Result<Scenario, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading lights {}: {e}", path.display())))?;
        let plans: Vec<LightPlan> = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let lights = plans.iter().map(|p| p.resolve(&network)).collect::<Result<Vec<_>, SimError>>()?;
        Ok(Scenario { network, lights })
    }

    pub fn simulation(&self, config: SimConfig) -> Result<Simulation, SimError> {
        Simulation::new(self.network.clone(), self.lights.clone(), config)
    }

    pub fn light_plans(&self) -> Vec<LightPlan> {
        self.lights.iter().map(|l| LightPlan::from_light(&self.network, l)).collect()
    }
}

/// Two-phase plans at every signalized junction, offsets staggered by a quarter cycle.
pub fn default_lights(network: &RoadNetwork, green: f64) -> Vec<TrafficLight> {
    network
        .junctions()
        .iter()
        .enumerate()
        .filter(|(_, j)| j.traffic_light)
        .enumerate()
        .map(|(k, (i, _))| TrafficLight::two_phase(network, i, green, green, (k as f64 * green / 2.0) % (2.0 * green)))
        .collect()
}

fn grid_scenario(network: RoadNetwork, green: f64) -> Scenario {
    let lights = default_lights(&network, green);
    Scenario { network: Arc::new(network), lights }
}

fn grid_junction(r: usize, c: usize) -> String {
    format!("J{r}{c}")
}

struct GridSpec {
    rows: usize,
    cols: usize,
    junction: fn(usize, usize) -> (bool, Complexity),
    /// (r1, c1, r2, c2) -> (length, lanes, road type)
    edge: fn(usize, usize, usize, usize) -> (f64, u32, RoadType),
}

fn build_grid(name: &str, spec: GridSpec) -> RoadNetwork {
    let mut junctions = Vec::new();
    let mut edges = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (traffic_light, complexity) = (spec.junction)(r, c);
            junctions.push(Junction {
                id: grid_junction(r, c),
                x: c as f64 * GRID_SPACING,
                y: r as f64 * GRID_SPACING,
                traffic_light,
                complexity,
            });
        }
    }
    let mut link = |r1: usize, c1: usize, r2: usize, c2: usize| {
        for (a, b) in [((r1, c1), (r2, c2)), ((r2, c2), (r1, c1))] {
            let (length, lanes, road_type) = (spec.edge)(a.0, a.1, b.0, b.1);
            edges.push(RoadEdge {
                from: grid_junction(a.0, a.1),
                to: grid_junction(b.0, b.1),
                length,
                lanes,
                road_type,
                speed_limit: URBAN_LIMIT,
            });
        }
    };
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            if c + 1 < spec.cols {
                link(r, c, r, c + 1);
            }
            if r + 1 < spec.rows {
                link(r, c, r + 1, c);
            }
        }
    }
    RoadNetwork::from_document(NetworkDocument { name: name.into(), junctions, edges }).expect("bundled grid is valid")
}

fn grid4x4_junction(r: usize, c: usize) -> (bool, Complexity) {
    let interior = (1..=2).contains(&r) && (1..=2).contains(&c);
    let complex = matches!((r, c), (0, 3) | (3, 0));
    (interior, if complex { Complexity::Complex } else { Complexity::Simple })
}

fn grid4x4_edge(r1: usize, c1: usize, r2: usize, _c2: usize) -> (f64, u32, RoadType) {
    let horizontal = r1 == r2;
    let perimeter = if horizontal { r1 == 0 || r1 == 3 } else { c1 == 0 || c1 == 3 };
    let road_type = if !horizontal && c1 == 0 { RoadType::Curved } else { RoadType::Straight };
    (GRID_SPACING, if perimeter { 2 } else { 1 }, road_type)
}

/// 4x4 grid, 100 m bidirectional links, two-lane perimeter, signals on the four interior junctions.
pub fn grid4x4() -> RoadNetwork {
    build_grid("grid4x4", GridSpec { rows: 4, cols: 4, junction: grid4x4_junction, edge: grid4x4_edge })
}

/// `grid4x4` with a short single-lane inner ring: the shortest by distance, and
/// signal-controlled on every junction it touches.
pub fn grid4x4_trap() -> RoadNetwork {
    fn edge(r1: usize, c1: usize, r2: usize, c2: usize) -> (f64, u32, RoadType) {
        let inner = |r: usize, c: usize| (1..=2).contains(&r) && (1..=2).contains(&c);
        if inner(r1, c1) && inner(r2, c2) {
            (60.0, 1, RoadType::Straight)
        } else {
            grid4x4_edge(r1, c1, r2, c2)
        }
    }
    build_grid("grid4x4-trap", GridSpec { rows: 4, cols: 4, junction: grid4x4_junction, edge })
}

/// 5x5 grid where rows 1, 3 and columns 1, 3 are two-lane (32 edges) and
/// everything else is single-lane (48 edges). Link lengths vary slightly so
/// near-equal alternatives exist between most pairs.
pub fn twolane_vs_onelane() -> RoadNetwork {
    fn junction(r: usize, c: usize) -> (bool, Complexity) {
        (false, if (r, c) == (2, 2) { Complexity::Complex } else { Complexity::Simple })
    }
    fn edge(r1: usize, c1: usize, r2: usize, c2: usize) -> (f64, u32, RoadType) {
        let horizontal = r1 == r2;
        let two_lane = if horizontal { r1 % 2 == 1 } else { c1 % 2 == 1 };
        let road_type = if horizontal && r1 == 4 { RoadType::Curved } else { RoadType::Straight };
        let (lo_r, lo_c) = ((r1.min(r2)), (c1.min(c2)));
        let jitter = ((lo_r * 7 + lo_c * 3 + usize::from(horizontal) * 5) % 5) as f64 * 3.0;
        (GRID_SPACING - 6.0 + jitter, if two_lane { 2 } else { 1 }, road_type)
    }
    build_grid("twolane-vs-onelane", GridSpec { rows: 5, cols: 5, junction, edge })
}
