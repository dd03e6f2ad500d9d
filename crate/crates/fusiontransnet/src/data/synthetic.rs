//! Deterministic synthetic multimodal city generator.
//!
//! Every mode's demand is a mixture of a mode-specific random field and a
//! city-wide shared field, weighted by `cross_modal_coupling`. Each field
//! combines a diurnal two-peak profile, slowly drifting AR(1) modulation
//! (city-wide and per grid), and a commute direction term that pushes
//! morning flow from residential toward commercial grids and reverses it
//! in the evening. The shared field carries the canonical morning/evening
//! peaks; mode-specific fields get their own random phases, so with zero
//! coupling co-located modes decorrelate.
//!
//! All randomness comes from one seeded ChaCha stream in a fixed draw
//! order, so equal seeds give bit-identical datasets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FtnError, Result};
use crate::graph::{GridId, ModeId, ModeSeries, ODGraphSnapshot};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSpec {
    pub name: String,
    /// Fraction of grids this mode serves, in (0, 1].
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub grid_p: u32,
    pub grid_q: u32,
    pub modes: Vec<ModeSpec>,
    pub days: usize,
    /// Steps per day; 24 matches hourly OD matrices.
    pub steps_per_day: usize,
    /// Expected city-wide trips per mode per step at baseline.
    pub base_intensity: f64,
    /// Strength of the diurnal peaks relative to baseline.
    pub peak_amplitude: f64,
    /// Weight of the shared latent field, in [0, 1].
    pub cross_modal_coupling: f64,
    /// Multiplicative noise level, applied per cell (white) and per mode
    /// as a slowly drifting mode-wide observation distortion.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            grid_p: 6,
            grid_q: 6,
            modes: vec![
                ModeSpec { name: "taxi".into(), fraction: 1.0 },
                ModeSpec { name: "bus".into(), fraction: 0.8 },
                ModeSpec { name: "bike".into(), fraction: 0.6 },
            ],
            days: 30,
            steps_per_day: 24,
            base_intensity: 4000.0,
            peak_amplitude: 0.9,
            cross_modal_coupling: 0.8,
            noise_std: 0.45,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let grids = self.grid_p as usize * self.grid_q as usize;
        if grids < 4 {
            return Err(FtnError::Config(format!(
                "grid {}x{} has fewer than 4 cells",
                self.grid_p, self.grid_q
            )));
        }
        if self.modes.is_empty() {
            return Err(FtnError::Config("no modes configured".into()));
        }
        for m in &self.modes {
            if !(m.fraction > 0.0 && m.fraction <= 1.0) {
                return Err(FtnError::Config(format!(
                    "mode {} fraction {} outside (0, 1]",
                    m.name, m.fraction
                )));
            }
        }
        let mut names: Vec<&str> = self.modes.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.modes.len() {
            return Err(FtnError::Config("duplicate mode names".into()));
        }
        if self.days == 0 || self.steps_per_day < 2 {
            return Err(FtnError::Config(
                "need at least one day of at least two steps".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cross_modal_coupling) {
            return Err(FtnError::Config(format!(
                "cross_modal_coupling {} outside [0, 1]",
                self.cross_modal_coupling
            )));
        }
        if self.base_intensity < 0.0 || self.peak_amplitude < 0.0 || self.noise_std < 0.0 {
            return Err(FtnError::Config(
                "intensities and noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.days * self.steps_per_day
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on the open unit interval
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Ar1 {
    value: f64,
    rho: f64,
}

impl Ar1 {
    fn new(rng: &mut ChaCha8Rng, rho: f64) -> Ar1 {
        Ar1 {
            value: normal(rng),
            rho,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        self.value = self.rho * self.value + (1.0 - self.rho * self.rho).sqrt() * normal(rng);
        self.value
    }
}

/// Circular distance in hours on a 24h clock.
fn hour_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(24.0);
    d.min(24.0 - d)
}

fn bump(hour: f64, center: f64, sigma: f64) -> f64 {
    let d = hour_distance(hour, center);
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// One demand field: diurnal profile phase, city AR state, and per-grid AR
/// states. The shared field and each mode's own field are instances.
struct Field {
    phase: f64,
    city: Ar1,
    per_grid: Vec<Ar1>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, phase: f64, grids: usize) -> Field {
        Field {
            phase,
            city: Ar1::new(rng, 0.85),
            per_grid: (0..grids).map(|_| Ar1::new(rng, 0.8)).collect(),
        }
    }
}

struct FieldState {
    hour: f64,
    phase: f64,
    city: f64,
    grid: Vec<f64>,
}

const CITY_MOD: f64 = 0.45;
const GRID_MOD: f64 = 0.45;
const COMMUTE_STRENGTH: f64 = 2.0;

impl Field {
    fn advance(&mut self, rng: &mut ChaCha8Rng, hour: f64, peak_amplitude: f64) -> FieldState {
        let diurnal = bump(hour, 8.0 + self.phase, 2.0) + bump(hour, 18.0 + self.phase, 2.0);
        let city = (1.0 + peak_amplitude * diurnal)
            * (1.0 + CITY_MOD * self.city.step(rng)).max(0.25);
        let grid = self
            .per_grid
            .iter_mut()
            .map(|ar| (1.0 + GRID_MOD * ar.step(rng)).max(0.25))
            .collect();
        FieldState {
            hour,
            phase: self.phase,
            city,
            grid,
        }
    }
}

impl FieldState {
    /// Field intensity for a trip from grid `gi` to grid `gj`. Commute
    /// timing follows the commercial endpoint's own phase, so districts
    /// peak at different hours.
    fn cell(&self, gi: usize, gj: usize, com_i: f64, com_j: f64, phase_i: f64, phase_j: f64) -> f64 {
        let morning = bump(self.hour, 8.5 + self.phase + phase_j, 1.5);
        let evening = bump(self.hour, 18.5 + self.phase + phase_i, 1.5);
        let commute = 1.0
            + COMMUTE_STRENGTH
                * (morning * (1.0 - com_i) * com_j + evening * com_i * (1.0 - com_j));
        self.city * self.grid[gi] * self.grid[gj] * commute
    }
}

/// Generates a dataset from the config; equal configs give bit-identical
/// results.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p_ext, q_ext) = (cfg.grid_p as usize, cfg.grid_q as usize);
    let grids = p_ext * q_ext;
    let modes = cfg.modes.len();

    // static city structure
    let popularity: Vec<f64> = (0..grids).map(|_| rng.gen_range(0.5..1.5)).collect();
    let commercial: Vec<f64> = (0..grids).map(|_| rng.gen::<f64>()).collect();
    // each district keeps its own commute timing, shared by every mode
    let grid_phase: Vec<f64> = (0..grids).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let hottest = popularity
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(g, _)| g)
        .unwrap();

    // mode node sets: top grids by jittered popularity, the hottest grid
    // always included so multi-modal units exist
    let mut node_grids: Vec<Vec<usize>> = Vec::with_capacity(modes);
    for spec in &cfg.modes {
        let count = ((spec.fraction * grids as f64).ceil() as usize).clamp(1, grids);
        let mut scored: Vec<(f64, usize)> = (0..grids)
            .map(|g| (popularity[g] + rng.gen_range(0.0..0.3), g))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = scored[..count].iter().map(|(_, g)| *g).collect();
        if !chosen.contains(&hottest) {
            chosen.pop();
            chosen.push(hottest);
        }
        chosen.sort_unstable();
        node_grids.push(chosen);
    }

    // per-mode origin/destination propensities over the mode's nodes
    let mut origin_weight: Vec<Vec<f64>> = Vec::with_capacity(modes);
    let mut dest_weight: Vec<Vec<f64>> = Vec::with_capacity(modes);
    for chosen in &node_grids {
        let raw_o: Vec<f64> = chosen
            .iter()
            .map(|&g| 0.3 * popularity[g] + rng.gen_range(0.5..1.0))
            .collect();
        let raw_d: Vec<f64> = chosen
            .iter()
            .map(|&g| 0.3 * popularity[g] + rng.gen_range(0.5..1.0))
            .collect();
        let so: f64 = raw_o.iter().sum();
        let sd: f64 = raw_d.iter().sum();
        origin_weight.push(raw_o.into_iter().map(|w| w / so).collect());
        dest_weight.push(raw_d.into_iter().map(|w| w / sd).collect());
    }

    // demand fields: the shared one near the canonical commute phases,
    // mode-specific ones anywhere on the clock
    let shared_phase = rng.gen_range(-1.0..1.0);
    let mut shared = Field::new(&mut rng, shared_phase, grids);
    let mut own: Vec<Field> = (0..modes)
        .map(|_| {
            let phase = rng.gen_range(0.0..24.0);
            Field::new(&mut rng, phase, grids)
        })
        .collect();
    // persistent mode-wide observation distortion: multi-hour drifts a
    // single mode cannot separate from latent demand
    let mut obs_ar: Vec<Ar1> = (0..modes).map(|_| Ar1::new(&mut rng, 0.85)).collect();

    let hours_per_step = 24.0 / cfg.steps_per_day as f64;
    let coupling = cfg.cross_modal_coupling;
    let steps = cfg.steps();

    let mut flows: Vec<Vec<Array2<f64>>> = vec![Vec::with_capacity(steps); modes];
    for t in 0..steps {
        let hour = (t % cfg.steps_per_day) as f64 * hours_per_step;
        let shared_state = shared.advance(&mut rng, hour, cfg.peak_amplitude);
        let own_states: Vec<FieldState> = own
            .iter_mut()
            .map(|f| f.advance(&mut rng, hour, cfg.peak_amplitude))
            .collect();
        let observation: Vec<f64> = obs_ar
            .iter_mut()
            .map(|ar| (1.0 + cfg.noise_std * ar.step(&mut rng)).max(0.25))
            .collect();

        for m in 0..modes {
            let nodes = &node_grids[m];
            let n = nodes.len();
            let mut flow = Array2::zeros((n, n));
            for i in 0..n {
                let gi = nodes[i];
                for j in 0..n {
                    let gj = nodes[j];
                    let field = (1.0 - coupling)
                        * own_states[m].cell(
                            gi,
                            gj,
                            commercial[gi],
                            commercial[gj],
                            grid_phase[gi],
                            grid_phase[gj],
                        )
                        + coupling
                            * shared_state.cell(
                                gi,
                                gj,
                                commercial[gi],
                                commercial[gj],
                                grid_phase[gi],
                                grid_phase[gj],
                            );
                    let lambda = cfg.base_intensity
                        * origin_weight[m][i]
                        * dest_weight[m][j]
                        * field
                        * observation[m];
                    let noisy = lambda * (1.0 + cfg.noise_std * normal(&mut rng));
                    flow[(i, j)] = noisy.round().max(0.0);
                }
            }
            flows[m].push(flow);
        }
    }

    let mode_series = cfg
        .modes
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let nodes: Vec<GridId> = node_grids[m]
                .iter()
                .map(|&g| GridId {
                    p: (g / q_ext) as u32,
                    q: (g % q_ext) as u32,
                })
                .collect();
            let n = nodes.len();
            let snapshots = flows[m]
                .drain(..)
                .enumerate()
                .map(|(t, flow)| {
                    let mut features = Array2::zeros((n, 2));
                    for i in 0..n {
                        features[(i, 0)] = flow.column(i).sum();
                        features[(i, 1)] = flow.row(i).sum();
                    }
                    ODGraphSnapshot {
                        time_index: t,
                        flow,
                        features,
                    }
                })
                .collect();
            ModeSeries {
                mode: ModeId {
                    name: spec.name.clone(),
                    index: m,
                },
                nodes,
                snapshots,
            }
        })
        .collect();

    let dataset = Dataset { modes: mode_series };
    dataset.validate()?;
    if modes >= 2 {
        let index = crate::graph::build_unit_index(&dataset.modes);
        if index.multi_modal_units().next().is_none() {
            return Err(FtnError::Config(
                "generator produced no multi-modal grid".into(),
            ));
        }
    }
    Ok(dataset)
}
