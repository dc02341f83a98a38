use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::emission::EmissionModel;
use super::policy::Policy;
use super::system::SystemSpec;
use crate::error::{Error, Result};
use crate::matrix_csv::format_f64;
use crate::rng::{self, NoiseRole};

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One transition `x' = A x + B u + w`, `w ~ N(0, Σ_w)`. Returns `(x', w)`.
pub fn step<R: Rng + ?Sized>(
    spec: &SystemSpec,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.len() != spec.dx() {
        return Err(Error::dims("step state", spec.dx(), x.len()));
    }
    if u.len() != spec.du() {
        return Err(Error::dims("step input", spec.du(), u.len()));
    }
    let w = spec.noise_factor() * standard_normal(rng, spec.dx());
    let next = spec.a() * x + spec.b() * u + &w;
    Ok((next, w))
}

/// A recorded window `start..=horizon` of one rollout.
///
/// Entry `i` of every per-time vector refers to time `start + i`. Inputs and
/// costs are recorded at the final time as well, so `c_H` is defined;
/// `process_noise[i]` is the `w_t` that produced `x_{t+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub index: u64,
    pub base_seed: u64,
    pub start: usize,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub exploration: Vec<DVector<f64>>,
    pub process_noise: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.start + self.states.len() - 1
    }

    fn slot(&self, t: usize) -> usize {
        assert!(t >= self.start && t <= self.horizon(), "time {t} outside recorded window");
        t - self.start
    }

    pub fn x(&self, t: usize) -> &DVector<f64> {
        &self.states[self.slot(t)]
    }

    pub fn y(&self, t: usize) -> &DVector<f64> {
        &self.observations[self.slot(t)]
    }

    pub fn u(&self, t: usize) -> &DVector<f64> {
        &self.inputs[self.slot(t)]
    }

    pub fn nu(&self, t: usize) -> &DVector<f64> {
        &self.exploration[self.slot(t)]
    }

    pub fn w(&self, t: usize) -> &DVector<f64> {
        &self.process_noise[self.slot(t)]
    }

    pub fn c(&self, t: usize) -> f64 {
        self.costs[self.slot(t)]
    }

    /// Per-step average of `c_1..c_H`; requires the window to start at 0 or 1.
    pub fn average_cost(&self) -> f64 {
        let h = self.horizon();
        let first = self.start.max(1);
        assert!(self.start <= 1 && h >= 1);
        (first..=h).map(|t| self.c(t)).sum::<f64>() / h as f64
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    /// Earliest time kept in the returned trajectories.
    pub record_from: usize,
    /// Index of the first trajectory; indices key the random substreams.
    pub first_index: u64,
}

pub fn rollout(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    n_traj: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    rollout_with(spec, emission, policy, horizon, n_traj, base_seed, RolloutOptions::default())
}

pub fn rollout_with(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    n_traj: usize,
    base_seed: u64,
    opts: RolloutOptions,
) -> Result<Vec<Trajectory>> {
    if horizon < 1 {
        return Err(Error::InvalidInput("rollout horizon must be >= 1".into()));
    }
    if n_traj < 1 {
        return Err(Error::InvalidInput("rollout needs at least one trajectory".into()));
    }
    if opts.record_from > horizon {
        return Err(Error::InvalidInput("record window starts after the horizon".into()));
    }
    if emission.dx() != spec.dx() {
        return Err(Error::dims("emission latent dim", spec.dx(), emission.dx()));
    }
    if policy.input_dim() != spec.du() {
        return Err(Error::dims("policy input dim", spec.du(), policy.input_dim()));
    }
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| simulate_one(spec, emission, policy, horizon, base_seed, opts.first_index + i, opts.record_from))
        .collect()
}

fn simulate_one(
    spec: &SystemSpec,
    emission: &EmissionModel,
    policy: &dyn Policy,
    horizon: usize,
    base_seed: u64,
    index: u64,
    record_from: usize,
) -> Result<Trajectory> {
    let mut init_rng = rng::stream(base_seed, index, NoiseRole::InitialState);
    let mut w_rng = rng::stream(base_seed, index, NoiseRole::Process);
    let mut nu_rng = rng::stream(base_seed, index, NoiseRole::Exploration);
    let sigma = policy.exploration_std();
    let du = spec.du();
    let observes = policy.observes();
    let empty = DVector::zeros(0);

    let window = horizon - record_from + 1;
    let mut traj = Trajectory {
        index,
        base_seed,
        start: record_from,
        states: Vec::with_capacity(window),
        observations: Vec::with_capacity(window),
        inputs: Vec::with_capacity(window),
        exploration: Vec::with_capacity(window),
        process_noise: Vec::with_capacity(window),
        costs: Vec::with_capacity(window),
    };

    let mut run = policy.start();
    let mut x = spec.init_factor() * standard_normal(&mut init_rng, spec.dx());
    for t in 0..=horizon {
        let record = t >= record_from;
        let y = if observes || record { emission.emit(&x) } else { empty.clone() };
        let mut u = run.control(t, if observes { &y } else { &empty })?;
        if u.len() != du {
            return Err(Error::dims("policy output", du, u.len()));
        }
        let nu = if sigma > 0.0 { standard_normal(&mut nu_rng, du) * sigma } else { DVector::zeros(du) };
        u += &nu;
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("control input at t={t}")));
        }
        let cost = spec.cost(&x, &u);
        let next = if t < horizon { Some(step(spec, &x, &u, &mut w_rng)?) } else { None };
        if record {
            traj.costs.push(cost);
            traj.observations.push(y);
            traj.inputs.push(u);
            traj.exploration.push(nu);
            if let Some((_, w)) = &next {
                traj.process_noise.push(w.clone());
            }
            traj.states.push(x.clone());
        }
        if let Some((nx, _)) = next {
            x = nx;
        }
    }
    Ok(traj)
}

/// Comma-separated export with columns `traj,t,x_*,y_*,u_*,c`.
pub fn trajectories_to_csv(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    let Some(first) = trajs.first() else {
        return "traj,t,c\n".into();
    };
    let (dx, dy, du) = (first.states[0].len(), first.observations[0].len(), first.inputs[0].len());
    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend((0..dx).map(|i| format!("x_{i}")));
    header.extend((0..dy).map(|i| format!("y_{i}")));
    header.extend((0..du).map(|i| format!("u_{i}")));
    header.push("c".into());
    let _ = writeln!(out, "{}", header.join(","));
    for tr in trajs {
        for t in tr.start..=tr.horizon() {
            let mut row = vec![tr.index.to_string(), t.to_string()];
            row.extend(tr.x(t).iter().map(|v| format_f64(*v)));
            row.extend(tr.y(t).iter().map(|v| format_f64(*v)));
            row.extend(tr.u(t).iter().map(|v| format_f64(*v)));
            row.push(format_f64(tr.c(t)));
            let _ = writeln!(out, "{}", row.join(","));
        }
    }
    out
}
