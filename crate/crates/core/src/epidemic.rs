//! Branching-process model of the early epidemic, with and without the app.
//!
//! Each infected individual is infectious for `incubation_days` days after
//! the day of infection and produces Poisson(R0 / incubation_days) new cases
//! per day. On the last of those days symptoms appear and the individual is
//! strictly quarantined. Individuals reached by an app alert divide their
//! daily rate by the quarantine factor `k`. The app is silent until
//! `activation_day` and then reaches a linearly growing share of new cases
//! over `ramp_days`.
//!
//! Random draws follow a fixed schedule: every individual consumes one
//! uniform per infectious day, two at creation and one at detection,
//! whatever the branch taken. Runs that differ only in parameters with no
//! effect (k = 1, efficiency 0, activation after the horizon) therefore
//! produce bit-identical series for the same seed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::cipher::keyed_digest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpidemicError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("active infections exceeded cap ({active} > {cap}) on day {day}")]
    AbortCapExceeded { day: u32, active: usize, cap: usize, partial: DailySeries },
    #[error("no growth root for r0 = {0}")]
    NoGrowthRoot(f64),
}

/// When an app user learns about the exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlertPolicy {
    /// Alerted when infected, with probability equal to the activation level.
    #[default]
    FromInfection,
    /// Alerted when the infector is detected and its upload goes through.
    AtDetection,
}

impl fmt::Display for AlertPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertPolicy::FromInfection => "from_infection",
            AlertPolicy::AtDetection => "at_detection",
        })
    }
}

impl FromStr for AlertPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "from_infection" | "FromInfection" => Ok(AlertPolicy::FromInfection),
            "at_detection" | "AtDetection" => Ok(AlertPolicy::AtDetection),
            other => Err(format!("unknown alert policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationParams {
    pub r0: f64,
    pub incubation_days: u32,
    pub quarantine_factor: f64,
    pub activation_day: u32,
    pub ramp_days: u32,
    pub efficiency: f64,
    pub initial_infected: u32,
    pub horizon_days: u32,
    pub replicates: u32,
    pub max_active: usize,
    pub alert_policy: AlertPolicy,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            r0: 3.0,
            incubation_days: 14,
            quarantine_factor: 10.0,
            activation_day: 30,
            ramp_days: 10,
            efficiency: 1.0,
            initial_infected: 10,
            horizon_days: 60,
            replicates: 50,
            max_active: 5_000_000,
            alert_policy: AlertPolicy::FromInfection,
        }
    }
}

impl SimulationParams {
    pub fn validate(&self) -> Result<(), EpidemicError> {
        let bad = |msg: &str| Err(EpidemicError::InvalidParams(msg.to_string()));
        if !(self.r0.is_finite() && self.r0 >= 0.0) {
            return bad("r0 must be finite and >= 0");
        }
        if self.incubation_days < 1 {
            return bad("incubation_days must be >= 1");
        }
        if self.base_rate() > 500.0 {
            return bad("r0 / incubation_days must not exceed 500");
        }
        if !(self.quarantine_factor.is_finite() && self.quarantine_factor >= 1.0) {
            return bad("quarantine_factor must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return bad("efficiency must lie in [0, 1]");
        }
        if self.initial_infected < 1 {
            return bad("initial_infected must be >= 1");
        }
        if self.horizon_days < 1 {
            return bad("horizon_days must be >= 1");
        }
        if self.replicates < 1 {
            return bad("replicates must be >= 1");
        }
        if self.max_active < 1 {
            return bad("max_active must be >= 1");
        }
        Ok(())
    }

    /// Daily offspring rate of an unalerted infectious individual.
    pub fn base_rate(&self) -> f64 {
        self.r0 / f64::from(self.incubation_days)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfectionRecord {
    pub id: u64,
    pub infected_on: u32,
    pub infector: Option<u64>,
    pub is_app_user: bool,
    pub alerted_on: Option<u32>,
    pub detected_on: Option<u32>,
}

impl InfectionRecord {
    /// Day symptoms appear; the last infectious day.
    pub fn symptom_day(&self, params: &SimulationParams) -> u32 {
        self.infected_on + params.incubation_days
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DailySeries {
    pub new_infected_per_day: Vec<u64>,
    pub truncated: bool,
}

impl DailySeries {
    pub fn cumulative(&self) -> Vec<u64> {
        self.new_infected_per_day
            .iter()
            .scan(0u64, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.new_infected_per_day.iter().sum()
    }
}

/// Share of new cases the app reaches on `day`.
pub fn activation_level(day: u32, params: &SimulationParams) -> f64 {
    if day < params.activation_day {
        0.0
    } else if params.ramp_days == 0 {
        1.0
    } else {
        (f64::from(day - params.activation_day) / f64::from(params.ramp_days)).clamp(0.0, 1.0)
    }
}

/// Expected number of new infections `rec` causes on `day`.
pub fn daily_offspring_rate(rec: &InfectionRecord, day: u32, params: &SimulationParams) -> f64 {
    if day <= rec.infected_on || day > rec.symptom_day(params) {
        return 0.0;
    }
    let base = params.base_rate();
    match rec.alerted_on {
        Some(a) if a <= day => base / params.quarantine_factor,
        _ => base,
    }
}

const NONE: u32 = u32::MAX;

/// Compact in-memory form of an [`InfectionRecord`]; id is the index.
#[derive(Debug, Clone, Copy)]
struct Node {
    infected_on: u32,
    infector: u32,
    alerted_on: u32,
    first_child: u32,
    next_sibling: u32,
    app_user: bool,
    detected: bool,
}

/// Poisson sampler by sequential CDF inversion of a single uniform.
#[derive(Debug, Clone, Copy)]
struct PoissonInverse {
    rate: f64,
    p0: f64,
    limit: u64,
}

impl PoissonInverse {
    fn new(rate: f64) -> Self {
        let limit = (rate + 40.0 * rate.sqrt() + 40.0) as u64;
        Self { rate, p0: (-rate).exp(), limit }
    }

    fn sample(&self, u: f64) -> u64 {
        let mut n = 0u64;
        let mut p = self.p0;
        let mut cdf = p;
        while u >= cdf && n < self.limit {
            n += 1;
            p *= self.rate / n as f64;
            cdf += p;
        }
        n
    }
}

/// State of one replicate: every infection so far, in creation order.
#[derive(Debug, Clone)]
pub struct Outbreak {
    nodes: Vec<Node>,
    /// First node still infectious on the next simulated day.
    window_start: usize,
    incubation_days: u32,
    open_rate: PoissonInverse,
    alerted_rate: PoissonInverse,
}

impl Outbreak {
    /// Seeds `initial_infected` cases on day 0.
    pub fn seed<R: Rng>(params: &SimulationParams, rng: &mut R) -> Self {
        let base = params.base_rate();
        let mut outbreak = Self {
            nodes: Vec::with_capacity(params.initial_infected as usize),
            window_start: 0,
            incubation_days: params.incubation_days,
            open_rate: PoissonInverse::new(base),
            alerted_rate: PoissonInverse::new(base / params.quarantine_factor),
        };
        for _ in 0..params.initial_infected {
            outbreak.spawn(0, NONE, params, rng);
        }
        outbreak
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Individuals infected within the last `incubation_days` days.
    pub fn active(&self) -> usize {
        self.nodes.len() - self.window_start
    }

    fn spawn<R: Rng>(&mut self, day: u32, infector: u32, params: &SimulationParams, rng: &mut R) {
        let app_draw: f64 = rng.gen();
        let alert_draw: f64 = rng.gen();
        let app_user = app_draw < params.efficiency;
        let alerted_on = if app_user && params.alert_policy == AlertPolicy::FromInfection && alert_draw < activation_level(day, params) {
            day
        } else {
            NONE
        };
        let id = self.nodes.len() as u32;
        let mut node = Node { infected_on: day, infector, alerted_on, first_child: NONE, next_sibling: NONE, app_user, detected: false };
        if infector != NONE {
            let parent = &mut self.nodes[infector as usize];
            node.next_sibling = parent.first_child;
            parent.first_child = id;
        }
        self.nodes.push(node);
    }

    fn alert(&mut self, idx: u32, day: u32) {
        let node = &mut self.nodes[idx as usize];
        if node.app_user && node.alerted_on == NONE {
            node.alerted_on = day;
        }
    }

    /// Advances to `day` (>= 1) and returns the number of new infections.
    pub fn step_day<R: Rng>(&mut self, day: u32, params: &SimulationParams, rng: &mut R) -> Result<u64, EpidemicError> {
        let inc = params.incubation_days;
        while self.window_start < self.nodes.len() && self.nodes[self.window_start].infected_on + inc < day {
            self.window_start += 1;
        }
        let active_end = self.nodes.len();

        // Detections happen before transmission; the detection day is
        // still an infectious day.
        let level = activation_level(day, params);
        for i in self.window_start..active_end {
            let node = self.nodes[i];
            if node.infected_on + inc != day {
                continue;
            }
            let upload_draw: f64 = rng.gen();
            self.nodes[i].detected = true;
            let uploaded = node.app_user && upload_draw < level;
            if params.alert_policy == AlertPolicy::AtDetection && uploaded {
                let mut child = node.first_child;
                while child != NONE {
                    self.alert(child, day);
                    child = self.nodes[child as usize].next_sibling;
                }
                if node.infector != NONE {
                    self.alert(node.infector, day);
                }
            }
        }

        let before = self.nodes.len();
        for i in self.window_start..active_end {
            let node = self.nodes[i];
            if node.infected_on >= day {
                continue;
            }
            let u: f64 = rng.gen();
            let sampler = if node.alerted_on <= day { &self.alerted_rate } else { &self.open_rate };
            let offspring = sampler.sample(u);
            for _ in 0..offspring {
                self.spawn(day, i as u32, params, rng);
            }
        }
        let created = (self.nodes.len() - before) as u64;

        if self.nodes.len() >= NONE as usize {
            return Err(EpidemicError::InvalidParams("record count overflow".into()));
        }
        Ok(created)
    }

    pub fn record(&self, idx: usize) -> InfectionRecord {
        let n = &self.nodes[idx];
        let opt = |v: u32| (v != NONE).then_some(v);
        InfectionRecord {
            id: idx as u64,
            infected_on: n.infected_on,
            infector: opt(n.infector).map(u64::from),
            is_app_user: n.app_user,
            alerted_on: opt(n.alerted_on),
            detected_on: n.detected.then_some(n.infected_on + self.incubation_days),
        }
    }

    pub fn records(&self) -> Vec<InfectionRecord> {
        (0..self.nodes.len()).map(|i| self.record(i)).collect()
    }
}

/// One replicate with its full infection history.
#[derive(Debug, Clone)]
pub struct ReplicateTrace {
    pub series: DailySeries,
    pub records: Vec<InfectionRecord>,
}

fn simulate(params: &SimulationParams, seed: u64) -> Result<(DailySeries, Outbreak), EpidemicError> {
    params.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut outbreak = Outbreak::seed(params, &mut rng);
    let mut series = DailySeries { new_infected_per_day: vec![outbreak.len() as u64], truncated: false };
    for day in 1..=params.horizon_days {
        let created = outbreak.step_day(day, params, &mut rng)?;
        series.new_infected_per_day.push(created);
        let active = outbreak.active();
        if active > params.max_active {
            series.truncated = true;
            series.new_infected_per_day.resize(params.horizon_days as usize + 1, 0);
            return Err(EpidemicError::AbortCapExceeded { day, active, cap: params.max_active, partial: series });
        }
    }
    Ok((series, outbreak))
}

/// Simulates days `0..=horizon_days` for one seed.
pub fn run_replicate(params: &SimulationParams, seed: u64) -> Result<DailySeries, EpidemicError> {
    simulate(params, seed).map(|(series, _)| series)
}

/// Like [`run_replicate`] but keeps every infection record.
pub fn run_replicate_traced(params: &SimulationParams, seed: u64) -> Result<ReplicateTrace, EpidemicError> {
    let (series, outbreak) = simulate(params, seed)?;
    Ok(ReplicateTrace { series, records: outbreak.records() })
}

/// Seed of replicate `index` within an ensemble.
pub fn replicate_seed(base_seed: u64, index: u32) -> u64 {
    keyed_digest(&base_seed.to_le_bytes(), &index.to_le_bytes()).low_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub cumulative_mean: Vec<f64>,
    pub cumulative_std_error: Vec<f64>,
    pub replicates: u32,
    pub truncated_replicates: u32,
}

impl EnsembleSeries {
    pub fn truncated(&self) -> bool {
        self.truncated_replicates > 0
    }

    pub fn days(&self) -> usize {
        self.mean.len()
    }
}

fn mean_and_se(columns: &[Vec<u64>], day: usize) -> (f64, f64) {
    let n = columns.len() as f64;
    let mean = columns.iter().map(|c| c[day] as f64).sum::<f64>() / n;
    if columns.len() < 2 {
        return (mean, 0.0);
    }
    let var = columns.iter().map(|c| (c[day] as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `params.replicates` replicates and averages them day by day.
///
/// Replicates may run on several threads; aggregation always walks them in
/// replicate order so the result does not depend on scheduling.
pub fn run_ensemble(params: &SimulationParams, base_seed: u64) -> Result<EnsembleSeries, EpidemicError> {
    params.validate()?;
    let runs: Vec<DailySeries> = (0..params.replicates)
        .into_par_iter()
        .map(|r| match run_replicate(params, replicate_seed(base_seed, r)) {
            Ok(series) => Ok(series),
            Err(EpidemicError::AbortCapExceeded { partial, .. }) => Ok(partial),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;

    let truncated_replicates = runs.iter().filter(|s| s.truncated).count() as u32;
    let daily: Vec<Vec<u64>> = runs.iter().map(|s| s.new_infected_per_day.clone()).collect();
    let cumulative: Vec<Vec<u64>> = runs.iter().map(DailySeries::cumulative).collect();
    let days = params.horizon_days as usize + 1;
    let (mean, std_error) = (0..days).map(|d| mean_and_se(&daily, d)).unzip();
    let (cumulative_mean, cumulative_std_error) = (0..days).map(|d| mean_and_se(&cumulative, d)).unzip();
    Ok(EnsembleSeries { mean, std_error, cumulative_mean, cumulative_std_error, replicates: params.replicates, truncated_replicates })
}

/// Per-day growth factor g solving (r0/n) * sum_{a=1..n} g^-a = 1.
pub fn renewal_growth_factor(r0: f64, incubation_days: u32) -> Result<f64, EpidemicError> {
    if !(r0 > 0.0 && r0.is_finite()) || incubation_days == 0 {
        return Err(EpidemicError::NoGrowthRoot(r0));
    }
    let rate = r0 / f64::from(incubation_days);
    let f = |g: f64| rate * (1..=incubation_days).map(|a| g.powi(-(a as i32))).sum::<f64>() - 1.0;

    // f is strictly decreasing in g.
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    while f(lo) < 0.0 {
        lo /= 2.0;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..500 {
        mid = 0.5 * (lo + hi);
        let value = f(mid);
        if value.abs() < 1e-10 {
            break;
        }
        if value > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Least-squares log-linear fit of `series[from..=to]`; `None` if any value is non-positive.
pub fn fit_growth_factor(series: &[f64], from: usize, to: usize) -> Option<f64> {
    if to <= from || to >= series.len() {
        return None;
    }
    let points: Vec<(f64, f64)> = (from..=to).map(|d| (d as f64, series[d])).filter(|(_, y)| *y > 0.0).map(|(x, y)| (x, y.ln())).collect();
    if points.len() != to - from + 1 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}
