//! Synthetic diurnal load / PV profiles and the long-format profile CSV.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::OperatingCondition;
use crate::feeder::{BusId, FeederModel};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("PV bus {0} is not a DER bus of the feeder")]
    PvNotDer(BusId),
    #[error("minutes_per_sample must be positive")]
    ZeroResolution,
    #[error("profile row refers to unknown bus {0}")]
    UnknownBus(BusId),
    #[error("profile rows must be grouped by nondecreasing t (saw {got} after {prev})")]
    OutOfOrder { prev: usize, got: usize },
    #[error("negative load at t={t}, bus {bus}")]
    NegativeLoad { t: usize, bus: BusId },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub days: usize,
    pub minutes_per_sample: usize,
    pub pv_buses: Vec<BusId>,
    pub seed: u64,
    /// Multiplies every bus's nominal load.
    pub load_scale: f64,
    /// Peak PV active output per PV bus at clear-sky noon (pu).
    pub pv_peak: f64,
    /// Relative amplitude of the bounded uniform noise.
    pub noise: f64,
    pub power_factor: (f64, f64),
}

impl ProfileConfig {
    /// Defaults for a feeder: PV on every DER bus.
    pub fn for_feeder(model: &FeederModel, days: usize, seed: u64) -> Self {
        Self {
            days,
            minutes_per_sample: 1,
            pv_buses: model.der_nodes().iter().copied().collect(),
            seed,
            load_scale: 1.0,
            pv_peak: 0.5,
            noise: 0.1,
            power_factor: (0.9, 0.95),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.days * (24 * 60 / self.minutes_per_sample.max(1))
    }
}

/// Relative demand over the day: overnight base with morning and evening peaks.
fn load_shape(hour: f64) -> f64 {
    let bump = |center: f64, width: f64| (-((hour - center) / width).powi(2)).exp();
    0.45 + 0.25 * bump(8.0, 2.0) + 0.55 * bump(19.5, 2.5)
}

/// Clear-sky PV fraction; zero outside 6:00-19:00.
fn pv_shape(hour: f64) -> f64 {
    if !(6.0..19.0).contains(&hour) {
        return 0.0;
    }
    (std::f64::consts::PI * (hour - 6.0) / 13.0).sin().max(0.0)
}

/// Reactive demand for an active demand at a lagging power factor.
pub fn reactive_from_pf(p: f64, pf: f64) -> f64 {
    p * pf.acos().tan()
}

/// Deterministic synthetic operating conditions for `config.days` days.
pub fn generate_profiles(
    model: &FeederModel,
    config: &ProfileConfig,
) -> Result<Vec<OperatingCondition>, ProfileError> {
    if config.minutes_per_sample == 0 {
        return Err(ProfileError::ZeroResolution);
    }
    let pv_idx = config
        .pv_buses
        .iter()
        .map(|&b| {
            if model.der_nodes().contains(&b) {
                Ok(model.index_of(b).expect("DER bus exists"))
            } else {
                Err(ProfileError::PvNotDer(b))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = model.n_buses();
    let per_day = 24 * 60 / config.minutes_per_sample;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (pf_lo, pf_hi) = config.power_factor;
    let mut out = Vec::with_capacity(config.days * per_day);

    for _day in 0..config.days {
        let bus_level: Vec<f64> = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
        let clearness: f64 = rng.gen_range(0.6..1.0);
        for step in 0..per_day {
            let hour = (step * config.minutes_per_sample) as f64 / 60.0;
            let mut oc = OperatingCondition::zeros(out.len(), n);
            let shape = load_shape(hour);
            for i in 0..n {
                let nominal = model.nominal_load()[i];
                let noise = 1.0 + config.noise * rng.gen_range(-1.0..1.0);
                let pf = rng.gen_range(pf_lo..=pf_hi);
                let p = (nominal * config.load_scale * bus_level[i] * shape * noise).max(0.0);
                oc.p_load[i] = p;
                oc.q_load[i] = reactive_from_pf(p, pf);
            }
            let sun = pv_shape(hour) * clearness;
            for &i in &pv_idx {
                let noise = 1.0 + config.noise * rng.gen_range(-1.0..1.0);
                oc.p_gen[i] = (config.pv_peak * sun * noise).max(0.0);
            }
            out.push(oc);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    t: usize,
    bus: BusId,
    p_gen: f64,
    p_load: f64,
    q_load: f64,
}

/// Writes `t,bus,p_gen,p_load,q_load` rows for every bus with a load or PV.
pub fn write_profiles_csv<W: Write>(
    model: &FeederModel,
    profiles: &[OperatingCondition],
    writer: W,
) -> Result<(), ProfileError> {
    let active: BTreeSet<usize> = (0..model.n_buses())
        .filter(|&i| {
            profiles
                .iter()
                .any(|oc| oc.p_gen[i] != 0.0 || oc.p_load[i] != 0.0 || oc.q_load[i] != 0.0)
        })
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    for oc in profiles {
        for &i in &active {
            w.serialize(ProfileRow {
                t: oc.t,
                bus: model.bus_ids()[i],
                p_gen: oc.p_gen[i],
                p_load: oc.p_load[i],
                q_load: oc.q_load[i],
            })?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads the long-format CSV; buses without rows are zero.
pub fn read_profiles_csv<R: Read>(
    model: &FeederModel,
    reader: R,
) -> Result<Vec<OperatingCondition>, ProfileError> {
    let mut r = csv::Reader::from_reader(reader);
    let n = model.n_buses();
    let mut out: Vec<OperatingCondition> = Vec::new();
    for row in r.deserialize() {
        let row: ProfileRow = row?;
        let i = model.index_of(row.bus).ok_or(ProfileError::UnknownBus(row.bus))?;
        if row.p_load < 0.0 || row.q_load < 0.0 {
            return Err(ProfileError::NegativeLoad { t: row.t, bus: row.bus });
        }
        match out.last() {
            Some(last) if last.t == row.t => {}
            Some(last) if last.t > row.t => {
                return Err(ProfileError::OutOfOrder { prev: last.t, got: row.t })
            }
            _ => out.push(OperatingCondition::zeros(row.t, n)),
        }
        let oc = out.last_mut().expect("pushed above");
        oc.p_gen[i] = row.p_gen;
        oc.p_load[i] = row.p_load;
        oc.q_load[i] = row.q_load;
    }
    Ok(out)
}
