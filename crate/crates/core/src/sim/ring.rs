//! Periodic-boundary ring road for wave experiments: Bando-FTL vehicles, an
//! optional controlled vehicle, and the speed-dispersion time series.

use std::collections::VecDeque;

use super::{bando_ftl_accel, BandoFtlParams, GapFault, SimError, MAX_DECEL};

/// Longitudinal policy for a controlled vehicle. Implementations receive the
/// leader state each step and return an acceleration command.
pub trait SpeedController {
    fn accel(&mut self, dt: f64, v: f64, v_leader: f64, gap: f64) -> f64;
}

/// Stand-in controller: drive at the trailing mean of the leader's speed,
/// capped by a gap-dependent safe speed, with bounded acceleration.
pub struct MeanSpeedFollower {
    pub window_s: f64,
    pub relax_s: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    /// Maps a gap to a safe speed; defaults to the ring's optimal velocity.
    safe_speed: Box<dyn Fn(f64) -> f64>,
    history: VecDeque<(f64, f64)>,
    elapsed: f64,
}

impl MeanSpeedFollower {
    pub fn new(window_s: f64, safe_speed: Box<dyn Fn(f64) -> f64>) -> Self {
        MeanSpeedFollower {
            window_s,
            relax_s: 2.0,
            max_accel: 1.5,
            max_decel: 3.0,
            safe_speed,
            history: VecDeque::new(),
            elapsed: 0.0,
        }
    }
}

impl SpeedController for MeanSpeedFollower {
    fn accel(&mut self, dt: f64, v: f64, v_leader: f64, gap: f64) -> f64 {
        self.elapsed += dt;
        self.history.push_back((self.elapsed, v_leader));
        while let Some(&(t, _)) = self.history.front() {
            if self.elapsed - t > self.window_s {
                self.history.pop_front();
            } else {
                break;
            }
        }
        let mean = self.history.iter().map(|(_, s)| s).sum::<f64>() / self.history.len() as f64;
        let target = mean.min((self.safe_speed)(gap)).max(0.0);
        ((target - v) / self.relax_s).clamp(-self.max_decel, self.max_accel)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RingOptions {
    /// Integration step, s.
    pub dt: f64,
    /// Vehicle length, m.
    pub vehicle_length: f64,
    /// Minimum packing headroom per vehicle (jam-gap role), m.
    pub min_gap: f64,
    /// Relative speed perturbation applied to one vehicle at t=0.
    pub perturbation: f64,
    /// Cadence of the dispersion time series, s.
    pub sample_every_s: f64,
}

impl Default for RingOptions {
    fn default() -> Self {
        RingOptions {
            dt: 0.1,
            vehicle_length: 5.0,
            min_gap: 2.0,
            perturbation: 0.01,
            sample_every_s: 1.0,
        }
    }
}

/// Time series of the cross-vehicle speed standard deviation.
#[derive(Debug, Clone)]
pub struct RingStats {
    pub times: Vec<f64>,
    pub speed_std: Vec<f64>,
    pub min_gap_seen: f64,
}

impl RingStats {
    pub fn initial_std(&self) -> f64 {
        *self.speed_std.first().unwrap_or(&0.0)
    }

    pub fn terminal_std(&self) -> f64 {
        *self.speed_std.last().unwrap_or(&0.0)
    }
}

/// Wave-unstable Bando-FTL defaults for the 230 m / 22 vehicle setting.
pub fn wave_unstable_params() -> BandoFtlParams {
    BandoFtlParams {
        relax: 0.6,
        ftl_gain: 2.0,
        v_max: 9.0,
        ov_scale: 6.0,
    }
}

fn speed_std(speeds: &[f64]) -> f64 {
    let n = speeds.len() as f64;
    let mean = speeds.iter().sum::<f64>() / n;
    (speeds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Simulate `n_vehicles` on a ring of the given circumference for `duration`
/// seconds. Vehicles start at the uniform-spacing equilibrium; one vehicle is
/// speed-perturbed at t=0. `controller` replaces vehicle 0 with a prescribed-
/// speed policy; `None` runs the purely human-driven baseline.
pub fn ring_road(
    n_vehicles: usize,
    circumference: f64,
    params: &BandoFtlParams,
    mut controller: Option<Box<dyn SpeedController>>,
    duration: f64,
    opts: &RingOptions,
) -> Result<RingStats, SimError> {
    params.validate()?;
    if n_vehicles < 2 {
        return Err(SimError::BadOptions("ring needs at least 2 vehicles".into()));
    }
    let needed = n_vehicles as f64 * (opts.vehicle_length + opts.min_gap);
    if needed >= circumference {
        return Err(SimError::RingOverfilled {
            n: n_vehicles,
            needed,
            circumference,
        });
    }

    let spacing = circumference / n_vehicles as f64;
    let eq_gap = spacing - opts.vehicle_length;
    let eq_speed = params.optimal_velocity(eq_gap);

    let mut pos: Vec<f64> = (0..n_vehicles).map(|i| i as f64 * spacing).collect();
    let mut speed = vec![eq_speed; n_vehicles];
    // Perturb a mid-pack vehicle so waves have room to propagate both ways.
    speed[n_vehicles / 2] *= 1.0 + opts.perturbation;

    let mut stats = RingStats {
        times: vec![0.0],
        speed_std: vec![speed_std(&speed)],
        min_gap_seen: f64::INFINITY,
    };

    let steps = (duration / opts.dt).ceil() as u64;
    let sample_stride = (opts.sample_every_s / opts.dt).round().max(1.0) as u64;
    let mut accel = vec![0.0f64; n_vehicles];

    for step in 1..=steps {
        for i in 0..n_vehicles {
            // Vehicle ahead on the ring; ordering never changes.
            let lead = (i + 1) % n_vehicles;
            let mut gap = pos[lead] - pos[i] - opts.vehicle_length;
            if lead <= i {
                gap += circumference;
            }
            stats.min_gap_seen = stats.min_gap_seen.min(gap);
            accel[i] = match (&mut controller, i) {
                (Some(ctrl), 0) => ctrl
                    .accel(opts.dt, speed[i], speed[lead], gap)
                    .clamp(-MAX_DECEL, f64::INFINITY),
                _ => bando_ftl_accel(speed[i], speed[lead], gap, params).map_err(|GapFault| {
                    SimError::Collision {
                        t: step as f64 * opts.dt,
                        link: "ring".into(),
                        front: lead as u64,
                        rear: i as u64,
                    }
                })?,
            };
        }
        for i in 0..n_vehicles {
            let new_speed = (speed[i] + accel[i] * opts.dt).max(0.0);
            pos[i] = (pos[i] + 0.5 * (speed[i] + new_speed) * opts.dt).rem_euclid(circumference);
            speed[i] = new_speed;
        }
        if step % sample_stride == 0 {
            stats.times.push(step as f64 * opts.dt);
            stats.speed_std.push(speed_std(&speed));
        }
    }
    Ok(stats)
}

/// The default controller for ring experiments, wired to the ring's own
/// optimal-velocity curve as its safety envelope.
pub fn default_ring_controller(params: &BandoFtlParams) -> Box<dyn SpeedController> {
    let p = *params;
    Box::new(MeanSpeedFollower::new(
        30.0,
        Box::new(move |gap| p.optimal_velocity(gap)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_vehicle_ring_stays_uniform() {
        let params = wave_unstable_params();
        let mut opts = RingOptions::default();
        opts.perturbation = 0.0;
        let stats = ring_road(2, 60.0, &params, None, 120.0, &opts).unwrap();
        assert!(stats.terminal_std() < 1e-9);
    }

    #[test]
    fn overfilled_ring_rejected() {
        let params = wave_unstable_params();
        let opts = RingOptions::default();
        let err = ring_road(40, 230.0, &params, None, 10.0, &opts).unwrap_err();
        assert!(matches!(err, SimError::RingOverfilled { .. }));
    }

    #[test]
    fn unstable_ring_amplifies_perturbation() {
        let params = wave_unstable_params();
        let opts = RingOptions::default();
        let stats = ring_road(22, 230.0, &params, None, 300.0, &opts).unwrap();
        assert!(
            stats.terminal_std() > 3.0 * stats.initial_std(),
            "terminal {} vs initial {}",
            stats.terminal_std(),
            stats.initial_std()
        );
        assert!(stats.min_gap_seen > 0.0);
    }

    #[test]
    fn controller_dampens_ring_waves() {
        let params = wave_unstable_params();
        let opts = RingOptions::default();
        let base = ring_road(22, 230.0, &params, None, 300.0, &opts).unwrap();
        let ctrl = ring_road(
            22,
            230.0,
            &params,
            Some(default_ring_controller(&params)),
            300.0,
            &opts,
        )
        .unwrap();
        assert!(
            ctrl.terminal_std() <= 0.5 * base.terminal_std(),
            "controlled {} vs uncontrolled {}",
            ctrl.terminal_std(),
            base.terminal_std()
        );
    }
}
