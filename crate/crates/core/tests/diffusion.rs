use polydiff_core::diffusion::{
    build_diffusing_orbit, measure_td_with, plan_chain, scaling_study, DiffusionError, DiffusionOptions,
};
use polydiff_core::integrator::integrate;
use polydiff_core::model::{PerturbationSpec, PhasePoint, SystemParams};
use polydiff_core::variational::DiscreteCurve;

fn arnold(mu: f64, a0: f64) -> SystemParams {
    SystemParams::new(mu, a0, PerturbationSpec::arnold())
}

fn short_chain(a0: f64) -> (DiscreteCurve, polydiff_core::diffusion::DiffusionReport) {
    let s = arnold(0.05, a0);
    let plan = plan_chain(1.0, 1.1, 0.05).unwrap();
    build_diffusing_orbit(&plan, &s, &DiffusionOptions::default()).unwrap()
}

#[test]
fn short_chain_is_an_orbit() {
    let (curve, rep) = short_chain(10.0);
    assert_eq!(rep.omega_chain.len(), 3);
    assert_eq!(rep.transitions.len(), 2);
    assert!(rep.transitions.iter().all(|t| t.boundary_margin > 0.0));
    assert!(rep.residual_max <= 1e-8, "{}", rep.residual_max);
    assert!(rep.qdot_start <= 1.0 && rep.qdot_end >= 1.1, "{} {}", rep.qdot_start, rep.qdot_end);

    // Away from the separatrix layers the rotor speed follows the chain.
    let v = curve.segment_velocities();
    for w in rep.apexes.windows(2) {
        let mid = 0.5 * (w[0].0 + w[1].0);
        let k = v.partition_point(|s| s.0 < mid);
        let nearest = rep
            .omega_chain
            .iter()
            .map(|o| (v[k].2 - o).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest <= rep.mu, "mid-loop speed {} at t = {mid}", v[k].2);
    }
}

/// Velocity at node `i` from the discrete Legendre transform of the
/// segment to its right.
fn node_velocity(c: &DiscreteCurve, i: usize, s: &SystemParams) -> (f64, f64) {
    let h = c.times[i + 1] - c.times[i];
    let dq = c.q[i + 1] - c.q[i];
    let dr = c.rotor_diff(i);
    let qm = c.q[i] + 0.5 * dq;
    let rm = c.rotor(i) + 0.5 * dr;
    let tm = c.times[i] + 0.5 * h;
    let [f, f_r, f_q, _] = s.perturbation.first(rm, qm, tm);
    let w = 1.0 - qm.cos();
    let v_q = qm.sin() * (1.0 + s.mu * f) + s.mu * w * f_q;
    let v_r = s.mu * w * f_r;
    (dq / h - 0.5 * h * v_q, dr / h - 0.5 * h * v_r)
}

#[test]
fn relaxed_chain_follows_the_flow_over_a_short_horizon() {
    let s = arnold(0.05, 10.0);
    let (curve, rep) = short_chain(10.0);
    let horizon = 2.5;
    for &(t_apex, _) in &rep.apexes[1..rep.apexes.len() - 1] {
        let i = curve.node_at(t_apex).expect("apex is a mesh node");
        let (qdot, rotor_dot) = node_velocity(&curve, i, &s);
        let start = PhasePoint::new(curve.times[i], curve.q[i], qdot, curve.rotor(i), rotor_dot);
        let mut worst: f64 = 0.0;
        for dir in [-1.0, 1.0] {
            let traj = integrate(start, t_apex + dir * horizon, &s, 1e-11).unwrap();
            for j in 0..curve.len() {
                if (curve.times[j] - t_apex).abs() > horizon || (curve.times[j] - t_apex) * dir < 0.0 {
                    continue;
                }
                let p = traj.sample_at(curve.times[j]).unwrap();
                worst = worst.max((p.q - curve.q[j]).abs()).max((p.rotor - curve.rotor(j)).abs());
            }
        }
        assert!(worst <= 1e-3, "apex at {t_apex}: deviation {worst:e}");
    }
}

#[test]
fn drift_time_scales_with_the_loop_length() {
    let (c1, _) = short_chain(10.0);
    let (c2, _) = short_chain(20.0);
    let t1 = measure_td_with(&c1, 1.0, 1.1).unwrap();
    let t2 = measure_td_with(&c2, 1.0, 1.1).unwrap();
    let ratio = t2 / t1;
    assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn zero_coupling_cannot_change_frequency() {
    let s = arnold(0.0, 10.0);
    assert!(matches!(
        build_diffusing_orbit(&[1.0, 1.05], &s, &DiffusionOptions::default()),
        Err(DiffusionError::Plan(_))
    ));
}

#[test]
fn oversized_steps_are_rejected() {
    let s = arnold(0.05, 10.0);
    assert!(matches!(
        build_diffusing_orbit(&[1.0, 1.2], &s, &DiffusionOptions::default()),
        Err(DiffusionError::Plan(_))
    ));
}

#[test]
fn scaling_needs_distinct_mu() {
    let s = arnold(0.05, 10.0);
    let r = scaling_study(&[0.05, 0.05, 0.05], (1.0, 1.1), &s, &DiffusionOptions::default());
    assert!(matches!(r, Err(DiffusionError::SingularFit)));
}
