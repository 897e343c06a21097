//! End-to-end flight tests: open-loop replay fidelity against the
//! collocation interpolant, and closed-loop flight of a policy trained to
//! memorize a single reference trajectory.

use gcnet::dynamics::{ModelParams, QuadState};
use gcnet::policy::{assemble_features, PolicyNet, TrainConfig, TrainingSet, Variant};
use gcnet::sim::{
    evaluate_tracking, replay_open_loop, simulate_closed_loop, Outcome, SimConfig, SwitchRule,
    Track, Waypoint,
};
use gcnet::trajopt::{refine_node_doubling, solve_ocp, FinalConditions, OcpSpec, Trajectory};
use nalgebra::Vector3;
use ndarray::Array2;

/// One mild rest-to-rest reference: 4 m diagonal approach to the origin.
fn reference(epsilon: f64, n_segments: usize) -> Trajectory {
    reference_from(Vector3::new(-4.0, 0.8, -0.5), 0.2, epsilon, n_segments)
}

fn reference_from(start: Vector3<f64>, psi0: f64, epsilon: f64, n_segments: usize) -> Trajectory {
    let params = ModelParams::default();
    let x0 = QuadState::hover_at(start, psi0, &params);
    let spec = OcpSpec {
        epsilon,
        x0,
        final_conditions: FinalConditions::rest_at(Vector3::zeros(), 0.0),
        params,
        m_ext: Vector3::zeros(),
        intermediate: None,
        n_segments,
        t_max: Some(6.0),
    };
    solve_ocp(&spec, None).unwrap()
}

/// Imitation set over the reference nodes: policy features in the final
/// gate's frame against the node throttles.
fn node_set(traj: &Trajectory) -> TrainingSet {
    let target = traj.spec.final_conditions.position;
    let n = traj.states.len();
    let mut features = Array2::zeros((n, 19));
    let mut labels = Array2::zeros((n, 4));
    for (k, (state, control)) in traj.states.iter().zip(&traj.controls).enumerate() {
        let f = assemble_features(Variant::Base, state, &target, &[]).unwrap();
        for (j, v) in f.iter().enumerate() {
            features[[k, j]] = *v;
        }
        for (j, v) in control.as_array().iter().enumerate() {
            labels[[k, j]] = *v;
        }
    }
    TrainingSet { features, labels }
}

/// Never-switching single-gate track at the reference target.
fn hold_track(target: Vector3<f64>) -> Track {
    Track {
        waypoints: vec![Waypoint { position: target, heading: 0.0 }],
        rule: SwitchRule::DistanceThreshold(0.0),
        laps: 1,
    }
}

#[test]
fn open_loop_replay_follows_the_reference() {
    // The rotor lag (tau = 30 ms) keeps coarse grids pre-asymptotic, so the
    // interpolant is only integrator-grade after refinement well below tau.
    let traj = refine_node_doubling(&reference(0.5, 40), 320).unwrap();
    let replayed = replay_open_loop(&traj, &SimConfig::default()).unwrap();
    assert_eq!(replayed.len(), traj.states.len());
    let worst = replayed
        .iter()
        .zip(&traj.states)
        .map(|(sim, node)| (sim.position - node.position).norm())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-3, "worst node position gap {worst:.2e} m");
}

#[test]
fn memorized_policy_reflies_its_reference() {
    let traj = reference(1.0, 30);
    let set = node_set(&traj);
    let mut net = PolicyNet::new_seeded(Variant::Base, 3000.0, 12000.0, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: set.len(),
        seed: 9,
        learning_rate: 0.01,
        plateau_patience: 1,
        plateau_factor: 0.999,
        plateau_threshold: f64::INFINITY,
    };
    let report = net.train(&set, &set, &cfg).unwrap();
    let loss = *report.train_loss.last().unwrap();
    assert!(loss < 1e-6, "memorization stalled at {loss:.2e}");

    let sim_cfg = SimConfig { max_time: traj.final_time, ..SimConfig::default() };
    let track = hold_track(traj.spec.final_conditions.position);
    let log =
        simulate_closed_loop(&traj.spec.x0, &net, &track, &sim_cfg, &traj.spec.params).unwrap();
    assert_eq!(log.outcome, Outcome::TimeLimit);
    let miss = (log.final_state().position - traj.spec.final_conditions.position).norm();
    assert!(miss < 0.3, "closed-loop flight missed the gate by {miss:.3} m");

    // The tracking metric against the same reference agrees with the flight.
    let errors = evaluate_tracking(&net, &[traj], 12000.0, &SimConfig::default()).unwrap();
    assert_eq!(errors.len(), 1);
    assert!(errors[0] < 0.3, "mean tracking error {:.3} m", errors[0]);
}

#[test]
fn probe_closed_loop_drift() {
    let traj = refine_node_doubling(
        &reference_from(Vector3::new(-2.0, 0.4, -0.3), 0.1, 1.0, 40), 320).unwrap();
    let set = node_set(&traj);
    let mut net = PolicyNet::new_seeded(Variant::Base, 3000.0, 12000.0, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 6000,
        batch_size: set.len(),
        seed: 9,
        learning_rate: 0.01,
        plateau_patience: 1,
        plateau_factor: 0.9995,
        plateau_threshold: f64::INFINITY,
    };
    let report = net.train(&set, &set, &cfg).unwrap();
    println!("loss {:.3e}", report.train_loss.last().unwrap());

    let sim_cfg = SimConfig { max_time: traj.final_time, ..SimConfig::default() };
    let track = hold_track(traj.spec.final_conditions.position);
    let log =
        simulate_closed_loop(&traj.spec.x0, &net, &track, &sim_cfg, &traj.spec.params).unwrap();
    println!("reference T = {:.3}, outcome {:?}", traj.final_time, log.outcome);
    let miss = (log.final_state().position - traj.spec.final_conditions.position).norm();
    println!("final miss {miss:.3} m");
    for row in log.rows.iter().step_by(20) {
        let p = row.state.position;
        println!(
            "t {:.2} pos ({:+.2} {:+.2} {:+.2}) u ({:.3} {:.3} {:.3} {:.3})",
            row.t, p.x, p.y, p.z, row.u[0], row.u[1], row.u[2], row.u[3]
        );
    }
    for (k, (s, c)) in traj.states.iter().zip(&traj.controls).enumerate().step_by(6) {
        let p = s.position;
        println!(
            "ref node {k} t {:.2} pos ({:+.2} {:+.2} {:+.2}) u ({:.3} {:.3} {:.3} {:.3})",
            traj.times[k], p.x, p.y, p.z,
            c.as_array()[0], c.as_array()[1], c.as_array()[2], c.as_array()[3]
        );
    }
}
