//! Monte Carlo trigger rates against closed forms computed here.

use rand::Rng;
use trapsight::simulator::{
    calibrate_sensor, expected_trigger_rate, experiment3_sweep, simulate_pass, trial_rng, trigger_rate,
    CalibrationAnchors, SensorModel, WeevilSpec, DEFAULT_SWEEP_SIZES_MM, DEFAULT_SWEEP_SPEEDS_MM_S,
    FAST_SPEED_MM_S, MEDIUM_SPEED_MM_S, SLOW_SPEED_MM_S,
};

/// Rate by averaging over a fine grid of sampling phases: for each phase the
/// in-zone sample count is counted directly from the distance profile.
fn phase_grid_rate(body: f64, speed: f64, m: &SensorModel) -> f64 {
    let p = m.detection_probability(body);
    let period = 1.0 / m.refresh_hz;
    let half = (m.path_start_mm - m.path_end_mm) / speed;
    let distance = |t: f64| {
        if t <= half {
            m.path_start_mm - speed * t
        } else {
            m.path_end_mm + speed * (t - half)
        }
    };
    let steps = 20_000;
    let mut total = 0.0;
    for i in 0..steps {
        let phase = (i as f64 + 0.5) / steps as f64 * period;
        let mut n = 0;
        let mut t = phase;
        while t <= 2.0 * half {
            if distance(t) < m.trigger_distance_mm {
                n += 1;
            }
            t += period;
        }
        total += 1.0 - (1.0 - p).powi(n);
    }
    100.0 * total / steps as f64
}

#[test]
fn closed_form_matches_phase_grid() {
    let models = [
        SensorModel::default(),
        SensorModel::with_detectability(18.0, 1.0),
        SensorModel::with_detectability(25.0, 0.5),
    ];
    for m in &models {
        for &speed in &[SLOW_SPEED_MM_S, 7.0, MEDIUM_SPEED_MM_S, 45.0, 300.0, FAST_SPEED_MM_S] {
            for &size in &[3.5, 5.0, 9.0, 14.0, 18.0] {
                let a = expected_trigger_rate(size, speed, m);
                let b = phase_grid_rate(size, speed, m);
                assert!((a - b).abs() < 0.05, "size {size} speed {speed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fast_pass_with_certain_detection_is_window_fraction() {
    // in-zone window 110 mm / v at 1 Hz, so the rate is 100 * 110 / v
    let m = SensorModel::with_detectability(18.0, 1.0);
    let want = 100.0 * 110.0 / FAST_SPEED_MM_S;
    assert!((want - 7.2455).abs() < 1e-3);
    assert!((expected_trigger_rate(18.0, FAST_SPEED_MM_S, &m) - want).abs() < 1e-9);
    let mc = trigger_rate(&WeevilSpec::moving(18.0, FAST_SPEED_MM_S), &m, 20_000, 7).unwrap();
    assert!((mc - want).abs() < 1.0, "{mc}");
}

#[test]
fn monte_carlo_tracks_closed_form() {
    let m = SensorModel::default();
    for &speed in &DEFAULT_SWEEP_SPEEDS_MM_S {
        for &size in &DEFAULT_SWEEP_SIZES_MM {
            let mc = trigger_rate(&WeevilSpec::moving(size, speed), &m, 4_000, 11).unwrap();
            let cf = expected_trigger_rate(size, speed, &m);
            // 4000 trials: binomial sd is at most 0.8 points
            assert!((mc - cf).abs() < 3.0, "size {size} speed {speed}: {mc} vs {cf}");
        }
    }
}

#[test]
fn parallel_rate_equals_serial_replay() {
    let m = SensorModel::default();
    let spec = WeevilSpec::moving(9.0, MEDIUM_SPEED_MM_S);
    let trials = 3_000u32;
    let serial = (0..trials)
        .filter(|&i| {
            let mut rng = trial_rng(99, i as u64);
            let phase = rng.random::<f64>() / m.refresh_hz;
            simulate_pass(&spec, &m, phase, &mut rng)
        })
        .count();
    let rate = trigger_rate(&spec, &m, trials, 99).unwrap();
    assert_eq!(rate, 100.0 * serial as f64 / trials as f64);
}

#[test]
fn calibration_hits_both_anchors() {
    let anchors = CalibrationAnchors::default();
    let cal = calibrate_sensor(&anchors).unwrap();
    assert!((cal.medium_rate_pct - 95.0).abs() < 1e-6, "{}", cal.medium_rate_pct);
    assert!((cal.fast_rate_pct - 5.0).abs() < 1e-6, "{}", cal.fast_rate_pct);
    assert!(cal.model.size_ref_mm > 18.0);
    assert!(cal.model.gamma > 0.0);
    assert_eq!(SensorModel::default(), cal.model);
    println!("size_ref = {:.4} mm, gamma = {:.4}", cal.model.size_ref_mm, cal.model.gamma);
    // slow passes leave ~61 in-zone samples; swept sizes above 12 mm never miss
    for size in [13.5, 15.0, 16.0, 18.0] {
        assert!(expected_trigger_rate(size, SLOW_SPEED_MM_S, &cal.model) > 99.999);
    }
}

#[test]
fn sweep_rows_rise_with_size() {
    let table = experiment3_sweep(
        &DEFAULT_SWEEP_SIZES_MM,
        &DEFAULT_SWEEP_SPEEDS_MM_S,
        &SensorModel::default(),
        1_000,
        2024,
    )
    .unwrap();
    for si in 0..DEFAULT_SWEEP_SPEEDS_MM_S.len() {
        let row = table.row(si);
        for pair in row.windows(2) {
            assert!(
                pair[1].trigger_rate_pct >= pair[0].trigger_rate_pct - 3.0,
                "{:?} -> {:?}",
                pair[0],
                pair[1]
            );
        }
    }
    let again = experiment3_sweep(
        &DEFAULT_SWEEP_SIZES_MM,
        &DEFAULT_SWEEP_SPEEDS_MM_S,
        &SensorModel::default(),
        1_000,
        2024,
    )
    .unwrap();
    assert_eq!(table, again);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 1 + 33);
    assert!(csv.starts_with("size_mm,speed_mm_s,trigger_rate_pct\n"));
}
