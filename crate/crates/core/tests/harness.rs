use std::path::Path;

use covshape::harness::{ergodic_bound_point, records_to_csv, sidecar_path, write_outputs, CSV_HEADER};
use covshape::{run_point, run_sweep, ExperimentConfig, PrecoderKind, Scheme, ScenarioFile};
use serde_json::json;

fn config(scenario: &str, extra: serde_json::Value) -> ExperimentConfig {
    let mut doc = json!({
        "scenario": scenario,
        "scheme": "both",
        "precoder": "mmse",
        "sweep": {"variable": "m", "values": [32]},
        "trials": 40,
        "seed": 5,
    });
    for (k, v) in extra.as_object().unwrap() {
        doc[k] = v.clone();
    }
    serde_json::from_value(doc).unwrap()
}

fn write_scenario(dir: &Path, name: &str, file: &ScenarioFile) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string(file).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn points_are_reproducible_and_seed_sensitive() {
    let cfg = config("bundled:nlos_2ue", json!({}));
    let a = run_point(&cfg, 32.0, 0).unwrap();
    let b = run_point(&cfg, 32.0, 0).unwrap();
    assert_eq!(records_to_csv(&a), records_to_csv(&b));
    let other = config("bundled:nlos_2ue", json!({"seed": 6}));
    let c = run_point(&other, 32.0, 0).unwrap();
    assert_ne!(a[0].mean_sum_rate, c[0].mean_sum_rate);
}

#[test]
fn scheduled_slot_equals_half_of_a_lone_ue() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = ScenarioFile::bundled("nlos_2ue").unwrap();
    let both = write_scenario(dir.path(), "two.json", &file);
    file.ues.truncate(1);
    let lone = write_scenario(dir.path(), "one.json", &file);

    let scheduled = run_point(&config(&both, json!({"scheduling": true})), 32.0, 0).unwrap();
    let single = run_point(&config(&lone, json!({})), 32.0, 0).unwrap();
    for (s, l) in scheduled.iter().zip(&single) {
        assert_eq!(s.scheme, l.scheme);
        let want = 0.5 * l.per_ue_rate[0];
        assert!((s.per_ue_rate[0] - want).abs() <= 1e-12 * want, "{:?}: {} vs {}", s.scheme, s.per_ue_rate[0], want);
        let sum: f64 = s.per_ue_rate.iter().sum();
        assert!((s.mean_sum_rate - sum).abs() <= 1e-9 * sum);
    }
}

#[test]
fn stderr_shrinks_with_the_square_root_of_trials() {
    let small = run_point(&config("bundled:nlos_2ue", json!({"trials": 200})), 32.0, 0).unwrap();
    let large = run_point(&config("bundled:nlos_2ue", json!({"trials": 800})), 32.0, 0).unwrap();
    for (s, l) in small.iter().zip(&large) {
        let ratio = s.stderr / l.stderr;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{:?}: ratio {ratio}", s.scheme);
    }
}

#[test]
fn louder_receiver_noise_lowers_every_rate() {
    let quiet = run_point(&config("bundled:nlos_2ue", json!({})), 32.0, 0).unwrap();
    let noisy = run_point(&config("bundled:nlos_2ue", json!({"sigma2_ue_dbm": -60.0})), 32.0, 0).unwrap();
    for (q, n) in quiet.iter().zip(&noisy) {
        assert!(n.mean_sum_rate < q.mean_sum_rate, "{:?}", q.scheme);
    }
}

#[test]
fn baseline_skips_the_optimizer() {
    let cfg = config("bundled:nlos_2ue", json!({"baseline": true, "scheme": "covariance_shaping"}));
    let r = &run_point(&cfg, 32.0, 0).unwrap()[0];
    assert_eq!(r.iterations, 0);
    assert!(r.mean_sum_rate.is_finite() && r.mean_sum_rate > 0.0);
    let optimized = &run_point(&config("bundled:nlos_2ue", json!({"scheme": "covariance_shaping"})), 32.0, 0).unwrap()[0];
    assert!(optimized.iterations > 0);
}

#[test]
fn closed_form_bound_stays_below_the_simulated_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = ScenarioFile::bundled("nlos_2ue").unwrap();
    file.ues.truncate(1);
    let lone = write_scenario(dir.path(), "one.json", &file);
    let cfg = config(&lone, json!({"scheme": "covariance_shaping", "precoder": "mrt", "trials": 400}));
    for m in [16.0, 64.0] {
        let bound = ergodic_bound_point(&cfg, m).unwrap();
        let r = &run_point(&cfg, m, 0).unwrap()[0];
        assert!(r.mean_sum_rate >= bound - 2.0 * r.stderr, "M={m}: {} ± {} vs {bound}", r.mean_sum_rate, r.stderr);
    }
}

#[test]
fn sweep_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "bundled:nlos_4ue",
        json!({"sweep": {"variable": "d", "values": [4, 8]}, "trials": 8, "precoder": "mrt"}),
    );
    let records = run_sweep(&cfg, Some(2)).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.precoder == PrecoderKind::Mrt));
    assert_eq!(records[0].scheme, Scheme::CovarianceShaping);
    let csv = dir.path().join("out.csv");
    write_outputs(&cfg, &records, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("d,4,covariance_shaping,mrt,"));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&csv)).unwrap()).unwrap();
    assert_eq!(meta["records"].as_array().unwrap().len(), 4);
    assert_eq!(meta["config"]["trials"], 8);
}

#[test]
fn invalid_configs_are_rejected() {
    for extra in [json!({"trials": 0}), json!({"sweep": {"variable": "m", "values": []}}), json!({"pilot": {"p": 3}})] {
        let cfg = config("bundled:nlos_2ue", extra.clone());
        assert!(run_sweep(&cfg, Some(1)).is_err(), "{extra}");
    }
    let unknown = serde_json::from_value::<ExperimentConfig>(json!({
        "scenario": "bundled:nlos_2ue", "scheme": "both", "precoder": "mmse",
        "sweep": {"variable": "m", "values": [8]}, "trails": 3,
    }));
    assert!(unknown.is_err());
}
