use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use soh_core::dataset::{read_dataset, write_dataset, DataSchemaConfig, DatasetId, RelaxationCurve};
use soh_core::evaluation::{feature_table, rmse, ExperimentConfig};
use soh_core::features::{fit_ecm, relaxation_model_voltage, EcmFitOptions, EcmParams, FeatureFamily};
use soh_core::learners::{train, LearnerConfig, LearnerKind};
use soh_core::synthgen::{gen_aging_dataset, gen_relaxation_curve, SamplingGrid, SynthConfig};
use soh_core::transfer::{construct_td, tl2_fit_transform, tl3_fit, zsl_predict, Samples, TdSpec};

fn small(seed: u64) -> SynthConfig {
    let mut cfg = SynthConfig::benchmark(seed);
    cfg.cells_per_condition = 3;
    cfg.record_every = 100;
    cfg
}

#[test]
fn generated_dataset_survives_csv_round_trip() {
    let ds = gen_aging_dataset(&small(2)).unwrap().dataset;
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let (back, warnings) = read_dataset(buf.as_slice(), &DataSchemaConfig::default()).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(back, ds);
}

#[test]
fn noise_free_fits_recover_generator_truth() {
    let cfg = small(4).with_noise(0.0);
    let out = gen_aging_dataset(&cfg).unwrap();
    for (rec, truth) in out.dataset.records().iter().zip(&out.truth) {
        let p = fit_ecm(&rec.curve, &EcmFitOptions::default()).unwrap();
        let t = truth.params();
        for (a, b) in
            [(p.ocv_v, t.ocv_v), (p.r1_ohm, t.r1_ohm), (p.r2_ohm, t.r2_ohm), (p.c1_f, t.c1_f), (p.c2_f, t.c2_f)]
        {
            assert!((a - b).abs() <= 1e-3 * b.abs(), "{} cycle {}: {a} vs {b}", truth.cell_id, truth.cycle_number);
        }
        assert!((p.r0_ohm - t.r0_ohm).abs() < 1e-6);
        assert!(p.fit_rss < 1e-12);
    }
}

/// Smallest RSS over a log grid of time constants up to `tau_max`, with OCV
/// and the two branch amplitudes solved by least squares at each node. Nodes
/// whose amplitudes leave `[0, amp_max]` are skipped.
fn grid_oracle_rss(curve: &RelaxationCurve, tau_max: f64, amp_max: f64) -> f64 {
    let top = tau_max.log10();
    let taus: Vec<f64> = (0..=120).map(|k| 10f64.powf(0.5 + (top - 0.5) * k as f64 / 120.0)).collect();
    let y = DVector::from_column_slice(&curve.voltages_v);
    let mut best = f64::INFINITY;
    for (a, &t1) in taus.iter().enumerate() {
        for &t2 in &taus[a..] {
            let m = DMatrix::from_fn(curve.len(), 3, |i, j| match j {
                0 => 1.0,
                1 => (-curve.times_s[i] / t1).exp(),
                _ => (-curve.times_s[i] / t2).exp(),
            });
            let Ok(c) = m.clone().svd(true, true).solve(&y, 1e-14) else { continue };
            if [c[1], c[2]].iter().any(|a| !(0.0..=amp_max).contains(a)) {
                continue;
            }
            best = best.min((m * c - &y).norm_squared());
        }
    }
    best
}

#[test]
fn noisy_fit_is_no_worse_than_truth_or_grid_oracle() {
    let truth = EcmParams::new(4.18, 0.0, 0.01, 2000.0, 0.03, 40000.0);
    let grid = SamplingGrid::of(DatasetId::D1);
    let opts = EcmFitOptions::default();
    for seed in 0..10 {
        let curve = gen_relaxation_curve(&truth, -0.177, grid, 0.5e-3, seed);
        let p = fit_ecm(&curve, &opts).unwrap();
        let truth_rss: f64 = curve
            .times_s
            .iter()
            .zip(&curve.voltages_v)
            .map(|(&t, v)| (relaxation_model_voltage(&truth, -0.177, t) - v).powi(2))
            .sum();
        // amplitude cap: |I| times the 10 Ω resistance ceiling
        let oracle = grid_oracle_rss(&curve, opts.tau_max_factor * curve.last_time(), 0.177 * 10.0);
        assert!(p.fit_rss <= truth_rss, "seed {seed}: {} vs truth {truth_rss}", p.fit_rss);
        assert!(p.fit_rss <= oracle * (1.0 + 1e-9), "seed {seed}: {} vs grid {oracle}", p.fit_rss);
    }
}

#[test]
fn tl3_fits_target_at_least_as_well_as_zsl() {
    let ds = gen_aging_dataset(&small(6)).unwrap().dataset;
    let cfg = ExperimentConfig { features: FeatureFamily::Stats, ..Default::default() };
    let table = feature_table(&ds, &cfg).unwrap();
    let half = ds.len() / 2;
    let sd = Samples::from_table(&table, 0..half);
    let td = Samples { x: table.x[half..].to_vec(), y: table.y[half..].iter().map(|y| y - 1.5).collect() };
    let learner = LearnerConfig::of(LearnerKind::Gpr);
    let base = train(&learner, &sd.x, &sd.y, 0).unwrap();
    let delta = tl3_fit(&base, &td, &learner, 0).unwrap();
    let zsl = rmse(&td.y, &zsl_predict(&base, &td.x).unwrap()).unwrap();
    let tl3: Vec<f64> = td.x.iter().map(|x| delta.predict(x).unwrap()).collect();
    assert!(rmse(&td.y, &tl3).unwrap() <= zsl);
}

fn params() -> impl Strategy<Value = (EcmParams, f64)> {
    (4.0..4.2f64, 0.01..0.3f64, 60.0..300.0f64, 0.01..0.3f64, 5.0..10.0f64, -0.5..-0.05f64)
        .prop_map(|(ocv, r1, tau1, r2, ratio, i)| (EcmParams::new(ocv, 0.02, r1, tau1 / r1, r2, tau1 * ratio / r2), i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fits_are_canonical_and_shift_only_ocv((p, i) in params(), delta in -0.05..0.05f64) {
        let curve = gen_relaxation_curve(&p, i, SamplingGrid::of(DatasetId::D1), 0.0, 0);
        let shifted = RelaxationCurve::new(
            curve.times_s.clone(),
            curve.voltages_v.iter().map(|v| v + delta).collect(),
            curve.cutoff_current_a,
            curve.charge_end_voltage_v + delta,
        ).unwrap();
        let a = fit_ecm(&curve, &EcmFitOptions::default()).unwrap();
        let b = fit_ecm(&shifted, &EcmFitOptions::default()).unwrap();
        prop_assert!(a.tau1() <= a.tau2() && b.tau1() <= b.tau2());
        prop_assert!((b.ocv_v - a.ocv_v - delta).abs() < 1e-6);
        for (x, y) in [(a.r1_ohm, b.r1_ohm), (a.r2_ohm, b.r2_ohm), (a.c1_f, b.c1_f), (a.c2_f, b.c2_f)] {
            prop_assert!((x - y).abs() <= 1e-3 * x.abs());
        }
    }

    #[test]
    fn charging_relaxation_decays_monotonically((p, i) in params(), t in 0.0..5000.0f64, dt in 1.0..500.0f64) {
        prop_assert!(relaxation_model_voltage(&p, i, t + dt) <= relaxation_model_voltage(&p, i, t));
    }

    #[test]
    fn td_is_a_subset_with_per_condition_counts(seed in 0..1000u64, stride in 1..300u32, cells in 1..=3usize) {
        let ds = gen_aging_dataset(&small(1)).unwrap().dataset;
        let td = construct_td(&ds, &TdSpec { cycle_stride: stride, cells_per_condition: cells, seed }).unwrap();
        for r in td.records() {
            prop_assert!(ds.records().contains(r));
            prop_assert_eq!((r.cycle_number - 1) % stride, 0);
        }
        for (_, ids) in td.conditions() {
            prop_assert_eq!(ids.len(), cells);
        }
    }

    #[test]
    fn tl2_is_never_worse_than_identity(shift in -0.02..0.02f64, seed in 0..50u64) {
        let x: Vec<Vec<f64>> = (0..30).map(|k| vec![k as f64 / 30.0, ((k * 7 + seed as usize) % 13) as f64 / 13.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 90.0 + 5.0 * r[0] - 3.0 * r[1] * r[1]).collect();
        let model = train(&LearnerConfig::of(LearnerKind::Gbrt), &x, &y, seed).unwrap();
        let td = Samples { x: x.iter().map(|r| vec![r[0] + shift, r[1]]).collect(), y };
        let fit = tl2_fit_transform(&model, &td).unwrap();
        prop_assert!(fit.rmse <= fit.identity_rmse);
    }
}
