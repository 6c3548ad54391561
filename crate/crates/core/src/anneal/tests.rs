use super::*;
use crate::arcdata::NormalizationSpec;
use crate::grad::JacobianMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Affine decoder `x = base + Σ z_j·basis_j` in normalized units.
struct ToyDecoder {
    base: Vec<f64>,
    basis: Vec<Vec<f64>>,
    norm: NormalizationSpec,
}

impl ToyDecoder {
    fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = (0..ARC_CELLS)
            .map(|i| if i < CHANNEL_CELLS { -0.1 } else { 0.2 })
            .collect();
        let basis = (0..d)
            .map(|_| (0..ARC_CELLS).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self {
            base,
            basis,
            norm: NormalizationSpec::default(),
        }
    }
}

impl LatentDecoder for ToyDecoder {
    fn latent_dim(&self) -> usize {
        self.basis.len()
    }

    fn normalization(&self) -> &NormalizationSpec {
        &self.norm
    }

    fn decode_latent(&self, z: &[f64]) -> Result<NormalizedArc> {
        let mut x = self.base.clone();
        for (zj, b) in z.iter().zip(&self.basis) {
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi += zj * bi;
            }
        }
        Ok(NormalizedArc::from_vec(x)?.clamp_gaps())
    }

    fn encode_latent(&self, _x: &NormalizedArc) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.latent_dim()])
    }

    fn jacobian(&self, _z: &[f64]) -> Result<JacobianMatrix> {
        Err(Error::Config("toy decoder has no Jacobian".into()))
    }
}

fn target_arc(seed: u64) -> Arc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: f64 = rng.gen_range(-5.0..5.0);
    let mut pos = vec![0.0; CHANNEL_CELLS];
    let mut gap = vec![0.0; CHANNEL_CELLS];
    for c in 0..N_CONTROL_POINTS {
        for l in 30..50 {
            let phase = c as f64 / 12.0 + l as f64 / 9.0;
            pos[c * N_LEAVES + l] = shift + 6.0 * phase.sin();
            gap[c * N_LEAVES + l] = 10.0 + 5.0 * phase.cos();
        }
    }
    Arc::new("t", pos, gap).unwrap()
}

fn iterations(n: usize) -> StoppingRule {
    StoppingRule::MaxIterations(n)
}

#[test]
fn geometry_init_toy_row() {
    assert_eq!(geometry_init_row(&[3.0, 1.0, 4.0, 2.0, 5.0, 0.0]), vec![3.0, 3.0, 4.0, 5.0, 5.0, 3.0]);
}

#[test]
fn geometry_init_keeps_constant_rows() {
    assert_eq!(geometry_init_row(&[7.0; 80]), vec![7.0; 80]);
}

#[test]
fn geometry_init_full_row_hand_trace() {
    // Leaf 40 is the overlap: the backward sweep writes it last.
    let mut t = vec![0.0; 80];
    t[0] = 1.0;
    t[20] = 5.0;
    t[40] = 2.0;
    t[60] = 4.0;
    let s = geometry_init_row(&t);
    assert!(s[1..20].iter().all(|v| *v == 1.0));
    assert!(s[20..40].iter().all(|v| *v == 5.0));
    assert_eq!(s[40], 4.0);
    assert!(s[41..=60].iter().all(|v| *v == 4.0));
    assert!(s[61..].iter().all(|v| *v == 1.0));
}

proptest! {
    #[test]
    fn geometry_init_dominates_forward_half(row in prop::collection::vec(-20.0f64..20.0, 80)) {
        let s = geometry_init_row(&row);
        for l in 0..=40 {
            prop_assert!(s[l] >= row[l]);
        }
        // Leaf 40 belongs to the backward sweep.
        for l in 0..39 {
            prop_assert!(s[l + 1] >= s[l]);
        }
    }

    #[test]
    fn position_objective_is_symmetric(
        a in prop::collection::vec(-30.0f64..30.0, ARC_CELLS),
        b in prop::collection::vec(-30.0f64..30.0, ARC_CELLS),
    ) {
        let (eab, _) = position_objective(&a, &b).unwrap();
        let (eba, _) = position_objective(&b, &a).unwrap();
        prop_assert_eq!(eab, eba);
    }

    #[test]
    fn dao_proposals_keep_gaps_open(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = FullDaoSpace::from_roi(&[true; N_LEAVES]);
        let mut state = State::Cells(vec![0.0; ARC_CELLS]);
        for _ in 0..5 {
            state = SearchSpace::FullDao(&space).propose(&state, 1.0, &mut rng);
        }
        let State::Cells(v) = state else { unreachable!() };
        prop_assert!(v[CHANNEL_CELLS..].iter().all(|g| *g >= 0.0));
    }
}

#[test]
fn roi_examples() {
    let static_arc = Arc::new("s", vec![1.0; CHANNEL_CELLS], vec![2.0; CHANNEL_CELLS]).unwrap();
    assert!(select_roi(&static_arc).iter().all(|m| !m));

    let mut pos = vec![0.0; CHANNEL_CELLS];
    for c in 0..N_CONTROL_POINTS {
        pos[c * N_LEAVES + 10] = if c % 2 == 0 { 5.0 } else { -5.0 };
    }
    let one = Arc::new("o", pos, vec![0.0; CHANNEL_CELLS]).unwrap();
    let roi = select_roi(&one);
    let on: Vec<usize> = (0..N_LEAVES).filter(|l| roi[*l]).collect();
    assert_eq!(on, vec![8, 9, 10, 11, 12]);

    let mut gap = vec![0.0; CHANNEL_CELLS];
    for (i, g) in gap.iter_mut().enumerate() {
        *g = if (i / N_LEAVES) % 2 == 0 { 10.0 } else { 0.0 };
    }
    let all = Arc::new("a", vec![0.0; CHANNEL_CELLS], gap).unwrap();
    assert!(select_roi(&all).iter().all(|m| *m));
}

#[test]
fn roi_threshold_is_strict() {
    // Alternating ±2 has a population σ of exactly 2.
    let mut pos = vec![0.0; CHANNEL_CELLS];
    for c in 0..N_CONTROL_POINTS {
        pos[c * N_LEAVES + 40] = if c % 2 == 0 { 2.0 } else { -2.0 };
    }
    let arc = Arc::new("e", pos, vec![0.0; CHANNEL_CELLS]).unwrap();
    assert!(select_roi(&arc).iter().all(|m| !m));
}

#[test]
fn position_objective_examples() {
    let t = vec![1.5; ARC_CELLS];
    let (e, err) = position_objective(&t, &t).unwrap();
    assert_eq!(e, 0.0);
    assert!(err.iter().all(|v| *v == 0.0));
    let mut s = t.clone();
    s[77] += 2.0;
    assert_eq!(position_objective(&s, &t).unwrap().0, 4.0 / 12_800.0);
    assert!(matches!(position_objective(&s[1..], &t), Err(Error::ShapeMismatch(_))));
}

#[test]
fn acceptance_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!((0..1000).all(|_| accept(-1.0, 0.5, &mut rng)));
    let hits = (0..10_000).filter(|_| accept(0.7, 0.7, &mut rng)).count();
    assert!((hits as f64 / 1e4 - (-1.0f64).exp()).abs() < 0.02, "{hits}");
    assert_eq!((0..10_000).filter(|_| accept(1e-3, 1e-12, &mut rng)).count(), 0);
    assert!(!accept(0.0, 0.0, &mut rng));
}

#[test]
fn empty_roi_proposes_the_same_state() {
    let space = FullDaoSpace::from_roi(&[false; N_LEAVES]);
    let state = State::Cells(vec![3.0; ARC_CELLS]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(SearchSpace::FullDao(&space).propose(&state, 1.0, &mut rng), state);
}

#[test]
fn dao_proposal_touches_a_tenth_of_one_control_point() {
    let mut roi = [false; N_LEAVES];
    roi[..10].iter_mut().for_each(|m| *m = true);
    let space = FullDaoSpace::from_roi(&roi);
    assert_eq!(space.cells.len(), 1600);
    assert_eq!(space.n_groups(), N_CONTROL_POINTS);
    assert_eq!(space.per_step(0), 2);
    let state = State::Cells(vec![50.0; ARC_CELLS]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..200 {
        let State::Cells(v) = SearchSpace::FullDao(&space).propose(&state, 1.0, &mut rng) else {
            unreachable!()
        };
        let changed: Vec<usize> = (0..ARC_CELLS).filter(|i| v[*i] != 50.0).collect();
        assert!(changed.len() <= 2);
        assert!(changed.iter().all(|i| roi[i % N_LEAVES]));
        let cps: std::collections::HashSet<usize> = changed.iter().map(|i| (i % CHANNEL_CELLS) / N_LEAVES).collect();
        assert!(cps.len() <= 1);
        seen.extend(cps);
        assert!(changed.iter().all(|i| {
            let d = v[*i] - 50.0;
            d.fract() == 0.0 && d.abs() <= 3.0
        }));
    }
    assert!(seen.len() > 40);
}

#[test]
fn latent_proposal_changes_the_sampled_count() {
    let dec = ToyDecoder::new(32, 1);
    let space = LatentSpace::new(&dec);
    assert_eq!(space.coords_per_step, 4);
    let z = State::Latent(vec![0.0; 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let State::Latent(c) = SearchSpace::Latent(space).propose(&z, 0.5, &mut rng) else {
        unreachable!()
    };
    assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 4);
    assert_eq!(LatentSpace::new(&ToyDecoder::new(3, 1)).coords_per_step, 1);
}

#[test]
fn one_iteration_budget_runs_once() {
    let target = target_arc(0);
    let cfg = AnnealConfig::default();
    let m = full_dao_position_trial(&target, &iterations(1), &TimingModel::default(), &cfg).unwrap();
    assert_eq!(m.iterations, 1);
    assert_eq!(m.trace.len(), 1);
    assert!(StoppingRule::MaxIterations(0).validate().is_err());
    let zero_window = StoppingRule::RelativeImprovement {
        threshold: 0.01,
        window: Window::Iterations(0),
    };
    assert!(zero_window.validate().is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let target = target_arc(0);
    let bad = AnnealConfig {
        beta: 1.0,
        ..AnnealConfig::default()
    };
    assert!(matches!(
        full_dao_position_trial(&target, &iterations(5), &TimingModel::default(), &bad),
        Err(Error::Config(_))
    ));
    let timing = TimingModel {
        t_d: -0.01,
        ..TimingModel::default()
    };
    assert!(full_dao_position_trial(&target, &iterations(5), &timing, &AnnealConfig::default()).is_err());
}

#[test]
fn best_so_far_never_increases() {
    let target = target_arc(4);
    let cfg = AnnealConfig {
        seed: 4,
        ..AnnealConfig::default()
    };
    let dao = full_dao_position_trial(&target, &iterations(400), &TimingModel::default(), &cfg).unwrap();
    let dec = ToyDecoder::new(8, 2);
    let lat = latent_position_trial(&dec, &target, &iterations(400), &TimingModel::default(), &cfg).unwrap();
    for m in [&dao, &lat] {
        assert!(m.trace.windows(2).all(|w| w[1].best <= w[0].best));
        assert_eq!(m.trace.last().unwrap().best, m.best_objective);
        assert!(m.best_objective <= m.initial_objective);
        let e = position_objective(&m.best_arc, &target.to_vec()).unwrap().0;
        assert_eq!(e, m.best_objective);
    }
}

#[test]
fn greedy_moves_strictly_decrease() {
    let target = target_arc(5);
    let init = geometry_init_arc(&target).unwrap();
    let space = FullDaoSpace::from_roi(&select_roi(&init));
    // β close to 0 drives the temperature to zero after one step.
    let cfg = AnnealConfig {
        beta: 1e-300,
        ..AnnealConfig::default()
    };
    let m = run_trial(
        SearchSpace::FullDao(&space),
        &PositionObjective::new(&target),
        State::Cells(init.to_vec()),
        &[],
        &iterations(300),
        &TimingModel::default(),
        &cfg,
    )
    .unwrap();
    let mut prev = m.initial_objective;
    for r in &m.trace {
        if r.temperature == 0.0 && r.accepted {
            assert!(r.objective < prev);
        }
        prev = r.objective;
    }
    assert!(m.trace[2..].iter().all(|r| r.temperature == 0.0));
}

#[test]
fn virtual_clock_charges_each_iteration() {
    let target = target_arc(1);
    for t_d in [0.01, 0.05, 0.1] {
        let timing = TimingModel {
            clock: ClockMode::Virtual,
            t_d,
            t_o: NOMINAL_T_O_FULL,
        };
        let m = full_dao_position_trial(&target, &iterations(250), &timing, &AnnealConfig::default()).unwrap();
        let expected = m.iterations as f64 * (NOMINAL_T_O_FULL + t_d);
        assert!((m.time - expected).abs() <= 0.01 * expected);
        assert!(m.mean_measured_t_o > 0.0);
    }
}

#[test]
fn time_budget_stops_on_the_virtual_clock() {
    let timing = TimingModel {
        clock: ClockMode::Virtual,
        t_d: 0.1,
        t_o: 0.0,
    };
    let m = full_dao_position_trial(&target_arc(2), &StoppingRule::TimeBudget(2.0), &timing, &AnnealConfig::default())
        .unwrap();
    assert_eq!(m.iterations, 20);
}

#[test]
fn real_clock_sleeps_the_dose_time() {
    let timing = TimingModel {
        clock: ClockMode::Real,
        t_d: 0.01,
        t_o: 0.0,
    };
    let m = full_dao_position_trial(&target_arc(2), &iterations(5), &timing, &AnnealConfig::default()).unwrap();
    assert!(m.time >= 0.05);
}

#[test]
fn relative_improvement_window_stops_a_stalled_search() {
    let rows = |bests: &[f64]| -> Vec<TraceRow> {
        bests
            .iter()
            .enumerate()
            .map(|(i, b)| TraceRow {
                iteration: i + 1,
                time: (i + 1) as f64,
                objective: *b,
                best: *b,
                accepted: false,
                temperature: 1.0,
            })
            .collect()
    };
    let rule = StoppingRule::RelativeImprovement {
        threshold: 0.01,
        window: Window::Iterations(3),
    };
    assert!(!rule.should_stop(&rows(&[10.0, 9.0, 8.0])));
    assert!(!rule.should_stop(&rows(&[10.0, 9.0, 8.0, 7.0])));
    assert!(rule.should_stop(&rows(&[10.0, 9.0, 8.0, 7.0, 7.0, 7.0, 6.99])));
    let timed = StoppingRule::RelativeImprovement {
        threshold: 0.01,
        window: Window::Seconds(2.5),
    };
    assert!(!timed.should_stop(&rows(&[10.0, 9.0])));
    assert!(timed.should_stop(&rows(&[10.0, 9.0, 9.0, 9.0, 9.0])));
}

#[test]
fn virtual_clock_trials_are_deterministic() {
    let target = target_arc(7);
    let cfg = AnnealConfig {
        seed: 11,
        ..AnnealConfig::default()
    };
    let dec = ToyDecoder::new(16, 3);
    let csv = |m: &TrialMetrics| {
        let mut out = Vec::new();
        write_trace_csv(m, &mut out).unwrap();
        out
    };
    let a = latent_position_trial(&dec, &target, &iterations(200), &TimingModel::default(), &cfg).unwrap();
    let b = latent_position_trial(&dec, &target, &iterations(200), &TimingModel::default(), &cfg).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(a.best_state, b.best_state);
    let c = full_dao_position_trial(&target, &iterations(200), &TimingModel::default(), &cfg).unwrap();
    let d = full_dao_position_trial(&target, &iterations(200), &TimingModel::default(), &cfg).unwrap();
    assert_eq!(csv(&c), csv(&d));
}

#[test]
fn shorter_budget_is_a_prefix_of_a_longer_run() {
    let target = target_arc(12);
    let cfg = AnnealConfig {
        seed: 4,
        ..AnnealConfig::default()
    };
    let long = full_dao_position_trial(&target, &iterations(300), &TimingModel::default(), &cfg).unwrap();
    let short = full_dao_position_trial(&target, &iterations(120), &TimingModel::default(), &cfg).unwrap();
    assert_eq!(short.trace[..], long.trace[..120]);
    assert_eq!(short.best_objective, long.trace[119].best);
}

#[test]
fn t0_matches_the_target_acceptance() {
    let target = target_arc(8);
    let m = full_dao_position_trial(&target, &iterations(1), &TimingModel::default(), &AnnealConfig::default()).unwrap();
    // Uphill moves of the mean size are accepted with probability 0.8 at T0.
    assert!(m.t0 > 0.0);
    let init = geometry_init_arc(&target).unwrap();
    let space = FullDaoSpace::from_roi(&select_roi(&init));
    let obj = PositionObjective::new(&target);
    let e0 = obj.evaluate(init.positions().iter().chain(init.gaps()).copied().collect::<Vec<_>>().as_slice(), &[]);
    let e0 = e0.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let state = State::Cells(init.to_vec());
    let ups: Vec<f64> = (0..400)
        .filter_map(|_| {
            let State::Cells(v) = SearchSpace::FullDao(&space).propose(&state, 1.0, &mut rng) else {
                unreachable!()
            };
            let d = obj.evaluate(&v, &[]).unwrap() - e0;
            (d > 0.0).then_some(d)
        })
        .collect();
    let mean = ups.iter().sum::<f64>() / ups.len() as f64;
    let ratio = (-mean / m.t0).exp();
    assert!((ratio - 0.8).abs() < 0.05, "{ratio}");
}

#[test]
fn latent_seeded_at_the_target_code_stays_there() {
    let dec = ToyDecoder::new(8, 5);
    let z_star: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64 - 3.5)).collect();
    let x = dec.decode_latent(&z_star).unwrap().to_mm(dec.normalization());
    let target = Arc::from_vec("t", &x).unwrap();
    let m = run_trial(
        SearchSpace::Latent(LatentSpace::new(&dec)),
        &PositionObjective::new(&target),
        State::Latent(z_star.clone()),
        &[],
        &StoppingRule::default(),
        &TimingModel::default(),
        &AnnealConfig::default(),
    )
    .unwrap();
    assert_eq!(m.initial_objective, 0.0);
    assert_eq!(m.best_objective, 0.0);
    assert_eq!(m.best_state, State::Latent(z_star));
    assert_eq!(m.iterations, 501);
}

fn fake_trial(iterations: usize, median: f64, time: f64) -> TrialMetrics {
    TrialMetrics {
        space: "x".into(),
        iterations,
        time,
        t0: 1.0,
        initial_objective: 1.0,
        best_objective: 0.5,
        best_state: State::Latent(vec![]),
        best_arc: vec![],
        best_weights: vec![],
        errors: None,
        median_error: Some(median),
        mean_measured_t_o: 0.0,
        trace: vec![],
    }
}

#[test]
fn aggregate_examples() {
    let same = vec![fake_trial(10, 1.0, 2.0); 5];
    let s = aggregate(&same, 0).unwrap();
    assert_eq!((s.se_error, s.se_iterations, s.se_time), (0.0, 0.0, 0.0));
    let two = [fake_trial(100, 1.0, 1.0), fake_trial(200, 2.0, 3.0)];
    let s = aggregate(&two, 0).unwrap();
    assert_eq!(s.median_iterations, 150.0);
    assert_eq!(s.median_time, 2.0);
    assert!(matches!(aggregate(&two[..1], 0), Err(Error::TooFewTrials { needed: 2, got: 1 })));
    let many: Vec<TrialMetrics> = (0..9).map(|i| fake_trial(i * 10 + 1, i as f64, 1.0)).collect();
    let a = aggregate(&many, 42).unwrap();
    let b = aggregate(&many, 42).unwrap();
    assert_eq!(a.se_error.to_bits(), b.se_error.to_bits());
    assert!(a.se_error > 0.0);
    let row = summary_csv_row("vae", 32, 0.01, &a);
    assert_eq!(row.split(',').count(), SUMMARY_HEADER.split(',').count());
}

#[test]
fn non_finite_objective_aborts() {
    struct Nan;
    impl Objective for Nan {
        fn evaluate(&self, _arc: &[f64], _w: &[f64]) -> Result<f64> {
            Ok(f64::NAN)
        }
    }
    let space = FullDaoSpace::from_roi(&[true; N_LEAVES]);
    let r = run_trial(
        SearchSpace::FullDao(&space),
        &Nan,
        State::Cells(vec![0.0; ARC_CELLS]),
        &[],
        &iterations(3),
        &TimingModel::default(),
        &AnnealConfig::default(),
    );
    assert!(matches!(r, Err(Error::NonFiniteObjective { iteration: 0 })));
}

#[test]
fn weight_proposals_stay_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut w = vec![0.01, 0.0, 2.0];
    for _ in 0..2000 {
        w = perturb_weights(&w, 0.5, &mut rng);
        assert!(w.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn conformal_arc_closes_outside_the_sphere() {
    let arc = conformal_arc(12.0, 1.0).unwrap();
    assert_eq!(arc.gap(0, 0), 0.0);
    assert_eq!(arc.gap(5, 40), 2.0 * (144.0f64 - 0.25).sqrt());
    assert_eq!(arc.position(5, 40), -arc.gap(5, 40) / 2.0);
    assert_eq!(arc.gap(0, 52), 0.0);
    assert!(arc.gap(0, 51) > 0.0);
}
