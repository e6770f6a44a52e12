use d2d_relay::harness::{
    drop_seed, emit_results, read_results_json, run_drops, run_experiment, simulate_drop_full, ExperimentSpec, Mode,
    OutputFormat, Sweep, SweepVariable, CSV_COLUMNS,
};

fn spec(mode: Mode, drops: usize) -> ExperimentSpec {
    ExperimentSpec {
        mode,
        num_drops: drops,
        master_seed: 11,
        ..ExperimentSpec::default()
    }
}

fn csv(metrics: &[d2d_relay::harness::RunMetrics]) -> String {
    let mut buf = Vec::new();
    emit_results(metrics, OutputFormat::Csv, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn robust_never_beats_nominal_on_a_drop() {
    let nominal = run_drops(&spec(Mode::Nominal, 6), 2).unwrap();
    let robust = run_drops(&spec(Mode::Robust, 6), 2).unwrap();
    for (n, r) in nominal.iter().zip(&robust) {
        assert_eq!(n.seed, r.seed);
        assert!(r.sum_rate <= n.sum_rate, "drop {}: {} > {}", n.drop, r.sum_rate, n.sum_rate);
        assert_eq!(r.nominal_sum_rate, n.sum_rate);
    }
}

#[test]
fn theta_sweep_is_monotone() {
    let s = ExperimentSpec {
        sweep: Some(Sweep {
            variable: SweepVariable::Theta,
            values: vec![0.05, 0.2, 0.8],
        }),
        ..spec(Mode::Chance, 4)
    };
    let rows = run_experiment(&s, 2).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].sum_rate <= w[1].sum_rate), "{rows:?}");
}

#[test]
fn single_drop_is_reproducible() {
    let s = spec(Mode::Chance, 1);
    assert_eq!(csv(&run_experiment(&s, 1).unwrap()), csv(&run_experiment(&s, 3).unwrap()));
}

#[test]
fn empty_sweep_gives_header_only() {
    let s = ExperimentSpec {
        sweep: Some(Sweep {
            variable: SweepVariable::Psi,
            values: vec![],
        }),
        ..spec(Mode::Robust, 2)
    };
    let out = csv(&run_experiment(&s, 1).unwrap());
    assert_eq!(out, format!("{}\n", CSV_COLUMNS.join(",")));
}

#[test]
fn one_row_per_sweep_value() {
    let s = ExperimentSpec {
        sweep: Some(Sweep {
            variable: SweepVariable::NumD2dPairs,
            values: vec![3.0, 6.0, 9.0],
        }),
        ..spec(Mode::Nominal, 2)
    };
    let rows = run_experiment(&s, 1).unwrap();
    let out = csv(&rows);
    assert_eq!(out.lines().count(), 4);
    assert!(out.lines().nth(1).unwrap().starts_with("nominal,num_d2d_pairs,3,2,"));
}

#[test]
fn json_round_trips() {
    let rows = run_experiment(&spec(Mode::Reference, 2), 1).unwrap();
    let mut buf = Vec::new();
    emit_results(&rows, OutputFormat::Json, &mut buf).unwrap();
    let back = read_results_json(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back.len(), rows.len());
    let mut again = Vec::new();
    emit_results(&back, OutputFormat::Json, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn mean_d2d_rate_matches_raw_dumps() {
    let s = spec(Mode::Nominal, 4);
    let row = &run_experiment(&s, 2).unwrap()[0];
    let rates: Vec<f64> = (0..4)
        .flat_map(|k| {
            let dump = simulate_drop_full(&s, k).unwrap();
            let mut own = Vec::new();
            for (l, users) in dump.users.iter().enumerate() {
                let sol = d2d_relay::allocator::solve_nominal(&dump.problems[l], &s.solver).unwrap().solution;
                own.extend(users.iter().zip(&sol.rate).filter(|(u, _)| u.is_d2d()).map(|(_, r)| *r));
            }
            own
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!(((row.mean_d2d_rate - mean) / mean).abs() < 1e-12);
}

#[test]
fn drop_seeds_do_not_depend_on_mode() {
    for mode in [Mode::Nominal, Mode::Robust, Mode::Chance, Mode::Reference] {
        let d = run_drops(&spec(mode, 3), 1).unwrap();
        let seeds: Vec<u64> = d.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, (0..3).map(|k| drop_seed(11, k)).collect::<Vec<_>>());
    }
}

#[test]
fn oracle_mode_is_refused_before_running() {
    let err = run_experiment(&spec(Mode::Oracle, 2), 1).unwrap_err();
    assert!(matches!(err, d2d_relay::Error::TooLarge(_)));
}

#[test]
fn oracle_mode_runs_on_tiny_relays() {
    let mut s = spec(Mode::Oracle, 2);
    s.scenario.num_rbs = 3;
    s.scenario.num_cues = 3;
    s.scenario.num_d2d_pairs = 3;
    let rows = run_experiment(&s, 1).unwrap();
    assert_eq!(rows[0].num_drops, 2);
}

#[test]
fn unwritable_path_is_an_io_error() {
    struct Broken;
    impl std::io::Write for Broken {
        fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
            Err(std::io::Error::other("read-only"))
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let rows = run_experiment(&spec(Mode::Nominal, 1), 1).unwrap();
    assert!(matches!(emit_results(&rows, OutputFormat::Csv, Broken), Err(d2d_relay::Error::Io(_))));
}
