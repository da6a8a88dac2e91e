use std::path::Path;

use kldispatch::env::EnvConfig;
use kldispatch::harness::{
    emit_plots, read_rows, report, run_experiment, write_rows, ExperimentSpec, PolicyKind, ResultRow, RunOptions,
};
use kldispatch::trainer::TrainerConfig;

fn tiny_spec() -> ExperimentSpec {
    ExperimentSpec {
        env: EnvConfig {
            width: 4,
            height: 4,
            horizon: 6,
            vehicle_count: 6,
            orders_per_step: 10,
            ..EnvConfig::default()
        },
        trainer: TrainerConfig {
            batch_size: 4,
            warmup: 8,
            embed: 4,
            hidden: [6, 4],
            ..TrainerConfig::default()
        },
        episodes: 3,
        seeds: vec![0, 1],
        lambdas: vec![0.0, 0.1],
        drifts: vec![1.0],
        final_window: 2,
        ..ExperimentSpec::default()
    }
}

fn run(spec: &ExperimentSpec, out: &Path, resume: bool, jobs: usize) -> kldispatch::harness::RunSummary {
    let summary = run_experiment(spec, out, &RunOptions { resume, jobs }).unwrap();
    assert!(summary.all_completed(), "{:?}", summary.failures);
    summary
}

fn outcomes_equal(a: &[ResultRow], b: &[ResultRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_outcome(y))
}

#[test]
fn single_cell_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let spec = ExperimentSpec {
        policies: vec![PolicyKind::Il],
        episodes: 2,
        seeds: vec![3],
        ..tiny_spec()
    };
    let s = run(&spec, &out, false, 1);
    assert_eq!((s.cells_total, s.cells_run), (1, 1));
    let rows = read_rows(&out).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.episode).collect::<Vec<_>>(), [0, 1]);
    assert!(rows.iter().all(|r| r.policy == PolicyKind::Il && r.seed == 3 && r.lambda == 0.0));
}

#[test]
fn sweep_rows_follow_canonical_order_for_any_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let spec = tiny_spec();
    // nod x2 seeds, il x2, kl_based at 0.1 x2.
    assert_eq!(run(&spec, &a, false, 1).cells_total, 6);
    run(&spec, &b, false, 3);
    let (ra, rb) = (read_rows(&a).unwrap(), read_rows(&b).unwrap());
    assert_eq!(ra.len(), 18);
    assert!(outcomes_equal(&ra, &rb));
    let order: Vec<(PolicyKind, u64)> = ra.iter().step_by(3).map(|r| (r.policy, r.seed)).collect();
    assert_eq!(
        order,
        [
            (PolicyKind::Nod, 0),
            (PolicyKind::Nod, 1),
            (PolicyKind::Il, 0),
            (PolicyKind::Il, 1),
            (PolicyKind::KlBased, 0),
            (PolicyKind::KlBased, 1)
        ]
    );
}

#[test]
fn resume_is_idempotent_and_completes_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let spec = tiny_spec();
    run(&spec, &out, false, 1);
    let first = std::fs::read(&out).unwrap();
    let full = read_rows(&out).unwrap();

    let again = run(&spec, &out, true, 1);
    assert_eq!((again.cells_reused, again.cells_run), (6, 0));
    assert_eq!(std::fs::read(&out).unwrap(), first);

    // Drop the last cell and a half: keep 4 complete cells plus one row.
    write_rows(&out, &full[..13]).unwrap();
    let partial = run(&spec, &out, true, 2);
    assert_eq!((partial.cells_reused, partial.cells_run), (4, 2));
    assert!(outcomes_equal(&read_rows(&out).unwrap(), &full));
}

fn row(policy: PolicyKind, lambda: f64, seed: u64, episode: u64, adi: f64, orr: f64) -> ResultRow {
    ResultRow {
        policy,
        drift: 1.0,
        lambda,
        seed,
        episode,
        adi,
        orr,
        train_adi: 0.0,
        train_orr: 0.0,
        mean_loss: 0.0,
        wall_time_s: 0.0,
    }
}

/// Five seeds with two episodes each; only the last episode is in the
/// window and seed `s` scores `base + s`.
fn five_seed_rows(policy: PolicyKind, lambda: f64, adi: f64, orr: f64) -> Vec<ResultRow> {
    (0..5u64)
        .flat_map(|s| {
            [
                row(policy, lambda, s, 0, -1e3, -1.0),
                row(policy, lambda, s, 1, adi + s as f64, orr + s as f64 * 0.01),
            ]
        })
        .collect()
}

#[test]
fn report_arithmetic_over_five_seeds() {
    let mut rows = five_seed_rows(PolicyKind::Nod, 0.0, 100.0, 0.50);
    rows.extend(five_seed_rows(PolicyKind::Il, 0.0, 110.0, 0.55));
    rows.extend(five_seed_rows(PolicyKind::KlBased, 0.2, 125.0, 0.60));
    let rep = report(&rows, 1).unwrap();

    // Values base + {0..4}: mean base + 2, sample std sqrt(2.5).
    let nod = rep.entry(PolicyKind::Nod, 1.0, 0.0).unwrap();
    assert_eq!(nod.seeds, 5);
    assert!((nod.adi_mean - 102.0).abs() < 1e-12);
    assert!((nod.adi_std - 2.5f64.sqrt()).abs() < 1e-12);
    assert!((nod.orr_std - 0.01 * 2.5f64.sqrt()).abs() < 1e-12);
    assert!(nod.adi_vs_nod_pct.abs() < 1e-12);

    let kl = rep.entry(PolicyKind::KlBased, 1.0, 0.2).unwrap();
    assert!((kl.adi_mean - 127.0).abs() < 1e-12);
    assert!((kl.adi_vs_nod_pct - 100.0 * (127.0 / 102.0 - 1.0)).abs() < 1e-9);
    assert!((kl.orr_vs_nod_pct - 100.0 * (0.62 / 0.52 - 1.0)).abs() < 1e-9);

    let il = rep.entry(PolicyKind::Il, 1.0, 0.0).unwrap();
    assert!((il.orr_mean - 0.57).abs() < 1e-12);
}

fn sweep_rows() -> Vec<ResultRow> {
    let mut rows = five_seed_rows(PolicyKind::Nod, 0.0, 100.0, 0.50);
    rows.extend(five_seed_rows(PolicyKind::Il, 0.0, 110.0, 0.55));
    for (k, l) in [0.05, 0.1, 0.3].into_iter().enumerate() {
        rows.extend(five_seed_rows(PolicyKind::KlBased, l, 111.0 + k as f64, 0.56 - k as f64 * 0.01));
    }
    rows
}

fn svg_attr(svg: &str, name: &str) -> Vec<String> {
    let key = format!("{name}=\"");
    svg.match_indices(&key)
        .map(|(at, _)| {
            let rest = &svg[at + key.len()..];
            rest[..rest.find('"').unwrap()].to_string()
        })
        .collect()
}

#[test]
fn plots_are_deterministic_and_match_their_csv() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows();
    let paths = emit_plots(&rows, 1, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    let svg = std::fs::read_to_string(dir.path().join("lambda_sweep_d1.svg")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("lambda_sweep_d1.csv")).unwrap();

    let again = tempfile::tempdir().unwrap();
    emit_plots(&rows, 1, again.path()).unwrap();
    assert_eq!(std::fs::read_to_string(again.path().join("lambda_sweep_d1.svg")).unwrap(), svg);

    let lines: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let lambdas: Vec<&str> = lines.iter().map(|l| l[0]).collect();
    assert_eq!(lambdas, ["0.000000", "0.050000", "0.100000", "0.300000"]);
    let orr: Vec<String> = lines.iter().map(|l| l[1].to_string()).collect();
    let adi: Vec<String> = lines.iter().map(|l| l[3].to_string()).collect();
    assert_eq!(svg_attr(&svg, "data-orr"), orr);
    assert_eq!(svg_attr(&svg, "data-adi"), adi);
    assert_eq!(orr[0], "0.570000");
}

#[test]
fn single_lambda_plot_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let rows = five_seed_rows(PolicyKind::KlBased, 0.3, 90.0, 0.4);
    emit_plots(&rows, 1, dir.path()).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("lambda_sweep_d1.svg")).unwrap();
    assert_eq!(svg_attr(&svg, "data-lambda").len(), 2, "one circle and one square");
    assert!(!svg.contains("NaN") && !svg.contains("inf"));
}

#[test]
fn empty_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_plots(&[], 10, dir.path()).is_err());
    assert!(report(&[], 10).is_err());
    let nod_only = five_seed_rows(PolicyKind::Nod, 0.0, 1.0, 0.1);
    assert!(emit_plots(&nod_only, 1, dir.path()).is_err());
}
