use avatar_field::verify::{run_suite, TOLERANCE};

#[test]
fn every_module_matches_finite_differences() {
    let start = std::time::Instant::now();
    let results = run_suite(None, 7).unwrap();
    for r in &results {
        println!("{:<28} max rel err {:.3e} over {} coords", r.name, r.report.max_rel_error, r.report.coords_checked);
    }
    println!("elapsed {:?}", start.elapsed());
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "above {TOLERANCE}: {failed:?}");
}
