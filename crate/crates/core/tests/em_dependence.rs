use factorseg::em::{em_fit, EmOptions};
use factorseg::simgen::{simulate_replicate, SimConfig};

#[test]
fn one_factor_beats_diagonal_covariance() {
    let cfg = SimConfig::new(5, 50, 0.5, 0.8).with_seed(7);
    for replicate in 0..5 {
        let (y, truth) = simulate_replicate(&cfg, replicate).unwrap();
        let k = truth.segmentation.total_segments();
        let opts = EmOptions::default();
        let q1 = em_fit(&y, k, 1, &opts).unwrap();
        let q0 = em_fit(&y, k, 0, &opts).unwrap();
        let d1 = (q1.sigma() - &truth.sigma).norm();
        let d0 = (q0.sigma() - &truth.sigma).norm();
        assert!(d1 < d0, "replicate {replicate}: Q=1 error {d1} vs Q=0 error {d0}");
    }
}

#[test]
fn selected_fit_round_trips_through_csv_and_json() {
    use factorseg::io::{ingest_csv, write_series_csv, FitDocument};
    let cfg = SimConfig::new(3, 30, 0.3, 0.8).with_seed(8);
    let (y, _) = simulate_replicate(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("y.csv");
    write_series_csv(&path, y.values()).unwrap();
    let back = ingest_csv(&path).unwrap();
    let a = em_fit(&y, 6, 1, &EmOptions::default()).unwrap();
    let b = em_fit(&back, 6, 1, &EmOptions::default()).unwrap();
    assert_eq!(a, b);
    let doc = FitDocument::from_fit(&y, &a).unwrap();
    assert_eq!(doc.to_fit().unwrap().segmentation, a.segmentation);
}
