mod oracles;

use hsisr_core::metrics::{cc, ergas, mpsnr, mssim, rmse, sam_deg, MetricsReport};
use hsisr_core::HsiCube;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut ChaCha8Rng) -> (HsiCube, HsiCube) {
    let r = HsiCube::from_fn(8, 8, 4, |_| rng.random_range(0.05f32..1.0)).unwrap();
    let noise = rng.random_range(0.001f32..0.3);
    let c = HsiCube::from_fn(8, 8, 4, |(y, x, k)| r.get(y, x, k) + noise * (rng.random::<f32>() - 0.5)).unwrap();
    (r, c)
}

fn close(got: f64, want: f64, what: &str) {
    assert!((got - want).abs() <= 1e-6, "{what}: {got} vs oracle {want}");
}

#[test]
fn six_indices_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (r, c) = random_pair(&mut rng);
        close(mpsnr(&r, &c).unwrap(), oracles::mpsnr(&r, &c), "mpsnr");
        close(mssim(&r, &c).unwrap(), oracles::mssim(&r, &c), "mssim");
        close(sam_deg(&r, &c).unwrap(), oracles::sam(&r, &c), "sam");
        close(cc(&r, &c).unwrap(), oracles::cc(&r, &c), "cc");
        close(rmse(&r, &c).unwrap(), oracles::rmse(&r, &c), "rmse");
        close(ergas(&r, &c, 4).unwrap(), oracles::ergas(&r, &c, 4), "ergas");
    }
}

#[test]
fn identity_pair_gives_best_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (r, _) = random_pair(&mut rng);
    let rep = MetricsReport::compute(&r, &r, 2).unwrap();
    assert_eq!(rep.mpsnr, f64::INFINITY);
    assert_eq!(rep.sam, 0.0);
    assert!((rep.mssim - 1.0).abs() < 1e-12);
    assert!((rep.cc - 1.0).abs() < 1e-12);
    assert_eq!((rep.rmse, rep.ergas), (0.0, 0.0));
}

#[test]
fn report_round_trips_through_text_and_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (r, c) = random_pair(&mut rng);
    for rep in [MetricsReport::compute(&r, &c, 3).unwrap(), MetricsReport::compute(&r, &r, 3).unwrap()] {
        assert_eq!(MetricsReport::from_kv(&rep.to_kv()).unwrap(), rep);
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), rep);
        assert_eq!(rep.csv_row().split(',').count(), MetricsReport::csv_header().split(',').count());
    }
}
