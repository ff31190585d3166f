use minconv::simlab::*;

fn main() {
    let n = 1_000_000;
    let rows = [
        (DistributionSpec::normal(0.0, 1.0).unwrap(), DistributionSpec::normal(0.0, 1.0).unwrap(), [0.908, 0.882, 0.673]),
        (DistributionSpec::normal(0.0, 1.0).unwrap(), DistributionSpec::normal(0.0, 100.0).unwrap(), [0.692, 0.683, 0.624]),
        (DistributionSpec::normal(0.0, 100.0).unwrap(), DistributionSpec::normal(0.0, 1.0).unwrap(), [0.692, 0.683, 0.624]),
        (DistributionSpec::uniform(0.0, 1.0).unwrap(), DistributionSpec::uniform(0.0, 1.0).unwrap(), [0.962, 0.926, 0.641]),
        (DistributionSpec::uniform(0.0, 10.0).unwrap(), DistributionSpec::uniform(0.0, 1.0).unwrap(), [0.716, 0.717, 0.655]),
        (DistributionSpec::uniform(0.0, 1.0).unwrap(), DistributionSpec::uniform(0.0, 10.0).unwrap(), [0.716, 0.717, 0.655]),
    ];
    let t0 = std::time::Instant::now();
    for (i, (dx, dw, expect)) in rows.iter().enumerate() {
        print!("row {i}: ");
        for (op, e) in OperatorKind::CANDIDATES.iter().zip(expect) {
            let rho = correlation(*op, *dx, *dw, n, 7).unwrap();
            print!("{}={rho:.4} (paper {e}, diff {:+.4})  ", op.name(), rho - e);
        }
        println!();
    }
    println!("table time: {:?}", t0.elapsed());

    let t0 = std::time::Instant::now();
    for v in [0.5, 1.0] {
        let r = sweep_l_over_k(v, &default_k_grid(), n, SWEEP_EPSILON, 7).unwrap();
        println!("sweep-k v={v}: argmin={} (window [0.8,1.2])", r.argmin_param);
    }
    let r = sweep_l_over_v(0.0, &default_v_grid(), n, SWEEP_EPSILON, 7).unwrap();
    println!("sweep-v: argmin={} (window [1.3,1.9]), E|w|={:?}", r.argmin_param, r.mean_abs_w_at_argmin);
    println!("sweep time: {:?}", t0.elapsed());

    // row-swap symmetry at shared seed
    for op in OperatorKind::CANDIDATES {
        let a = correlation(op, rows[1].0, rows[1].1, n, 7).unwrap();
        let b = correlation(op, rows[1].1, rows[1].0, n, 7).unwrap();
        println!("swap {}: |diff|={:.5}", op.name(), (a - b).abs());
    }
}
