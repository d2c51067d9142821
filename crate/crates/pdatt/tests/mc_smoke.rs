//! Quick Monte Carlo calibration smoke test (small replication count; the
//! acceptance suite runs the full desk-scale experiments).

use pdatt::panel::{EstimandSpec, TreatmentPath};
use pdatt::{run_monte_carlo, true_pdatt, DgpConfig, McOptions, Method};

#[test]
#[ignore = "slow; run explicitly"]
fn mc_smoke() {
    let cfg = DgpConfig::new(10_000, 20260810);
    let truths = true_pdatt(&cfg);
    println!("truths: 11-00 {:.4}  10-00 {:.4}  01-00 {:.4}", truths[0], truths[1], truths[2]);

    let specs: Vec<EstimandSpec> =
        TreatmentPath::TARGETS.iter().map(|&d| EstimandSpec::new(d).unwrap()).collect();
    let methods = [Method::R, Method::Dr, Method::RImproved];
    let t0 = std::time::Instant::now();
    let result =
        run_monte_carlo(&cfg, 60, &methods, &specs, McOptions { compute_seb: true }).unwrap();
    println!("60 reps in {:.1?} ({} failures)", t0.elapsed(), result.failures);
    for cell in &result.cells {
        println!(
            "{:>10} {}: bias {:+.4} emp_sd {:.4} mean_se {:.4} cov {:.3} omega {:.1}",
            cell.method.tag(),
            cell.pdatt.tag(),
            cell.bias,
            cell.emp_sd,
            cell.mean_se,
            cell.coverage,
            cell.mean_omega
        );
    }
    if let Some(seb) = &result.seb {
        for (path, v) in seb {
            println!("SEB {}: {:.1}", path.tag(), v);
        }
    }
}
