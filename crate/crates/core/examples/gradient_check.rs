//! Finite-difference check of the full caption loss on small random models.
//!
//! cargo run --release --example gradient_check -- [seed] [instances]

use gcn_lstm::gradcheck::GradCheckConfig;
use gcn_lstm::model::grad_check_suite;

fn main() -> gcn_lstm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));
    let instances = args
        .next()
        .map_or(5, |a| a.parse().expect("instance count"));
    let cfg = GradCheckConfig::default();
    let suite = grad_check_suite(seed, instances, cfg)?;
    for (n, inst) in suite.iter().enumerate() {
        let d = inst.dims;
        println!(
            "#{n} {:8} K={} D_v={} D_h={} |V|={} layers={}  max rel err {:.2e}  {}",
            inst.kind.to_string(),
            inst.regions,
            d.feature,
            d.hidden,
            d.vocab,
            inst.gcn_layers,
            inst.report.max_rel_error(),
            if inst.report.passed() { "ok" } else { "FAIL" }
        );
        for name in inst.report.failures() {
            println!("    {name}");
        }
    }
    let failed = suite.iter().filter(|i| !i.report.passed()).count();
    println!(
        "{} of {} passed (tol {:e})",
        suite.len() - failed,
        suite.len(),
        cfg.tol
    );
    Ok(())
}
