//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits nonzero if any fails. Numeric arguments select criteria,
//! e.g. `cargo test --release --test acceptance -- 1 6`.

mod criteria;
mod oracles;

use std::time::Instant;

type Outcome = Result<String, String>;

const CRITERIA: [(u32, &str, fn() -> Outcome); 9] = [
    (1, "gradient correctness", criteria::gradient_correctness),
    (2, "decomposition isolation", criteria::decomposition_isolation),
    (3, "overfit", criteria::overfit),
    (4, "session-click direction", criteria::click_context_direction),
    (5, "session-query direction", criteria::query_context_direction),
    (6, "metric oracles", criteria::metric_oracles),
    (7, "attention normalization", criteria::attention_normalization),
    (8, "pipeline fidelity", criteria::pipeline_fidelity),
    (9, "determinism", criteria::determinism),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
