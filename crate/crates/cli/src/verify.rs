use std::str::FromStr;
use std::sync::OnceLock;

use flashsvd_core::memtier::{expected_bytes, Formula};
use flashsvd_core::verify::{run_suites, Suite, VerifyConfig};
use flashsvd_core::Geometry;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

static MUTATED: OnceLock<Formula> = OnceLock::new();

fn mutated_bytes(f: Formula, g: &Geometry) -> u64 {
    expected_bytes(f, g) + u64::from(MUTATED.get() == Some(&f))
}

pub fn run(s: &Settings, suites: &[String], cases: usize, inject: Option<&str>) -> CliResult<()> {
    let selected: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.iter().map(|id| Suite::from_str(id)).collect::<Result<_, _>>()?
    };
    let mut cfg = VerifyConfig {
        seed: s.seed,
        cases: cases.max(1),
        ..VerifyConfig::default()
    };
    if let Some(id) = inject {
        let f = Formula::from_str(id)?;
        let _ = MUTATED.set(f);
        cfg.expected = mutated_bytes;
    }
    let reports = run_suites(&selected, &cfg);
    let mut failed = 0;
    for r in &reports {
        for c in &r.checks {
            failed += usize::from(!c.passed);
            println!(
                "{} {}: {} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                r.suite,
                c.name,
                c.detail
            );
        }
    }
    let total: usize = reports.iter().map(|r| r.checks.len()).sum();
    println!("{} / {total} checks passed", total - failed);
    if let Some(path) = &s.out {
        let doc = json!({
            "seed": s.seed,
            "suites": reports.iter().map(|r| json!({
                "suite": r.suite.id(),
                "passed": r.passed(),
                "checks": r.checks.iter().map(|c| json!({"name": c.name, "passed": c.passed, "detail": c.detail})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Verify(format!("{failed} of {total} checks failed")))
    }
}
