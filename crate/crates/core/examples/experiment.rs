//! The experiment layer used by the command-line tool: a config string, an
//! output directory, a resume and a re-check.

use conic_ricci::cli::{self, ResumeOverrides};

const CONFIG: &str = r#"
[model]
resolution = 48

[flow]
t_end = 12.0
track_potential = true

[output]
snapshot_schedule = [0.5, 2.0, 5.0, 10.0]
csv_every = 5
"#;

fn main() -> conic_ricci::Result<()> {
    let dir = std::env::temp_dir().join("conic-ricci-example");
    let _ = std::fs::remove_dir_all(&dir);

    // run to t = 10 first, then extend the same directory to t = 12
    let mut cfg = cli::parse_config(CONFIG)?;
    cfg.flow.t_end = 10.0;
    let first = cli::run_experiment(&cfg, Some(&dir))?;
    println!("first leg: passed = {}", first.passed());
    let resumed = cli::resume(&dir, &ResumeOverrides { t_end: Some(12.0) })?;
    print!("{}", resumed.report.to_text());

    let again = cli::check(&dir)?;
    println!("re-check agrees: {}", again.report == resumed.report);
    println!("output in {}", dir.display());
    Ok(())
}
