//! Runs a manifest end to end: Riccati table, Monte Carlo and deep BSDE
//! comparisons, smiles and the self-test, writing CSVs to the manifest's
//! output directory. Defaults to the small `configs/quick.toml`.

use std::path::PathBuf;

use rough_cpde::bench::{execute, Command, RunConfig};

fn main() -> rough_cpde::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml"));
    let cfg = RunConfig::load(&path)?;
    let mut stdout = std::io::stdout().lock();
    for cmd in [Command::Selftest, Command::Riccati, Command::Mc, Command::Bsde, Command::Smile] {
        println!("== {cmd:?}");
        if !execute(cmd, &cfg, &mut stdout)? {
            eprintln!("self-test failed");
            std::process::exit(1);
        }
    }
    Ok(())
}
