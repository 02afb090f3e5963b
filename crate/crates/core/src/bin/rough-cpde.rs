use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rough_cpde::bench::{execute, Command, RunConfig};

/// Rough Heston pricing: Riccati reference prices, hybrid-scheme Monte Carlo
/// and a deep BSDE solver, with CSV reports.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML manifest; built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for path simulation and network training
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for CSV files and training logs
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated maturities in years, replacing the manifest's list
    #[arg(long, global = true, value_name = "LIST")]
    maturities: Option<String>,
    /// Clip negative Fourier prices in the deep wing at zero
    #[arg(long, global = true)]
    clip_at_zero: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Fractional Riccati / Lewis reference prices
    Riccati,
    /// Hybrid-scheme Monte Carlo prices against the Riccati reference
    Mc,
    /// Deep BSDE prices against the Riccati reference
    Bsde,
    /// Implied-volatility smiles for the configured networks
    Smile,
    /// Fast consistency checks of every pricer
    Selftest,
}

fn parse_maturities(list: &str) -> Result<Vec<f64>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad maturity {s:?}: {e}")))
        .collect()
}

fn run(cli: Cli) -> Result<bool, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(dir) = cli.out {
        cfg.output.dir = dir;
    }
    if let Some(list) = &cli.maturities {
        cfg.grid.maturities = parse_maturities(list)?;
    }
    cfg.output.clip_at_zero |= cli.clip_at_zero;
    let cmd = match cli.command {
        Cmd::Riccati => Command::Riccati,
        Cmd::Mc => Command::Mc,
        Cmd::Bsde => Command::Bsde,
        Cmd::Smile => Command::Smile,
        Cmd::Selftest => Command::Selftest,
    };
    execute(cmd, &cfg, &mut std::io::stdout().lock()).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use std::fs;
    use std::path::Path;

    const QUICK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quick.toml");

    fn run_args(args: &[&str], out: &Path) -> Result<bool, String> {
        let mut argv = vec!["rough-cpde"];
        argv.extend_from_slice(args);
        argv.extend(["--out", out.to_str().unwrap()]);
        run(Cli::try_parse_from(argv).map_err(|e| e.to_string())?)
    }

    fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".csv"))
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn help_documents_every_flag() {
        Cli::command().debug_assert();
        let text = Cli::command().render_long_help().to_string();
        for word in ["riccati", "mc", "bsde", "smile", "selftest", "--config", "--seed", "--out", "--maturities", "--clip-at-zero"] {
            assert!(text.contains(word), "missing {word} in\n{text}");
        }
        assert!(Cli::try_parse_from(["rough-cpde", "mc", "--seed", "-1"]).is_err());
        assert!(Cli::try_parse_from(["rough-cpde", "--seed", "3", "riccati", "--clip-at-zero"]).is_ok());
    }

    #[test]
    fn maturity_lists() {
        assert_eq!(parse_maturities("").unwrap(), Vec::<f64>::new());
        assert_eq!(parse_maturities("0.1, 0.5").unwrap(), vec![0.1, 0.5]);
        assert!(parse_maturities("0.1,x").is_err());
    }

    #[test]
    fn subcommands_are_byte_reproducible() {
        for cmd in ["riccati", "mc", "bsde", "smile"] {
            let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            assert!(run_args(&[cmd, "--config", QUICK, "--seed", "11"], a.path()).unwrap());
            assert!(run_args(&[cmd, "--config", QUICK, "--seed", "11"], b.path()).unwrap());
            let (x, y) = (csvs(a.path()), csvs(b.path()));
            assert!(!x.is_empty(), "{cmd} wrote nothing");
            assert_eq!(x, y, "{cmd}");
            for (name, bytes) in x.iter().filter(|(n, _)| !n.ends_with("_report.csv")) {
                assert!(bytes.starts_with(b"k_-0.40,"), "{name}");
            }
        }
    }

    #[test]
    fn seed_changes_monte_carlo() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_args(&["mc", "--config", QUICK, "--seed", "1"], a.path()).unwrap();
        run_args(&["mc", "--config", QUICK, "--seed", "2"], b.path()).unwrap();
        assert_ne!(csvs(a.path()), csvs(b.path()));
    }

    #[test]
    fn maturity_override_and_empty_list() {
        let d = tempfile::tempdir().unwrap();
        run_args(&["riccati", "--config", QUICK, "--maturities", "0.25"], d.path()).unwrap();
        let names: Vec<String> = csvs(d.path()).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["riccati_T0.25.csv"]);

        let e = tempfile::tempdir().unwrap();
        assert!(run_args(&["mc", "--config", QUICK, "--maturities", ""], e.path()).unwrap());
        assert!(csvs(e.path()).is_empty());
    }

    #[test]
    fn bsde_writes_training_logs() {
        let d = tempfile::tempdir().unwrap();
        run_args(&["bsde", "--config", QUICK, "--maturities", "0.1"], d.path()).unwrap();
        let log = fs::read_to_string(d.path().join("bsde_m2_T0.1.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in ["iteration", "loss", "mean_p0", "wall_seconds"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn clip_flag_reaches_the_config() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_args(&["riccati", "--maturities", "0.01"], a.path()).unwrap();
        run_args(&["riccati", "--maturities", "0.01", "--clip-at-zero"], b.path()).unwrap();
        let neg = |d: &Path| fs::read_to_string(d.join("riccati_T0.01.csv")).unwrap().contains(",-");
        assert!(neg(a.path()) && !neg(b.path()));
    }

    #[test]
    fn selftest_and_bad_manifest() {
        let d = tempfile::tempdir().unwrap();
        assert!(run_args(&["selftest"], d.path()).unwrap());
        let cfg = d.path().join("bad.toml");
        fs::write(&cfg, "[grid]\nstepz = 3\n").unwrap();
        let err = run_args(&["riccati", "--config", cfg.to_str().unwrap()], d.path()).unwrap_err();
        assert!(err.contains("stepz"), "{err}");
    }
}
