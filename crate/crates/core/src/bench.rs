//! Reproducible comparison runs of the three pricers, driven by a TOML
//! manifest, and the CSV files they leave behind.
//!
//! Every CSV starts with the header `k_-0.40,…,k_0.40,row`: one column per
//! log-moneyness and a trailing label naming the quantity on each row.
//! Wall-clock timings never go into these files, so identical manifests and
//! seeds give byte-identical CSVs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::{self, BsdeHyper, RolloutMode};
use crate::error::{Error, Result};
use crate::hybrid::{mc_price, simulate_with_tables};
use crate::implied::implied_vol;
use crate::kernel::{kernel_eval, weights_a_tilde, KernelTables};
use crate::params::{GridSpec, ModelParams};
use crate::riccati::{char_fn, heston_closed_form, lewis_price, lewis_price_refining, LewisQuadrature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Fine simulation steps per maturity.
    pub steps: usize,
    pub maturities: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { steps: 200, maturities: vec![0.1, 0.5, 1.6, 5.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { paths: 50_000, seed: 2019 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiccatiConfig {
    /// Adams steps on `[0, T]`.
    pub steps: usize,
    pub u_max: f64,
    pub panels: usize,
    pub order: usize,
    pub tol: f64,
    pub max_panels: usize,
    pub tail_cutoff: f64,
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        let q = LewisQuadrature::default();
        RiccatiConfig {
            steps: 100,
            u_max: q.u_max,
            panels: q.panels,
            order: q.order,
            tol: q.tol,
            max_panels: q.max_panels,
            tail_cutoff: q.tail_cutoff,
        }
    }
}

impl RiccatiConfig {
    pub fn quadrature(&self) -> LewisQuadrature {
        LewisQuadrature {
            u_max: self.u_max,
            panels: self.panels,
            order: self.order,
            tol: self.tol,
            max_panels: self.max_panels,
            tail_cutoff: self.tail_cutoff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeConfig {
    /// Size of the simulated path pool per maturity.
    pub paths: usize,
    pub m: usize,
    pub layers: usize,
    pub neurons: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub p: usize,
    pub adam_fraction: f64,
    pub resample: bool,
    pub mode: RolloutMode,
    pub eval_batches: usize,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self::from_hyper(BsdeHyper::default(), 50_000)
    }
}

impl BsdeConfig {
    pub fn from_hyper(h: BsdeHyper, paths: usize) -> Self {
        BsdeConfig {
            paths,
            m: h.m,
            layers: h.layers,
            neurons: h.neurons,
            lr: h.lr,
            iterations: h.iterations,
            batch_size: h.batch_size,
            p: h.p,
            adam_fraction: h.adam_fraction,
            resample: h.resample,
            mode: h.mode,
            eval_batches: h.eval_batches,
        }
    }

    pub fn hyper(&self) -> BsdeHyper {
        BsdeHyper {
            m: self.m,
            layers: self.layers,
            neurons: self.neurons,
            lr: self.lr,
            iterations: self.iterations,
            batch_size: self.batch_size,
            p: self.p,
            adam_fraction: self.adam_fraction,
            resample: self.resample,
            mode: self.mode,
            eval_batches: self.eval_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrikeGrid {
    pub count: usize,
    /// Log-moneyness `log(K/S₀)` range, inclusive.
    pub lo: f64,
    pub hi: f64,
}

impl Default for StrikeGrid {
    fn default() -> Self {
        StrikeGrid { count: 20, lo: -0.4, hi: 0.4 }
    }
}

impl StrikeGrid {
    pub fn log_moneyness(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.lo + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Clip slightly negative Fourier prices in the deep wing at zero.
    pub clip_at_zero: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), clip_at_zero: false }
    }
}

/// One network configuration of a smile run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmileEntry {
    pub id: u32,
    pub maturity: f64,
    pub m: usize,
    pub neurons: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmileConfig {
    /// Adams steps for the reference column of the smile files.
    pub riccati_steps: usize,
    pub configs: Vec<SmileEntry>,
}

impl Default for SmileConfig {
    fn default() -> Self {
        SmileConfig { riccati_steps: 400, configs: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridConfig,
    pub mc: McConfig,
    pub riccati: RiccatiConfig,
    pub bsde: BsdeConfig,
    pub strikes: StrikeGrid,
    pub output: OutputConfig,
    pub smile: SmileConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(format!("[model] {e}")))?;
        if self.grid.steps == 0 {
            return bad("[grid] steps must be positive".into());
        }
        if let Some(t) = self.grid.maturities.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return bad(format!("[grid] maturity {t} must be positive"));
        }
        if self.mc.paths == 0 {
            return bad("[mc] paths must be positive".into());
        }
        if self.riccati.steps == 0 || self.smile.riccati_steps == 0 {
            return bad("[riccati] steps must be positive".into());
        }
        if self.strikes.count == 0 || !(self.strikes.lo <= self.strikes.hi) {
            return bad("[strikes] need count ≥ 1 and lo ≤ hi".into());
        }
        self.bsde.hyper().validate().map_err(|e| Error::Config(format!("[bsde] {e}")))?;
        if self.bsde.m > self.grid.steps {
            return bad(format!("[bsde] m = {} exceeds the {} fine steps", self.bsde.m, self.grid.steps));
        }
        Ok(())
    }

    pub fn log_moneyness(&self) -> Vec<f64> {
        self.strikes.log_moneyness()
    }

    pub fn strikes(&self) -> Vec<f64> {
        self.log_moneyness().iter().map(|k| self.model.s0 * k.exp()).collect()
    }
}

/// Wall-clock seconds of one maturity; reported, never written to CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub build: f64,
    pub train: f64,
    pub price: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub maturity: f64,
    pub prices: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    /// Riccati prices on the same strikes.
    pub reference: Vec<f64>,
    pub timings: Timings,
    /// Training loss at the first and last iteration.
    pub losses: Option<(f64, f64)>,
}

impl ReportEntry {
    pub fn errors(&self) -> Vec<f64> {
        self.prices.iter().zip(&self.reference).map(|(p, r)| p - r).collect()
    }

    /// Signed mean of `price - reference`.
    pub fn avg_error(&self) -> f64 {
        let e = self.errors();
        e.iter().sum::<f64>() / e.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        self.errors().iter().fold(0.0, |a, e| a.max(e.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub method: String,
    pub log_moneyness: Vec<f64>,
    pub entries: Vec<ReportEntry>,
}

/// Riccati prices, one row per maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    pub log_moneyness: Vec<f64>,
    pub maturities: Vec<f64>,
    pub prices: Vec<Vec<f64>>,
    pub seconds: Vec<f64>,
}

fn riccati_row(cfg: &RunConfig, maturity: f64, steps: usize) -> Result<Vec<f64>> {
    let p = lewis_price(&cfg.model, maturity, &cfg.strikes(), steps, &cfg.riccati.quadrature())?;
    Ok(clip(cfg, p))
}

fn clip(cfg: &RunConfig, mut p: Vec<f64>) -> Vec<f64> {
    if cfg.output.clip_at_zero {
        p.iter_mut().for_each(|x| *x = x.max(0.0));
    }
    p
}

pub fn run_riccati(cfg: &RunConfig) -> Result<PriceTable> {
    let mut prices = Vec::new();
    let mut seconds = Vec::new();
    for &t in &cfg.grid.maturities {
        let t0 = Instant::now();
        prices.push(riccati_row(cfg, t, cfg.riccati.steps)?);
        seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(PriceTable { log_moneyness: cfg.log_moneyness(), maturities: cfg.grid.maturities.clone(), prices, seconds })
}

pub fn run_mc(cfg: &RunConfig) -> Result<ComparisonReport> {
    let strikes = cfg.strikes();
    let mut entries = Vec::new();
    for &t in &cfg.grid.maturities {
        let grid = GridSpec::new(cfg.grid.steps, t)?;
        let t0 = Instant::now();
        let tables = KernelTables::new(grid, cfg.model.alpha, cfg.model.rho)?;
        let batch = simulate_with_tables(&cfg.model, &tables, cfg.mc.paths, cfg.mc.seed)?;
        let build = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let (prices, se): (Vec<f64>, Vec<f64>) = mc_price(&batch, &strikes)?.into_iter().unzip();
        let price = t1.elapsed().as_secs_f64();
        drop(batch);
        let t2 = Instant::now();
        let reference = riccati_row(cfg, t, cfg.riccati.steps)?;
        let timings = Timings { build, train: 0.0, price, reference: t2.elapsed().as_secs_f64() };
        entries.push(ReportEntry { maturity: t, prices, std_errors: Some(se), reference, timings, losses: None });
    }
    Ok(ComparisonReport { method: "mc".into(), log_moneyness: cfg.log_moneyness(), entries })
}

/// Trains one model per maturity. `log` receives the training records of
/// every maturity in turn.
pub fn run_bsde(cfg: &RunConfig, mut log: Option<&mut dyn FnMut(f64) -> Result<Box<dyn Write>>>) -> Result<ComparisonReport> {
    let k = cfg.log_moneyness();
    let mut entries = Vec::new();
    for &t in &cfg.grid.maturities {
        let grid = GridSpec::new(cfg.grid.steps, t)?;
        let mut sink = match log.as_mut() {
            Some(open) => Some(open(t)?),
            None => None,
        };
        let run = bsde::solve(
            &cfg.model,
            grid,
            cfg.bsde.hyper(),
            cfg.bsde.paths,
            &k,
            cfg.mc.seed,
            sink.as_mut().map(|w| w as &mut dyn Write),
        )?;
        if let Some(w) = sink.as_mut() {
            w.flush()?;
        }
        let t2 = Instant::now();
        let reference = riccati_row(cfg, t, cfg.riccati.steps)?;
        let timings = Timings {
            build: run.build_seconds,
            train: run.train_seconds,
            price: run.price_seconds,
            reference: t2.elapsed().as_secs_f64(),
        };
        let (prices, se): (Vec<f64>, Vec<f64>) = run.prices.into_iter().unzip();
        entries.push(ReportEntry {
            maturity: t,
            prices,
            std_errors: Some(se),
            reference,
            timings,
            losses: Some((run.summary.initial_loss, run.summary.final_loss)),
        });
    }
    Ok(ComparisonReport { method: format!("bsde_m{}", cfg.bsde.m), log_moneyness: k, entries })
}

/// Implied vols per smile configuration, with a Riccati reference column.
#[derive(Debug, Clone, PartialEq)]
pub struct SmileTable {
    pub maturity: f64,
    pub log_moneyness: Vec<f64>,
    /// `(label, prices, vols)`; vols are NaN where no vol exists.
    pub rows: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn vols(cfg: &RunConfig, t: f64, prices: &[f64]) -> Vec<f64> {
    prices
        .iter()
        .zip(cfg.strikes())
        .map(|(&p, k)| implied_vol(p, cfg.model.s0, k, t, cfg.model.r).unwrap_or(f64::NAN))
        .collect()
}

/// Smile tables for each grid maturity: the Riccati reference plus every
/// configured network whose maturity matches.
///
/// Steep-skew parameters can make the Adams predictor diverge at the
/// configured step count; the reference then doubles its steps (up to 16×)
/// and its row label `riccati{n}` records the count actually used.
pub fn run_smile(cfg: &RunConfig) -> Result<Vec<SmileTable>> {
    let k = cfg.log_moneyness();
    let mut out = Vec::new();
    for &t in &cfg.grid.maturities {
        let (reference, steps) =
            lewis_price_refining(&cfg.model, t, &cfg.strikes(), cfg.smile.riccati_steps, &cfg.riccati.quadrature(), 4)?;
        let reference = clip(cfg, reference);
        let mut rows = vec![(format!("riccati{steps}"), reference.clone(), vols(cfg, t, &reference))];
        for c in cfg.smile.configs.iter().filter(|c| c.maturity == t) {
            let hyper = BsdeHyper { m: c.m, neurons: c.neurons, layers: c.layers, ..cfg.bsde.hyper() };
            let grid = GridSpec::new(cfg.grid.steps, t)?;
            let run = bsde::solve(&cfg.model, grid, hyper, cfg.bsde.paths, &k, cfg.mc.seed, None)?;
            let prices: Vec<f64> = run.prices.iter().map(|p| p.0).collect();
            let v = vols(cfg, t, &prices);
            rows.push((format!("config{}", c.id), prices, v));
        }
        out.push(SmileTable { maturity: t, log_moneyness: k.clone(), rows });
    }
    Ok(out)
}

/// `k_-0.40,…,k_0.40,row`
pub fn csv_header(log_moneyness: &[f64]) -> String {
    let mut h: Vec<String> = log_moneyness.iter().map(|k| format!("k_{k:.2}")).collect();
    h.push("row".into());
    h.join(",")
}

fn csv_row(values: &[f64], label: &str) -> String {
    let mut s = String::new();
    for v in values {
        write!(s, "{v:.10e},").expect("string write");
    }
    s.push_str(label);
    s
}

fn maturity_tag(t: f64) -> String {
    format!("T{t}")
}

fn write_file(dir: &Path, name: &str, lines: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn write_price_table(table: &PriceTable, dir: &Path) -> Result<Vec<PathBuf>> {
    table
        .maturities
        .iter()
        .zip(&table.prices)
        .map(|(&t, p)| {
            write_file(dir, &format!("riccati_{}.csv", maturity_tag(t)), &[csv_header(&table.log_moneyness), csv_row(p, "price")])
        })
        .collect()
}

/// One CSV per maturity (price, std error, reference, error rows) and a
/// summary `<method>_report.csv` of the error columns.
pub fn write_report(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut summary = vec!["maturity,avg_error,max_error,initial_loss,final_loss".to_string()];
    for e in &report.entries {
        let mut lines = vec![csv_header(&report.log_moneyness), csv_row(&e.prices, "price")];
        if let Some(se) = &e.std_errors {
            lines.push(csv_row(se, "std_error"));
        }
        lines.push(csv_row(&e.reference, "riccati"));
        lines.push(csv_row(&e.errors(), "error"));
        files.push(write_file(dir, &format!("{}_{}.csv", report.method, maturity_tag(e.maturity)), &lines)?);
        let (l0, l1) = e.losses.map_or((String::new(), String::new()), |(a, b)| (format!("{a:.10e}"), format!("{b:.10e}")));
        summary.push(format!("{},{:.10e},{:.10e},{l0},{l1}", e.maturity, e.avg_error(), e.max_error()));
    }
    if !report.entries.is_empty() {
        files.push(write_file(dir, &format!("{}_report.csv", report.method), &summary)?);
    }
    Ok(files)
}

pub fn write_smiles(tables: &[SmileTable], dir: &Path) -> Result<Vec<PathBuf>> {
    tables
        .iter()
        .map(|t| {
            let mut lines = vec![csv_header(&t.log_moneyness)];
            for (label, prices, vols) in &t.rows {
                lines.push(csv_row(prices, &format!("{label}_price")));
                lines.push(csv_row(vols, &format!("{label}_vol")));
            }
            write_file(dir, &format!("smile_{}.csv", maturity_tag(t.maturity)), &lines)
        })
        .collect()
}

/// Human-readable timing lines for stdout.
pub fn timing_summary(report: &ComparisonReport) -> String {
    let mut s = String::from("wall-clock seconds on this machine, not comparable across hardware\n");
    for e in &report.entries {
        writeln!(
            s,
            "{} T={}: build {:.2}  train {:.2}  price {:.2}  riccati {:.2}  avg err {:+.2e}  max err {:.2e}",
            report.method,
            e.maturity,
            e.timings.build,
            e.timings.train,
            e.timings.price,
            e.timings.reference,
            e.avg_error(),
            e.max_error()
        )
        .expect("string write");
    }
    s
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

/// Fast degenerate-case and identity checks on every pricer.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let p = ModelParams::reference();

    let phi0 = char_fn(num_complex::Complex64::new(0.0, 0.0), 1.0, 100, &p)?;
    checks.push(Check { name: "characteristic function at u=0", value: (phi0 - 1.0).norm(), tolerance: 1e-12 });

    let grid = GridSpec::new(200, 1.0)?;
    let a = weights_a_tilde(&grid, p.alpha);
    let total = grid.maturity().powf(p.alpha) / crate::special::gamma(p.alpha + 1.0);
    checks.push(Check { name: "kernel weight telescoping", value: (a.iter().sum::<f64>() - total).abs(), tolerance: 1e-12 });

    let worst = [0.05, 0.2, 1.0]
        .iter()
        .flat_map(|&vol| [0.8, 1.0, 1.3].map(move |k| (vol, k)))
        .map(|(vol, k)| {
            let c = crate::implied::bs_price(1.0, k, 0.7, vol, 0.0);
            implied_vol(c, 1.0, k, 0.7, 0.0).map(|v| (v - vol).abs())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(Check { name: "implied vol round trip", value: worst, tolerance: 1e-9 });

    let kap: Vec<f64> = (1..=10).map(|a| kernel_eval(a as f64 / 10.0, p.alpha)).collect::<Result<_>>()?;
    let f = bsde::assemble_diffusion(1.1, 0.05, &kap, &p);
    let resid = (&f.gram() - &bsde::diffusion_gram(1.1, 0.05, &kap, &p)).iter().fold(0.0f64, |a, r| a.max(r.abs()));
    checks.push(Check { name: "diffusion factorisation", value: resid, tolerance: 1e-12 });

    let heston = ModelParams { alpha: 1.0, ..p };
    let mut rel: f64 = 0.0;
    for i in 0..=8 {
        let u = num_complex::Complex64::new(-20.0 + 5.0 * i as f64, 0.0);
        let a = char_fn(u, 1.0, 500, &heston)?;
        let b = heston_closed_form(&heston, 1.0, u)?;
        rel = rel.max((a - b).norm() / b.norm());
    }
    checks.push(Check { name: "Adams vs closed-form Heston (alpha=1)", value: rel, tolerance: 1e-3 });

    // deterministic variance: MC against Black–Scholes on the integrated variance
    let flat = ModelParams { nu: 0.0, ..p };
    let grid = GridSpec::new(50, 0.5)?;
    let tables = KernelTables::new(grid, flat.alpha, flat.rho)?;
    let batch = simulate_with_tables(&flat, &tables, 20_000, seed)?;
    let var: f64 = (0..50).map(|i| batch.v[[0, i]]).sum::<f64>() * grid.dt();
    let (mc, se) = mc_price(&batch, &[1.0])?[0];
    let bs = crate::implied::bs_price(1.0, 1.0, 0.5, (var / 0.5).sqrt(), 0.0);
    checks.push(Check { name: "nu=0 Monte Carlo vs Black-Scholes (in standard errors)", value: (mc - bs).abs() / se, tolerance: 2.0 });

    let still = ModelParams { v0: 0.0, theta: 0.0, nu: 0.0, ..p };
    let grid = GridSpec::new(20, 0.5)?;
    let tables = KernelTables::new(grid, still.alpha, still.rho)?;
    let batch = simulate_with_tables(&still, &tables, 64, seed)?;
    let data = bsde::BsdeData::from_batch(&batch, &tables, 4, 3)?;
    let mut model = bsde::BsdeModel::new(BsdeHyper { m: 4, p: 3, iterations: 5, batch_size: 32, ..Default::default() }, seed)?;
    model.train(&data, &tables, &[0.9], bsde::Payoff::Call, None)?;
    let paths: Vec<usize> = (0..64).collect();
    let p0 = model.backward_rollout(&data, &paths, &[0.9], bsde::Payoff::Call)?;
    let dev = p0.iter().fold(0.0f64, |a, v| a.max((v - 0.1f64.max(1.0 - 0.9)).abs()));
    checks.push(Check { name: "zero-volatility BSDE price", value: dev, tolerance: 1e-15 });

    Ok(checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Riccati,
    Mc,
    Bsde,
    Smile,
    Selftest,
}

/// Runs one command, writes its CSVs under `cfg.output.dir` and a summary to
/// `out`. Returns `false` when a self-test check fails.
pub fn execute(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    cfg.validate()?;
    let dir = cfg.output.dir.as_path();
    let files = match cmd {
        Command::Riccati => {
            let table = run_riccati(cfg)?;
            for (t, s) in table.maturities.iter().zip(&table.seconds) {
                writeln!(out, "riccati T={t}: {s:.2}s")?;
            }
            write_price_table(&table, dir)?
        }
        Command::Mc => {
            let report = run_mc(cfg)?;
            write!(out, "{}", timing_summary(&report))?;
            write_report(&report, dir)?
        }
        Command::Bsde => {
            let mut open = |t: f64| -> Result<Box<dyn Write>> {
                fs::create_dir_all(dir)?;
                let name = format!("bsde_m{}_{}.jsonl", cfg.bsde.m, maturity_tag(t));
                Ok(Box::new(std::io::BufWriter::new(fs::File::create(dir.join(name))?)))
            };
            let report = run_bsde(cfg, Some(&mut open))?;
            write!(out, "{}", timing_summary(&report))?;
            write_report(&report, dir)?
        }
        Command::Smile => write_smiles(&run_smile(cfg)?, dir)?,
        Command::Selftest => {
            let checks = selftest(cfg.mc.seed)?;
            for c in &checks {
                let tag = if c.passed() { "PASS" } else { "FAIL" };
                writeln!(out, "{tag} {}: {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance)?;
            }
            return Ok(checks.iter().all(Check::passed));
        }
    };
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid = GridConfig { steps: 20, maturities: vec![0.1, 0.5] };
        cfg.mc.paths = 2000;
        cfg.strikes.count = 5;
        cfg.bsde = BsdeConfig { paths: 400, iterations: 20, batch_size: 64, m: 2, p: 3, ..BsdeConfig::default() };
        cfg
    }

    #[test]
    fn strike_grid_and_header() {
        let k = StrikeGrid::default().log_moneyness();
        assert_eq!(k.len(), 20);
        assert_eq!(k[0], -0.4);
        assert!((k[19] - 0.4).abs() < 1e-15);
        let h = csv_header(&k);
        assert!(h.starts_with("k_-0.40,k_-0.36,k_-0.32,k_-0.27,k_-0.23,k_-0.19,k_-0.15,k_-0.11,k_-0.06,k_-0.02,k_0.02,"));
        assert!(h.ends_with("k_0.40,row"));
    }

    #[test]
    fn config_parsing_and_diagnostics() {
        let cfg = RunConfig::from_toml_str("[grid]\nmaturities = [0.2]\n[bsde]\nm = 4\n").unwrap();
        assert_eq!(cfg.grid.maturities, vec![0.2]);
        assert_eq!(cfg.grid.steps, 200);
        assert_eq!(cfg.bsde.m, 4);
        assert_eq!(cfg.model, ModelParams::reference());
        let err = RunConfig::from_toml_str("[grid]\nsteps = 10\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 3"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nkappa=1\ntheta=0.06\nnu=0.1\nalpha=0.3\nrho=-0.7\nv0=0.04\ns0=1\n").unwrap_err();
        assert!(err.to_string().contains("alpha"));
        assert!(RunConfig::from_toml_str("[bsde]\nm = 500\n").is_err());
    }

    #[test]
    fn shipped_manifests_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let mut n = 0;
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{e}"));
            n += 1;
        }
        assert!(n >= 4);
        let smile = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smile.toml")).unwrap();
        assert_eq!(smile.model, ModelParams::steep_skew());
        assert_eq!(smile.smile.configs.len(), 8);
    }

    #[test]
    fn empty_maturity_list() {
        let mut cfg = tiny();
        cfg.grid.maturities.clear();
        assert!(run_riccati(&cfg).unwrap().prices.is_empty());
        assert!(run_mc(&cfg).unwrap().entries.is_empty());
    }

    #[test]
    fn report_errors_recomputable() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let report = run_mc(&cfg).unwrap();
        write_report(&report, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("mc_T0.5.csv")).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').filter_map(|x| x.parse().ok()).collect())
            .collect();
        let (price, riccati, error) = (&rows[0], &rows[2], &rows[3]);
        for i in 0..5 {
            // errors were computed from unrounded values; the CSV keeps 11 digits
            assert!((price[i] - riccati[i] - error[i]).abs() < 1e-10);
        }
        let summary = fs::read_to_string(dir.path().join("mc_report.csv")).unwrap();
        let last: Vec<&str> = summary.lines().nth(2).unwrap().split(',').collect();
        let avg: f64 = last[1].parse().unwrap();
        assert!((avg - error.iter().sum::<f64>() / 5.0).abs() < 1e-10);
    }

    #[test]
    fn standard_errors_scale_with_paths() {
        let mut cfg = tiny();
        cfg.grid.maturities = vec![0.5];
        cfg.mc.paths = 100;
        let small = run_mc(&cfg).unwrap();
        cfg.mc.paths = 50_000;
        let large = run_mc(&cfg).unwrap();
        let (a, b) = (small.entries[0].std_errors.as_ref().unwrap(), large.entries[0].std_errors.as_ref().unwrap());
        // ATM strike: ratio close to √500
        let ratio = a[2] / b[2];
        assert!((ratio / 500f64.sqrt() - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn clip_flag() {
        let mut cfg = RunConfig::default();
        cfg.grid.maturities = vec![0.01];
        let raw = run_riccati(&cfg).unwrap();
        assert!(raw.prices[0].iter().any(|&p| p < 0.0), "deep wing artefact expected");
        cfg.output.clip_at_zero = true;
        let clipped = run_riccati(&cfg).unwrap();
        assert!(clipped.prices[0].iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn every_command_is_reproducible() {
        let mut cfg = tiny();
        cfg.smile.configs = vec![SmileEntry { id: 1, maturity: 0.5, m: 2, neurons: 3, layers: 2 }];
        cfg.smile.riccati_steps = 50;
        for cmd in [Command::Riccati, Command::Mc, Command::Bsde, Command::Smile, Command::Selftest] {
            let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
                .map(|_| {
                    let dir = tempfile::tempdir().unwrap();
                    let mut c = cfg.clone();
                    c.output.dir = dir.path().to_path_buf();
                    assert!(execute(cmd, &c, &mut Vec::new()).unwrap());
                    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path())
                        .unwrap()
                        .map(|e| {
                            let e = e.unwrap();
                            let name = e.file_name().into_string().unwrap();
                            let bytes = fs::read(e.path()).unwrap();
                            (name, strip_wall_time(bytes))
                        })
                        .collect();
                    files.sort();
                    files
                })
                .collect();
            assert_eq!(runs[0], runs[1], "{cmd:?}");
        }
    }

    fn strip_wall_time(bytes: Vec<u8>) -> Vec<u8> {
        let text = String::from_utf8(bytes).unwrap();
        text.lines()
            .map(|l| match serde_json::from_str::<serde_json::Value>(l) {
                Ok(mut v) if v.get("wall_seconds").is_some() => {
                    v.as_object_mut().unwrap().remove("wall_seconds");
                    v.to_string()
                }
                _ => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n")
            .into_bytes()
    }

    #[test]
    fn selftest_passes() {
        assert!(selftest(7).unwrap().iter().all(Check::passed));
    }
}
