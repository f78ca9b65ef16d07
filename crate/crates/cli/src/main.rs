use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcselect::pipeline::{replicate_from_manifest, ColumnSpec, InputConfig, VERSION};
use vcselect::{
    gen_case, replicate_table, run_pipeline, run_screen_only, save_long_csv, CaseId, CaseSpec, Error, ErrorKind,
    PipelineConfig, ReplicateConfig, Result, ScreenRule, TableResult,
};

#[derive(Parser)]
#[command(
    name = "vcselect",
    version,
    about = "Screening, structure identification and refined estimation for longitudinal varying-coefficient models"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "VCSELECT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a JSON config.
    Fit {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Skip covariance estimation and the refined fit.
        #[arg(long)]
        no_refine: bool,
        /// Covariance/coefficient passes.
        #[arg(long)]
        iterate: Option<usize>,
        /// Bootstrap replicates for standard errors.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Screening only.
    ScreenOnly {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Draw a dataset from a simulation case.
    Simulate {
        /// I, II, III, IV or V.
        case: CaseId,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = 500)]
        p: usize,
        #[arg(long, default_value_t = 10)]
        s0: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Seeded replication of the selection (1) or estimation (2) table.
    ReplicateTable(ReplicateArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Screening keeps `floor(n^alpha / ln n)` covariates.
    #[arg(long, conflicts_with = "keep_count")]
    alpha: Option<f64>,
    #[arg(long)]
    keep_count: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(o) = &self.output {
            cfg.output = Some(o.clone());
        }
        if let Some(a) = self.alpha {
            cfg.screening = ScreenRule::Alpha(a);
        }
        if let Some(k) = self.keep_count {
            cfg.screening = ScreenRule::KeepCount(k);
        }
    }
}

#[derive(Args)]
struct ReplicateArgs {
    /// 1 or 2; ignored with --from-manifest.
    #[arg(required_unless_present = "from_manifest")]
    table: Option<u8>,
    /// JSON replication config; flags override it.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Re-run a previous replication from its manifest.json.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Column `case:n:rho`, e.g. `I:100:0.1`; repeatable.
    #[arg(long = "column", value_parser = parse_column)]
    columns: Vec<ColumnSpec>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Also report estimates after screening and selection (table 2).
    #[arg(long)]
    practical: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_column(s: &str) -> std::result::Result<ColumnSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [case, n, rho] = parts[..] else {
        return Err(format!("expected case:n:rho, got {s:?}"));
    };
    Ok(ColumnSpec {
        case: case.parse().map_err(|e| format!("{e}"))?,
        n: n.parse().map_err(|e| format!("n: {e}"))?,
        rho: rho.parse().map_err(|e| format!("rho: {e}"))?,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_pipeline(path: &PathBuf) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = PipelineConfig::from_json(&text)?;
    if let InputConfig::Csv { path: data, .. } = &mut cfg.input {
        if data.is_relative() {
            if let Some(dir) = path.parent() {
                *data = dir.join(&*data);
            }
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { config, overrides, no_refine, iterate, bootstrap, seed } => {
            let mut cfg = load_pipeline(&config)?;
            overrides.apply(&mut cfg);
            if no_refine {
                cfg.refinement.enabled = false;
            }
            if let Some(k) = iterate {
                cfg.refinement.iterations = k;
            }
            if let Some(b) = bootstrap {
                cfg.refinement.bootstrap = b;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if cli.threads.is_some() {
                cfg.threads = cli.threads;
            }
            let report = run_pipeline(&cfg)?;
            let fit = report.final_fit();
            println!("basis dimension {}", report.manifest.basis_dim.unwrap_or(0));
            println!("screening kept {}", report.screen.keep_count);
            println!("lambda {}", report.bic.best_lambda());
            println!("h1 {}", fit.h1);
            for (k, &j) in fit.spec.constant_idx.iter().enumerate() {
                println!("constant {} {}", report.names[j], fit.beta1[k]);
            }
            let varying: Vec<&str> = fit.spec.varying_idx.iter().map(|&j| report.names[j].as_str()).collect();
            println!("varying {}", varying.join(" "));
            if let Some(dir) = &cfg.output {
                println!("outputs in {}", dir.display());
            }
            Ok(())
        }
        Command::ScreenOnly { config, overrides } => {
            let mut cfg = load_pipeline(&config)?;
            overrides.apply(&mut cfg);
            if cli.threads.is_some() {
                cfg.threads = cli.threads;
            }
            let (res, _) = run_screen_only(&cfg)?;
            println!("kept {} of {}", res.keep_count, res.ranked.len());
            Ok(())
        }
        Command::Simulate { case, n, rho, m, p, s0, seed, output } => {
            let spec = CaseSpec { case, n, m, p, rho, s0 };
            spec.validate()?;
            let (ds, truth) = gen_case(&spec, seed)?;
            fs::create_dir_all(&output)?;
            save_long_csv(&ds, output.join("data.csv"))?;
            serde_json::to_writer_pretty(BufWriter::new(File::create(output.join("truth.json"))?), &truth)?;
            let manifest = serde_json::json!({
                "tool": "vcselect",
                "version": VERSION,
                "command": "simulate",
                "case": spec,
                "seed": seed,
                "outputs": ["data.csv", "truth.json", "manifest.json"],
            });
            serde_json::to_writer_pretty(BufWriter::new(File::create(output.join("manifest.json"))?), &manifest)?;
            println!("{} subjects, {} observations, {} covariates", ds.n_subjects(), ds.n_obs(), ds.n_covariates());
            Ok(())
        }
        Command::ReplicateTable(args) => replicate(args, cli.threads),
    }
}

fn replicate(args: ReplicateArgs, threads: Option<usize>) -> Result<()> {
    let (result, manifest) = if let Some(m) = &args.from_manifest {
        replicate_from_manifest(m, args.output.clone())?
    } else {
        let table = args.table.unwrap_or(1);
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
            None => ReplicateConfig::new(table, 100, 1),
        };
        if args.config.is_some() && cfg.table != table {
            return Err(Error::Config(format!("config is for table {}, command asked for {table}", cfg.table)));
        }
        if !args.columns.is_empty() {
            cfg.columns = args.columns.clone();
        }
        if let Some(r) = args.reps {
            cfg.reps = r;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(p) = args.p {
            cfg.p = p;
        }
        if let Some(m) = args.m {
            cfg.m = m;
        }
        if args.practical {
            cfg.practical = true;
        }
        if args.output.is_some() {
            cfg.output = args.output.clone();
        }
        if threads.is_some() {
            cfg.threads = threads;
        }
        replicate_table(&cfg)?
    };
    match &result {
        TableResult::Selection(cols) => {
            for c in cols {
                let m = &c.metrics;
                println!(
                    "case {} n={} rho={}: Cvar {} Cfix {} Size {} FP {} MMMS {}",
                    c.column.case,
                    c.column.n,
                    c.column.rho,
                    fmt(m.cvar.map(|s| s.mean)),
                    fmt(m.cfix.map(|s| s.mean)),
                    m.size.mean,
                    m.fp.mean,
                    fmt(m.mmms.map(|s| s.median)),
                );
            }
        }
        TableResult::Estimation(cols) => {
            for c in cols {
                let (init, refd) = &c.oracle;
                for (a, b) in init.curves.iter().zip(&refd.curves) {
                    println!("case {} {}: RMISE {} -> {}", c.column.case, a.name, a.root_mean_sq, b.root_mean_sq);
                }
            }
        }
    }
    if let Some(m) = manifest {
        println!("wrote {}", m.outputs.join(", "));
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}
