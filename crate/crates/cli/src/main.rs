//! `pruw`: plan, run, audit and sweep the private read-update-write scheme.

mod config;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pruw_core::codec::EvalPoints;
use pruw_core::field::{FieldElement, PrimeField};
use pruw_core::harness::{
    audit_index_privacy, audit_storage_security, audit_update_privacy, hamming_distortion, region_columns, AuditInstance,
    AuditMode, HarnessError, PrivacyReport, ReferenceModel,
};
use pruw_core::planner::{aligned_length, build_plan, parse_rational, Budgets, Plan, Rational};
use pruw_core::roles::{init_nodes, provision_shards, RoundTranscript, UserClient};
use pruw_core::transport::{NodeLink, NodeServer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use config::{ConfigArgs, Format, RunConfig, TransportMode};

#[derive(Parser)]
#[command(name = "pruw", version, about = "Rate-distortion tolerant private read-update-write")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Show the region layout and predicted costs
    Plan,
    /// Provision databases and run rounds against them
    Run(RunArgs),
    /// Check that single databases learn nothing
    Audit(AuditArgs),
    /// Measure costs over a grid of symmetric budgets
    Sweep(SweepArgs),
    /// Serve one database over TCP
    ServeNode(ServeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Selection {
    First,
    Random,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// submodel to read and update, 1-based
    #[arg(long, default_value_t = 1)]
    theta: usize,
    /// which positions of each subpacket are read and written
    #[arg(long, value_enum, default_value_t = Selection::Random)]
    selection: Selection,
    /// write every request and reply frame, database by database
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuditKind {
    Enumerate,
    Sample,
}

#[derive(clap::Args)]
struct AuditArgs {
    #[arg(long, value_enum, default_value_t = AuditKind::Enumerate)]
    mode: AuditKind,
    /// draws per hypothesis in sampling mode
    #[arg(long, default_value_t = 2000)]
    samples: usize,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// comma-separated budgets; defaults to 0, 0.05, ..., 0.5
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<String>>,
    /// use L as given instead of the next length with no rounding
    #[arg(long)]
    unaligned: bool,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
}

/// One line of measured results. Rationals are printed exactly.
#[derive(Serialize)]
struct Row {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "L")]
    l: usize,
    q: u64,
    d_read: String,
    d_write: String,
    cr_measured: String,
    cw_measured: String,
    cr_theory: Option<String>,
    cw_theory: Option<String>,
    dr_measured: String,
    dw_measured: String,
    query_overhead: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cr_bits: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cw_bits: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if let Command::ServeNode(args) = &cli.command {
        return serve_node(args);
    }
    let cfg = RunConfig::resolve(&cli.config)?;
    match &cli.command {
        Command::Plan => cmd_plan(&cfg),
        Command::Run(args) => cmd_run(&cfg, args),
        Command::Audit(args) => cmd_audit(&cfg, args),
        Command::Sweep(args) => cmd_sweep(&cfg, args),
        Command::ServeNode(_) => unreachable!(),
    }
}

fn output(cfg: &RunConfig) -> Result<(Box<dyn Write>, Format)> {
    let (sink, terminal): (Box<dyn Write>, bool) = match &cfg.output {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            (Box::new(BufWriter::new(file)), false)
        }
        None => (Box::new(io::stdout().lock()), io::stdout().is_terminal()),
    };
    let format = cfg.format.unwrap_or(if terminal { Format::Table } else { Format::Csv });
    Ok((sink, format))
}

fn plan_for(cfg: &RunConfig, l: usize, budgets: &Budgets) -> Result<Plan> {
    let plan = build_plan(cfg.n, cfg.m, l, budgets)?;
    if plan.odd_n() {
        eprintln!(
            "warning: N = {} is odd; one answer per subpacket only serves as a consistency check, \
             so costs sit above the even-N closed form, which is not reported",
            cfg.n
        );
    }
    Ok(plan)
}

fn cmd_plan(cfg: &RunConfig) -> Result<ExitCode> {
    let plan = plan_for(cfg, cfg.l, &cfg.budgets)?;
    let (mut out, format) = output(cfg)?;
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &plan)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["region", "offset", "length", "ell_r", "ell_w", "y", "lcm", "gamma_r", "gamma_w"])?;
            for r in &plan.layout.regions {
                w.write_record(
                    [r.id, r.bit_offset, r.bit_length, r.ell_r, r.ell_w, r.y, r.lcm, r.gamma_r, r.gamma_w].map(|v| v.to_string()),
                )?;
            }
            w.flush()?;
        }
        Format::Table => {
            let l = &plan.layout;
            writeln!(out, "N={} M={} L={} padded={} q={}", l.n_dbs, l.submodels, l.length, l.padded_length, cfg.q)?;
            writeln!(out, "budgets: read {} write {}", plan.budgets.d_read, plan.budgets.d_write)?;
            for (name, p) in [("read", &plan.read), ("write", &plan.write)] {
                writeln!(
                    out,
                    "{name:>5} split: {} at ell={}, {} at ell={}",
                    p.lambda0, p.ell_small, p.lambda_eta, p.ell_large
                )?;
            }
            writeln!(out, "{:>6} {:>9} {:>9} {:>5} {:>5} {:>3} {:>4} {:>7} {:>7}", "region", "offset", "length", "ell_r", "ell_w", "y", "lcm", "gamma_r", "gamma_w")?;
            for r in &l.regions {
                writeln!(
                    out,
                    "{:>6} {:>9} {:>9} {:>5} {:>5} {:>3} {:>4} {:>7} {:>7}",
                    r.id, r.bit_offset, r.bit_length, r.ell_r, r.ell_w, r.y, r.lcm, r.gamma_r, r.gamma_w
                )?;
            }
            let theory = |t: &Option<Rational>| t.map_or("n/a (odd N)".to_string(), |v| format!("{v} ({:.4})", f(&v)));
            writeln!(out, "C_R predicted {} ({:.4}), closed form {}", plan.predicted_cr, f(&plan.predicted_cr), theory(&plan.closed_form_cr))?;
            writeln!(out, "C_W predicted {} ({:.4}), closed form {}", plan.predicted_cw, f(&plan.predicted_cw), theory(&plan.closed_form_cw))?;
            writeln!(out, "D_r planned {}, D_w planned {}", plan.predicted_dr, plan.predicted_dw)?;
            writeln!(out, "query overhead {} symbols per database", plan.query_overhead_symbols())?;
            writeln!(out, "aligned: {}", plan.aligned)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn f(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

struct Measured {
    row: Row,
    transcript: RoundTranscript,
}

/// Provisions a nonzero model, runs `rounds` rounds with nonzero updates and
/// measures each one against the plaintext reference.
fn execute(cfg: &RunConfig, plan: &Plan, args: &RunArgs) -> Result<(Vec<Measured>, Vec<NodeLink>)> {
    let layout = &plan.layout;
    if args.theta == 0 || args.theta > cfg.m {
        bail!("theta must lie in 1..={}", cfg.m);
    }
    let field = PrimeField::new(cfg.q)?;
    let points = EvalPoints::standard(&field, cfg.n, layout.y_max())?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = ReferenceModel::random_nonzero(&field, cfg.m, cfg.l, layout.padded_length, &mut rng);
    let shards = provision_shards(&field, &model, &points, layout, &mut rng)?;
    let mut links: Vec<NodeLink> = match cfg.transport {
        TransportMode::Inproc => (0..cfg.n).map(|n| NodeLink::in_process(n).0).collect(),
        TransportMode::Socket => cfg
            .nodes
            .iter()
            .enumerate()
            .map(|(n, addr)| NodeLink::socket(n, addr.as_str()).with_context(|| format!("database {n} at {addr}")))
            .collect::<Result<_>>()?,
    };
    init_nodes(&mut links, &field, &points, layout, &shards)?;
    let mut user = UserClient::new(field.clone(), points, layout.clone(), ChaCha20Rng::seed_from_u64(rng.gen()));
    let theory = |t: &Option<Rational>| t.map(|v| v.to_string());
    let mut results = Vec::new();
    for _ in 0..args.rounds {
        let patterns = match args.selection {
            Selection::First => user.first_k_patterns(),
            Selection::Random => user.random_patterns(),
        };
        let mut update: Vec<FieldElement> = (0..cfg.l).map(|_| FieldElement(rng.gen_range(1..cfg.q))).collect();
        update.resize(layout.padded_length, FieldElement::ZERO);
        let out = user.run_round(&mut links, args.theta, &patterns, &update)?;
        let s = args.theta - 1;
        let dr = hamming_distortion(model.submodel(s), &out.downloaded, cfg.l);
        let dw = hamming_distortion(&update, &out.uploaded, cfg.l);
        model.apply(&field, s, &out.uploaded, &out.applied);
        let t = &out.transcript.counts;
        results.push(Measured {
            row: Row {
                n: cfg.n,
                m: cfg.m,
                l: cfg.l,
                q: cfg.q,
                d_read: plan.budgets.d_read.to_string(),
                d_write: plan.budgets.d_write.to_string(),
                cr_measured: t.reading_cost(cfg.l).to_string(),
                cw_measured: t.writing_cost(cfg.l).to_string(),
                cr_theory: theory(&plan.closed_form_cr),
                cw_theory: theory(&plan.closed_form_cw),
                dr_measured: dr.to_string(),
                dw_measured: dw.to_string(),
                query_overhead: t.query_symbols,
                cr_bits: cfg.bits.then(|| f(&t.reading_cost(cfg.l)) * (cfg.q as f64).log2()),
                cw_bits: cfg.bits.then(|| f(&t.writing_cost(cfg.l)) * (cfg.q as f64).log2()),
            },
            transcript: out.transcript,
        });
    }
    Ok((results, links))
}

fn write_rows(out: Box<dyn Write>, format: Format, results: &[Measured]) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in results {
                w.serialize(&r.row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Entry<'a> {
                #[serde(flatten)]
                row: &'a Row,
                transcript: &'a RoundTranscript,
            }
            let entries: Vec<Entry> = results.iter().map(|r| Entry { row: &r.row, transcript: &r.transcript }).collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &entries)?;
            writeln!(out)?;
        }
        Format::Table => {
            let mut out = out;
            writeln!(
                out,
                "{:>5} {:>8} {:>8} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10} {:>9}",
                "round", "d_read", "d_write", "C_R", "C_W", "C_R*", "C_W*", "D_r", "D_w", "overhead"
            )?;
            for r in results {
                let row = &r.row;
                let na = || "n/a".to_string();
                writeln!(
                    out,
                    "{:>5} {:>8} {:>8} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10} {:>9}",
                    r.transcript.round,
                    row.d_read,
                    row.d_write,
                    row.cr_measured,
                    row.cw_measured,
                    row.cr_theory.clone().unwrap_or_else(na),
                    row.cw_theory.clone().unwrap_or_else(na),
                    row.dr_measured,
                    row.dw_measured,
                    row.query_overhead
                )?;
                if let (Some(cr), Some(cw)) = (row.cr_bits, row.cw_bits) {
                    writeln!(out, "{:>5} bits per symbol: C_R {cr:.4}, C_W {cw:.4}", "")?;
                }
            }
            writeln!(out, "C_R*, C_W*: closed form; overhead: one-time query symbols per database")?;
        }
    }
    Ok(())
}

fn cmd_run(cfg: &RunConfig, args: &RunArgs) -> Result<ExitCode> {
    let plan = plan_for(cfg, cfg.l, &cfg.budgets)?;
    let (results, links) = execute(cfg, &plan, args)?;
    if let Some(path) = &args.transcript {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for link in &links {
            for (request, reply) in &link.log.exchanges {
                w.write_all(request)?;
                w.write_all(reply)?;
            }
        }
        w.flush()?;
    }
    let (out, format) = output(cfg)?;
    write_rows(out, format, &results)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<ExitCode> {
    if cfg.n % 2 == 1 {
        eprintln!("warning: odd N has no closed form to compare against");
    }
    let grid: Vec<Rational> = match &args.grid {
        Some(values) => values.iter().map(|s| parse_rational(s)).collect::<Result<_, _>>()?,
        None => (0..=10).map(|j| Rational::new(j, 20)).collect(),
    };
    let run = RunArgs { rounds: 1, theta: 1, selection: Selection::Random, transcript: None };
    let mut results = Vec::new();
    for d in grid {
        let budgets = Budgets::symmetric(d)?;
        let l = if args.unaligned { cfg.l } else { aligned_length(cfg.n, cfg.m, cfg.l, &budgets)? };
        let point = RunConfig { l, budgets: budgets.clone(), ..cfg.clone() };
        let plan = build_plan(cfg.n, cfg.m, l, &budgets)?;
        let (measured, _) = execute(&point, &plan, &run)?;
        results.extend(measured);
    }
    let (out, format) = output(cfg)?;
    write_rows(out, format, &results)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(cfg: &RunConfig, args: &AuditArgs) -> Result<ExitCode> {
    let plan = plan_for(cfg, cfg.l, &cfg.budgets)?;
    let mode = match args.mode {
        AuditKind::Enumerate => AuditMode::Enumerate,
        AuditKind::Sample => AuditMode::Sample { samples: args.samples },
    };
    let geometries: BTreeSet<(usize, usize)> = plan.layout.regions.iter().map(|r| (r.ell_r, r.ell_w)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut reports: Vec<((usize, usize), PrivacyReport)> = Vec::new();
    let hint = |e: HarnessError| match e {
        HarnessError::GuardExceeded { .. } => anyhow::anyhow!("{e}; rerun with --mode sample or a smaller q"),
        e => e.into(),
    };
    for (ell_r, ell_w) in geometries {
        let inst = AuditInstance::new(cfg.q, cfg.n, cfg.m, ell_r, ell_w)?;
        let field = inst.field.clone();
        let (first, last) = inst.pattern_pair();
        let thetas = (1, cfg.m.min(2));
        reports.push(((ell_r, ell_w), audit_index_privacy(&inst, thetas, (&first, &last), mode, &mut rng).map_err(hint)?));
        let len = inst.region.bit_length;
        let delta_a = field.random_vec(&mut rng, len);
        let mut delta_b = field.random_vec(&mut rng, len);
        if delta_a == delta_b {
            delta_b[0] = field.add(delta_b[0], FieldElement::ONE);
        }
        reports.push(((ell_r, ell_w), audit_update_privacy(&inst, 1, &first, (&delta_a, &delta_b), mode, &mut rng).map_err(hint)?));
        let model_a = ReferenceModel::random(&field, cfg.m, len, len, &mut rng);
        let mut model_b = ReferenceModel::random(&field, cfg.m, len, len, &mut rng);
        if model_a == model_b {
            model_b.set(0, 0, field.add(model_b.get(0, 0), FieldElement::ONE));
        }
        let cols = (region_columns(&model_a, &inst.region), region_columns(&model_b, &inst.region));
        reports.push(((ell_r, ell_w), audit_storage_security(&inst, (&cols.0, &cols.1), mode, &mut rng).map_err(hint)?));
    }
    let passed = reports.iter().all(|(_, r)| r.passed());

    let (mut out, format) = output(cfg)?;
    match format {
        Format::Json => {
            #[derive(Serialize)]
            struct Entry<'a> {
                ell_r: usize,
                ell_w: usize,
                passed: bool,
                report: &'a PrivacyReport,
            }
            let entries: Vec<Entry> =
                reports.iter().map(|((r, w), rep)| Entry { ell_r: *r, ell_w: *w, passed: rep.passed(), report: rep }).collect();
            serde_json::to_writer_pretty(&mut out, &entries)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "ell_r", "ell_w", "audit", "observable", "dbs", "exact_tv", "empirical_tv", "min_p_value", "passed", "diagnostic",
            ])?;
            for ((r, wl), rep) in &reports {
                for e in &rep.entries {
                    let dbs: Vec<String> = e.dbs.iter().map(|d| d.to_string()).collect();
                    w.write_record([
                        r.to_string(),
                        wl.to_string(),
                        rep.audit.clone(),
                        e.observable.clone(),
                        dbs.join(" "),
                        e.exact_distance.map(|d| d.to_string()).unwrap_or_default(),
                        e.empirical_distance.map(|d| format!("{d:.6}")).unwrap_or_default(),
                        e.min_p_value.map(|p| format!("{p:.6}")).unwrap_or_default(),
                        e.passed.to_string(),
                        e.diagnostic.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        Format::Table => {
            for ((r, w), rep) in &reports {
                let views: Vec<_> = rep.entries.iter().filter(|e| !e.diagnostic).collect();
                let failed = views.iter().filter(|e| !e.passed).count();
                let worst = match mode {
                    AuditMode::Enumerate => format!("max TV {}", rep.max_exact_distance().unwrap_or_default()),
                    AuditMode::Sample { .. } => format!(
                        "min p {:.4}",
                        views.iter().filter_map(|e| e.min_p_value).fold(1.0, f64::min)
                    ),
                };
                writeln!(out, "({r},{w}) {:<17} {:>4} views, {failed} failed, {worst}", rep.audit, views.len())?;
                for e in rep.entries.iter().filter(|e| e.diagnostic) {
                    let d = e.exact_distance.map(|d| d.to_string()).or(e.empirical_distance.map(|d| format!("{d:.4}")));
                    writeln!(out, "      diagnostic, excluded: {} distance {}", e.observable, d.unwrap_or_default())?;
                }
            }
            writeln!(out, "{}", if passed { "all single-database views pass" } else { "LEAK: some single-database view differs" })?;
        }
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn serve_node(args: &ServeArgs) -> Result<ExitCode> {
    let server = NodeServer::bind(args.listen.as_str()).with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", server.addr());
    io::stdout().flush()?;
    server.join();
    Ok(ExitCode::SUCCESS)
}
