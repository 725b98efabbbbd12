use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use fedplt_core::allocation::{
    allocation_imbalance, balanced_allocation, contribution_std, contribution_vector, imbalance_error,
    layer_counts_mlp, quantize_allocation, training_ratio, LayerCounts,
};
use fedplt_core::assignment::{assign_rotational, coverage_report, default_sublayers, partition_layers};
use fedplt_core::costmodel::{
    bound_envelope, convergence_bound, efficiency_report, equalize_ratios, ConvergenceComponents, ConvergenceConstants,
    DeviceProfile, Schedule, Workload,
};
use fedplt_core::federation::{run_experiment, write_metrics_csv};
use fedplt_core::sampling::{estimator_variance, ocs_plt_probabilities, select_clients, SamplingInput};
use fedplt_core::{Error, ExperimentConfig, Topology};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  configuration or usage error
  3  infeasible optimization (e.g. sampling budget above capacity)
  4  numerical failure (non-finite loss or parameters)

Set FEDPLT_THREADS to cap the number of worker threads.";

#[derive(Parser)]
#[command(name = "fedplt", version, about = "Partial-layer federated learning simulator", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Most balanced layer-wise allocation for a training ratio.
    Allocate(AllocateArgs),
    /// Sub-layer assignment table and coverage for a fleet.
    Assign(AssignArgs),
    /// Run a federated training experiment from a JSON config.
    Simulate(SimulateArgs),
    /// Client sampling probabilities for a JSON instance.
    Sample(SampleArgs),
    /// Round-time, computation and communication report for a device fleet.
    Efficiency(EfficiencyArgs),
    /// Convergence-bound trajectory.
    Bounds(BoundsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

#[derive(clap::Args)]
struct AllocateArgs {
    /// Layer sizes of a dense network, input first.
    #[arg(long, value_delimiter = ',', conflicts_with = "counts", required_unless_present = "counts")]
    layers: Option<Vec<usize>>,
    /// Per-layer parameter counts.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<u64>>,
    /// Overall training ratio.
    #[arg(long, required_unless_present = "q")]
    ratio: Option<f64>,
    /// Evaluate this allocation vector instead of solving for one.
    #[arg(long, value_delimiter = ',', conflicts_with = "ratio")]
    q: Option<Vec<f64>>,
    /// Round the allocation to this many channels (or sub-layers) per layer.
    #[arg(long, value_delimiter = ',')]
    granularity: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(clap::Args)]
struct AssignArgs {
    /// Experiment config supplying topology, fleet and sub-layer counts.
    #[arg(long, conflicts_with_all = ["layers", "ratios"])]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', requires = "ratios")]
    layers: Option<Vec<usize>>,
    /// Per-client training ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Sub-layers per layer.
    #[arg(long, value_delimiter = ',')]
    sublayers: Option<Vec<usize>>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`, then `./run`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SampleArgs {
    /// JSON file with `n`, `norms`, `r` (optional, defaults to ones) and `kappa`.
    #[arg(long)]
    input: PathBuf,
    /// Also draw a selection with this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct EfficiencyArgs {
    /// Fleet JSON: workload, devices and optional report ratios.
    #[arg(long)]
    fleet: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Constant,
    Decaying,
}

#[derive(clap::Args)]
struct BoundsArgs {
    /// Contraction constant z.
    #[arg(long, required_unless_present = "components")]
    z: Option<f64>,
    /// Error constant B.
    #[arg(long, required_unless_present = "components")]
    b: Option<f64>,
    /// Initial distance D0.
    #[arg(long, required_unless_present = "components")]
    d0: Option<f64>,
    /// JSON file of problem constants from which z, B and D0 are derived.
    #[arg(long, conflicts_with_all = ["z", "b", "d0"])]
    components: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "decaying")]
    schedule: ScheduleKind,
    /// Step size for the constant schedule.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = c
            .downcast_ref::<io::Error>()
            .map(io::Error::kind)
            .or_else(|| c.downcast_ref::<serde_json::Error>().and_then(|j| j.io_error_kind()));
        kind == Some(io::ErrorKind::BrokenPipe)
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Infeasible(_)) => 3,
        Some(Error::Numerical(_)) => 4,
        _ => 2,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDPLT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FEDPLT_THREADS={v} is not a thread count"))?;
        if n == 0 {
            bail!("FEDPLT_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Allocate(a) => allocate(a),
        Command::Assign(a) => assign(a),
        Command::Simulate(a) => simulate(a),
        Command::Sample(a) => sample(a),
        Command::Efficiency(a) => efficiency(a),
        Command::Bounds(a) => bounds(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn tuple(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("({})", parts.join(", "))
}

fn allocate(a: AllocateArgs) -> Result<()> {
    let h = match (&a.layers, &a.counts) {
        (Some(layers), _) => layer_counts_mlp(&Topology::new(layers.clone())?),
        (None, Some(counts)) => LayerCounts::new(counts.clone())?,
        (None, None) => unreachable!("clap requires one of --layers/--counts"),
    };
    let ones = vec![1.0; h.len()];
    let full_x = contribution_vector(&ones, &h)?;
    let mut report = json!({
        "counts": h.as_slice(),
        "full_x": full_x,
        "full_std": contribution_std(&full_x),
    });
    let (q, x, r) = match (a.ratio, &a.q) {
        (_, Some(q)) => {
            let r = training_ratio(q, &h)?;
            let x = contribution_vector(q, &h)?;
            report["imbalance"] = json!(allocation_imbalance(q, &h)?);
            (q.clone(), x, r)
        }
        (Some(r), None) => {
            let plan = balanced_allocation(r, &h)?;
            report["imbalance"] = json!(imbalance_error(&plan.x, &h, plan.r)?);
            (plan.q, plan.x, plan.r)
        }
        (None, None) => unreachable!("clap requires one of --ratio/--q"),
    };
    report["ratio"] = json!(r);
    report["q"] = json!(q);
    report["x"] = json!(x);
    report["x_std"] = json!(contribution_std(&x));
    let quantized = match &a.granularity {
        Some(g) => {
            let qq = quantize_allocation(&q, g)?;
            report["quantized_q"] = json!(qq);
            report["quantized_ratio"] = json!(training_ratio(&qq, &h)?);
            Some(qq)
        }
        None => None,
    };
    match a.format {
        Format::Json => print_json(&report),
        Format::Text | Format::Csv => {
            println!("r      = {r:.4}");
            println!("Q*     = {}", tuple(&q, 2));
            if let Some(qq) = quantized {
                println!("Q (quantized) = {}", tuple(&qq, 2));
            }
            println!("X*     = {}", tuple(&x, 4));
            println!("std(X) = {:.5}", contribution_std(&x));
            println!("E      = {:.4}", report["imbalance"].as_f64().unwrap_or(f64::NAN));
            Ok(())
        }
    }
}

fn assign(a: AssignArgs) -> Result<()> {
    let (topology, ratios, sublayers) = match &a.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
            let ratios = cfg.client_ratios()?;
            (cfg.topology()?, ratios, cfg.sublayers.clone().or(a.sublayers.clone()))
        }
        None => {
            let layers = a.layers.clone().context("either --config or --layers with --ratios is required")?;
            let ratios = a.ratios.clone().context("--ratios is required with --layers")?;
            (Topology::new(layers)?, ratios, a.sublayers.clone())
        }
    };
    let h = layer_counts_mlp(&topology);
    let counts = sublayers.unwrap_or_else(|| default_sublayers(&topology));
    let partition = partition_layers(&topology, &counts)?;
    let q: Vec<Vec<f64>> = ratios.iter().map(|&r| balanced_allocation(r, &h).map(|p| p.q)).collect::<Result<_, _>>()?;
    let assignments = assign_rotational(&q, &partition)?;
    let clients: Vec<_> = assignments
        .iter()
        .zip(&q)
        .zip(&ratios)
        .enumerate()
        .map(|(k, ((asg, q), r))| {
            let realized = asg.realized_fractions(&partition);
            json!({
                "client": k,
                "ratio": r,
                "q": q,
                "sublayers": asg.layers,
                "realized_q": realized,
                "realized_ratio": training_ratio(&realized, &h).unwrap_or(f64::NAN),
            })
        })
        .collect();
    let coverage = coverage_report(&assignments, &partition);
    let min_cover = coverage.iter().flatten().copied().min().unwrap_or(0);
    print_json(&json!({
        "topology": topology.sizes(),
        "sublayers": partition.counts(),
        "clients": clients,
        "coverage": coverage,
        "min_coverage": min_cover,
    }))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'a str,
    config: &'a ExperimentConfig,
    final_accuracy: f64,
    final_loss: f64,
    ratios: &'a [f64],
    realized_ratios: &'a [f64],
    empty_shards: &'a [usize],
    coverage: &'a Option<Vec<Vec<usize>>>,
    files: [&'a str; 2],
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let out = a.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let result = run_experiment(&cfg)?;
    let layers = cfg.topology()?.num_layers();

    let csv = BufWriter::new(create(&out.join("metrics.csv"))?);
    write_metrics_csv(&result.history, layers, csv)?;
    let mut ckpt = BufWriter::new(create(&out.join("checkpoint.bin"))?);
    result.final_params.write_checkpoint(&mut ckpt)?;
    ckpt.flush()?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        final_accuracy: result.final_accuracy,
        final_loss: result.final_loss,
        ratios: &result.ratios,
        realized_ratios: &result.realized_ratios,
        empty_shards: &result.empty_shards,
        coverage: &result.coverage,
        files: ["metrics.csv", "checkpoint.bin"],
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!(
        "{} rounds, final accuracy {:.4}, loss {:.4}; wrote {}",
        result.history.len(),
        result.final_accuracy,
        result.final_loss,
        out.display()
    );
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    n: Vec<f64>,
    norms: Vec<f64>,
    #[serde(default)]
    r: Option<Vec<f64>>,
    kappa: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config { path: path.display().to_string(), message: e.to_string() })
        .map_err(Into::into)
}

fn sample(a: SampleArgs) -> Result<()> {
    let f: SampleFile = read_json(&a.input)?;
    let r = f.r.unwrap_or_else(|| vec![1.0; f.n.len()]);
    let input = SamplingInput { n: f.n, norms: f.norms, r, kappa: f.kappa };
    let d = ocs_plt_probabilities(&input)?;
    let p = d.probabilities.as_slice();
    let mut report = json!({
        "p": p,
        "O": d.unsaturated,
        "variance": estimator_variance(p, &input.n, &input.norms),
        "expected_clients": p.iter().sum::<f64>(),
        "expected_ratio_mass": p.iter().zip(&input.r).map(|(p, r)| p * r).sum::<f64>(),
        "fallback": d.fallback,
    });
    if let Some(seed) = a.seed {
        report["selected"] = json!(select_clients(&d.probabilities, seed));
    }
    print_json(&report)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FleetFile {
    workload: WorkloadSpec,
    devices: Vec<DeviceSpec>,
    /// Ratios used for the savings tables; defaults to the equalized ones.
    #[serde(default)]
    ratios: Option<Vec<f64>>,
    /// Target round time in seconds; defaults to the fastest full round.
    #[serde(default)]
    target: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadSpec {
    params: f64,
    bytes_per_param: f64,
    local_iters: f64,
    forward_flops: f64,
    #[serde(default)]
    backward_flops: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceSpec {
    name: String,
    gflops: f64,
    down_mbps: f64,
    up_mbps: f64,
    latency: f64,
}

fn efficiency(a: EfficiencyArgs) -> Result<()> {
    let fleet: FleetFile = read_json(&a.fleet)?;
    let w = &fleet.workload;
    let workload = Workload {
        backward_flops: w.backward_flops.unwrap_or(2.0 * w.forward_flops),
        ..Workload::new(w.params, w.bytes_per_param, w.local_iters, w.forward_flops)
    };
    let profiles: Vec<DeviceProfile> =
        fleet.devices.iter().map(|d| DeviceProfile::from_units(d.gflops, d.down_mbps, d.up_mbps, d.latency)).collect();
    let eq = equalize_ratios(&profiles, &workload, fleet.target)?;
    let ratios = fleet.ratios.clone().unwrap_or_else(|| eq.ratios.clone());
    let rep = efficiency_report(&profiles, &workload, &ratios)?;
    let names: Vec<&str> = fleet.devices.iter().map(|d| d.name.as_str()).collect();
    match a.format {
        Format::Json => print_json(&json!({
            "devices": names,
            "equalization": eq,
            "report_ratios": ratios,
            "report": rep,
        })),
        Format::Csv => {
            let mut out = io::stdout().lock();
            writeln!(
                out,
                "client,time_full_s,ratio_equalized,ratio,flops_full_g,flops_partial_g,comp_saving_pct,\
                 bytes_full_mb,bytes_partial_mb,uplink_saving_pct,total_comm_saving_pct,idle_avoided_s,idle_avoided_pct"
            )?;
            for (k, c) in rep.clients.iter().enumerate() {
                writeln!(
                    out,
                    "{},{:.4},{:.4},{},{:.4},{:.4},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
                    names[k],
                    c.time_full,
                    eq.ratios[k],
                    c.ratio,
                    c.flops_full / 1e9,
                    c.flops_partial / 1e9,
                    100.0 * c.comp_saving,
                    c.bytes_full / 1e6,
                    c.bytes_partial / 1e6,
                    100.0 * c.uplink_saving,
                    100.0 * c.total_comm_saving,
                    c.idle_avoided,
                    100.0 * c.idle_avoided_fraction
                )?;
            }
            Ok(())
        }
        Format::Text => {
            let mut out = io::stdout().lock();
            writeln!(
                out,
                "{:<8}{:>10}{:>10}{:>8}{:>10}{:>10}{:>9}{:>10}{:>9}{:>9}{:>10}{:>9}",
                "client",
                "T_full s",
                "r_eq",
                "r",
                "GF full",
                "GF part",
                "comp %",
                "MB part",
                "up %",
                "tot %",
                "idle s",
                "idle %"
            )?;
            for (k, c) in rep.clients.iter().enumerate() {
                writeln!(
                    out,
                    "{:<8}{:>10.2}{:>10.4}{:>8}{:>10.2}{:>10.2}{:>9.1}{:>10.2}{:>9.1}{:>9.1}{:>10.2}{:>9.2}",
                    names[k],
                    c.time_full,
                    eq.ratios[k],
                    c.ratio,
                    c.flops_full / 1e9,
                    c.flops_partial / 1e9,
                    100.0 * c.comp_saving,
                    c.bytes_partial / 1e6,
                    100.0 * c.uplink_saving,
                    100.0 * c.total_comm_saving,
                    c.idle_avoided,
                    100.0 * c.idle_avoided_fraction
                )?;
            }
            writeln!(out)?;
            writeln!(out, "target round time  {:.2} s", eq.target)?;
            writeln!(out, "round time full    {:.2} s", rep.round_full)?;
            writeln!(out, "round time partial {:.2} s", rep.round_partial)?;
            writeln!(out, "round-time saving  {:.2} %", 100.0 * rep.time_saving)?;
            if !eq.infeasible.is_empty() {
                writeln!(out, "clients unable to meet the target: {:?}", eq.infeasible)?;
            }
            Ok(())
        }
    }
}

fn bounds(a: BoundsArgs) -> Result<()> {
    let constants = match &a.components {
        Some(path) => ConvergenceConstants::from_components(&read_json::<ConvergenceComponents>(path)?)?,
        None => ConvergenceConstants::new(
            a.z.context("--z is required")?,
            a.b.context("--b is required")?,
            a.d0.context("--d0 is required")?,
        )?,
    };
    let schedule = match a.schedule {
        ScheduleKind::Decaying => Schedule::Decaying,
        ScheduleKind::Constant => {
            Schedule::Constant { eta: a.eta.context("--eta is required for a constant schedule")? }
        }
    };
    let d = convergence_bound(&constants, schedule, a.horizon)?;
    let mut out = io::stdout().lock();
    writeln!(out, "t,bound,envelope")?;
    for (t, v) in d.iter().enumerate() {
        writeln!(out, "{t},{v},{}", bound_envelope(&constants, schedule, t))?;
    }
    Ok(())
}
