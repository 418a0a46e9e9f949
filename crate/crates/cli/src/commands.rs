use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sdfl_core::adversary::{attack, reconstruct_closed_form};
use sdfl_core::aggregate::{run_aggregation, AdmmConfig, AggregationMode};
use sdfl_core::experiments::{
    aggregation_trace_csv, class_count_csv, mse_csv, mse_strictly_decreasing, sweep_iterations, sweep_schedule,
    IterationSweep, ScheduleSweep,
};
use sdfl_core::fedtrain::{
    load_csv, make_synthetic_with, train, FlConfig, LocalDataset, ModelKind, SyntheticConfig, TrainMode, TrainingReport,
    SCHEMA_VERSION,
};
use sdfl_core::schedule::{generate_schedule, validate_schedule, ValidationReport};
use sdfl_core::simnet::{peer_view, run_simulation, Transcript};
use sdfl_core::{GroupSchedule, ParamVector, SearchBudget};

use crate::io::{read_json, reproduction_line, Outputs};
use crate::{
    AggMode, AggregateArgs, AttackArgs, AttackMethod, BudgetArgs, Cli, Command, ModelArg, ScheduleCmd, SweepCmd,
    TrainArgs, EXIT_INVALID_SCHEDULE, EXIT_UNIQUE,
};

/// `println!` that tolerates a closed stdout (e.g. piping into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

impl From<&BudgetArgs> for SearchBudget {
    fn from(b: &BudgetArgs) -> Self {
        SearchBudget {
            max_sample_attempts_per_class: b.max_attempts,
            max_class_restarts: b.max_restarts,
            target_classes: b.target_classes,
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<u8> {
    let out = Outputs {
        dir: cli.out_dir.clone(),
        force: cli.force,
    };
    let flag_seed = cli.seed;
    let seed = match &cli.command {
        Command::Train(args) => match (flag_seed, &args.config) {
            (Some(s), _) => s,
            (None, Some(path)) => read_json::<FlConfig<f64>>(path)?.seed,
            (None, None) => 0,
        },
        _ => flag_seed.unwrap_or(0),
    };
    eprintln!("{}", reproduction_line(argv, flag_seed.is_some(), seed));

    match cli.command {
        Command::Schedule(cmd) => schedule(cmd, &out, seed),
        Command::Aggregate(args) => aggregate(args, &out, seed),
        Command::Attack(args) => attack_cmd(args),
        Command::Train(args) => train_cmd(args, &out, seed),
        Command::Sweep(cmd) => sweep(cmd, &out, seed),
    }
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    valid: bool,
    n: usize,
    s: usize,
    seed: u64,
    max_secure_iterations: usize,
    #[serde(flatten)]
    report: &'a ValidationReport,
}

fn schedule(cmd: ScheduleCmd, out: &Outputs, seed: u64) -> Result<u8> {
    match cmd {
        ScheduleCmd::Gen { n, s, budget, out: path } => {
            let path = out.path(path.as_deref(), "schedule.json");
            out.check(&[&path])?;
            let sched = generate_schedule(n, s, seed, (&budget).into())?;
            out.write_json(&path, &sched)?;
            let bound = sched.max_secure_iterations();
            say!(
                "wrote {}: n={n} s={s} classes={} max_secure_iterations={}",
                path.display(),
                sched.gap(),
                bound.max_iterations
            );
            Ok(0)
        }
        ScheduleCmd::Check { file } => {
            let sched: GroupSchedule = read_json(&file)?;
            let report = validate_schedule(&sched);
            let valid = report.is_valid();
            let summary = CheckOutput {
                valid,
                n: sched.n,
                s: sched.s,
                seed: sched.seed,
                max_secure_iterations: sched.max_secure_iterations().max_iterations,
                report: &report,
            };
            say!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(if valid { 0 } else { EXIT_INVALID_SCHEDULE })
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InputVector {
    Plain(Vec<f64>),
    Full(ParamVector<f64>),
}

fn read_inputs(path: &Path) -> Result<Vec<ParamVector<f64>>> {
    let raw: Vec<InputVector> = read_json(path)?;
    raw.into_iter()
        .map(|v| match v {
            InputVector::Plain(d) => Ok(ParamVector::from_vec(d)?),
            InputVector::Full(p) => Ok(p),
        })
        .collect()
}

#[derive(Serialize)]
struct AggregateOutput<'a> {
    schema_version: u32,
    n: usize,
    rho: f64,
    iterations: usize,
    mode: &'static str,
    gap: usize,
    seed: u64,
    lambda_init: &'static str,
    final_residual: f64,
    z_final: &'a ParamVector<f64>,
    exact_mean: &'a ParamVector<f64>,
}

fn aggregate(args: AggregateArgs, out: &Outputs, seed: u64) -> Result<u8> {
    let z_path = out.path(args.out.as_deref(), "z_final.json");
    let csv_path = out.path(args.trace_csv.as_deref(), "trace.csv");
    let mut targets = vec![z_path.as_path(), csv_path.as_path()];
    if let Some(t) = &args.transcript {
        targets.push(t);
    }
    out.check(&targets)?;

    let ws = read_inputs(&args.inputs)?;
    let mut cfg = AdmmConfig::new(args.rho, args.iters as usize).allow_unsafe(args.allow_unsafe);
    if args.lambda_zero {
        cfg = cfg.lambda_zero();
    }
    if args.mode == AggMode::Grouped {
        let sched = match (&args.schedule, args.group_size) {
            (Some(path), _) => read_json::<GroupSchedule>(path)?,
            (None, Some(s)) => generate_schedule(ws.len(), s, seed, SearchBudget::default())?,
            (None, None) => bail!("grouped mode needs --schedule or --group-size"),
        };
        cfg = cfg.grouped(sched);
    } else if args.schedule.is_some() {
        bail!("--schedule only applies to --mode grouped");
    }

    let run = run_aggregation(&ws, &cfg, seed)?;
    let summary = AggregateOutput {
        schema_version: SCHEMA_VERSION,
        n: ws.len(),
        rho: args.rho,
        iterations: run.iterations(),
        mode: match cfg.mode {
            AggregationMode::AllToAll => "all",
            AggregationMode::Grouped { .. } => "grouped",
        },
        gap: cfg.mode.gap(),
        seed,
        lambda_init: cfg.lambda_init.label(),
        final_residual: run.final_residual(),
        z_final: &run.z_final,
        exact_mean: &run.target,
    };
    out.write_json(&z_path, &summary)?;
    out.write_bytes(&csv_path, aggregation_trace_csv(&run)?.as_bytes())?;
    if let Some(t) = &args.transcript {
        let (z, tr) = run_simulation(&ws, &cfg, seed)?;
        if z != run.z_final {
            bail!("message harness disagrees with the direct run");
        }
        let mut buf = Vec::new();
        tr.write_jsonl(&mut buf)?;
        out.write_bytes(t, &buf)?;
    }
    say!(
        "wrote {} and {}: iterations={} final_residual={:e}",
        z_path.display(),
        csv_path.display(),
        run.iterations(),
        run.final_residual()
    );
    Ok(0)
}

#[derive(Serialize)]
struct ClosedFormOutput {
    status: &'static str,
    method: &'static str,
    w_hat: ParamVector<f64>,
}

fn attack_cmd(args: AttackArgs) -> Result<u8> {
    let file = File::open(&args.transcript).with_context(|| format!("opening {}", args.transcript.display()))?;
    let tr = Transcript::<f64>::read_jsonl(BufReader::new(file))?;
    let view = peer_view(&tr, args.observer)?;
    match args.method {
        AttackMethod::System => {
            let horizon = args.horizon.unwrap_or(view.iterations());
            let result = attack(&view, args.target, horizon)?;
            say!("{}", serde_json::to_string_pretty(&result)?);
            Ok(if result.is_unique() { EXIT_UNIQUE } else { 0 })
        }
        AttackMethod::ClosedForm => {
            if args.horizon.is_some_and(|h| h < 2) {
                bail!("the closed form needs a horizon of at least 2");
            }
            let w_hat = reconstruct_closed_form(&view, args.target)?;
            let result = ClosedFormOutput {
                status: "unique",
                method: "closed_form",
                w_hat,
            };
            say!("{}", serde_json::to_string_pretty(&result)?);
            Ok(EXIT_UNIQUE)
        }
    }
}

/// Keys a training config file may carry besides the training settings.
#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainExtras {
    mode: Option<TrainMode>,
    synthetic: Option<SyntheticConfig>,
    test_fraction: Option<f64>,
}

#[derive(Serialize)]
struct DataSummary {
    source: String,
    peers: usize,
    dim: usize,
    classes: Option<usize>,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    schema_version: u32,
    seed: u64,
    data: DataSummary,
    report: &'a TrainingReport<f64>,
}

fn train_cmd(args: TrainArgs, out: &Outputs, seed: u64) -> Result<u8> {
    let path = out.path(args.out.as_deref(), "report.json");
    out.check(&[&path])?;

    let (mut cfg, extras): (FlConfig<f64>, TrainExtras) = match &args.config {
        Some(p) => {
            let v: Value = read_json(p)?;
            if v.get("schema_version").is_none() {
                bail!("{} has no schema_version", p.display());
            }
            (
                serde_json::from_value(v.clone()).context("training settings")?,
                serde_json::from_value(v).context("data settings")?,
            )
        }
        None => (FlConfig::default(), TrainExtras::default()),
    };
    cfg.seed = seed;
    if let Some(m) = args.model {
        cfg.model = match m {
            ModelArg::Linear => ModelKind::LinearRegression,
            ModelArg::Logistic => ModelKind::LogisticRegression,
            ModelArg::Mlp => ModelKind::Mlp {
                hidden: args.hidden.unwrap_or(16),
            },
        };
    } else if let (Some(h), ModelKind::Mlp { .. }) = (args.hidden, cfg.model) {
        cfg.model = ModelKind::Mlp { hidden: h };
    }
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.rounds => cfg.rounds);
    set!(args.local_epochs => cfg.local_epochs);
    set!(args.batch_size => cfg.batch_size);
    set!(args.lr => cfg.learning_rate);
    set!(args.rho => cfg.secure.rho);
    set!(args.admm_iters => cfg.secure.iterations);
    if args.group_size.is_some() {
        cfg.secure.group_size = args.group_size;
    }
    if args.all_to_all {
        cfg.secure.group_size = None;
    }
    if args.allow_unsafe {
        cfg.secure.allow_unsafe = true;
    }
    cfg.validate()?;
    let mode = args.mode.or(extras.mode).unwrap_or(TrainMode::Secured);
    let test_fraction = args.test_fraction.or(extras.test_fraction);

    let (data, source): (Vec<LocalDataset<f64>>, String) = if args.data == "synth" {
        let mut syn = extras.synthetic.unwrap_or_default();
        set!(args.peers => syn.n_peers);
        set!(args.samples_per_peer => syn.samples_per_peer);
        set!(args.dim => syn.dim);
        set!(args.classes => syn.classes);
        set!(args.heterogeneity => syn.heterogeneity);
        set!(args.separation => syn.separation);
        set!(test_fraction => syn.test_fraction);
        syn.seed = seed;
        (make_synthetic_with(&syn)?, "synth".into())
    } else if let Some(p) = args.data.strip_prefix("csv:") {
        let file = File::open(p).with_context(|| format!("opening {p}"))?;
        let peers = args.peers.unwrap_or(9);
        (
            load_csv(BufReader::new(file), peers, test_fraction.unwrap_or(0.1), seed)?,
            args.data.clone(),
        )
    } else {
        bail!("--data must be 'synth' or 'csv:<path>'");
    };

    let report = train(mode, &cfg, &data)?;
    let summary = DataSummary {
        source,
        peers: data.len(),
        dim: data[0].dim(),
        classes: data[0].num_classes(),
        train_rows: data.iter().map(|d| d.train.len()).collect(),
        test_rows: data.iter().map(|d| d.test.len()).collect(),
    };
    out.write_json(
        &path,
        &TrainOutput {
            schema_version: SCHEMA_VERSION,
            seed,
            data: summary,
            report: &report,
        },
    )?;
    let last = report.rounds.last().expect("round 0 is always recorded");
    match last.global_accuracy {
        Some(acc) => say!(
            "wrote {}: mode={mode} rounds={} accuracy={:.4} loss={:.6}",
            path.display(),
            cfg.rounds,
            acc,
            last.global_loss
        ),
        None => say!(
            "wrote {}: mode={mode} rounds={} loss={:.6}",
            path.display(),
            cfg.rounds,
            last.global_loss
        ),
    }
    Ok(0)
}

#[derive(Serialize)]
struct SweepManifest<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    config: &'a C,
    rows: &'a [R],
    #[serde(skip_serializing_if = "Option::is_none")]
    monotone: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_below: Option<Option<usize>>,
}

fn manifest_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

fn sweep(cmd: SweepCmd, out: &Outputs, seed: u64) -> Result<u8> {
    match cmd {
        SweepCmd::Iters {
            n,
            s,
            all_to_all,
            rho,
            dims,
            first,
            last,
            seeds,
            allow_unsafe,
            below,
            budget,
            out: path,
        } => {
            let csv_path = out.path(path.as_deref(), "mse_sweep.csv");
            let json_path = manifest_path(&csv_path);
            out.check(&[&csv_path, &json_path])?;
            let cfg = IterationSweep {
                n,
                group_size: (!all_to_all).then_some(s),
                rho,
                dims,
                first_iteration: first as usize,
                last_iteration: last as usize,
                seeds: (seed..seed + seeds).collect(),
                budget: (&budget).into(),
                allow_unsafe,
            };
            let rows = sweep_iterations(&cfg)?;
            let decreasing = mse_strictly_decreasing(&rows);
            let first_below = below.map(|b| rows.iter().find(|r| r.mean_mse < b).map(|r| r.iterations));
            out.write_bytes(&csv_path, mse_csv(&rows)?.as_bytes())?;
            out.write_json(
                &json_path,
                &SweepManifest {
                    schema_version: SCHEMA_VERSION,
                    config: &cfg,
                    rows: &rows,
                    monotone: Some(decreasing),
                    first_below,
                },
            )?;
            say!("wrote {}: strictly_decreasing={decreasing}", csv_path.display());
            if let (Some(b), Some(hit)) = (below, first_below) {
                match hit {
                    Some(i) => say!("mean MSE first below {b:e} at iteration {i}"),
                    None => say!("mean MSE never below {b:e} in range"),
                }
            }
            Ok(0)
        }
        SweepCmd::Schedule {
            ns,
            s,
            seeds,
            budget,
            out: path,
        } => {
            let csv_path = out.path(path.as_deref(), "class_counts.csv");
            let json_path = manifest_path(&csv_path);
            out.check(&[&csv_path, &json_path])?;
            let cfg = ScheduleSweep {
                ns,
                s,
                seeds: (seed..seed + seeds).collect(),
                budget: (&budget).into(),
            };
            let res = sweep_schedule(&cfg)?;
            out.write_bytes(&csv_path, class_count_csv(&res.rows)?.as_bytes())?;
            out.write_json(
                &json_path,
                &SweepManifest {
                    schema_version: SCHEMA_VERSION,
                    config: &cfg,
                    rows: &res.rows,
                    monotone: Some(res.monotone),
                    first_below: None,
                },
            )?;
            say!("wrote {}: monotone={}", csv_path.display(), res.monotone);
            Ok(0)
        }
    }
}
