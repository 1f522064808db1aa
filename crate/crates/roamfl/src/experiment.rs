//! Turning a [`RunConfig`] into roles, running them and writing results.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use roamfl_core::data::{
    load_cifar10_binary, partition, synth_dataset, DataError, Dataset, Normalization, PartitionPlan,
};
use roamfl_core::nn::{Batch, MiniVggWidths, ModelSpec, ParamSet};
use roamfl_core::protocol::{Codec, Message};
use roamfl_core::split::SplitSpec;

use crate::backend::{backends, Backend, TransportSetup};
use crate::config::{ConfigError, DataSource, RunConfig, CENTRAL_ID};
use crate::exec::{run_threaded, Delivery, ExecError};
use crate::metrics::{read_csv, write_csv, MetricsRow, MovePlan, Summary};
use crate::roles::{
    strategies, Central, CentralConfig, Device, DeviceConfig, Edge, EdgeConfig, MobilityStrategy,
    Role, RoleReport, TrainSpec,
};
use crate::transport::AddressBook;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PARAMS_FILE: &str = "final_params.bin";
const TEST_CHUNK: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    /// A missing or malformed input artifact.
    #[error("{}: {detail}", path.display())]
    Input { path: PathBuf, detail: String },
    #[error("run failed: {0}")]
    Failed(#[from] ExecError),
}

impl RunError {
    /// 2 for problems with the inputs, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Usage(_) | RunError::Input { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Datasets, shards and model for one run.
pub struct Prepared {
    pub train: TrainSpec,
    pub test: Vec<Batch>,
    pub device_batches: BTreeMap<String, Vec<Batch>>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    let (train_set, test_set): (Dataset, Dataset) = match &cfg.data.source {
        DataSource::Synthetic => synth_dataset(&cfg.data.synth)?,
        DataSource::Cifar10 { dir } => load_cifar10_binary(dir, &Normalization::default())?,
    };
    let widths = MiniVggWidths {
        conv: cfg.model.conv,
        hidden: cfg.model.hidden,
    };
    let model = ModelSpec::mini_vgg(train_set.shape(), train_set.num_classes(), widths)
        .map_err(|e| RunError::Usage(format!("model: {e}")))?;
    let plan = PartitionPlan::new(cfg.fractions())?;
    let shards = partition(train_set.len(), &plan, cfg.data.partition_seed);
    let mut device_batches = BTreeMap::new();
    for (id, shard) in shards {
        if shard.is_empty() {
            return Err(RunError::Usage(format!(
                "device {id} gets no training samples"
            )));
        }
        let batches = shard
            .batches(cfg.model.batch_size)
            .map(|ix| train_set.batch(ix))
            .collect();
        device_batches.insert(id, batches);
    }
    Ok(Prepared {
        train: TrainSpec {
            model,
            split: SplitSpec::new(cfg.model.split_point),
            rounds: cfg.rounds,
            batch_size: cfg.model.batch_size,
            learning_rate: cfg.model.learning_rate,
            momentum: cfg.model.momentum,
        },
        test: test_set.batches(TEST_CHUNK),
        device_batches,
    })
}

pub fn strategy(cfg: &RunConfig) -> Result<Arc<dyn MobilityStrategy>, RunError> {
    strategies()
        .get(&cfg.mode)
        .map_err(|e| RunError::Usage(e.to_string()))
}

pub fn backend(cfg: &RunConfig) -> Result<Arc<dyn Backend>, RunError> {
    backends()
        .get(&cfg.backend)
        .map_err(|e| RunError::Usage(e.to_string()))
}

/// Builds every role, or only `only` when running one role per process.
pub fn build_roles(
    cfg: &RunConfig,
    prep: Prepared,
    concurrent: bool,
    checkpoint_dir: Option<PathBuf>,
    only: Option<&str>,
) -> Result<Vec<Box<dyn Role>>, RunError> {
    let strategy = strategy(cfg)?;
    let wanted = |id: &str| only.is_none_or(|o| o == id);
    let mut roles: Vec<Box<dyn Role>> = Vec::new();
    if wanted(CENTRAL_ID) {
        roles.push(Box::new(Central::new(
            CentralConfig {
                id: CENTRAL_ID.into(),
                train: prep.train.clone(),
                edges: cfg.edges.keys().cloned().collect(),
                devices: cfg.devices.keys().cloned().collect(),
                init_seed: cfg.seed,
                barrier_timeout: if concurrent {
                    cfg.barrier_timeout
                } else {
                    None
                },
            },
            prep.test,
        )));
    }
    for id in cfg.edges.keys().filter(|e| wanted(e)) {
        roles.push(Box::new(Edge::new(EdgeConfig {
            id: id.clone(),
            central: CENTRAL_ID.into(),
            train: prep.train.clone(),
            checkpoint_dir: checkpoint_dir.clone(),
        })));
    }
    let mut batches = prep.device_batches;
    for (id, d) in cfg.devices.iter().filter(|(d, _)| wanted(d)) {
        let device = Device::new(
            DeviceConfig {
                id: id.clone(),
                edge: d.edge.clone(),
                train: prep.train.clone(),
                compute_delay: d.compute_delay,
                moves: cfg.schedule.for_device(id).to_vec(),
                strategy: strategy.clone(),
                transfer: cfg.transfer,
                codec: Codec::default(),
            },
            batches.remove(id).unwrap_or_default(),
        )
        .map_err(|e| RunError::Usage(e.to_string()))?;
        roles.push(Box::new(device));
    }
    if roles.is_empty() {
        return Err(RunError::Usage(format!(
            "no role named `{}`",
            only.unwrap_or_default()
        )));
    }
    Ok(roles)
}

fn transport_setup(cfg: &RunConfig) -> TransportSetup {
    let mut book = BTreeMap::new();
    if let Some(a) = &cfg.central_address {
        book.insert(CENTRAL_ID.to_string(), a.clone());
    }
    for (e, a) in &cfg.edges {
        if let Some(a) = a {
            book.insert(e.clone(), a.clone());
        }
    }
    TransportSetup {
        codec: Codec::default(),
        book: AddressBook::new(book),
        link: cfg.link.clone(),
    }
}

pub fn move_plan(cfg: &RunConfig) -> MovePlan {
    let mut plan = MovePlan::new();
    for ev in cfg.schedule.events() {
        plan.entry(ev.device.clone())
            .or_default()
            .push(ev.after_round);
    }
    plan
}

#[derive(Debug)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub accuracy: Vec<f64>,
    pub final_params: Option<ParamSet>,
    pub reports: BTreeMap<String, RoleReport>,
    pub trace: Vec<Delivery>,
    /// Set when the run stopped early; the other fields hold what was gathered.
    pub error: Option<ExecError>,
}

impl RunResult {
    pub fn device_report(&self, id: &str) -> Option<&crate::roles::DeviceReport> {
        match self.reports.get(id) {
            Some(RoleReport::Device(d)) => Some(d),
            _ => None,
        }
    }
}

/// Runs every role in this process. Returns `Err` only when the run could not start.
pub fn run(cfg: &RunConfig, checkpoint_dir: Option<PathBuf>) -> Result<RunResult, RunError> {
    let backend = backend(cfg)?;
    let prep = prepare(cfg)?;
    let roles = build_roles(cfg, prep, backend.concurrent(), checkpoint_dir, None)?;
    let transport = backend.transport(&transport_setup(cfg));
    log::info!(
        "running {} rounds, mode {}, backend {}",
        cfg.rounds,
        cfg.mode,
        backend.name()
    );
    let outcome = backend.execute(roles, transport);
    let central = match outcome.reports.get(CENTRAL_ID) {
        Some(RoleReport::Central(c)) => c.clone(),
        _ => Default::default(),
    };
    let summary = Summary::from_rows(
        &cfg.mode,
        backend.name(),
        cfg.rounds,
        &central.rows,
        &move_plan(cfg),
    );
    Ok(RunResult {
        rows: central.rows,
        summary,
        accuracy: central.accuracy,
        final_params: central.final_params,
        reports: outcome.reports,
        trace: outcome.trace,
        error: outcome.error,
    })
}

/// Fails unless `dir` is missing or empty, then creates it.
pub fn ensure_empty_dir(dir: &Path) -> Result<(), RunError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() {
            return Err(RunError::Usage(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_outputs(dir: &Path, result: &RunResult) -> Result<(), RunError> {
    let metrics = dir.join(METRICS_FILE);
    write_csv(&metrics, &result.rows).map_err(|source| RunError::Csv {
        path: metrics,
        source,
    })?;
    let summary = dir.join(SUMMARY_FILE);
    write_csv(&summary, std::slice::from_ref(&result.summary)).map_err(|source| RunError::Csv {
        path: summary,
        source,
    })?;
    if let Some(params) = &result.final_params {
        let path = dir.join(PARAMS_FILE);
        let round = result.rows.last().map_or(0, |r| r.round);
        let bytes = Codec::default()
            .encode(&Message::GlobalParams {
                round,
                params: params.clone(),
            })
            .map_err(|e| RunError::Usage(e.to_string()))?;
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Runs all roles and writes results into `out`, which must be empty.
pub fn run_to_dir(cfg: &RunConfig, out: &Path) -> Result<RunResult, RunError> {
    ensure_empty_dir(out)?;
    let ckpt_dir = if cfg.save_checkpoints {
        let d = out.join("checkpoints");
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Some(d)
    } else {
        None
    };
    let result = run(cfg, ckpt_dir)?;
    write_outputs(out, &result)?;
    Ok(result)
}

/// Runs a single role over TCP, for deployments with one process per role.
pub fn run_single_role(
    cfg: &RunConfig,
    role: &str,
    out: Option<&Path>,
) -> Result<Option<RunResult>, RunError> {
    let setup = transport_setup(cfg);
    let missing: Vec<&str> = std::iter::once(CENTRAL_ID)
        .chain(cfg.edges.keys().map(String::as_str))
        .filter(|id| setup.book.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(RunError::Usage(format!(
            "separate processes need an address for: {}",
            missing.join(", ")
        )));
    }
    if role == CENTRAL_ID {
        if let Some(out) = out {
            ensure_empty_dir(out)?;
        }
    }
    let prep = prepare(cfg)?;
    let ckpt_dir = match (cfg.save_checkpoints, out) {
        (true, Some(o)) => Some(o.join("checkpoints")),
        _ => None,
    };
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let roles = build_roles(cfg, prep, true, ckpt_dir, Some(role))?;
    let tcp = backends().get("tcp").expect("built in");
    let outcome = run_threaded(roles, tcp.transport(&setup));
    if let Some(e) = outcome.error {
        return Err(RunError::Failed(e));
    }
    match outcome.reports.get(CENTRAL_ID) {
        Some(RoleReport::Central(c)) => {
            let summary =
                Summary::from_rows(&cfg.mode, "tcp", cfg.rounds, &c.rows, &move_plan(cfg));
            let result = RunResult {
                rows: c.rows.clone(),
                summary,
                accuracy: c.accuracy.clone(),
                final_params: c.final_params.clone(),
                reports: outcome.reports.clone(),
                trace: Vec::new(),
                error: None,
            };
            if let Some(out) = out {
                write_outputs(out, &result)?;
            }
            Ok(Some(result))
        }
        _ => Ok(None),
    }
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    if !path.is_file() {
        return Err(RunError::Input {
            path: path.to_path_buf(),
            detail: "missing".into(),
        });
    }
    read_csv(path).map_err(|e| RunError::Input {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_summary(dir: &Path) -> Result<Summary, RunError> {
    let path = dir.join(SUMMARY_FILE);
    read_input::<Summary>(&path)?
        .pop()
        .ok_or_else(|| RunError::Input {
            path,
            detail: "no rows".into(),
        })
}

/// Mean device training time per round, keyed by round.
fn round_times(rows: &[MetricsRow]) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.round).or_default();
        e.0 += r.device_train_time_s;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (t, n))| (k, t / n as f64))
        .collect()
}

/// Side-by-side view of two result directories.
pub fn compare(a: &Path, b: &Path) -> Result<String, RunError> {
    let (sa, sb) = (read_summary(a)?, read_summary(b)?);
    let ma: Vec<MetricsRow> = read_input(&a.join(METRICS_FILE))?;
    let mb: Vec<MetricsRow> = read_input(&b.join(METRICS_FILE))?;
    let (pa, pb) = (a.join(PARAMS_FILE), b.join(PARAMS_FILE));
    for p in [&pa, &pb] {
        if !p.is_file() {
            return Err(RunError::Input {
                path: p.clone(),
                detail: "missing".into(),
            });
        }
    }
    let mut out = format!("{:<28}{:>16}{:>16}\n", "", sa.mode, sb.mode);
    let mut line =
        |name: &str, x: String, y: String| out.push_str(&format!("{name:<28}{x:>16}{y:>16}\n"));
    line("backend", sa.backend.clone(), sb.backend.clone());
    line("rounds", sa.rounds.to_string(), sb.rounds.to_string());
    line(
        "final_test_accuracy",
        format!("{:.4}", sa.final_test_accuracy),
        format!("{:.4}", sb.final_test_accuracy),
    );
    line(
        "total_device_rounds",
        sa.total_device_rounds.to_string(),
        sb.total_device_rounds.to_string(),
    );
    line(
        "mover_device_rounds",
        sa.mover_device_rounds.to_string(),
        sb.mover_device_rounds.to_string(),
    );
    line(
        "mover_device_time_s",
        format!("{:.3}", sa.mover_device_time_s),
        format!("{:.3}", sb.mover_device_time_s),
    );
    line(
        "migration_overhead_max_s",
        format!("{:.4}", sa.migration_overhead_max_s),
        format!("{:.4}", sb.migration_overhead_max_s),
    );
    line(
        "reduction_vs_restart",
        format!("{:.4}", sa.reduction_vs_restart),
        format!("{:.4}", sb.reduction_vs_restart),
    );
    line(
        "overhead_entries",
        sa.overhead_entries.to_string(),
        sb.overhead_entries.to_string(),
    );
    if sb.mover_device_rounds > 0 {
        out.push_str(&format!(
            "device rounds of movers, first / second: {:.3}\n",
            sa.mover_device_rounds as f64 / sb.mover_device_rounds as f64
        ));
    }
    if sb.mover_device_time_s > 0.0 {
        out.push_str(&format!(
            "device time of movers, first / second: {:.3}\n",
            sa.mover_device_time_s / sb.mover_device_time_s
        ));
    }
    out.push_str(&format!(
        "accuracy delta, second - first: {:+.4}\n",
        sb.final_test_accuracy - sa.final_test_accuracy
    ));
    let same = fs::read(&pa).map_err(io_err(&pa))? == fs::read(&pb).map_err(io_err(&pb))?;
    out.push_str(if same {
        "final parameters: identical\n"
    } else {
        "final parameters: differ\n"
    });
    let (ta, tb) = (round_times(&ma), round_times(&mb));
    out.push_str("round  time_first_s  time_second_s  ratio\n");
    for (round, x) in &ta {
        let Some(y) = tb.get(round) else { continue };
        let ratio = if *y > 0.0 {
            format!("{:.3}", x / y)
        } else {
            "-".into()
        };
        out.push_str(&format!("{round:>5}  {x:>12.4}  {y:>13.4}  {ratio}\n"));
    }
    Ok(out)
}

/// Writes gnuplot-friendly `.dat` files next to a metrics CSV (or into `out_dir`).
pub fn plot_export(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let rows: Vec<MetricsRow> = read_input(csv_path)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut accuracy = BTreeMap::new();
    let mut per_device: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in &rows {
        accuracy.insert(r.round, r.test_accuracy);
        per_device.entry(&r.device_id).or_default().push(r);
    }
    let path = out_dir.join("accuracy.dat");
    let mut text = String::from("# round test_accuracy\n");
    for (round, acc) in &accuracy {
        text.push_str(&format!("{round} {acc}\n"));
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    written.push(path);
    let edges: BTreeSet<&str> = rows.iter().map(|r| r.edge_id.as_str()).collect();
    for (device, list) in per_device {
        let path = out_dir.join(format!("device_{device}.dat"));
        let mut text = String::from(
            "# round device_time_s loss cumulative_device_rounds migration_overhead_s edge\n",
        );
        for r in list {
            let overhead = r
                .migration_overhead_s
                .map_or("NaN".to_string(), |o| o.to_string());
            let edge = edges.iter().position(|e| *e == r.edge_id).unwrap_or(0);
            text.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.round, r.device_train_time_s, r.loss, r.cumulative_device_rounds, overhead, edge
            ));
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
