#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;

use roamfl::config::RunConfig;
use roamfl::experiment::{prepare, run, RunResult};
use roamfl::metrics::MetricsRow;
use roamfl::roles::fedavg_aggregate;
use roamfl_core::nn::{init_params, OptimizerState, ParamSet};

/// A run described in code and rendered to the INI format the CLI reads.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub rounds: u32,
    pub mode: &'static str,
    pub backend: &'static str,
    pub transfer: &'static str,
    pub seed: u64,
    pub split_point: u8,
    pub conv: [usize; 3],
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub train: usize,
    pub test: usize,
    pub noise: f32,
    /// (device, edge, fraction)
    pub devices: Vec<(String, String, Option<f64>)>,
    pub edges: Vec<String>,
    /// (device, after round, from, to)
    pub moves: Vec<(String, u32, String, String)>,
    pub compute_delay_ms: u64,
    pub extra: String,
}

impl Scenario {
    /// Four devices on two edges with a narrow model, quick enough for many runs.
    pub fn small(rounds: u32) -> Self {
        let edges = vec!["e1".to_string(), "e2".to_string()];
        let devices = (1..=4)
            .map(|i| (format!("d{i}"), edges[(i - 1) / 2].clone(), None))
            .collect();
        Self {
            rounds,
            mode: "fedfly",
            backend: "mem",
            transfer: "direct",
            seed: 11,
            split_point: 2,
            conv: [4, 8, 8],
            hidden: 32,
            batch_size: 25,
            learning_rate: 0.02,
            train: 400,
            test: 200,
            noise: 1.5,
            devices,
            edges,
            moves: Vec::new(),
            compute_delay_ms: 0,
            extra: String::new(),
        }
    }

    pub fn mode(mut self, mode: &'static str) -> Self {
        self.mode = mode;
        self
    }

    pub fn backend(mut self, backend: &'static str) -> Self {
        self.backend = backend;
        self
    }

    pub fn transfer(mut self, transfer: &'static str) -> Self {
        self.transfer = transfer;
        self
    }

    pub fn split_point(mut self, sp: u8) -> Self {
        self.split_point = sp;
        self
    }

    pub fn move_at(mut self, device: &str, after: u32, from: &str, to: &str) -> Self {
        self.moves
            .push((device.into(), after, from.into(), to.into()));
        self
    }

    pub fn text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "[run]\nrounds = {}\nmode = {}\nbackend = {}\nseed = {}\ntransfer = {}\n",
            self.rounds, self.mode, self.backend, self.seed, self.transfer
        );
        let _ = writeln!(
            t,
            "[model]\nsplit_point = {}\nconv = {}, {}, {}\nhidden = {}\nbatch_size = {}\nlearning_rate = {}\nmomentum = 0.9\n",
            self.split_point,
            self.conv[0],
            self.conv[1],
            self.conv[2],
            self.hidden,
            self.batch_size,
            self.learning_rate
        );
        let _ = writeln!(
            t,
            "[data]\nsource = synthetic\ntrain = {}\ntest = {}\nnoise = {}\n",
            self.train, self.test, self.noise
        );
        for e in &self.edges {
            let _ = writeln!(t, "[edge.{e}]");
        }
        for (d, e, f) in &self.devices {
            let _ = writeln!(t, "[device.{d}]\nedge = {e}");
            if let Some(f) = f {
                let _ = writeln!(t, "fraction = {f}");
            }
            if self.compute_delay_ms > 0 {
                let _ = writeln!(t, "compute_delay_ms = {}", self.compute_delay_ms);
            }
        }
        if !self.moves.is_empty() {
            t.push_str("\n[schedule]\n");
            for (d, r, a, b) in &self.moves {
                let _ = writeln!(t, "move = {d}, {r}, {a}, {b}");
            }
        }
        t.push_str(&self.extra);
        t
    }

    pub fn config(&self) -> RunConfig {
        RunConfig::parse("scenario.ini", &self.text()).expect("scenario parses")
    }

    /// Runs every role in process and insists on a clean finish.
    pub fn run(&self) -> RunResult {
        let result = run(&self.config(), None).expect("run starts");
        if let Some(e) = &result.error {
            panic!("run failed: {e}");
        }
        result
    }
}

/// Plain federated averaging with whole-model training: the reference the split runtime must reproduce.
/// Each device keeps its own optimizer state across rounds, as the split halves do.
pub fn monolithic_oracle(cfg: &RunConfig) -> (ParamSet, Vec<f64>) {
    let prep = prepare(cfg).expect("data");
    let model = &prep.train.model;
    let mut global = init_params(model, cfg.seed);
    let mut opts: BTreeMap<&str, OptimizerState> = BTreeMap::new();
    let mut accuracy = Vec::new();
    for _ in 0..cfg.rounds {
        let mut locals = Vec::new();
        for (id, batches) in &prep.device_batches {
            let opt = opts.entry(id).or_insert_with(|| {
                OptimizerState::new(cfg.model.learning_rate, cfg.model.momentum, &global).unwrap()
            });
            let mut params = global.clone();
            for b in batches {
                model.train_step(&mut params, opt, b).unwrap();
            }
            let n: usize = batches.iter().map(|b| b.len()).sum();
            locals.push((params, n as u32));
        }
        let refs: Vec<(&ParamSet, u32)> = locals.iter().map(|(p, n)| (p, *n)).collect();
        global = fedavg_aggregate(&refs).unwrap();
        accuracy.push(model.accuracy(&global, &prep.test).unwrap());
    }
    (global, accuracy)
}

/// Rows with the wall-clock columns blanked, for determinism checks.
pub fn without_clock(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter()
        .map(|r| MetricsRow {
            device_train_time_s: 0.0,
            edge_train_time_s: 0.0,
            migration_overhead_s: r.migration_overhead_s.map(|_| 0.0),
            ..r.clone()
        })
        .collect()
}

pub fn row<'a>(rows: &'a [MetricsRow], round: u32, device: &str) -> &'a MetricsRow {
    rows.iter()
        .find(|r| r.round == round && r.device_id == device)
        .expect("row present")
}
