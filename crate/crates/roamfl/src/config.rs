//! Run configuration in a small INI dialect.
//!
//! ```ini
//! [run]
//! rounds = 20
//! mode = fedfly          ; or restart
//! [edge.e1]
//! [device.d1]
//! edge = e1
//! [schedule]
//! move = d1, 10, e1, e2  ; device, after round, from, to
//! ```
//!
//! Errors carry `path:line:` so they can be fixed in an editor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use roamfl_core::data::SynthConfig;
use roamfl_core::protocol::TransferKind;

use crate::transport::{LinkConfig, MobilitySchedule, MoveEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    /// 0 when the problem is not tied to one line.
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.path, self.msg)
        } else {
            write!(f, "{}:{}: {}", self.path, self.line, self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar10 { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub split_point: u8,
    pub conv: [usize; 3],
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    /// Seed for the shard assignment.
    pub partition_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfigEntry {
    pub edge: String,
    pub fraction: f64,
    pub compute_delay: Duration,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub source: String,
    pub rounds: u32,
    pub mode: String,
    pub backend: String,
    pub seed: u64,
    pub transfer: TransferKind,
    pub output: Option<PathBuf>,
    pub save_checkpoints: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub central_address: Option<String>,
    pub barrier_timeout: Option<Duration>,
    /// Edge id to listen address (empty means pick a free port).
    pub edges: BTreeMap<String, Option<String>>,
    pub devices: BTreeMap<String, DeviceConfigEntry>,
    pub link: LinkConfig,
    pub schedule: MobilitySchedule,
}

pub const CENTRAL_ID: &str = "central";

struct Entry {
    line: usize,
    value: String,
}

/// Sections in file order; each maps keys to values (repeatable keys collect every value).
struct Ini {
    sections: Vec<(String, usize, BTreeMap<String, Vec<Entry>>)>,
}

impl Ini {
    fn parse(path: &str, text: &str) -> Result<Self, ConfigError> {
        let err = |line, msg: String| ConfigError {
            path: path.into(),
            line,
            msg,
        };
        let mut sections: Vec<(String, usize, BTreeMap<String, Vec<Entry>>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(n, "unterminated section header".into()))?
                    .trim();
                if name.is_empty() {
                    return Err(err(n, "empty section name".into()));
                }
                if sections.iter().any(|(s, _, _)| s == name) {
                    return Err(err(n, format!("section [{name}] appears twice")));
                }
                sections.push((name.to_string(), n, BTreeMap::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err(n, "missing key".into()));
            }
            let Some((section, _, map)) = sections.last_mut() else {
                return Err(err(n, format!("`{key}` outside any section")));
            };
            let list = map.entry(key.to_string()).or_default();
            if !list.is_empty() && !(section == "schedule" && key == "move") {
                return Err(err(n, format!("`{key}` set twice in [{section}]")));
            }
            list.push(Entry {
                line: n,
                value: value.trim().to_string(),
            });
        }
        Ok(Self { sections })
    }
}

fn strip_comment(line: &str) -> &str {
    let t = line.trim_start();
    if t.starts_with('#') || t.starts_with(';') {
        return "";
    }
    // Inline comments need whitespace before the marker so values may contain '#'.
    for marker in [" #", " ;", "\t#", "\t;"] {
        if let Some(i) = line.find(marker) {
            return &line[..i];
        }
    }
    line
}

/// Typed access to one section that tracks which keys were read.
struct Section<'a> {
    path: &'a str,
    name: &'a str,
    line: usize,
    map: &'a BTreeMap<String, Vec<Entry>>,
    used: BTreeSet<&'a str>,
}

impl<'a> Section<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.into(),
            line,
            msg: msg.into(),
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a Entry> {
        self.used.insert(key);
        self.map.get(key).and_then(|v| v.first())
    }

    fn get<T: FromStr>(&mut self, key: &'a str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        e.value.parse().map(Some).map_err(|x| {
            self.err(
                e.line,
                format!("[{}] {key} = `{}`: {x}", self.name, e.value),
            )
        })
    }

    fn or<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn line_of(&self, key: &str) -> usize {
        self.map
            .get(key)
            .and_then(|v| v.first())
            .map_or(self.line, |e| e.line)
    }

    fn finish(self) -> Result<(), ConfigError> {
        for (k, v) in self.map {
            if !self.used.contains(k.as_str()) {
                return Err(self.err(v[0].line, format!("unknown key `{k}` in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| format!("`{}`: {e}", p.trim()))
        })
        .collect()
}

fn parse_transfer(s: &str) -> Result<TransferKind, String> {
    match s {
        "direct" => Ok(TransferKind::Direct),
        "relay" => Ok(TransferKind::Relay),
        other => Err(format!(
            "unknown transfer `{other}` (expected direct or relay)"
        )),
    }
}

fn positive_seconds(v: f64) -> Option<Duration> {
    (v > 0.0).then(|| Duration::from_secs_f64(v))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: shown.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Self::parse(&shown, &text)
    }

    pub fn parse(path: &str, text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::parse(path, text)?;
        let empty = BTreeMap::new();
        let section = |name: &'static str| {
            let (n, line, map) = ini
                .sections
                .iter()
                .find(|(s, _, _)| s == name)
                .map(|(s, l, m)| (s.as_str(), *l, m))
                .unwrap_or((name, 0, &empty));
            Section {
                path,
                name: n,
                line,
                map,
                used: BTreeSet::new(),
            }
        };
        let err = |line, msg: String| ConfigError {
            path: path.into(),
            line,
            msg,
        };

        for (name, line, _) in &ini.sections {
            let known = ["run", "model", "data", "central", "link", "schedule"]
                .contains(&name.as_str())
                || name.strip_prefix("edge.").is_some_and(|s| !s.is_empty())
                || name.strip_prefix("device.").is_some_and(|s| !s.is_empty());
            if !known {
                return Err(err(*line, format!("unknown section [{name}]")));
            }
        }

        let mut run = section("run");
        let rounds: u32 = run.or("rounds", 10)?;
        if rounds == 0 {
            return Err(run.err(run.line_of("rounds"), "rounds must be at least 1"));
        }
        let mode = run.or("mode", "fedfly".to_string())?;
        let backend = run.or("backend", "mem".to_string())?;
        let seed = run.or("seed", 1u64)?;
        let transfer = match run.raw("transfer") {
            None => TransferKind::Direct,
            Some(e) => parse_transfer(&e.value).map_err(|m| err(e.line, m))?,
        };
        let output = run.get::<String>("output")?.map(PathBuf::from);
        let save_checkpoints = run.or("save_checkpoints", false)?;
        run.finish()?;

        let mut m = section("model");
        let split_point: u8 = m.or("split_point", 2)?;
        if !(1..=3).contains(&split_point) {
            return Err(m.err(
                m.line_of("split_point"),
                format!("split_point must be 1, 2 or 3, got {split_point}"),
            ));
        }
        let conv = match m.raw("conv") {
            None => [16, 32, 32],
            Some(e) => {
                let v: Vec<usize> =
                    parse_list(&e.value).map_err(|x| err(e.line, format!("conv: {x}")))?;
                let arr: [usize; 3] = v
                    .try_into()
                    .map_err(|_| err(e.line, "conv needs three widths".into()))?;
                if arr.contains(&0) {
                    return Err(err(e.line, "conv widths must be positive".into()));
                }
                arr
            }
        };
        let hidden = m.or("hidden", 128usize)?;
        let batch_size = m.or("batch_size", 100usize)?;
        let learning_rate = m.or("learning_rate", 0.01f32)?;
        let momentum = m.or("momentum", 0.9f32)?;
        if hidden == 0 || batch_size == 0 {
            let key = if hidden == 0 { "hidden" } else { "batch_size" };
            return Err(m.err(m.line_of(key), format!("{key} must be positive")));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(m.err(
                m.line,
                "learning_rate must be positive and momentum in [0, 1)",
            ));
        }
        m.finish()?;

        let mut d = section("data");
        let defaults = SynthConfig::default();
        let source = match d.or("source", "synthetic".to_string())?.as_str() {
            "synthetic" => DataSource::Synthetic,
            "cifar10" => {
                let dir: String = d
                    .get("cifar_dir")?
                    .ok_or_else(|| d.err(d.line_of("source"), "cifar10 needs cifar_dir"))?;
                DataSource::Cifar10 { dir: dir.into() }
            }
            other => {
                return Err(d.err(
                    d.line_of("source"),
                    format!("unknown data source `{other}`"),
                ))
            }
        };
        d.raw("cifar_dir");
        let shape = match d.raw("shape") {
            None => defaults.shape,
            Some(e) => {
                let v: Vec<usize> =
                    parse_list(&e.value).map_err(|x| err(e.line, format!("shape: {x}")))?;
                v.try_into()
                    .map_err(|_| err(e.line, "shape needs channels, height, width".into()))?
            }
        };
        let synth = SynthConfig {
            seed: d.or("seed", seed)?,
            n_train: d.or("train", defaults.n_train)?,
            n_test: d.or("test", defaults.n_test)?,
            shape,
            num_classes: d.or("classes", defaults.num_classes)?,
            noise: d.or("noise", defaults.noise)?,
        };
        let partition_seed = d.or("partition_seed", seed)?;
        d.finish()?;

        let mut c = section("central");
        let central_address = c.get::<String>("address")?;
        let barrier_timeout = c
            .get::<f64>("barrier_timeout_s")?
            .map_or(Some(Duration::from_secs(60)), positive_seconds);
        c.finish()?;

        let mut l = section("link");
        let link = LinkConfig {
            bits_per_sec: l.get::<f64>("bandwidth_bits_per_sec")?.filter(|b| *b > 0.0),
            latency: Duration::from_secs_f64(l.or("latency_ms", 0.0f64)?.max(0.0) / 1000.0),
        };
        l.finish()?;

        let mut edges = BTreeMap::new();
        let mut devices_raw = Vec::new();
        for (name, line, map) in &ini.sections {
            if let Some(id) = name.strip_prefix("edge.") {
                let mut s = Section {
                    path,
                    name,
                    line: *line,
                    map,
                    used: BTreeSet::new(),
                };
                edges.insert(id.to_string(), s.get::<String>("address")?);
                s.finish()?;
            } else if let Some(id) = name.strip_prefix("device.") {
                let mut s = Section {
                    path,
                    name,
                    line: *line,
                    map,
                    used: BTreeSet::new(),
                };
                let edge: String = s
                    .get("edge")?
                    .ok_or_else(|| err(*line, format!("[{name}] needs `edge`")))?;
                let fraction: Option<f64> = s.get("fraction")?;
                let delay: f64 = s.or("compute_delay_ms", 0.0)?;
                let fraction_line = s.line_of("fraction");
                let edge_line = s.line_of("edge");
                s.finish()?;
                devices_raw.push((
                    id.to_string(),
                    edge,
                    edge_line,
                    fraction,
                    fraction_line,
                    delay,
                ));
            }
        }
        if edges.is_empty() {
            return Err(err(0, "no [edge.*] sections".into()));
        }
        if devices_raw.is_empty() {
            return Err(err(0, "no [device.*] sections".into()));
        }
        if edges.contains_key(CENTRAL_ID)
            || devices_raw
                .iter()
                .any(|d| d.0 == CENTRAL_ID || edges.contains_key(&d.0))
        {
            return Err(err(
                0,
                "edge and device ids must be distinct and not `central`".into(),
            ));
        }

        let explicit: f64 = devices_raw.iter().filter_map(|d| d.3).sum();
        for (id, _, _, f, line, _) in &devices_raw {
            if let Some(f) = f {
                if !(*f > 0.0 && *f <= 1.0) {
                    return Err(err(
                        *line,
                        format!("fraction of {id} must be in (0, 1], got {f}"),
                    ));
                }
            }
        }
        if explicit > 1.0 + 1e-9 {
            let line = devices_raw
                .iter()
                .filter(|d| d.3.is_some())
                .map(|d| d.4)
                .max()
                .unwrap_or(0);
            return Err(err(
                line,
                format!("device fractions sum to {explicit} (more than 1)"),
            ));
        }
        let unset = devices_raw.iter().filter(|d| d.3.is_none()).count();
        let share = if unset == 0 {
            0.0
        } else {
            (1.0 - explicit) / unset as f64
        };
        if unset > 0 && share <= 0.0 {
            return Err(err(0, "no data left for devices without a fraction".into()));
        }
        let mut devices = BTreeMap::new();
        for (id, edge, edge_line, f, _, delay) in devices_raw {
            if !edges.contains_key(&edge) {
                return Err(err(
                    edge_line,
                    format!("device {id} is placed on unknown edge `{edge}`"),
                ));
            }
            if delay < 0.0 {
                return Err(err(0, format!("compute_delay_ms of {id} is negative")));
            }
            let compute_delay = Duration::from_secs_f64(delay / 1000.0);
            devices.insert(
                id,
                DeviceConfigEntry {
                    edge,
                    fraction: f.unwrap_or(share),
                    compute_delay,
                },
            );
        }

        let mut events = Vec::new();
        let mut first_move_line = 0;
        if let Some((_, _, map)) = ini.sections.iter().find(|(s, _, _)| s == "schedule") {
            for (k, v) in map {
                if k != "move" {
                    return Err(err(v[0].line, format!("unknown key `{k}` in [schedule]")));
                }
            }
            for e in map.get("move").into_iter().flatten() {
                first_move_line = if first_move_line == 0 {
                    e.line
                } else {
                    first_move_line
                };
                let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
                let [device, round, from, to] = parts[..] else {
                    return Err(err(
                        e.line,
                        "move needs `device, after_round, from, to`".into(),
                    ));
                };
                let after_round = round
                    .parse()
                    .map_err(|x| err(e.line, format!("round `{round}`: {x}")))?;
                let ev = MoveEvent {
                    device: device.into(),
                    after_round,
                    source: from.into(),
                    dest: to.into(),
                };
                // Validate one at a time so the error points at the offending line.
                let placement = devices
                    .iter()
                    .map(|(d, c)| (d.clone(), c.edge.clone()))
                    .collect();
                let edge_ids = edges.keys().cloned().collect();
                events.push(ev);
                MobilitySchedule::new(events.clone(), rounds, &placement, &edge_ids)
                    .map_err(|m| err(e.line, m))?;
            }
        }
        let placement = devices
            .iter()
            .map(|(d, c)| (d.clone(), c.edge.clone()))
            .collect();
        let schedule =
            MobilitySchedule::new(events, rounds, &placement, &edges.keys().cloned().collect())
                .map_err(|m| err(first_move_line, m))?;

        Ok(Self {
            source: path.into(),
            rounds,
            mode,
            backend,
            seed,
            transfer,
            output,
            save_checkpoints,
            model: ModelConfig {
                split_point,
                conv,
                hidden,
                batch_size,
                learning_rate,
                momentum,
            },
            data: DataConfig {
                source,
                synth,
                partition_seed,
            },
            central_address,
            barrier_timeout,
            edges,
            devices,
            link,
            schedule,
        })
    }

    pub fn fractions(&self) -> BTreeMap<String, f64> {
        self.devices
            .iter()
            .map(|(d, c)| (d.clone(), c.fraction))
            .collect()
    }
}
