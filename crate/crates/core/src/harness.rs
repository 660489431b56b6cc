//! Experiment runner: flat JSON configs, full continual runs, ablation
//! sweeps, gradient checks, and on-disk reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::{count_trainable_params, AdapterConfig, Checkpoint, ParamCounts, SharedDownInit};
use crate::backbone::{AttachSet, Backbone, BackboneConfig};
use crate::classifier::{accuracy, adapter_pass_count, PrototypeStore};
use crate::diffgraph::{finite_difference_check, FdReport, LossTerm, Parameter};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{FrozenHashes, Model};
use crate::numerics::SeededRng;
use crate::streams::{gen_synthetic, split_tasks, Dataset, SyntheticSpec, TaskStream};
use crate::trainer::{train_task, Optimizer, TaskSession, TrainConfig, TrainLog};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected desk or paper"))),
        }
    }
}

/// Every knob of an experiment as one flat record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // data
    pub num_classes: usize,
    pub num_tasks: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub shuffle_classes: bool,
    /// Load this dataset file instead of generating one.
    pub dataset: Option<PathBuf>,
    // backbone
    pub num_blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub attach: AttachSet,
    // adapters
    pub rank: usize,
    pub position: usize,
    pub flip: bool,
    pub fix_shared_down: bool,
    pub shared_down: SharedDownInit,
    pub bw: bool,
    // training
    pub kd: bool,
    pub gr: bool,
    pub lambda_kd: f64,
    pub lambda_orth: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        Self::assemble(
            &SyntheticSpec::default(),
            5,
            &BackboneConfig::desk(),
            &AdapterConfig::default(),
            &TrainConfig::default(),
        )
    }

    /// ViT-B/16 shapes with 100 classes over 10 tasks; far too slow to
    /// train here, but its accounting and pass counts are cheap.
    pub fn paper() -> Self {
        let spec = SyntheticSpec {
            num_classes: 100,
            image_side: 224,
            channels: 3,
            ..SyntheticSpec::default()
        };
        let adapters = AdapterConfig {
            rank: 10,
            position: 6,
            ..AdapterConfig::default()
        };
        Self::assemble(&spec, 10, &BackboneConfig::paper(), &adapters, &TrainConfig::default())
    }

    /// Two blocks of width 16 over two tasks, for gradient checking.
    pub fn micro() -> Self {
        Self {
            num_classes: 4,
            num_tasks: 2,
            train_per_class: 2,
            test_per_class: 1,
            num_blocks: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2.0,
            image_side: 8,
            patch_side: 4,
            rank: 2,
            position: 1,
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Self::desk()
        }
    }

    fn assemble(
        spec: &SyntheticSpec,
        num_tasks: usize,
        bb: &BackboneConfig,
        ad: &AdapterConfig,
        tr: &TrainConfig,
    ) -> Self {
        Self {
            num_classes: spec.num_classes,
            num_tasks,
            train_per_class: spec.train_per_class,
            test_per_class: spec.test_per_class,
            noise_std: spec.noise_std,
            shuffle_classes: false,
            dataset: None,
            num_blocks: bb.num_blocks,
            width: bb.width,
            heads: bb.heads,
            mlp_ratio: bb.mlp_ratio,
            image_side: bb.image_side,
            patch_side: bb.patch_side,
            channels: bb.channels,
            attach: bb.attach.clone(),
            rank: ad.rank,
            position: ad.position,
            flip: ad.flip,
            fix_shared_down: ad.fix_shared_down,
            shared_down: ad.shared_down,
            bw: ad.block_weights,
            kd: tr.kd,
            gr: tr.gr,
            lambda_kd: tr.lambda_kd,
            lambda_orth: tr.lambda_orth,
            tau: tr.tau,
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            learning_rate: tr.learning_rate,
            optimizer: tr.optimizer,
            execution: tr.execution,
        }
    }

    pub fn known_keys() -> Vec<String> {
        match serde_json::to_value(Self::desk()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Parses a flat JSON object over `base`; keys not present keep their
    /// base value. A `"preset"` key selects the base.
    pub fn from_json(text: &str, base: Preset) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(mut doc) = doc else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let base = match doc.remove("preset") {
            Some(Value::String(p)) => p.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => base,
        };
        let known = Self::known_keys();
        let unknown: Vec<&String> = doc.keys().filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(Error::Config(format!("unknown config keys: {}", list.join(", "))));
        }
        let Value::Object(mut merged) = serde_json::to_value(Self::preset(base))? else {
            return Err(Error::Internal("config did not serialize to an object".into()));
        };
        for (k, v) in doc {
            merged.insert(k, v);
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone_config();
        bb.validate()?;
        self.adapter_config().validate(&bb)?;
        self.train_config().validate()?;
        if self.num_tasks == 0 || !self.num_classes.is_multiple_of(self.num_tasks) {
            return Err(Error::Config(format!(
                "num_tasks {} must evenly divide num_classes {}",
                self.num_tasks, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            num_blocks: self.num_blocks,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            image_side: self.image_side,
            patch_side: self.patch_side,
            channels: self.channels,
            attach: self.attach.clone(),
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            position: self.position,
            flip: self.flip,
            fix_shared_down: self.fix_shared_down,
            shared_down: self.shared_down,
            block_weights: self.bw,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_kd: self.lambda_kd,
            lambda_orth: self.lambda_orth,
            tau: self.tau,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            kd: self.kd,
            gr: self.gr,
            execution: self.execution,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            image_side: self.image_side,
            channels: self.channels,
            noise_std: self.noise_std,
        }
    }
}

/// Independent random streams of one run.
pub struct RunRngs {
    pub data: SeededRng,
    pub backbone: SeededRng,
    pub adapters: SeededRng,
    pub training: SeededRng,
    pub class_order: SeededRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let root = SeededRng::new(seed);
        Self {
            data: root.fork(1),
            backbone: root.fork(2),
            adapters: root.fork(3),
            training: root.fork(4),
            class_order: root.fork(5),
        }
    }
}

pub fn build_dataset(cfg: &ExperimentConfig, rng: &mut SeededRng) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        Some(path) => Dataset::load(path)?,
        None => gen_synthetic(&cfg.synthetic_spec(), rng)?,
    };
    let h = &ds.header;
    if h.num_classes as usize != cfg.num_classes
        || h.channels as usize != cfg.channels
        || h.height as usize != cfg.image_side
        || h.width as usize != cfg.image_side
    {
        return Err(Error::Config(format!(
            "dataset header {h:?} does not match the configured classes and image shape"
        )));
    }
    Ok(ds)
}

pub fn build_stream(cfg: &ExperimentConfig, rngs: &mut RunRngs) -> Result<TaskStream> {
    let ds = build_dataset(cfg, &mut rngs.data)?;
    let order = cfg.shuffle_classes.then_some(&mut rngs.class_order);
    split_tasks(&ds, cfg.num_tasks, order)
}

pub fn build_model(cfg: &ExperimentConfig, rngs: &mut RunRngs) -> Result<Model> {
    let bb = Arc::new(Backbone::init(&cfg.backbone_config(), &mut rngs.backbone)?);
    Model::new(bb, cfg.adapter_config(), &mut rngs.adapters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    /// `A_t` after each task.
    pub per_task: Vec<f64>,
    pub average: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

impl AccuracyRecord {
    pub fn from_stages(per_task: Vec<f64>) -> Result<Self> {
        let last = *per_task
            .last()
            .ok_or_else(|| Error::InvalidInput("no accuracy stages".into()))?;
        let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
        Ok(Self {
            per_task,
            average,
            last,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_secs: Vec<f64>,
    pub eval_secs: Vec<f64>,
    pub total_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub train_log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub accuracy: AccuracyRecord,
    pub params: ParamCounts,
    /// Adapter-block applications per query after the last task.
    pub adapter_pass_count: usize,
    /// Per-query counts observed during each evaluation, all equal to
    /// the formula for that stage.
    pub observed_pass_counts: Vec<usize>,
    pub artifacts: Artifacts,
    pub timings: Timings,
}

impl RunReport {
    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Human-readable summary.
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "seed {}  classes {}  tasks {}", self.seed, c.num_classes, c.num_tasks);
        let _ = writeln!(
            s,
            "backbone N={} d={} heads={}  adapters r={} l={} attach={}{}",
            c.num_blocks,
            c.width,
            c.heads,
            c.rank,
            c.position,
            c.attach,
            if c.flip { " (flipped)" } else { "" }
        );
        let _ = writeln!(
            s,
            "toggles kd={} gr={} bw={} fixB={} down={}",
            c.kd, c.gr, c.bw, c.fix_shared_down, c.shared_down
        );
        let _ = writeln!(s, "{:>6} {:>8}", "task", "A_t");
        for (t, a) in self.accuracy.per_task.iter().enumerate() {
            let _ = writeln!(s, "{:>6} {:>8.4}", t + 1, a);
        }
        let _ = writeln!(s, "A_bar {:.4}  A_T {:.4}", self.accuracy.average, self.accuracy.last);
        let _ = writeln!(
            s,
            "trainable params {} ({:.4}% of backbone {})",
            self.params.total, self.params.ratio_pct, self.params.backbone
        );
        let _ = writeln!(s, "adapter passes per query {}", self.adapter_pass_count);
        let _ = write!(s, "time {:.2}s", self.timings.total_secs);
        s
    }
}

/// Everything a finished run produced, in memory.
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub store: PrototypeStore,
    pub logs: Vec<TrainLog>,
    /// Frozen-state hashes before and after each task trained.
    pub hashes: Vec<(FrozenHashes, FrozenHashes)>,
}

/// Trains every task in order, evaluating on all seen tasks after each.
/// With `out`, writes the training log, checkpoint, prototypes, and
/// `report.json` into that directory.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rngs = RunRngs::new(seed);
    let stream = build_stream(cfg, &mut rngs)?;
    let mut model = build_model(cfg, &mut rngs)?;
    let train_cfg = cfg.train_config();
    let mut store = PrototypeStore::new();
    let mut log_bytes = Vec::new();
    let mut logs = Vec::new();
    let mut hashes = Vec::new();
    let mut stages = Vec::new();
    let mut observed = Vec::new();
    let mut timings = Timings::default();
    let mut test: Vec<(&[f32], u32)> = Vec::new();

    for task in &stream.tasks {
        let before = model.frozen_hashes();
        let t0 = Instant::now();
        let log = train_task(&mut model, &mut store, task, &train_cfg, &mut rngs.training, Some(&mut log_bytes))?;
        timings.train_secs.push(t0.elapsed().as_secs_f64());
        hashes.push((before, model.frozen_hashes()));
        logs.push(log);

        let t0 = Instant::now();
        test.extend(task.test.iter().map(|s| (s.image.as_slice(), s.class)));
        let acc = accuracy(&model, &store, &test, cfg.execution)?;
        timings.eval_secs.push(t0.elapsed().as_secs_f64());
        let expected = expected_passes(&model, task.index)?;
        if let Some(&bad) = acc.passes.iter().find(|&&p| p != expected) {
            return Err(Error::Internal(format!(
                "query used {bad} adapter passes, expected {expected}"
            )));
        }
        observed.push(expected);
        stages.push(acc.accuracy);
    }

    let mut artifacts = Artifacts::default();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let log_path = dir.join("train_log.jsonl");
        write_atomic(&log_path, &log_bytes)?;
        let ckpt = dir.join("adapters.clla");
        Checkpoint::write(&ckpt, &model.checkpoint_records())?;
        let protos = dir.join("prototypes.json");
        write_atomic(&protos, serde_json::to_string_pretty(&store.to_json())?.as_bytes())?;
        artifacts = Artifacts {
            train_log: Some(log_path),
            checkpoint: Some(ckpt),
            prototypes: Some(protos),
        };
    }
    timings.total_secs = start.elapsed().as_secs_f64();
    let report = RunReport {
        config: cfg.clone(),
        seed,
        accuracy: AccuracyRecord::from_stages(stages)?,
        params: count_trainable_params(&cfg.adapter_config(), &cfg.backbone_config(), stream.len())?,
        adapter_pass_count: *observed.last().unwrap_or(&0),
        observed_pass_counts: observed,
        artifacts,
        timings,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(RunOutcome {
        report,
        model,
        store,
        logs,
        hashes,
    })
}

/// Adapter-block applications per query once `tasks` tasks are stored.
pub fn expected_passes(model: &Model, tasks: usize) -> Result<usize> {
    let n = model.num_blocks();
    if model.shared_is_prefix() {
        adapter_pass_count(model.adapter_config().position, n, tasks)
    } else {
        Ok(n * tasks)
    }
}

/// One sweep dimension and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

pub const AXIS_NAMES: [&str; 9] = ["kd", "gr", "bw", "l-sweep", "fixB", "flip", "rank", "attach", "downproj"];

impl Axis {
    /// `name` or `name=v1:v2:..`.
    pub fn parse(spec: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let (name, explicit) = match spec.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (spec.trim(), None),
        };
        if !AXIS_NAMES.contains(&name) {
            return Err(Error::Config(format!(
                "unknown axis {name:?}, expected one of {}",
                AXIS_NAMES.join(", ")
            )));
        }
        let values: Vec<String> = match explicit {
            Some(v) => v.split(':').map(|s| s.trim().to_string()).collect(),
            None => Self::default_values(name, cfg),
        };
        if values.is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("axis {name} has an empty value")));
        }
        let axis = Self {
            name: name.to_string(),
            values,
        };
        for v in &axis.values {
            axis.apply(&mut cfg.clone(), v)?;
        }
        Ok(axis)
    }

    pub fn parse_list(list: &str, cfg: &ExperimentConfig) -> Result<Vec<Self>> {
        let axes = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Self::parse(s, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("an axis is listed twice".into()));
        }
        Ok(axes)
    }

    fn default_values(name: &str, cfg: &ExperimentConfig) -> Vec<String> {
        let bools = || vec!["off".to_string(), "on".to_string()];
        match name {
            "kd" | "gr" | "bw" | "fixB" | "flip" => bools(),
            "l-sweep" => {
                let mut ls: Vec<usize> = (0..=cfg.num_blocks).step_by(2).collect();
                if ls.last() != Some(&cfg.num_blocks) {
                    ls.push(cfg.num_blocks);
                }
                ls.iter().map(usize::to_string).collect()
            }
            "rank" => {
                let mut rs: Vec<usize> = [1, 5, 10].iter().map(|&r| r.min(cfg.width)).collect();
                rs.dedup();
                rs.iter().map(usize::to_string).collect()
            }
            "attach" => ["q", "v", "qv", "qkv"].iter().map(|s| s.to_string()).collect(),
            "downproj" => vec!["orthogonal".into(), "random".into()],
            _ => Vec::new(),
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let flag = || match value {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(Error::Config(format!("axis {} expects on/off, got {other:?}", self.name))),
        };
        let number = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("axis {} expects an integer, got {value:?}", self.name)))
        };
        match self.name.as_str() {
            "kd" => cfg.kd = flag()?,
            "gr" => cfg.gr = flag()?,
            "bw" => cfg.bw = flag()?,
            "fixB" => cfg.fix_shared_down = flag()?,
            "flip" => cfg.flip = flag()?,
            "l-sweep" => cfg.position = number()?,
            "rank" => cfg.rank = number()?,
            "attach" => cfg.attach = value.parse()?,
            "downproj" => {
                cfg.shared_down = match value {
                    "orthogonal" => SharedDownInit::Orthogonal,
                    "random" => SharedDownInit::Random,
                    other => {
                        return Err(Error::Config(format!(
                            "axis downproj expects orthogonal or random, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown axis {other:?}"))),
        }
        cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// One value per axis, in axis order.
    pub values: Vec<String>,
    pub seed: u64,
    pub a_final: f64,
    pub a_bar: f64,
    pub params_pct: f64,
    pub pass_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axes: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<RunReport>,
}

impl Sweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for a in &self.axes {
            s.push_str(a);
            s.push(',');
        }
        s.push_str("seed,A_T,A_bar,params_pct,pass_count\n");
        for r in &self.rows {
            for v in &r.values {
                s.push_str(v);
                s.push(',');
            }
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{}",
                r.seed, r.a_final, r.a_bar, r.params_pct, r.pass_count
            );
        }
        s
    }

    /// Mean of `(A_T, Ā)` over seeds for every axis combination, in
    /// first-appearance order.
    pub fn means(&self) -> Vec<(Vec<String>, f64, f64)> {
        let mut out: Vec<(Vec<String>, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(v, ..)| *v == r.values) {
                Some((_, a, b, n)) => {
                    *a += r.a_final;
                    *b += r.a_bar;
                    *n += 1;
                }
                None => out.push((r.values.clone(), r.a_final, r.a_bar, 1)),
            }
        }
        out.into_iter()
            .map(|(v, a, b, n)| (v, a / n as f64, b / n as f64))
            .collect()
    }
}

/// Every combination of axis values.
pub fn cross_product(axes: &[Axis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

/// Runs the cross product of `axes` at each seed. With `out`, every run's
/// artifacts go under `out/runs/` and the summary to `out/sweep.csv`.
pub fn run_ablation(base: &ExperimentConfig, axes: &[Axis], seeds: &[u64], out: Option<&Path>) -> Result<Sweep> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for combo in cross_product(axes) {
        let mut cfg = base.clone();
        for (axis, v) in axes.iter().zip(&combo) {
            axis.apply(&mut cfg, v)?;
        }
        for &seed in seeds {
            let dir = out.map(|o| {
                let label: Vec<String> = axes
                    .iter()
                    .zip(&combo)
                    .map(|(a, v)| format!("{}-{}", a.name, v))
                    .collect();
                let label = if label.is_empty() { "base".to_string() } else { label.join("_") };
                o.join("runs").join(format!("{label}_s{seed}"))
            });
            let outcome = run_experiment(&cfg, seed, dir.as_deref())?;
            let r = outcome.report;
            rows.push(SweepRow {
                values: combo.clone(),
                seed,
                a_final: r.accuracy.last,
                a_bar: r.accuracy.average,
                params_pct: r.params.ratio_pct,
                pass_count: r.adapter_pass_count,
            });
            reports.push(r);
        }
    }
    let sweep = Sweep {
        axes: axes.iter().map(|a| a.name.clone()).collect(),
        rows,
        reports,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("sweep.csv"), sweep.to_csv().as_bytes())?;
    }
    Ok(sweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct TermCheck {
    pub term: LossTerm,
    pub max_rel_error: f64,
    pub checked_scalars: usize,
    /// Worst relative error per parameter group.
    pub per_group: BTreeMap<String, f64>,
    pub per_param: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub task: usize,
    pub step: f64,
    pub terms: Vec<TermCheck>,
    pub max_rel_error: f64,
    /// A zero-learning-rate step left every parameter bit-identical.
    pub zero_lr_unchanged: bool,
}

impl GradcheckReport {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gradient check on task {} (step {:e})", self.task, self.step);
        for t in &self.terms {
            let _ = writeln!(
                s,
                "{:>5}: max rel error {:.3e} over {} scalars",
                format!("{:?}", t.term).to_lowercase(),
                t.max_rel_error,
                t.checked_scalars
            );
            for (g, e) in &t.per_group {
                let _ = writeln!(s, "       {g:<14} {e:.3e}");
            }
        }
        let _ = writeln!(s, "zero learning rate leaves parameters unchanged: {}", self.zero_lr_unchanged);
        let _ = write!(s, "overall max rel error {:.3e}", self.max_rel_error);
        s
    }
}

fn group_of(name: &str) -> String {
    name.split('[').next().unwrap_or(name).to_string()
}

/// Optimizer steps taken on the checked task before differencing.
pub const GRADCHECK_WARMUP: usize = 20;

/// Finite-difference check of every active loss term on the last task of
/// a short run: earlier tasks train normally, the checked task takes
/// [`GRADCHECK_WARMUP`] optimizer steps first so its adapters are nonzero.
pub fn gradcheck(cfg: &ExperimentConfig, seed: u64, step: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rngs = RunRngs::new(seed);
    let stream = build_stream(cfg, &mut rngs)?;
    let mut model = build_model(cfg, &mut rngs)?;
    let train_cfg = cfg.train_config();
    let mut store = PrototypeStore::new();
    let (last, earlier) = stream
        .tasks
        .split_last()
        .ok_or_else(|| Error::Data("empty task stream".into()))?;
    for task in earlier {
        train_task(&mut model, &mut store, task, &train_cfg, &mut rngs.training, None)?;
    }
    let mut session = TaskSession::begin(&model, last, &train_cfg, &mut rngs.training)?;
    let all: Vec<usize> = (0..session.num_samples()).collect();
    let batch: Vec<usize> = all.iter().copied().take(cfg.batch_size.max(1)).collect();
    for _ in 0..GRADCHECK_WARMUP {
        session.step(&mut model, &batch)?;
    }

    // A zero-rate step must not move anything.
    let zero_lr_unchanged = {
        let zero_cfg = TrainConfig {
            learning_rate: 0.0,
            ..train_cfg.clone()
        };
        let mut m = model.clone();
        let mut s = session.with_config(&zero_cfg)?;
        let before = s.parameters(&m);
        s.step(&mut m, &batch)?;
        let after = s.parameters(&m);
        before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.key == b.key && a.value.to_le_bytes() == b.value.to_le_bytes())
    };

    let targets: Vec<Option<Vec<f64>>> = batch
        .iter()
        .map(|&i| session.kd_active().then(|| session.kd_target(i)).transpose())
        .collect::<Result<_>>()?;
    let (bundle, _) = session.batch(&model, &batch)?;
    let params = session.parameters(&model);
    let mut terms = vec![LossTerm::Ce];
    if session.kd_active() {
        terms.push(LossTerm::Kd);
    }
    if session.orth_active() {
        terms.push(LossTerm::Orth);
    }
    let evaluate = |term: LossTerm, values: &[Parameter]| -> Result<f64> {
        let mut m = model.clone();
        let mut s = session.clone();
        for p in values {
            s.set_param(&mut m, &p.key, p.value.clone())?;
        }
        match term {
            LossTerm::Orth => Ok(s.orth_term()?.0),
            _ => {
                let mut total = 0.0;
                for (&i, t) in batch.iter().zip(&targets) {
                    let (ce, kd) = s.sample_losses(&m, i, t.clone())?;
                    total += if term == LossTerm::Ce { ce } else { kd };
                }
                Ok(total / batch.len() as f64)
            }
        }
    };
    let mut checks = Vec::new();
    for term in terms {
        let report: FdReport = finite_difference_check(|v| evaluate(term, v), &params, bundle.term(term), step)?;
        let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
        for (name, e) in &report.per_param {
            let g = per_group.entry(group_of(name)).or_insert(0.0);
            *g = g.max(*e);
        }
        checks.push(TermCheck {
            term,
            max_rel_error: report.max_rel_error,
            checked_scalars: report.checked_scalars,
            per_group,
            per_param: report.per_param,
        });
    }
    Ok(GradcheckReport {
        task: last.index,
        step,
        max_rel_error: checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        terms: checks,
        zero_lr_unchanged,
    })
}
