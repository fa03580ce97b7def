//! Subcommand implementations and output files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use pfpt_core::aggregation::{server_aggregate, AggregationReport, NetInit};
use pfpt_core::format::{params_to_text, parse_prompts_csv, pool_to_csv, to_json_line};
use pfpt_core::partition::{dominant_subset_size, partition as split, profiles_csv, summarize, PartitionSpec, Scheme};
use pfpt_core::runner::{run_experiment, ExperimentConfig};
use pfpt_core::seed::{derive_seed, stream};
use pfpt_core::{LocalPromptSet, PfptError};
use serde::Serialize;

use crate::config::{apply, ConfigDoc, OutputSettings};
use crate::Common;

/// A failed command: bad input exits with 2, anything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'static str,
    started: String,
    finished: String,
    files: Vec<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Reads the config file, applies `--set` and `--seed`, and validates.
fn load(common: &Common) -> Result<(ConfigDoc, ExperimentConfig, OutputSettings), Failure> {
    let mut doc = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ConfigDoc::parse(&text, &path.display().to_string()).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ConfigDoc::default(),
    };
    for spec in &common.overrides {
        doc.set(spec).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        doc.set(&format!("run.seed={seed}")).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let (cfg, out) = apply(&doc).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((doc, cfg, out))
}

/// Collects written file names, relative to the output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_owned(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> Result<PathBuf, Failure> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.push(name.to_owned());
        Ok(p)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let p = self.path(name)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    fn stream(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        let p = self.path(name)?;
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    fn finish(mut self, command: &str, doc: &ConfigDoc, seed: u64, started: String) -> Outcome {
        self.files.push("manifest.json".into());
        let manifest = RunManifest {
            command,
            config_hash: doc.hash(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            started,
            finished: now(),
            files: self.files.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).context("encoding manifest")?;
        let p = self.dir.join("manifest.json");
        fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }
}

fn json(value: &impl Serialize) -> anyhow::Result<String> {
    Ok(to_json_line(value)?)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    round: usize,
    #[serde(flatten)]
    report: &'a AggregationReport,
}

#[derive(Serialize)]
struct TimingLine {
    round: usize,
    wall_ms: u64,
}

pub fn simulate(common: &Common) -> Outcome {
    let started = now();
    let (doc, cfg, settings) = load(common)?;
    cfg.validate().map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))?;
    let mut out = Outputs::new(&common.out)?;
    let mut metrics = out.stream("metrics.jsonl")?;
    let mut reports = out.stream("reports.jsonl")?;
    let mut timing = out.stream("timing.jsonl")?;
    let mut checkpoints: Vec<(String, String)> = Vec::new();

    let result = run_experiment(&cfg, |r| {
        let io = |e: std::io::Error| PfptError::Io(e);
        writeln!(metrics, "{}", to_json_line(r.metrics)?).map_err(io)?;
        if let Some(rep) = r.report {
            let line = ReportLine {
                round: r.metrics.round,
                report: rep,
            };
            writeln!(reports, "{}", to_json_line(&line)?).map_err(io)?;
        }
        let t = TimingLine {
            round: r.metrics.round,
            wall_ms: r.wall_ms,
        };
        writeln!(timing, "{}", to_json_line(&t)?).map_err(io)?;
        if settings.checkpoint_every > 0 && r.metrics.round % settings.checkpoint_every == 0 {
            checkpoints.push((
                format!("checkpoints/pool_round_{:05}.csv", r.metrics.round),
                pool_to_csv(r.pool),
            ));
        }
        Ok(())
    })
    .context("simulation failed")?;
    for mut w in [metrics, reports, timing] {
        w.flush().context("flushing outputs")?;
    }

    for (name, text) in &checkpoints {
        out.write(name, text)?;
    }
    out.write("pool.csv", &pool_to_csv(&result.final_pool))?;
    out.write("profiles.csv", &profiles_csv(&result.profiles))?;
    if let Some(gp) = &result.final_params {
        out.write("params.txt", &params_to_text(gp))?;
    }
    if let Some(last) = result.metrics.last() {
        println!("{}", json(last)?);
    }
    out.finish("simulate", &doc, cfg.seed, started)
}

#[derive(Serialize)]
struct PartitionReport {
    scheme: Scheme,
    classes: usize,
    clients: usize,
    rows: usize,
    /// Classes counted as dominant when measuring shares.
    top: usize,
    min_dominant_share: f64,
    max_dominant_share: f64,
    #[serde(flatten)]
    summary: pfpt_core::partition::PartitionSummary,
}

pub fn partition(common: &Common) -> Outcome {
    let started = now();
    let (doc, cfg, _) = load(common)?;
    let spec = PartitionSpec {
        seed: derive_seed(cfg.seed, &[stream::PARTITION]),
        ..cfg.partition.clone()
    };
    let bad = |e: PfptError| Failure::Usage(format!("invalid partition: {e}"));
    let (expected, profiles) = split(&spec).map_err(bad)?;
    let top = match spec.scheme {
        Scheme::Imbalance => dominant_subset_size(&spec).map_err(bad)?,
        _ => 1,
    };
    let summary = summarize(&expected, &profiles, top);
    let shares = &summary.dominant_shares;
    let report = PartitionReport {
        scheme: spec.scheme,
        classes: spec.classes,
        clients: spec.clients,
        rows: profiles.len() * spec.classes,
        top,
        min_dominant_share: shares.iter().copied().fold(f64::INFINITY, f64::min),
        max_dominant_share: shares.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        summary,
    };
    let mut out = Outputs::new(&common.out)?;
    out.write("profiles.csv", &profiles_csv(&profiles))?;
    let text = json(&report)?;
    out.write("partition_summary.json", &format!("{text}\n"))?;
    println!("{text}");
    if !report.summary.conserved {
        return Err(Failure::Runtime(anyhow::anyhow!("partition did not conserve class totals")));
    }
    out.finish("partition", &doc, cfg.seed, started)
}

pub fn aggregate(common: &Common, inputs: &[PathBuf]) -> Outcome {
    let started = now();
    let (doc, cfg, _) = load(common)?;
    cfg.aggregation
        .validate()
        .map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))?;

    let mut sets = Vec::with_capacity(inputs.len());
    for (id, path) in inputs.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        let prompts = parse_prompts_csv(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let set = LocalPromptSet::new(id, prompts).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        sets.push(set);
    }
    let d = sets[0].dim();
    if let Some((i, s)) = sets.iter().enumerate().find(|(_, s)| s.dim() != d) {
        return Err(Failure::Usage(format!(
            "dimension mismatch: {} has {} columns but {} has {d}",
            inputs[i].display(),
            s.dim(),
            inputs[0].display()
        )));
    }

    let init = NetInit::Fresh {
        hidden: cfg.hidden,
        seed: derive_seed(cfg.seed, &[stream::NETS, 0]),
    };
    let (pool, params, _, report) =
        server_aggregate(None, &sets, init, &cfg.aggregation).context("aggregation failed")?;
    let mut out = Outputs::new(&common.out)?;
    out.write("pool.csv", &pool_to_csv(&pool))?;
    out.write("params.txt", &params_to_text(&params))?;
    let text = json(&report)?;
    out.write("report.json", &format!("{text}\n"))?;
    println!(
        "pool size {} (from {} candidates), objective {:e}",
        report.pool_size_after,
        report.pool_size_before,
        report.final_objective()
    );
    out.finish("aggregate", &doc, cfg.seed, started)
}
