//! Subcommands. Every command reads an optional config file, applies
//! flag overrides (flags win), echoes the effective config into `--out`,
//! and is deterministic given that config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evsnn_core::descriptor::{DescriptorSet, Model};
use evsnn_core::energy::{count_ops, energy_from_counts, measure_model, OpCountReport, OpMode};
use evsnn_core::eval::{match_descriptors, metric_report, recall_at_n, sweep_thresholds, RetrievalResult};
use evsnn_core::event::{synth_dataset, EventVolume, GeoPose};
use evsnn_core::repr::{build_mcs_tensor, build_ts_map, sample_tss_tensor};
use evsnn_core::rng::{derive_key, label};
use evsnn_core::training::{train, volume_seed, StepRecord, TrainData};

use crate::checkpoint::{load_model, save_model};
use crate::config::{EnergyMode, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::{write_dataset, LoadedSequence, Manifest};
use crate::report;
use crate::spk;

#[derive(Debug, Parser)]
#[command(name = "evsnn", version, about = "Spiking place recognition for event cameras")]
pub struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-traverse dataset.
    Synth(SynthArgs),
    /// Slice event files into volumes and dump both spike tensors per volume.
    Convert(ConvertArgs),
    /// Train a descriptor network with triplet loss.
    Train(TrainArgs),
    /// Retrieve queries against a database and report Recall@N, PR and F1.
    Eval(EvalArgs),
    /// Count synaptic operations and estimate energy.
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra overrides, `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub places: Option<usize>,
    #[arg(long)]
    pub traverses: Option<usize>,
    #[arg(long)]
    pub events_per_place: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only this sequence (default: all).
    #[arg(long)]
    pub sequence: Option<String>,
    /// Take the timestamp encoder from a trained model instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many gradient steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Correctness radius in meters.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Also report every radius of `eval.phi_sweep`.
    #[arg(long)]
    pub phi_sweep: bool,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Write energy.csv and energy.txt here as well as printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model to analyse; without one the architecture comes from the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input batch: the database sequence of this dataset (needed by snn-measured).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["ann", "snn-static", "snn-measured"])]
    pub mode: Option<String>,
    /// Assumed firing rate for snn-static.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Events per volume, so snn-static can also count the timestamp encoder.
    #[arg(long)]
    pub events: Option<usize>,
    /// Inject a MAC count instead of analysing a network.
    #[arg(long)]
    pub mac: Option<f64>,
    /// Inject an AC count instead of analysing a network.
    #[arg(long)]
    pub ac: Option<f64>,
    /// Print the reference comparison rows (ResNet / SEW-ResNet energy arithmetic).
    #[arg(long)]
    pub table5: bool,
}

/// Run a parsed command line; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, threads),
        Command::Convert(a) => cmd_convert(&a, threads),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Eval(a) => cmd_eval(&a, threads),
        Command::Energy(a) => cmd_energy(&a, threads),
    }
}

fn load_config(common: &Common, threads: Option<usize>, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(t) = threads {
        c.threads = t;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        c.set(k.trim(), v)?;
    }
    c.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

pub fn cmd_synth(a: &SynthArgs, threads: Option<usize>) -> Result<()> {
    let c = load_config(
        &a.common,
        threads,
        &[
            ("synth.places", opt(a.places)),
            ("synth.traverses", opt(a.traverses)),
            ("synth.events_per_place", opt(a.events_per_place)),
            ("synth.noise_rate", opt(a.noise_rate)),
        ],
    )?;
    let ds = synth_dataset(&c.synth_config())?;
    write_dataset(&a.out, &ds)?;
    c.echo(&a.out)?;
    let events: usize = ds.traverses.iter().map(|t| t.stream.len()).sum();
    println!("{} traverses, {} places, {} events -> {}", ds.traverses.len(), c.synth.n_places, events, a.out.display());
    Ok(())
}

fn sequences(m: &Manifest, only: Option<&str>) -> Result<Vec<LoadedSequence>> {
    match only {
        Some(name) => Ok(vec![m.load_sequence(m.sequence(name)?)?]),
        None => m.sequences.iter().map(|s| m.load_sequence(s)).collect(),
    }
}

fn fresh_or_loaded(c: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => load_model(p),
        None => Ok(Model::new(c.model, c.seed)?),
    }
}

pub fn cmd_convert(a: &ConvertArgs, threads: Option<usize>) -> Result<()> {
    let c = load_config(&a.common, threads, &[])?;
    let manifest = Manifest::load(&a.manifest)?;
    let model = fresh_or_loaded(&c, a.checkpoint.as_deref())?;
    let seqs = sequences(&manifest, a.sequence.as_deref())?;
    create_dir(&a.out)?;
    c.echo(&a.out)?;
    let mut total = 0;
    for (si, seq) in seqs.iter().enumerate() {
        for (i, v) in seq.volumes.iter().enumerate() {
            let mcs = build_mcs_tensor(v, &model.smlp, &model.store)?;
            let map = build_ts_map(v, model.config.eta_s)?;
            let seed = derive_key(c.seed, &[label("convert.tss"), si as u64, i as u64]);
            let tss = sample_tss_tensor(&map, model.config.steps, seed)?;
            spk::save(&a.out.join(format!("{}_{i:05}_mcs.spk", seq.name)), &mcs.tensor)?;
            spk::save(&a.out.join(format!("{}_{i:05}_tss.spk", seq.name)), &tss)?;
        }
        if seq.reordered > 0 {
            eprintln!("{}: {} events were out of order and have been sorted", seq.name, seq.reordered);
        }
        total += seq.volumes.len();
    }
    println!("{total} volumes");
    Ok(())
}

fn refs(vs: &[EventVolume]) -> Vec<&EventVolume> {
    vs.iter().collect()
}

/// Descriptors for `volumes`, split over up to `threads` workers. Eval-mode
/// inference is per-sample, so the split does not change the result.
pub fn describe(model: &Model, volumes: &[&EventVolume], seeds: &[u64], threads: usize) -> Result<Vec<DescriptorSet>> {
    let threads = threads.clamp(1, volumes.len().max(1));
    if threads == 1 {
        return Ok(model.describe_volumes(volumes, seeds)?);
    }
    let chunk = volumes.len().div_ceil(threads);
    let parts: Vec<Result<Vec<DescriptorSet>>> = std::thread::scope(|s| {
        let handles: Vec<_> = volumes
            .chunks(chunk)
            .zip(seeds.chunks(chunk))
            .map(|(v, sd)| s.spawn(move || model.describe_volumes(v, sd).map_err(Error::from)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("descriptor worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(volumes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Rank every query against the database with fixed per-volume sampling seeds.
pub fn retrieve(model: &Model, queries: &[&EventVolume], db: &[&EventVolume], seed: u64, threads: usize) -> Result<RetrievalResult> {
    let qs: Vec<u64> = (0..queries.len()).map(|i| volume_seed(seed, "eval.query", i)).collect();
    let ds: Vec<u64> = (0..db.len()).map(|i| volume_seed(seed, "eval.db", i)).collect();
    let qd = describe(model, queries, &qs, threads)?;
    let dd = describe(model, db, &ds, threads)?;
    let poses = |vs: &[&EventVolume]| -> Vec<Option<GeoPose>> { vs.iter().map(|v| v.pose).collect() };
    let qv: Vec<Vec<f64>> = qd.into_iter().map(|d| d.descriptor).collect();
    let dv: Vec<Vec<f64>> = dd.into_iter().map(|d| d.descriptor).collect();
    Ok(match_descriptors(&qv, &poses(queries), &dv, &poses(db))?)
}

fn load_pair(c: &RunConfig, manifest: &Path) -> Result<(LoadedSequence, LoadedSequence)> {
    let m = Manifest::load(manifest)?;
    let q = m.load_sequence(m.sequence(&c.query_sequence)?)?;
    let d = m.load_sequence(m.sequence(&c.database_sequence)?)?;
    Ok((q, d))
}

pub const FINAL_CHECKPOINT: &str = "model.sew";
pub const BEST_CHECKPOINT: &str = "best.sew";
pub const LOSS_TRACE: &str = "loss.csv";

pub fn cmd_train(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut c = load_config(&a.common, threads, &[("train.epochs", opt(a.epochs))])?;
    if let Some(s) = a.steps {
        c.train.max_steps = Some(s);
        if a.epochs.is_none() {
            // Every epoch has at least one step, so this never stops early.
            c.train.epochs = c.train.epochs.max(s);
        }
    }
    let (q, d) = load_pair(&c, &a.manifest)?;
    create_dir(&a.out)?;
    c.echo(&a.out)?;
    let mut model = Model::new(c.model, c.seed)?;
    let data = TrainData { queries: refs(&q.volumes), database: refs(&d.volumes) };
    let mut best = f64::NEG_INFINITY;
    let mut failure: Option<Error> = None;
    let every = c.checkpoint_every;
    let mut on_step = |m: &Model, r: &StepRecord| -> evsnn_core::Result<()> {
        if every == 0 || (r.step + 1) % every != 0 {
            return Ok(());
        }
        let outcome = retrieve(m, &data.queries, &data.database, c.seed, c.threads).and_then(|res| {
            save_model(&a.out.join(format!("step{:06}.sew", r.step + 1)), m)?;
            let r1 = recall_at_n(&res, 1, c.phi);
            if r1 > best {
                best = r1;
                save_model(&a.out.join(BEST_CHECKPOINT), m)?;
            }
            Ok(())
        });
        outcome.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            evsnn_core::Error::InvalidInput(msg)
        })
    };
    let summary = train(&mut model, &data, &c.train_config(), &mut on_step);
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = summary?;
    write(&a.out.join(LOSS_TRACE), &report::loss_trace_csv(&summary.trace))?;
    save_model(&a.out.join(FINAL_CHECKPOINT), &model)?;
    let last = summary.trace.last().map_or(f64::NAN, |r| r.loss);
    println!("{} steps, final loss {last:.6}, {} cache refreshes", summary.trace.len(), summary.cache_refreshes);
    Ok(())
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const PR_CSV: &str = "pr.csv";

pub fn cmd_eval(a: &EvalArgs, threads: Option<usize>) -> Result<()> {
    let c = load_config(&a.common, threads, &[("eval.phi", opt(a.phi))])?;
    let model = load_model(&a.checkpoint)?;
    let (q, d) = load_pair(&c, &a.manifest)?;
    create_dir(&a.out)?;
    c.echo(&a.out)?;
    let res = retrieve(&model, &refs(&q.volumes), &refs(&d.volumes), c.seed, c.threads)?;
    let main = metric_report(&res, c.phi);
    let mut reports = vec![main.clone()];
    if a.phi_sweep {
        reports = sweep_thresholds(&res, &c.phi_sweep)?;
        if !reports.iter().any(|r| r.phi == c.phi) {
            reports.push(main.clone());
        }
    }
    write(&a.out.join(METRICS_CSV), &report::metrics_csv(&reports))?;
    let table = report::metrics_table(&reports);
    write(&a.out.join(METRICS_TXT), &table)?;
    write(&a.out.join(PR_CSV), &report::pr_csv(&main.pr))?;
    print!("{table}");
    Ok(())
}

/// The four energy rows of the reference comparison: (name, T, O_AC, O_MAC).
pub const REFERENCE_ROWS: [(&str, usize, f64, f64); 4] = [
    ("ResNet18", 1, 0.0, 4.38e9),
    ("Sew-ResNet18", 4, 0.47e9, 1.03e9),
    ("Sew-ResNet34", 4, 0.87e9, 1.03e9),
    ("ResNet34", 1, 0.0, 8.61e9),
];

fn counts_report(mode: OpMode, steps: usize, ac: f64, mac: f64) -> OpCountReport {
    OpCountReport { mode, steps, layers: Vec::new(), ac, mac, params: 0, energy_mj: energy_from_counts(ac, mac) }
}

pub fn cmd_energy(a: &EnergyArgs, threads: Option<usize>) -> Result<()> {
    let c = load_config(&a.common, threads, &[("energy.mode", a.mode.clone()), ("energy.rate", opt(a.rate))])?;
    if a.table5 {
        println!("{:<14} {:>3} {:>8} {:>9} {:>11}", "model", "T", "O_AC(G)", "O_MAC(G)", "Energy(mJ)");
        for (name, t, ac, mac) in REFERENCE_ROWS {
            println!("{name:<14} {t:>3} {:>8.2} {:>9.2} {:>11.3}", ac / 1e9, mac / 1e9, energy_from_counts(ac, mac));
        }
        return Ok(());
    }
    let mode = c.energy_mode.op_mode(c.energy_rate);
    let rep = if a.mac.is_some() || a.ac.is_some() {
        let (ac, mac) = (a.ac.unwrap_or(0.0), a.mac.unwrap_or(0.0));
        if ac < 0.0 || mac < 0.0 {
            return Err(Error::Config("operation counts must be non-negative".into()));
        }
        let steps = if mode == OpMode::Ann { 1 } else { c.model.steps };
        counts_report(mode, steps, ac, mac)
    } else {
        let model = fresh_or_loaded(&c, a.checkpoint.as_deref())?;
        let batch = match &a.manifest {
            Some(p) => {
                let m = Manifest::load(p)?;
                Some((m.resolution, m.load_sequence(m.sequence(&c.database_sequence)?)?))
            }
            None => None,
        };
        let res = batch.as_ref().map_or(c.synth.resolution, |b| b.0);
        let (h, w) = (res.height as usize, res.width as usize);
        match c.energy_mode {
            EnergyMode::SnnMeasured => {
                let Some((_, seq)) = &batch else {
                    return Err(Error::Config("snn-measured needs an input batch (--manifest)".into()));
                };
                let vols: Vec<&EventVolume> = seq.volumes.iter().filter(|v| !v.is_empty()).take(c.energy_volumes).collect();
                if vols.is_empty() {
                    return Err(Error::Config("input batch has no non-empty volumes".into()));
                }
                let seeds: Vec<u64> = (0..vols.len()).map(|i| volume_seed(c.seed, "energy", i)).collect();
                let (measured, rates) = measure_model(&model, &vols, &seeds)?;
                let events = vols.iter().map(|v| v.events().len()).sum::<usize>() / vols.len();
                let rep = count_ops(&model.network_graph(h, w, Some(events)), mode, Some(&measured))?;
                if let Some(dir) = &a.out {
                    create_dir(dir)?;
                    let mut s = String::from("layer,rate\n");
                    for (n, r) in rates {
                        s.push_str(&format!("{n},{r:?}\n"));
                    }
                    write(&dir.join("spike_rates.csv"), &s)?;
                }
                rep
            }
            _ => count_ops(&model.network_graph(h, w, a.events), mode, None)?,
        }
    };
    let table = report::energy_table(&rep);
    print!("{table}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        c.echo(dir)?;
        write(&dir.join("energy.csv"), &report::energy_csv(&rep))?;
        write(&dir.join("energy.txt"), &table)?;
    }
    Ok(())
}
