//! Experiment configuration, leave-one-domain-out sweeps, result tables and
//! attention-map dumps.
//!
//! Configuration files are flat TOML: every key of [`FederationConfig`] and
//! [`CorpusSpec`] at top level, plus the sweep lists `modes`, `seeds` and
//! `targets`. Unknown keys are rejected.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionScore};
use crate::data::{generate_corpus, CorpusSpec, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::federation::{run_federation, write_round_csv, FederationConfig, Method};
use crate::model::ModelParams;

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "FDG_OUTPUT_ROOT";

/// Column layout version of `runs.csv` and `summary.csv`.
pub const RESULTS_CSV_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub federation: FederationConfig,
    #[serde(flatten)]
    pub corpus: CorpusSpec,
    /// Methods to sweep; `mode` is used when empty.
    pub modes: Vec<Method>,
    /// Seeds to sweep; `seed` is used when empty.
    pub seeds: Vec<u64>,
    /// Held-out domains to sweep; every domain when empty.
    pub targets: Vec<usize>,
}

impl ExperimentConfig {
    /// Parse flat TOML text, applying `overrides` (`key=value`, value in
    /// TOML syntax; bare words are taken as strings) on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let known = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown: Vec<&str> = table
            .keys()
            .filter(|k| !known.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.corpus.validate()?;
        // TOML integers are signed 64-bit
        let seeds = self.seeds.iter().chain([&self.federation.seed, &self.corpus.corpus_seed]);
        if let Some(&s) = seeds.into_iter().find(|&&s| s > i64::MAX as u64) {
            return Err(Error::Config(format!("seed {s} exceeds the TOML integer range (max {})", i64::MAX)));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= self.corpus.num_domains) {
            return Err(Error::Config(format!(
                "target {t} out of range for {} domains",
                self.corpus.num_domains
            )));
        }
        Ok(())
    }

    pub fn mode_list(&self) -> Vec<Method> {
        if self.modes.is_empty() {
            vec![self.federation.mode]
        } else {
            self.modes.clone()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.federation.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn target_list(&self) -> Vec<usize> {
        if self.targets.is_empty() {
            (0..self.corpus.num_domains).collect()
        } else {
            self.targets.clone()
        }
    }

    /// Federation config of one run in the sweep.
    pub fn run_config(&self, mode: Method, seed: u64, target: usize) -> FederationConfig {
        FederationConfig {
            mode,
            seed,
            target_domain: target,
            ..self.federation.clone()
        }
    }
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// `path` as given when absolute, otherwise under `$FDG_OUTPUT_ROOT` (or the
/// working directory when unset).
pub fn output_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Final accuracies of one leave-one-out run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub mode: Method,
    pub seed: u64,
    pub target: usize,
    pub target_acc: f64,
    pub domain_acc: Vec<f64>,
    pub wall_time_s: f64,
}

/// Mean and spread over seeds of one method.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: Method,
    pub targets: Vec<usize>,
    /// Per target: mean target accuracy over seeds.
    pub target_mean: Vec<f64>,
    /// Per target: sample standard deviation over seeds.
    pub target_spread: Vec<f64>,
    /// Mean over seeds of the per-seed average across targets.
    pub mean: f64,
    /// Sample standard deviation over seeds of that average.
    pub spread: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunRecord>,
}

impl ExperimentResult {
    pub fn accuracy(&self, mode: Method, seed: u64, target: usize) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.mode == mode && r.seed == seed && r.target == target)
            .map(|r| r.target_acc)
    }

    /// Seeds × targets matrix of target accuracy for `mode`.
    pub fn matrix(&self, mode: Method, seeds: &[u64], targets: &[usize]) -> Vec<Vec<Option<f64>>> {
        seeds
            .iter()
            .map(|&s| targets.iter().map(|&t| self.accuracy(mode, s, t)).collect())
            .collect()
    }

    /// One summary per mode, in first-seen order. Missing runs are skipped.
    pub fn summarize(&self) -> Vec<ModeSummary> {
        let mut modes: Vec<Method> = Vec::new();
        let mut seeds: Vec<u64> = Vec::new();
        let mut targets: Vec<usize> = Vec::new();
        for r in &self.runs {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
            if !targets.contains(&r.target) {
                targets.push(r.target);
            }
        }
        targets.sort_unstable();
        modes
            .into_iter()
            .map(|mode| {
                let m = self.matrix(mode, &seeds, &targets);
                let column = |j: usize| m.iter().filter_map(|row| row[j]).collect::<Vec<_>>();
                let per_seed: Vec<f64> = m
                    .iter()
                    .map(|row| row.iter().flatten().copied().collect::<Vec<_>>())
                    .filter(|row| !row.is_empty())
                    .map(|row| mean(&row))
                    .collect();
                ModeSummary {
                    mode,
                    targets: targets.clone(),
                    target_mean: (0..targets.len()).map(|j| mean(&column(j))).collect(),
                    target_spread: (0..targets.len()).map(|j| spread(&column(j))).collect(),
                    mean: mean(&per_seed),
                    spread: spread(&per_seed),
                }
            })
            .collect()
    }

    /// Fixed-width comparison table: one row per mode, one column per target
    /// plus the average, in percent.
    pub fn table(&self) -> String {
        let summaries = self.summarize();
        let Some(first) = summaries.first() else {
            return String::from("(no runs)\n");
        };
        let mut out = format!("{:<16}", "mode");
        for t in &first.targets {
            out.push_str(&format!("{:>16}", format!("target {t}")));
        }
        out.push_str(&format!("{:>16}\n", "avg"));
        for s in &summaries {
            out.push_str(&format!("{:<16}", s.mode.name()));
            for (m, sd) in s.target_mean.iter().zip(&s.target_spread) {
                out.push_str(&format!("{:>16}", format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd)));
            }
            out.push_str(&format!("{:>16}\n", format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.spread)));
        }
        out
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mode,target,mean_acc,spread_acc")?;
        for s in self.summarize() {
            for ((t, m), sd) in s.targets.iter().zip(&s.target_mean).zip(&s.target_spread) {
                writeln!(out, "{},{t},{m:.6},{sd:.6}", s.mode.name())?;
            }
            writeln!(out, "{},avg,{:.6},{:.6}", s.mode.name(), s.mean, s.spread)?;
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn runs_header(num_domains: usize) -> String {
    let mut h = String::from("mode,seed,target,target_acc");
    for d in 0..num_domains {
        h.push_str(&format!(",acc_domain{d}"));
    }
    h.push_str(",wall_time_s");
    h
}

fn runs_row(r: &RunRecord) -> String {
    let mut row = format!("{},{},{},{:.6}", r.mode.name(), r.seed, r.target, r.target_acc);
    for a in &r.domain_acc {
        row.push_str(&format!(",{a:.6}"));
    }
    row.push_str(&format!(",{:.3}", r.wall_time_s));
    row
}

/// Every (mode, seed, target) run of the sweep on a freshly generated corpus.
///
/// With `out_dir`, writes `config.toml`, `manifest.json`, one round CSV per
/// run under `rounds/`, `runs.csv` (appended and flushed after every run so
/// partial results survive a failure), `summary.csv` and `summary.txt`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    config.validate()?;
    let corpus = generate_corpus(&config.corpus)?;
    run_experiment_on(config, &corpus, out_dir)
}

pub fn run_experiment_on(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    config.validate()?;
    let mut runs_csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("rounds"))?;
            fs::write(dir.join("config.toml"), config.to_toml()?)?;
            let manifest = serde_json::json!({
                "results_csv_version": RESULTS_CSV_VERSION,
                "round_csv_version": crate::federation::ROUND_CSV_VERSION,
                "modes": config.mode_list().iter().map(|m| m.name()).collect::<Vec<_>>(),
                "seeds": config.seed_list(),
                "targets": config.target_list(),
                "config": config,
            });
            fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
            let mut f = BufWriter::new(File::create(dir.join("runs.csv"))?);
            writeln!(f, "{}", runs_header(corpus.num_domains()))?;
            f.flush()?;
            Some(f)
        }
        None => None,
    };
    let mut result = ExperimentResult::default();
    for mode in config.mode_list() {
        for seed in config.seed_list() {
            for target in config.target_list() {
                let run = config.run_config(mode, seed, target);
                let started = Instant::now();
                let outcome = run_federation(&run, corpus)?;
                let record = RunRecord {
                    mode,
                    seed,
                    target,
                    target_acc: outcome.final_eval.target_acc,
                    domain_acc: outcome.final_eval.domain_acc.clone(),
                    wall_time_s: started.elapsed().as_secs_f64(),
                };
                log::info!(
                    "{} seed {seed} target {target}: {:.3} ({:.1}s)",
                    mode.name(),
                    record.target_acc,
                    record.wall_time_s
                );
                if let (Some(dir), Some(f)) = (out_dir, runs_csv.as_mut()) {
                    let name = format!("{}_t{target}_s{seed}.csv", mode.name());
                    let rounds = BufWriter::new(File::create(dir.join("rounds").join(name))?);
                    write_round_csv(&outcome.logs, corpus.num_domains(), rounds)?;
                    writeln!(f, "{}", runs_row(&record))?;
                    f.flush()?;
                }
                result.runs.push(record);
            }
        }
    }
    if let Some(dir) = out_dir {
        result.write_summary_csv(BufWriter::new(File::create(dir.join("summary.csv"))?))?;
        fs::write(dir.join("summary.txt"), result.table())?;
    }
    Ok(result)
}

/// File name of the checkpoint written by [`train_run`].
pub const CHECKPOINT_FILE: &str = "checkpoint.fdg";

/// One federated run with the config's own mode, seed and target domain.
///
/// With `out_dir`, writes `manifest.json` (resolved config), `rounds.csv` and
/// the final checkpoint.
pub fn train_run(
    config: &FederationConfig,
    corpus: &SyntheticCorpus,
    out_dir: Option<&Path>,
) -> Result<crate::federation::FederationOutcome> {
    let outcome = run_federation(config, corpus)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::json!({
            "round_csv_version": crate::federation::ROUND_CSV_VERSION,
            "seed": config.seed,
            "config": config,
            "final_eval": outcome.final_eval,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        write_round_csv(&outcome.logs, corpus.num_domains(), BufWriter::new(File::create(dir.join("rounds.csv"))?))?;
        let mut ckpt = BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?);
        outcome.params.save(&mut ckpt)?;
        ckpt.flush()?;
    }
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    ModelParams::load(BufReader::new(file))
}

/// Eval-mode self-attention maps of `samples`, one per sample.
pub fn attention_maps(params: &ModelParams, corpus: &SyntheticCorpus, samples: &[usize]) -> Result<Vec<AttentionScore>> {
    if let Some(&bad) = samples.iter().find(|&&i| i >= corpus.len()) {
        return Err(Error::Config(format!("sample {bad} out of range for {} samples", corpus.len())));
    }
    let (images, _) = corpus.gather(samples);
    let (_, scores) = params.infer(&images)?;
    let scores = scores.ok_or_else(|| Error::Config("checkpoint has no attention head".into()))?;
    let hw = scores.shape()[1];
    let side = (hw as f64).sqrt().round() as usize;
    if side * side != hw {
        return Err(Error::Format(format!("attention map of {hw} positions is not square")));
    }
    Ok(attention::split_scores(&scores, side, side))
}

/// Load a checkpoint and write `sample<i>.pgm` and `sample<i>.txt` per
/// sample into `out_dir`. Returns the written maps.
pub fn dump_attention(
    checkpoint: &Path,
    corpus: &SyntheticCorpus,
    samples: &[usize],
    out_dir: &Path,
) -> Result<Vec<AttentionScore>> {
    let params = load_checkpoint(checkpoint)?;
    let maps = attention_maps(&params, corpus, samples)?;
    write_attention_maps(&maps, samples, out_dir)?;
    Ok(maps)
}

pub fn write_attention_maps(maps: &[AttentionScore], samples: &[usize], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (map, i) in maps.iter().zip(samples) {
        fs::write(out_dir.join(format!("sample{i}.pgm")), map.to_pgm())?;
        fs::write(out_dir.join(format!("sample{i}.txt")), map.to_text())?;
    }
    Ok(())
}

/// Process exit status for an error: 2 configuration, 3 numeric failure, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::IndivisibleClients { .. } | Error::InvalidHookBlock(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}
