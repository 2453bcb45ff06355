//! `nspvi`: generate synthetic data, train by MCEM, benchmark the three
//! posterior samplers under a shared time budget, and plot the sweeps.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nspvi::bench::{bench_sweep, BenchRecord, BenchSetup};
use nspvi::data::{read_dataset, write_dataset, Checkpoint};
use nspvi::model::{EventSeq, ModelParams, OBS_BACKGROUND};
use nspvi::predict::{predict_sequence, score, PredictionRecord, Sampler, SamplerKind};
use nspvi::rng::{tag, RngStream};
use nspvi::simulate::generate_dnsp;
use nspvi::train::{init_model, init_unsp, init_usap, mcem_run, LogRecord};
use nspvi::WeibullKernel;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "nspvi", about = "deep Neyman-Scott process toolkit", version)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample train/validation/test splits from the generative preset.
    Generate,
    /// Run MCEM; writes checkpoint.json and training_log.csv.
    Train,
    /// Predict every next event of the test set with one sampler.
    Predict {
        #[arg(long, value_enum)]
        sampler: SamplerArg,
        /// Posterior draws per prediction.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// MCMC burn-in cycles (mcmc sampler only).
        #[arg(long)]
        burn_in: Option<usize>,
        /// MCMC cycles between draws (mcmc sampler only).
        #[arg(long)]
        thin: Option<usize>,
    },
    /// Sweep all samplers over the configured sample counts; writes
    /// bench.csv, predictions.csv, and the two SVG charts.
    Bench {
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
    },
    /// Regenerate the SVG charts from an existing bench.csv.
    Plot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Mcmc,
    Unsp,
    Usap,
}

impl From<SamplerArg> for SamplerKind {
    fn from(a: SamplerArg) -> Self {
        match a {
            SamplerArg::Mcmc => SamplerKind::Mcmc,
            SamplerArg::Unsp => SamplerKind::Unsp,
            SamplerArg::Usap => SamplerKind::Usap,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("NSPVI_THREADS") {
        let n: usize = v.parse().context("NSPVI_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("rayon pool already initialized")?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;

    match cli.cmd {
        Cmd::Generate => generate(&cfg, &cli.out),
        Cmd::Train => train(&cfg, &cli.out),
        Cmd::Predict { sampler, samples, burn_in, thin } => predict(
            &cfg,
            &cli.out,
            sampler.into(),
            samples,
            burn_in.unwrap_or(cfg.train.burn_in),
            thin.unwrap_or(cfg.train.thin),
        ),
        Cmd::Bench { burn_in, thin } => bench(
            &cfg,
            &cli.out,
            burn_in.unwrap_or(cfg.train.burn_in),
            thin.unwrap_or(cfg.train.thin),
        ),
        Cmd::Plot => plot_from_csv(&cli.out),
    }
}

/// The generative preset: every downward edge shares one kernel, the top
/// layer runs at a constant rate. The virtual tables only matter for
/// inference; they get neutral placeholders here.
fn preset_model(cfg: &RunConfig) -> Result<ModelParams> {
    let sizes = cfg.layer_sizes();
    let l = sizes.len() - 1;
    let kern = WeibullKernel::new(cfg.gen_kernel.p, cfg.gen_kernel.k, cfg.gen_kernel.lam)?;
    let model = ModelParams {
        layer_sizes: sizes.clone(),
        down_kernels: (0..l)
            .map(|ell| vec![vec![kern; sizes[ell]]; sizes[ell + 1]])
            .collect(),
        top_rates: vec![cfg.top_rate; sizes[l]],
        vpp_kernels: (0..l)
            .map(|ell| vec![vec![kern; sizes[ell + 1]]; sizes[ell]])
            .collect(),
        vpp_base: (0..l).map(|ell| vec![0.1; sizes[ell + 1]]).collect(),
        obs_background: OBS_BACKGROUND,
    };
    model.validate()?;
    Ok(model)
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = preset_model(cfg)?;
    let root = RngStream::root(cfg.seed).split(tag::GENERATE);
    let splits = [
        ("train.jsonl", 0u64, cfg.counts.train),
        ("validation.jsonl", 1, cfg.counts.validation),
        ("test.jsonl", 2, cfg.counts.test),
    ];
    for (name, tag, count) in splits {
        let mut seqs = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = root.split2(tag, i as u64);
            let (seq, _) = generate_dnsp(&model, cfg.window, &mut rng)?;
            seqs.push(seq);
        }
        let path = out.join(name);
        write_dataset(&path, &seqs)?;
        let events: usize = seqs.iter().map(|s| s.events.len()).sum();
        println!(
            "{}: {count} sequences, {:.2} events/sequence",
            path.display(),
            events as f64 / count.max(1) as f64
        );
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let n_types = cfg.n_types;
    let train = read_dataset(&out.join("train.jsonl"), n_types)?;
    let val = read_dataset(&out.join("validation.jsonl"), n_types)?;
    if train.is_empty() {
        bail!("empty training set; run `nspvi generate` first");
    }
    let window = train[0].window;
    let mean_count =
        train.iter().map(|s| s.events.len()).sum::<usize>() as f64 / train.len() as f64;

    let mut rng = RngStream::root(cfg.seed).split(tag::INIT);
    let model = init_model(&cfg.layer_sizes(), window, mean_count, &mut rng);
    let unsp = init_unsp(&model);
    let usap = init_usap(cfg.usap_config(), window, mean_count / window, &mut rng);

    let started = Instant::now();
    let result = mcem_run(model, unsp, usap, &train, &val, &cfg.train_config(cfg.seed))?;
    println!(
        "trained {} iterations in {:.1}s{}",
        result.log.len(),
        started.elapsed().as_secs_f64(),
        if result.stopped_early { " (early stop)" } else { "" }
    );

    write_training_log(&out.join("training_log.csv"), &result.log)?;
    let ckpt = Checkpoint::new(result.model, result.unsp, result.usap, result.log);
    ckpt.save(&out.join("checkpoint.json"))?;
    println!("wrote {} and training_log.csv", out.join("checkpoint.json").display());
    Ok(())
}

fn write_training_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    let n_rates = log.first().map_or(0, |r| r.top_rates.len());
    let mut header = vec![
        "iter".to_string(),
        "joint_loglik".into(),
        "q_loglik_unsp".into(),
        "q_loglik_usap".into(),
    ];
    header.extend((1..=n_rates).map(|k| format!("mu_{k}")));
    header.push("wall_ms".into());
    w.write_record(&header)?;
    for rec in log {
        let mut row = vec![
            rec.iter.to_string(),
            rec.joint_loglik.to_string(),
            rec.q_loglik_unsp.to_string(),
            rec.q_loglik_usap.to_string(),
        ];
        row.extend(rec.top_rates.iter().map(f64::to_string));
        row.push(rec.wall_ms.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_trained(cfg: &RunConfig, out: &Path) -> Result<(Checkpoint, Vec<EventSeq>)> {
    let ckpt = Checkpoint::load(&out.join("checkpoint.json"))?;
    let test = read_dataset(&out.join("test.jsonl"), cfg.n_types)?;
    if test.is_empty() {
        bail!("empty test set; run `nspvi generate` first");
    }
    Ok((ckpt, test))
}

fn predict(
    cfg: &RunConfig,
    out: &Path,
    kind: SamplerKind,
    samples: usize,
    burn_in: usize,
    thin: usize,
) -> Result<()> {
    let (ckpt, test) = load_trained(cfg, out)?;
    let root = RngStream::root(cfg.seed);
    let sampler = match kind {
        SamplerKind::Mcmc => Sampler::Mcmc { burn_in, thin },
        SamplerKind::Unsp => Sampler::Unsp(&ckpt.unsp),
        SamplerKind::Usap => Sampler::Usap(&ckpt.usap),
    };
    use rayon::prelude::*;
    let records: Vec<Vec<PredictionRecord>> = test
        .par_iter()
        .enumerate()
        .map(|(seq_id, seq)| predict_sequence(&sampler, &ckpt.model, &root, seq_id, seq, samples))
        .collect::<nspvi::Result<_>>()?;
    let records: Vec<PredictionRecord> = records.into_iter().flatten().collect();
    write_predictions(&out.join("predictions.csv"), &records)?;
    let (rmse, accuracy) = score(&records)?;
    let failures = records.iter().filter(|r| r.failed).count();
    println!(
        "{kind} S={samples}: {} predictions, rmse {rmse:.4}, accuracy {accuracy:.4}, {failures} failures",
        records.len()
    );
    Ok(())
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "seq_id", "n", "t_true", "k_true", "t_hat", "k_hat", "sampler", "s", "wall_ms", "failed",
    ])?;
    for r in records {
        w.write_record([
            r.seq_id.to_string(),
            r.n.to_string(),
            r.t_true.to_string(),
            (r.k_true + 1).to_string(),
            r.t_hat.to_string(),
            (r.k_hat + 1).to_string(),
            r.sampler.to_string(),
            r.s.to_string(),
            r.wall_ms.to_string(),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path, burn_in: usize, thin: usize) -> Result<()> {
    let (ckpt, test) = load_trained(cfg, out)?;
    let setup = BenchSetup {
        model: &ckpt.model,
        unsp: &ckpt.unsp,
        usap: &ckpt.usap,
        burn_in,
        thin,
        seed: cfg.seed,
    };
    let (cells, records) = bench_sweep(&setup, &cfg.sweep, &test)?;
    write_bench(&out.join("bench.csv"), &cells)?;
    write_predictions(&out.join("predictions.csv"), &records)?;
    for c in &cells {
        println!(
            "{} S={}: wall {:.2}s, rmse {:.4}, accuracy {:.4}, failures {}",
            c.sampler, c.s, c.wall_s, c.rmse, c.accuracy, c.failures
        );
    }
    // charts come from the CSV so `plot` reproduces them byte for byte
    plot_from_csv(out)
}

fn write_bench(path: &Path, cells: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["sampler", "s", "wall_s", "rmse", "accuracy", "failures", "predictions"])?;
    for c in cells {
        w.write_record([
            c.sampler.to_string(),
            c.s.to_string(),
            c.wall_s.to_string(),
            c.rmse.to_string(),
            c.accuracy.to_string(),
            c.failures.to_string(),
            c.predictions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn plot_from_csv(out: &Path) -> Result<()> {
    let path = out.join("bench.csv");
    let mut rdr = csv::Reader::from_path(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    // (sampler label, wall_s, rmse, accuracy)
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push((
            rec[0].to_string(),
            rec[2].parse().context("wall_s")?,
            rec[3].parse().context("rmse")?,
            rec[4].parse().context("accuracy")?,
        ));
    }
    let mut labels: Vec<String> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.0) {
            labels.push(r.0.clone());
        }
    }
    let series = |pick: fn(&(String, f64, f64, f64)) -> f64| -> Vec<plot::Series> {
        labels
            .iter()
            .enumerate()
            .map(|(i, label)| plot::Series {
                label: label.clone(),
                color: plot::COLORS[i % plot::COLORS.len()],
                points: rows
                    .iter()
                    .filter(|r| &r.0 == label)
                    .map(|r| (r.1, pick(r)))
                    .collect(),
            })
            .collect()
    };
    let rmse = plot::line_chart(
        "Next-event RMSE vs sampling time",
        "RMSE",
        &series(|r| r.2),
    );
    let acc = plot::line_chart(
        "Next-event type accuracy vs sampling time",
        "accuracy",
        &series(|r| r.3),
    );
    std::fs::write(out.join("time_vs_rmse.svg"), rmse)?;
    std::fs::write(out.join("time_vs_accuracy.svg"), acc)?;
    println!("wrote time_vs_rmse.svg and time_vs_accuracy.svg");
    Ok(())
}
