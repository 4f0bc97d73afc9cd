use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use vpglab_core::config::LabModel;
use vpglab_core::corruption::{read_plans_csv, write_plans_csv, CorruptionPlan, CorruptionVariant};
use vpglab_core::harness::{exposure_gap, model_corpus, run_sweep, surrogate_gap, write_rows_csv, SweepGrid};
use vpglab_core::model::{Condition, Corpus};
use vpglab_core::sampler::{read_trace_csv, replay, rollout, write_trace_csv, SamplerConfig};
use vpglab_core::tokenizer::{io::write_image, synthetic};
use vpglab_core::RunConfig;

use crate::error::{CliError, CliResult};
use crate::Command;

pub fn run(config: &RunConfig, command: Command) -> CliResult<()> {
    match command {
        Command::Verify { show } => verify(config, show),
        Command::Sample { count } => sample(config, count),
        Command::Replay { trace, plans } => replay_trace(config, &trace, plans.as_deref()),
        Command::Sweep => sweep(config, &config.sweep, "sweep"),
        Command::Ablate => {
            let grid = SweepGrid {
                fractions: vec![config.guidance.corruption_fraction],
                variants: CorruptionVariant::ALL.to_vec(),
                ..config.sweep.clone()
            };
            sweep(config, &grid, "ablate")
        }
        Command::Roundtrip { count, image_seed } => roundtrip(config, count, image_seed),
        Command::Corpus { size, corpus_seed } => corpus(config, size, corpus_seed),
        Command::Fit => fit(config),
        Command::Report { plans, rollouts } => report(config, plans, rollouts),
        Command::Config { write } => {
            let text = config.to_json() + "\n";
            match write {
                Some(path) => fs::write(&path, text).map_err(|e| CliError::io(path, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn output_dir(config: &RunConfig, sub: &str) -> CliResult<PathBuf> {
    let dir = config.output_dir.join(sub);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn classes(model: &LabModel) -> usize {
    model.predictor().classes()
}

fn verify(config: &RunConfig, show: usize) -> CliResult<()> {
    let outcome = config.run_verify()?;
    let dir = output_dir(config, "verify")?;
    let path = dir.join("verify.csv");
    outcome.write_csv(create(&path)?)?;
    println!(
        "verify: {} models, {} checks, max KL {:.3e}, tolerance {:.1e}, {:.0} ms -> {}",
        outcome.models,
        outcome.rows.len(),
        outcome.max_kl,
        outcome.tolerance,
        outcome.runtime_ms,
        path.display()
    );
    if outcome.passed() {
        println!("verify: PASS");
        return Ok(());
    }
    let failures: Vec<_> = outcome.failures().collect();
    for row in failures.iter().take(show) {
        println!(
            "  FAIL model={} identity={} condition={} scale={} prefix=[{}] site={} gamma={} lambda={} kl={:.3e} max_abs_diff={:.3e}",
            row.model,
            row.identity,
            row.condition,
            row.scale,
            row.prefix,
            row.site,
            row.gamma,
            row.lambda,
            row.kl,
            row.max_abs_diff
        );
    }
    Err(CliError::Identity(format!(
        "{} of {} checks exceed KL tolerance {:e}",
        failures.len(),
        outcome.rows.len(),
        outcome.tolerance
    )))
}

fn sample(config: &RunConfig, count: usize) -> CliResult<()> {
    let model = config.build_model()?;
    let tokenizer = config.tokenizer()?;
    let dir = output_dir(config, "samples")?;
    let condition = Condition::Class(config.condition);
    for i in 0..count {
        let sampler = SamplerConfig {
            seed: config.sampler.seed.wrapping_add(i as u64),
            ..config.sampler.clone()
        };
        let trace = rollout(model.predictor(), condition, &config.guidance, &sampler, &tokenizer)?;
        let stem = dir.join(format!("sample_{i:03}"));
        let trace_path = stem.with_extension("trace.csv");
        write_trace_csv(create(&trace_path)?, &trace, true)?;
        let plans = trace.plans();
        if !plans.is_empty() {
            write_plans_csv(create(&stem.with_extension("plans.csv"))?, &plans)?;
        }
        let image = write_image(&trace.image, &stem)?;
        let tokens: Vec<String> = trace
            .maps()
            .iter()
            .map(|m| m.ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" "))
            .collect();
        println!(
            "sample {i} seed={} condition={} evaluations={} tokens=[{}] trace={} image={}",
            sampler.seed,
            config.condition,
            trace.evaluations(),
            tokens.join(" | "),
            trace_path.display(),
            image.display()
        );
    }
    Ok(())
}

fn replay_trace(config: &RunConfig, trace: &Path, plans: Option<&Path>) -> CliResult<()> {
    let model = config.build_model()?;
    let recorded = read_trace_csv(open(trace)?, &config.schedule)?;
    let mut per_step: Vec<Option<CorruptionPlan>> = vec![None; recorded.maps.len()];
    if let Some(path) = plans {
        for plan in read_plans_csv(open(path)?, &config.schedule)? {
            let slot = per_step
                .get_mut(plan.target_scale)
                .ok_or_else(|| CliError::Replay(format!("plan for scale {} beyond the trace", plan.target_scale)))?;
            *slot = Some(plan);
        }
    }
    let logits = replay(
        model.predictor(),
        Condition::Class(config.condition),
        &config.guidance,
        &recorded.maps,
        &per_step,
    )?;
    for (k, (a, b)) in logits.iter().zip(&recorded.logits).enumerate() {
        let same = a.data.len() == b.data.len() && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(CliError::Replay(format!("logits differ at scale {k}")));
        }
    }
    println!("replay: {} scales reproduced bit for bit", logits.len());
    Ok(())
}

fn sweep(config: &RunConfig, grid: &SweepGrid, name: &str) -> CliResult<()> {
    let model = config.build_model()?;
    let tokenizer = config.tokenizer()?;
    let experiment = config.experiment(&tokenizer, classes(&model))?;
    let result = run_sweep(model.predictor(), Some(&tokenizer), grid, &experiment)?;
    let dir = output_dir(config, name)?;
    let path = dir.join(format!("{name}_{}.csv", result.grid_hash));
    write_rows_csv(create(&path)?, &result.rows)?;
    let mut plots = Vec::new();
    for (file, svg) in result.plots() {
        let plot = dir.join(format!("{name}_{file}"));
        fs::write(&plot, svg).map_err(|e| CliError::io(&plot, e))?;
        plots.push(plot.display().to_string());
    }
    println!(
        "{name}: {} rows ({} failed), grid {} -> {} {}",
        result.rows.len(),
        result.failed_rows(),
        result.grid_hash,
        path.display(),
        plots.join(" ")
    );
    if result.all_failed() {
        return Err(CliError::SweepFailed(result.rows[0].error.clone()));
    }
    Ok(())
}

fn roundtrip(config: &RunConfig, count: usize, image_seed: u64) -> CliResult<()> {
    let tokenizer = config.tokenizer()?;
    let classes = config.classes().unwrap_or(1);
    let (h, w) = config.schedule.finest();
    let dir = output_dir(config, "roundtrip")?;
    let path = dir.join("roundtrip.csv");
    let mut out = create(&path)?;
    let header: Vec<String> = (0..config.schedule.len()).map(|k| format!("residual_{k}")).collect();
    writeln!(out, "image,class,input_norm,{},reconstruction_error", header.join(","))
        .map_err(|e| CliError::io(&path, e))?;
    let mut worst = 0.0f64;
    for i in 0..count {
        let class = (i % classes) as u32;
        let mut rng = vpglab_core::seed::derived_rng(image_seed, &[i as u64]);
        let image = synthetic::bump_image(h, w, config.latent_dim, class, classes, &mut rng);
        let encoding = tokenizer.encode(&image)?;
        let decoded = tokenizer.decode_maps(&encoding.maps)?;
        let error: f64 = image.0.data.iter().zip(&decoded.0.data).map(|(a, b)| (a - b).powi(2)).sum();
        worst = worst.max(error);
        let norms: Vec<String> = encoding.residual_norms.iter().map(|n| n.to_string()).collect();
        writeln!(out, "{i},{class},{},{},{error}", image.0.squared_norm(), norms.join(","))
            .map_err(|e| CliError::io(&path, e))?;
        write_image(&image, &dir.join(format!("input_{i:03}")))?;
        write_image(&decoded, &dir.join(format!("decoded_{i:03}")))?;
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;
    println!("roundtrip: {count} images, worst squared reconstruction error {worst:.4e} -> {}", path.display());
    Ok(())
}

fn corpus(config: &RunConfig, size: usize, seed: u64) -> CliResult<()> {
    let tokenizer = config.tokenizer()?;
    let classes = config
        .classes()
        .ok_or_else(|| CliError::Config("corpus needs model.classes".into()))?;
    let corpus = Corpus::synthetic(&tokenizer, classes, size, seed)?;
    let dir = output_dir(config, "corpus")?;
    let path = dir.join("corpus.csv");
    corpus.write_csv(create(&path)?)?;
    println!("corpus: {} sequences -> {}", corpus.len(), path.display());
    Ok(())
}

fn fit(config: &RunConfig) -> CliResult<()> {
    let model = config.build_model()?;
    let dir = output_dir(config, "model")?;
    let path = dir.join("model.json");
    fs::write(&path, model.to_json()?).map_err(|e| CliError::io(&path, e))?;
    let kind = match &model {
        LabModel::Tabular(m) => format!("tabular model, {} rows", m.num_rows()),
        LabModel::Count(m) => format!("count model, {} rows", m.num_rows()),
    };
    println!("fit: {kind} -> {}", path.display());
    Ok(())
}

fn report(config: &RunConfig, plans: usize, rollouts: usize) -> CliResult<()> {
    let model = config.build_model()?;
    let p = model.predictor();
    let condition = Condition::Class(config.condition);
    let dir = output_dir(config, "report")?;
    let data = match &model {
        LabModel::Count(m) => {
            let seed = match &config.model {
                vpglab_core::config::ModelSpec::Count { corpus_seed, .. } => *corpus_seed,
                _ => 0,
            };
            Corpus::synthetic(m.tokenizer(), p.classes(), 256, seed)?
        }
        LabModel::Tabular(_) => model_corpus(p, 256, config.sampler.seed)?,
    };

    let path = dir.join("exposure.csv");
    let rows = exposure_gap(p, &data, &config.guidance, &config.sampler, rollouts)?;
    let mut out = csv::Writer::from_writer(create(&path)?);
    for row in &rows {
        out.serialize(row).map_err(vpglab_core::Error::from)?;
        println!(
            "exposure scale={} delta_nll={:+.4} (se {:.4}) entropy rollout={:.4} data={:.4}",
            row.scale, row.delta, row.std_error, row.rollout_entropy, row.data_entropy
        );
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;
    println!("report: exposure gap -> {}", path.display());

    if !p.supports_corruption() {
        println!("report: surrogate gap skipped; the model does not take corrupted prefixes");
        return Ok(());
    }
    let k = config.schedule.len() - 1;
    let item = data
        .items
        .iter()
        .find(|item| item.condition == config.condition)
        .ok_or_else(|| CliError::Config(format!("no data sequence of class {}", config.condition)))?;
    let rows = surrogate_gap(
        p,
        condition,
        &item.maps[..k],
        &CorruptionVariant::ALL,
        &config.sweep.fractions,
        plans,
        config.sweep.base_seed,
    )?;
    let path = dir.join("surrogate.csv");
    let mut out = csv::Writer::from_writer(create(&path)?);
    for row in &rows {
        out.serialize(row).map_err(vpglab_core::Error::from)?;
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;
    println!("report: surrogate gap at scale {k} ({} rows) -> {}", rows.len(), path.display());
    Ok(())
}
