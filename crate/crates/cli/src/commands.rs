use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use voltrisk::experiment::{
    comparison_csv, comparison_table, deviation_histogram_csv, node_error_csv, ComparisonRow,
    ExperimentConfig, SeedPlan,
};
use voltrisk::feeder::{build_sensitivities, load_feeder, BusId, FeederModel};
use voltrisk::opf::{
    generate_dataset, generate_profiles, read_dataset, read_profiles_csv, solve_lcqp, write_dataset,
    write_profiles_csv, Dataset, OperatingCondition, ProfileConfig, SolveStatus,
};
use voltrisk::risk::RiskReport;
use voltrisk::trainer::{
    evaluate, init_params, train as run_training, EvalReport, ModelFile, TrainError, TrainLog,
    TrainSummary,
};

use crate::output::{read_json, stem_for, write_atomic, write_json, write_text, ArmFiles};
use crate::{CompareArgs, EvalArgs, ExperimentArgs, GenDataArgs, RiskArgs, SolveOpfArgs, TrainArgs};

fn feeder(path: &Path) -> Result<FeederModel> {
    load_feeder(path).with_context(|| format!("loading feeder {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn dataset(path: &Path, model: &FeederModel) -> Result<Dataset> {
    let ds = read_dataset(open(path)?).with_context(|| format!("reading dataset {}", path.display()))?;
    ensure!(
        ds.feeder_ref == model.content_hash(),
        "dataset {} was generated for a different feeder",
        path.display()
    );
    Ok(ds)
}

fn read_profiles(path: &Path, model: &FeederModel) -> Result<Vec<OperatingCondition>> {
    read_profiles_csv(model, open(path)?).with_context(|| format!("reading profiles {}", path.display()))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let out = &a.out.out;
    let profiles = match &a.profiles {
        Some(p) => read_profiles(p, &model)?,
        None => {
            let cfg = ProfileConfig {
                days: a.days,
                minutes_per_sample: a.minutes_per_sample,
                load_scale: a.load_scale,
                pv_peak: a.pv_peak,
                noise: a.noise,
                ..ProfileConfig::for_feeder(&model, a.days, SeedPlan::expand(a.seed).profiles)
            };
            let profiles = generate_profiles(&model, &cfg)?;
            write_atomic(&out.join("profiles.csv"), |w| Ok(write_profiles_csv(&model, &profiles, w)?))?;
            profiles
        }
    };
    let ds = generate_dataset(&model, &profiles, a.tol, a.train_fraction)?;
    write_atomic(&out.join("dataset.jsonl"), |w| Ok(write_dataset(&ds, w)?))?;
    println!(
        "samples {} (train {}, test {}); optimal {}, softened {}, dropped infeasible {}",
        ds.samples.len(),
        ds.train().len(),
        ds.test().len(),
        ds.count_status(SolveStatus::Optimal),
        ds.count_status(SolveStatus::Softened),
        ds.dropped
    );
    println!("wrote {}", out.join("dataset.jsonl").display());
    Ok(())
}

fn write_arm(
    files: &ArmFiles,
    summary: &TrainSummary,
    model: &ModelFile,
    log: &TrainLog,
) -> Result<()> {
    write_json(&files.model, model)?;
    write_atomic(&files.log, |w| Ok(log.write_jsonl(w)?))?;
    write_json(&files.summary, summary)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let ds = dataset(&a.data, &model)?;
    let s = build_sensitivities(&model);
    let cfg = a.flags.config();
    let name = a.name.clone().unwrap_or_else(|| {
        let base = cfg.mode.to_string();
        if cfg.selection_enabled { format!("{base}-select") } else { base }
    });
    let init = init_params(&ds, &model, &cfg)?;
    let (params, log) = match run_training(&ds, &model, &s, &init, &cfg) {
        Ok(r) => r,
        Err(TrainError::Diverged { epoch, batch_id, loss, components }) => bail!(
            "training diverged at epoch {epoch}, batch {batch_id}: loss {loss:e} \
             (mse {:e}, cvar_q {:?}, cvar_v {:?}); try a smaller --eta",
            components.mse,
            components.cvar_q,
            components.cvar_v
        ),
        Err(e) => return Err(e.into()),
    };
    let hash = model.content_hash();
    let files = ArmFiles::in_dir(&a.out.out, &stem_for(&name));
    let summary = TrainSummary {
        arm: name.clone(),
        feeder_hash: hash.clone(),
        config: cfg.clone(),
        totals: log.totals.clone(),
    };
    let file = ModelFile {
        feeder_hash: hash,
        params,
        config: cfg,
    };
    write_arm(&files, &summary, &file, &log)?;
    let skipped = log.totals.batches_drawn - log.totals.gradient_updates;
    println!(
        "{name}: {} epochs, {} batches drawn, {} updates, {} skipped, {:.3} s",
        log.totals.epochs, log.totals.batches_drawn, log.totals.gradient_updates, skipped, log.totals.wall_time
    );
    println!("wrote {}", files.model.display());
    Ok(())
}

fn load_model(path: &Path, model: &FeederModel) -> Result<ModelFile> {
    let m: ModelFile = read_json(path)?;
    ensure!(
        m.feeder_hash == model.content_hash(),
        "model {} was trained on a different feeder",
        path.display()
    );
    m.params.validate().with_context(|| format!("model {}", path.display()))?;
    Ok(m)
}

fn print_eval(e: &EvalReport) {
    println!("samples            {}", e.n_samples);
    println!("qg error           {:.4} %", e.qg_error_pct);
    println!("max |v|            {:.6}", e.max_abs_v);
    println!(
        "|v| VaR/CVaR @{}   {:.6} / {:.6}",
        e.voltage_risk.alpha, e.voltage_risk.var, e.voltage_risk.cvar
    );
    println!("violating samples  {}", e.violating_samples);
    println!("node violations    {}", e.node_violations);
    for n in &e.node_errors {
        println!("bus {:>5}  |err| {:.6} +/- {:.6}", n.bus, n.mean_abs, n.std_abs);
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let ds = dataset(&a.data, &model)?;
    let m = load_model(&a.model, &model)?;
    let s = build_sensitivities(&model);
    let split = if a.train_split { ds.train() } else { ds.test() };
    let alpha = a.alpha.unwrap_or(m.config.alpha);
    let report = evaluate(&m.params, split, &s, &model, alpha)?;
    print_eval(&report);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn write_comparison(out: &Path, rows: &[ComparisonRow], evals: &[(&str, &EvalReport)], bins: usize) -> Result<()> {
    write_text(&out.join("comparison.csv"), &comparison_csv(rows))?;
    write_json(&out.join("comparison.json"), &rows)?;
    write_text(&out.join("deviation_histogram.csv"), &deviation_histogram_csv(evals, bins)?)?;
    write_text(&out.join("node_errors.csv"), &node_error_csv(evals))?;
    print!("{}", comparison_table(rows));
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let ds = dataset(&a.data, &model)?;
    let s = build_sensitivities(&model);
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for path in &a.models {
        let files = ArmFiles::from_model(path)?;
        let m = load_model(path, &model)?;
        let summary: TrainSummary = read_json(&files.summary)?;
        ensure!(
            summary.feeder_hash == m.feeder_hash,
            "summary {} and model disagree on the feeder",
            files.summary.display()
        );
        if files.log.exists() {
            let records = TrainLog::read_jsonl(open(&files.log)?)?;
            ensure!(
                summary.matches_records(&records),
                "summary {} does not match its log",
                files.summary.display()
            );
        }
        let e = evaluate(&m.params, ds.test(), &s, &model, m.config.alpha)?;
        rows.push(ComparisonRow::new(&summary.arm, &summary.totals, &e));
        evals.push((summary.arm, e));
    }
    let mut names: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    ensure!(names.len() == rows.len(), "arm names must be unique");
    let refs: Vec<(&str, &EvalReport)> = evals.iter().map(|(n, e)| (n.as_str(), e)).collect();
    write_comparison(&a.out.out, &rows, &refs, a.bins)
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| crate::output::DEFAULT_OUT.into());
    let outcome = cfg.run()?;
    write_atomic(&out.join("dataset.jsonl"), |w| Ok(write_dataset(&outcome.dataset, w)?))?;
    let hash = outcome.model.content_hash();
    for arm in &outcome.arms {
        let files = ArmFiles::in_dir(&out, &stem_for(&arm.spec.name));
        let summary = TrainSummary {
            arm: arm.spec.name.clone(),
            feeder_hash: hash.clone(),
            config: arm.config.clone(),
            totals: arm.log.totals.clone(),
        };
        let file = ModelFile {
            feeder_hash: hash.clone(),
            params: arm.params.clone(),
            config: arm.config.clone(),
        };
        write_arm(&files, &summary, &file, &arm.log)?;
    }
    let rows = outcome.rows();
    let refs: Vec<(&str, &EvalReport)> = outcome
        .arms
        .iter()
        .map(|r| (r.spec.name.as_str(), &r.eval))
        .collect();
    write_comparison(&out, &rows, &refs, a.bins)
}

#[derive(Serialize)]
struct OpfReport {
    buses: Vec<BusId>,
    q_gen: Vec<f64>,
    der_q_gen: Vec<(BusId, f64)>,
    objective: f64,
    status: SolveStatus,
    kkt_residual: f64,
    slack_used: f64,
}

fn per_bus(values: &[f64], n: usize, flag: &str) -> Result<Vec<f64>> {
    match values.len() {
        0 => Ok(vec![0.0; n]),
        k if k == n => Ok(values.to_vec()),
        k => bail!("--{flag} has {k} values, feeder has {n} buses"),
    }
}

pub fn solve_opf(a: SolveOpfArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let n = model.n_buses();
    let oc = match (&a.profiles, a.t) {
        (Some(p), Some(t)) => read_profiles(p, &model)?
            .into_iter()
            .find(|oc| oc.t == t)
            .with_context(|| format!("no condition with t = {t} in {}", p.display()))?,
        _ => OperatingCondition {
            t: 0,
            p_gen: per_bus(&a.pg, n, "pg")?,
            p_load: per_bus(&a.pc, n, "pc")?,
            q_load: per_bus(&a.qc, n, "qc")?,
        },
    };
    let s = build_sensitivities(&model);
    let sol = solve_lcqp(&oc, &s, &model, a.tol)?;
    let report = OpfReport {
        buses: model.bus_ids().to_vec(),
        der_q_gen: model
            .der_indices()
            .iter()
            .map(|&i| (model.bus_ids()[i], sol.q_gen[i]))
            .collect(),
        q_gen: sol.q_gen,
        objective: sol.objective,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        slack_used: sol.slack_used,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    ensure!(sol.status != SolveStatus::Infeasible, "no usable solution for this condition");
    Ok(())
}

fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(open(path)?);
    let mut losses = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let Some(field) = rec.get(0).map(str::trim) else {
            continue;
        };
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => losses.push(v),
            Ok(_) => bail!("row {}: non-finite loss", k + 1),
            Err(_) if k == 0 => continue,
            Err(_) => bail!("row {}: {field:?} is not a number", k + 1),
        }
    }
    ensure!(!losses.is_empty(), "no losses in {}", path.display());
    Ok(losses)
}

pub fn risk(a: RiskArgs) -> Result<()> {
    let losses = read_losses(&a.losses)?;
    let r = RiskReport::from_losses(&losses, a.alpha)?;
    println!("n     {}", r.n_samples);
    println!("alpha {}", r.alpha);
    println!("VaR   {}", r.var);
    println!("CVaR  {}", r.cvar);
    println!("mean  {}", r.mean);
    println!("max   {}", r.max);
    Ok(())
}
