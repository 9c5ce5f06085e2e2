use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use asmil::data::{
    generate_synthetic, load_dataset, write_bagds, BagDataset, DatasetFormat, SyntheticBagSpec,
};
use asmil::diagnostics::{affine_dependence, concentration_of, stability_curve, AttentionTrace};
use asmil::theorem::{
    softmax_low_supremum, suppression_worst_case, sweep_nsf_bounds, temperature_feasibility,
    FeasibilityTargets, ScoreSetSpec,
};
use asmil::trainer::{evaluate, predict, Checkpoint, Trainer};
use asmil::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{
    AffineArgs, CliError, ConvertArgs, DiagnoseArgs, EvalArgs, GenDataArgs, TrainArgs, VerifyArgs,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ATTENTION_FILE: &str = "attention.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// One line of the attention trace.
#[derive(Debug, Serialize, Deserialize)]
struct AttentionRecord {
    epoch: usize,
    bag_id: String,
    attention: Vec<Vec<f64>>,
}

fn load(path: &Path, format: DatasetFormat) -> Result<BagDataset, CliError> {
    load_dataset(path, format).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse_format(name: &str) -> Result<DatasetFormat, CliError> {
    name.parse()
        .map_err(|_| CliError::Usage(format!("unknown dataset format `{name}`")))
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn open_stream(path: &Path, append: bool) -> Result<BufWriter<File>, CliError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let format = cfg.dataset_format()?;
    let train_path = cfg.train_data.as_ref().ok_or_else(|| {
        CliError::Usage("config error in `train_data`: no training data given".into())
    })?;
    let train = load(train_path, format)?;
    let val = match &cfg.val_data {
        Some(p) => load(p, format)?,
        None => BagDataset {
            dim: train.dim,
            n_classes: train.n_classes,
            bags: Vec::new(),
        },
    };
    if val.dim != train.dim {
        return Err(CliError::Runtime(format!(
            "validation bags have {} features, training bags have {}",
            val.dim, train.dim
        )));
    }
    let train_cfg = cfg.train_config(train.dim, train.n_classes.max(val.n_classes))?;

    fs::create_dir_all(&cfg.out_dir)?;
    let out = |name: &str| -> PathBuf { cfg.out_dir.join(name) };
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            if ck.config != train_cfg {
                return Err(CliError::Usage(format!(
                    "config does not match the training settings stored in {}",
                    path.display()
                )));
            }
            Trainer::resume(ck)?
        }
        None => Trainer::new(train_cfg, &train.bags)?,
    };
    let append = args.resume.is_some();
    let mut metrics = open_stream(&out(METRICS_FILE), append)?;
    let mut attention = open_stream(&out(ATTENTION_FILE), append)?;

    while !trainer.is_finished() {
        let m = trainer.run_epoch(&train.bags, &val.bags)?;
        serde_json::to_writer(&mut metrics, &m)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        for (bag_id, history) in &trainer.trace().bags {
            if history.len() == m.epoch {
                let rec = AttentionRecord {
                    epoch: m.epoch,
                    bag_id: bag_id.clone(),
                    attention: history[m.epoch - 1].to_rows(),
                };
                serde_json::to_writer(&mut attention, &rec)?;
                attention.write_all(b"\n")?;
            }
        }
        attention.flush()?;
        write_checkpoint(&trainer.checkpoint(), &out(CHECKPOINT_FILE))?;
    }
    let summary = json!({
        "epochs": trainer.epochs_done(),
        "checkpoint": out(CHECKPOINT_FILE),
        "final": trainer.history().last(),
    });
    print_json(&summary)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let ds = load(&args.data, parse_format(&args.format)?)?;
    let bags = ck.prepare(&ds.bags)?;
    let report = evaluate(&bags, &ck.params)?;
    if let Some(path) = &args.predictions {
        let mut w = open_stream(path, false)?;
        for p in predict(&bags, &ck.params)? {
            serde_json::to_writer(&mut w, &p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    print_json(&report)
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let file = File::open(&args.trace)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.trace.display())))?;
    let mut by_bag: BTreeMap<String, Vec<(usize, DenseMatrix)>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Runtime(format!("{} line {}: {e}", args.trace.display(), i + 1))
        })?;
        let rows = DenseMatrix::from_rows(&rec.attention)?;
        by_bag
            .entry(rec.bag_id)
            .or_default()
            .push((rec.epoch, rows));
    }
    let mut trace = AttentionTrace::new();
    for (bag_id, mut epochs) in by_bag {
        epochs.sort_by_key(|(e, _)| *e);
        for (_, rows) in epochs {
            trace.record(&bag_id, rows)?;
        }
    }
    let curve = stability_curve(&trace, args.window)?;
    let bags: Vec<_> = trace
        .bags
        .iter()
        .map(|(bag_id, history)| {
            let last = history.last().expect("recorded bags have rows");
            let stats: Vec<_> = (0..last.rows()).map(|r| concentration_of(last.row(r))).collect();
            let n = stats.len() as f64;
            json!({
                "bag_id": bag_id,
                "epochs": history.len(),
                "jsd": curve.per_bag.get(bag_id),
                "final_entropy": stats.iter().map(|s| s.entropy).sum::<f64>() / n,
                "final_max_weight": stats.iter().map(|s| s.max_weight).sum::<f64>() / n,
                "final_effective_support": stats.iter().map(|s| s.effective_support).sum::<f64>() / n,
            })
        })
        .collect();
    print_json(&json!({
        "window": curve.window,
        "final_window_mean_jsd": curve.final_window_mean,
        "bags": bags,
    }))
}

pub fn verify_theorem(args: &VerifyArgs) -> Result<(), CliError> {
    let spec = ScoreSetSpec::new(args.tau, args.gamma, args.high, args.low, args.mid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let sweep = sweep_nsf_bounds(&spec, args.samples, &mut rng)?;
    let worst = suppression_worst_case(&spec);
    let supremum: Vec<_> = [0.25, 0.5, 1.0, 2.0]
        .into_iter()
        .map(|t| -> Result<_, CliError> {
            let sup = softmax_low_supremum(spec.tau, t, spec.high)?;
            let reached = asmil::attention::softmax_slice(&worst, t)[spec.high];
            Ok(json!({ "temperature": t, "supremum": sup, "worst_case_low_weight": reached }))
        })
        .collect::<Result<_, _>>()?;
    let targets = FeasibilityTargets::nsf_achieved(&spec);
    let feas = temperature_feasibility(&spec, &targets)?;
    print_json(&json!({
        "spec": spec,
        "samples": sweep.samples,
        "violations": sweep.violations,
        "max_high_ratio": sweep.max_high_ratio,
        "ratio_bound": sweep.ratio_bound,
        "max_low_weight": sweep.max_low_weight,
        "low_bound": sweep.low_bound,
        "softmax_low_supremum": supremum,
        "single_temperature": {
            "epsilon": targets.epsilon,
            "kappa": targets.kappa,
            "t_min": feas.t_min,
            "t_max_loose": feas.t_max_loose,
            "t_max_sharp": if feas.t_max_sharp.is_finite() { Some(feas.t_max_sharp) } else { None },
            "feasible": feas.feasible,
            "feasible_loose": feas.feasible_loose,
            "grid_points": feas.grid.len(),
            "grid_feasible": feas.grid_feasible,
            "witness": feas.witness,
        },
    }))?;
    if sweep.violations > 0 {
        return Err(CliError::Runtime(format!(
            "{} bound violations",
            sweep.violations
        )));
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticBagSpec {
        n_bags: args.n_bags,
        min_instances: args.min_instances,
        max_instances: args.max_instances,
        dim: args.dim,
        witness_rate: args.witness_rate,
        signal_shift: args.signal_shift,
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate_synthetic(&spec)?;
    write_bagds(&data.dataset, &args.out)?;
    print_json(&json!({
        "out": args.out,
        "bags": data.dataset.bags.len(),
        "class_counts": data.dataset.class_counts(),
    }))
}

pub fn affine_check(args: &AffineArgs) -> Result<(), CliError> {
    let ds = load(&args.data, parse_format(&args.format)?)?;
    let dependent = ds
        .bags
        .iter()
        .filter(|b| affine_dependence(b, args.tol).dependent)
        .count();
    print_json(&json!({
        "bags": ds.bags.len(),
        "dependent": dependent,
        "ratio": dependent as f64 / ds.bags.len() as f64,
    }))
}

pub fn convert(args: &ConvertArgs) -> Result<(), CliError> {
    let ds = load(&args.input, parse_format(&args.from)?)?;
    write_bagds(&ds, &args.output)?;
    print_json(&json!({
        "out": args.output,
        "bags": ds.bags.len(),
        "dim": ds.dim,
        "n_classes": ds.n_classes,
    }))
}
