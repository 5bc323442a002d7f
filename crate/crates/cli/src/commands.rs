use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use microaunet::checkpoint::{load_checkpoint, load_matching, save_checkpoint};
use microaunet::complexity::analyze;
use microaunet::data::{self, Sample};
use microaunet::distill::{self, evaluate, log_csv, LogRow};
use microaunet::gradcheck::{gradcheck_suite, GRADCHECK_TOLERANCE};
use microaunet::graph::sigmoid_scalar;
use microaunet::metrics::metrics_csv;
use microaunet::model::{attention_maps, forward};
use microaunet::{build_student, build_teacher, Error, Network, NetworkPlan, Result};

use crate::config::{existing, require, ModelKind, RunConfig, SplitPart};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<u8> {
    let cfg = RunConfig::resolve(cli)?;
    let dir = create_run_dir(&cfg)?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    eprintln!("run directory {}", dir.display());
    match cli.command {
        Command::TrainTeacher => train_teacher(&cfg, &dir),
        Command::Distill => distill_cmd(&cfg, &dir),
        Command::Eval => eval(&cfg, &dir),
        Command::Count => count(&cfg, &dir),
        Command::Gradcheck => gradcheck(&cfg, &dir, cli.corrupt_op.as_deref()),
        Command::GenData => gen_data(&cfg, &dir),
    }
}

fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("run-{secs}-seed{}", cfg.seed);
    let mut dir = cfg.out.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = cfg.out.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("--out {}: {e}", cfg.out.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let spec = require(&cfg.data, "--data")?;
    if let Some(n) = spec.strip_prefix("synth:") {
        let count: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("--data {spec}: expected synth:<count>")))?;
        return data::generate_synthetic(count, cfg.resolution, cfg.data_seed());
    }
    let root = Path::new(spec);
    existing(root, "--data")?;
    let samples = data::load_root(root, cfg.resolution)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("--data {spec} contains no image/mask pairs")));
    }
    Ok(samples)
}

/// Training and validation parts; validation is empty when it would repeat
/// the training set.
fn split_data(cfg: &RunConfig, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if cfg.val_fraction == 0.0 {
        return Ok((samples, Vec::new()));
    }
    let (train, val) = data::split(samples, 1.0 - cfg.val_fraction, cfg.data_seed())?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "val_fraction {} leaves an empty split",
            cfg.val_fraction
        )));
    }
    Ok((train, val))
}

fn print_row(r: &LogRow) {
    eprintln!(
        "epoch {:>4} stage {} l_seg {:.5} l_1 {:.5} l_2 {:.5} mdice {:.4}",
        r.epoch, r.stage, r.losses.l_seg, r.losses.l_1, r.losses.l_2, r.mdice_val
    );
}

fn finish_training(
    cfg: &RunConfig,
    dir: &Path,
    plan: &NetworkPlan,
    outcome: &distill::TrainOutcome,
    eval_set: &[Sample],
    ckpt_name: &str,
) -> Result<()> {
    save_checkpoint(&outcome.params, &dir.join(ckpt_name))?;
    write(&dir.join("loss.csv"), &log_csv(&outcome.log))?;
    let rows = evaluate(plan, &outcome.params, eval_set, cfg.threshold)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&rows, cfg.threshold)?)?;
    if cfg.dump_attn {
        dump_attention(plan, &outcome.params, &eval_set[0], &dir.join("attn"))?;
    }
    if let Some(last) = outcome.log.last() {
        println!("final mdice {:.6} miou {:.6}", last.mdice_val, last.miou_val);
    }
    Ok(())
}

fn dump_attention(plan: &NetworkPlan, params: &microaunet::ModelParams, sample: &Sample, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for (name, map) in attention_maps(plan, params, &sample.image)? {
        data::write_map_pgm(&dir.join(format!("{}_{name}.pgm", sample.id)), &map, 0)?;
    }
    Ok(())
}

fn train_teacher(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    let (train, val) = split_data(cfg, load_data(cfg)?)?;
    let teacher = build_teacher(&cfg.teacher)?;
    let outcome = distill::train_supervised(&teacher, &train, &val, &cfg.train, print_row)?;
    let eval_set = if val.is_empty() { &train } else { &val };
    finish_training(cfg, dir, &teacher.plan, &outcome, eval_set, "teacher.ckpt")?;
    Ok(0)
}

fn distill_cmd(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    let ckpt = require(&cfg.teacher_checkpoint, "--teacher")?;
    existing(ckpt, "--teacher")?;
    let teacher = build_teacher(&cfg.teacher)?;
    let params = load_matching(ckpt, &teacher.params)?;
    let teacher = teacher.with_params(params)?;
    let (train, val) = split_data(cfg, load_data(cfg)?)?;
    let student = build_student(&cfg.student)?;
    let outcome = distill::train(&student, &teacher, &train, &val, &cfg.train, &cfg.distill, print_row)?;
    let eval_set = if val.is_empty() { &train } else { &val };
    finish_training(cfg, dir, &student.plan, &outcome, eval_set, "student.ckpt")?;
    Ok(0)
}

fn load_custom_plan(path: &Path) -> Result<NetworkPlan> {
    existing(path, "--plan")?;
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("--plan {}: {e}", path.display())))
}

/// The network matching the checkpoint's tensor names.
fn network_for(cfg: &RunConfig, ckpt: &Path) -> Result<Network> {
    if let Some(p) = &cfg.plan {
        let net = Network::from_plan(load_custom_plan(p)?, cfg.resolution, cfg.seed)?;
        let params = load_matching(ckpt, &net.params)?;
        return net.with_params(params);
    }
    let candidates = match cfg.model {
        Some(ModelKind::Student) => vec![build_student(&cfg.student)?],
        Some(ModelKind::Teacher) => vec![build_teacher(&cfg.teacher)?],
        None => vec![build_student(&cfg.student)?, build_teacher(&cfg.teacher)?],
    };
    let params = load_checkpoint(ckpt)?;
    let mut last = None;
    for net in candidates {
        match net.params.check_compatible(&params) {
            Ok(()) => return net.with_params(params),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Format {
        path: ckpt.to_path_buf(),
        reason: format!("matches no known architecture: {}", last.expect("one candidate")),
    })
}

fn eval(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    let ckpt = require(&cfg.checkpoint, "--checkpoint")?;
    existing(ckpt, "--checkpoint")?;
    let net = network_for(cfg, ckpt)?;
    let samples = load_data(cfg)?;
    let (train, val) = split_data(cfg, samples.clone())?;
    let set = match cfg.eval_split {
        SplitPart::All => samples,
        SplitPart::Train => train,
        SplitPart::Val if val.is_empty() => train,
        SplitPart::Val => val,
    };
    let rows = evaluate(&net.plan, &net.params, &set, cfg.threshold)?;
    let csv = metrics_csv(&rows, cfg.threshold)?;
    write(&dir.join("metrics.csv"), &csv)?;
    if cfg.overlays {
        let odir = dir.join("overlays");
        mkdir(&odir)?;
        for s in &set {
            let (logits, _) = forward(&net.plan, &net.params, &s.image, false)?;
            let probs = logits.map(sigmoid_scalar);
            let r = data::overlay(&s.image, &probs, cfg.threshold)?;
            data::write_netpbm(&odir.join(format!("{}.ppm", s.id)), &r)?;
        }
    }
    if cfg.dump_attn {
        dump_attention(&net.plan, &net.params, &set[0], &dir.join("attn"))?;
    }
    let mean = csv.lines().last().unwrap_or_default();
    println!("images {} threshold {}", set.len(), cfg.threshold);
    println!("{mean}");
    Ok(0)
}

fn count(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    let plans = match &cfg.plan {
        Some(p) => vec![load_custom_plan(p)?],
        None => vec![build_student(&cfg.student)?.plan, build_teacher(&cfg.teacher)?.plan],
    };
    for plan in plans {
        let report = analyze(&plan, cfg.resolution)?;
        print!("{}", report.to_table());
        println!();
        write(&dir.join(format!("count_{}.txt", plan.name)), &report.to_table())?;
        write(&dir.join(format!("count_{}.csv", plan.name)), &report.to_csv())?;
    }
    Ok(0)
}

fn gradcheck(cfg: &RunConfig, dir: &Path, corrupt: Option<&str>) -> Result<u8> {
    let rows = gradcheck_suite(cfg.seed, corrupt)?;
    let mut csv = String::from("op,elements,max_rel_error,passed\n");
    println!("{:<28} {:>8} {:>14}  result", "op", "elements", "max rel err");
    for r in &rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<28} {:>8} {:>14.3e}  {verdict}", r.name, r.elements, r.max_rel_error);
        csv.push_str(&format!("{},{},{:e},{}\n", r.name, r.elements, r.max_rel_error, r.passed()));
    }
    write(&dir.join("gradcheck.csv"), &csv)?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} ops, {failed} above tolerance {GRADCHECK_TOLERANCE:e}", rows.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<u8> {
    let samples = load_data(cfg)?;
    let root = dir.join("data");
    data::export(&samples, &root)?;
    println!("{} samples written to {}", samples.len(), root.display());
    Ok(0)
}
