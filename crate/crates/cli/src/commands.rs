use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use trn::analysis::{
    align_videos, class_order_sensitivity, early_recognition_eval, export_embeddings,
    representative_tuples, write_embeddings,
};
use trn::checkpoint::{load_model, save_model};
use trn::data::{generate_dataset, read_features, write_features, SplitDataset, VideoSample};
use trn::gradcheck::{check_multiscale, GradCheckShape};
use trn::model::{FrameOrder, Model};
use trn::streaming::replay;
use trn::training::{
    compare_poolings, evaluate, history_json_lines, mix_seed, summarize_comparison, train, GridCell,
};

use crate::config::RunConfig;
use crate::{CliError, Command};

/// Gradient-check pass threshold on the maximum relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

struct Run<'a> {
    command: Command,
    config: &'a RunConfig,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, contents)?;
        self.outputs.push(p);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn manifest(&self, status: &str) -> Result<(), CliError> {
        let m = json!({
            "command": self.command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "status": status,
            "config": self.config,
            "reproduce": format!(
                "trn {} --config {}",
                self.command.name(),
                self.path("resolved.toml").display()
            ),
            "outputs": self.outputs,
        });
        fs::write(
            self.path("manifest.json"),
            serde_json::to_string_pretty(&m).expect("plain json") + "\n",
        )?;
        Ok(())
    }
}

fn jsonl<T: serde::Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    rows.into_iter()
        .map(|r| serde_json::to_string(&r).expect("plain record") + "\n")
        .collect()
}

pub fn run(command: Command, config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.out)?;
    let mut run = Run {
        command,
        config,
        outputs: Vec::new(),
    };
    fs::write(run.path("resolved.toml"), config.to_toml())?;
    run.manifest("started")?;
    let result = match command {
        Command::GenData => gen_data(&mut run),
        Command::Train => train_cmd(&mut run),
        Command::Eval => eval_cmd(&mut run),
        Command::Stream => stream_cmd(&mut run),
        Command::Analyze => analyze_cmd(&mut run),
        Command::GradCheck => grad_check(&mut run),
        Command::ComparePool => compare_cmd(&mut run),
    };
    run.manifest(if result.is_ok() { "ok" } else { "failed" })?;
    result
}

fn load_data(config: &RunConfig) -> Result<SplitDataset, CliError> {
    let spec = config.data.resolved_spec()?;
    let generated = || generate_dataset(&spec, config.seed, config.data.train_per_class, config.data.val_per_class);
    let (train, val) = match (&config.data.train_features, &config.data.val_features) {
        (Some(t), Some(v)) => (read_features(t)?, read_features(v)?),
        (Some(t), None) => (read_features(t)?, generated()?.val),
        (None, Some(v)) => (generated()?.train, read_features(v)?),
        (None, None) => {
            let s = generated()?;
            (s.train, s.val)
        }
    };
    Ok(SplitDataset { train, val })
}

fn gen_data(run: &mut Run) -> Result<(), CliError> {
    let split = load_data(run.config)?;
    for (name, set) in [("train.trnf", &split.train), ("val.trnf", &split.val)] {
        let p = run.path(name);
        write_features(&p, set)?;
        run.record(p);
    }
    println!(
        "wrote {} train and {} val videos to {}",
        split.train.len(),
        split.val.len(),
        run.config.out.display()
    );
    Ok(())
}

fn train_cmd(run: &mut Run) -> Result<(), CliError> {
    let config = run.config;
    let split = load_data(config)?;
    let spec = config.data.resolved_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x1417]));
    let mut model = Model::new(config.model_config(&spec), &mut rng)?;
    let history = train(&mut model, &split.train, &config.train_config())?;
    let p = run.path("model.trnw");
    save_model(&p, &model)?;
    run.record(p);
    run.write("history.jsonl", history_json_lines(&history))?;
    let report = evaluate(&model, &split.val, FrameOrder::Ordered)?;
    run.write("report.jsonl", report.to_json_lines())?;
    let last = history.last().expect("epochs >= 1");
    println!(
        "{} N={}: train loss {:.4}, val top1 {:.4}",
        config.model.pooling.name(),
        config.model.frames,
        last.loss,
        report.top1
    );
    Ok(())
}

fn checkpoint_model(config: &RunConfig) -> Result<Model, CliError> {
    Ok(load_model(config.checkpoint())?)
}

fn eval_cmd(run: &mut Run) -> Result<(), CliError> {
    let model = checkpoint_model(run.config)?;
    let split = load_data(run.config)?;
    let report = evaluate(&model, &split.val, run.config.eval.order)?;
    run.write("report.jsonl", report.to_json_lines())?;
    println!(
        "top1 {:.4}{} on {} videos",
        report.top1,
        report.top5.map(|t| format!(", top5 {t:.4}")).unwrap_or_default(),
        report.samples
    );
    Ok(())
}

fn stream_cmd(run: &mut Run) -> Result<(), CliError> {
    let model = checkpoint_model(run.config)?;
    let split = load_data(run.config)?;
    let frames: Vec<_> = split
        .val
        .samples
        .iter()
        .take(run.config.stream.videos)
        .flat_map(|v| v.frames.iter().cloned())
        .collect();
    let preds = replay(&model, run.config.stream.stride, &frames)?;
    run.write("predictions.jsonl", jsonl(&preds))?;
    println!("{} frames streamed, {} predictions", frames.len(), preds.len());
    Ok(())
}

fn analyze_cmd(run: &mut Run) -> Result<(), CliError> {
    let config = run.config;
    let a = &config.analyze;
    let model = checkpoint_model(config)?;
    let split = load_data(config)?;
    let val = &split.val;

    let early = a
        .fractions
        .iter()
        .map(|&f| {
            let r = early_recognition_eval(&model, val, f)?;
            Ok(json!({"fraction": f, "top1": r.top1, "top5": r.top5}))
        })
        .collect::<Result<Vec<_>, trn::Error>>()?;
    run.write("early.jsonl", jsonl(&early))?;

    let table = class_order_sensitivity(&model, val)?;
    let mut rows: Vec<serde_json::Value> = table.rows.iter().map(|r| json!(r)).collect();
    rows.push(json!({
        "record": "summary",
        "ordered_top1": table.ordered_top1,
        "shuffled_top1": table.shuffled_top1,
        "gap": table.gap(),
    }));
    run.write("order_sensitivity.jsonl", jsonl(&rows))?;

    let Some(trn) = model.relation() else {
        println!("{} model: tuple, alignment and embedding analyses skipped", model.pooling().name());
        return Ok(());
    };
    let max_d = trn.max_scale().min(5);
    let mut ranked = Vec::new();
    for (i, video) in val.samples.iter().take(a.samples).enumerate() {
        for d in 2..=max_d {
            let r = representative_tuples(&model, video, d, a.top_m)?;
            if let Some(w) = &r.warning {
                eprintln!("sample {i}: {w}");
            }
            ranked.push(json!({"sample": i, "label": video.label, "scale": d, "ranking": r}));
        }
    }
    run.write("representative.jsonl", jsonl(&ranked))?;

    let group: Vec<VideoSample> = val
        .samples
        .iter()
        .filter(|v| v.label == a.align_class)
        .take(a.align_videos)
        .cloned()
        .collect();
    if group.len() >= 2 && a.anchors <= trn.max_scale() {
        let map = align_videos(&model, &group, a.anchors)?;
        run.write("alignment.json", serde_json::to_string_pretty(&map).expect("plain json") + "\n")?;
    } else {
        eprintln!("alignment skipped: need two class-{} videos and anchors <= N", a.align_class);
    }

    if (2..=trn.max_scale()).contains(&a.embed_scale) {
        let vectors = export_embeddings(&model, val, a.embed_scale)?;
        let labels: Vec<usize> = val.samples.iter().map(|s| s.label).collect();
        let p = run.path("embeddings.tsv");
        write_embeddings(&p, &labels, &vectors)?;
        run.record(p);
    } else {
        eprintln!("embeddings skipped: scale {} outside [2, {}]", a.embed_scale, trn.max_scale());
    }
    println!(
        "ordered {:.4} vs shuffled {:.4}; analyses written to {}",
        table.ordered_top1,
        table.shuffled_top1,
        config.out.display()
    );
    Ok(())
}

fn grad_check(run: &mut Run) -> Result<(), CliError> {
    let g = &run.config.grad_check;
    let report = check_multiscale(GradCheckShape::default(), g.configurations, run.config.seed, g.step)?;
    run.write(
        "gradcheck.json",
        serde_json::to_string_pretty(&json!({"shape": GradCheckShape::default(), "report": report}))
            .expect("plain json")
            + "\n",
    )?;
    println!("max relative error {:.3e}", report.max_relative_error);
    if report.max_relative_error.is_finite() && report.max_relative_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "max relative error {:.3e} >= {GRAD_TOLERANCE:e}",
            report.max_relative_error
        )))
    }
}

fn compare_cmd(run: &mut Run) -> Result<(), CliError> {
    let config = run.config;
    let split = load_data(config)?;
    let spec = config.data.resolved_spec()?;
    let cells: Vec<GridCell> = config
        .compare
        .poolings
        .iter()
        .flat_map(|&pooling| config.compare.frames.iter().map(move |&frames| GridCell { pooling, frames }))
        .collect();
    let rows = compare_poolings(
        &split,
        &config.model_config(&spec),
        &config.train_config(),
        &cells,
        &config.compare.seeds,
    )?;
    run.write("comparison.jsonl", jsonl(&rows))?;
    let summary = summarize_comparison(&rows);
    run.write(
        "summary.jsonl",
        jsonl(summary.iter().map(|(p, n, t)| json!({"pooling": p, "frames": n, "mean_top1": t}))),
    )?;
    println!("{:<18} {:>6} {:>10}", "pooling", "frames", "mean top1");
    for (p, n, t) in summary {
        println!("{:<18} {:>6} {:>10.4}", p.name(), n, t);
    }
    Ok(())
}
