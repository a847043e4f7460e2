use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use deep_arguing::autodiff::Tensor;
use deep_arguing::checkpoint::Checkpoint;
use deep_arguing::data::{self, RawRow};
use deep_arguing::explain::{self, DEFAULT_THRESHOLD};
use deep_arguing::qbaf::Case;
use deep_arguing::run::RunConfig;
use deep_arguing::semantics;
use deep_arguing::train::{self, Metrics};
use deep_arguing::{Error, Result};

#[derive(Parser)]
#[command(name = "deep-arguing", version, about = "Argumentative case-based classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a JSONL training report.
    Train {
        config: PathBuf,
        data: PathBuf,
        #[arg(long, default_value = "model.darg")]
        out: PathBuf,
        #[arg(long, default_value = "train_report.jsonl")]
        report: PathBuf,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print classification metrics for labelled rows.
    Eval {
        model: PathBuf,
        data: PathBuf,
        /// `test` evaluates only the rows held out when the model was trained.
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
    },
    /// Print one JSON line per row: predicted class and all target strengths.
    Predict { model: PathBuf, rows: PathBuf },
    /// Export the argument subgraph behind one prediction as DOT and JSON.
    Explain {
        model: PathBuf,
        /// CSV file holding the row to explain.
        row: PathBuf,
        /// Which data row of the file to explain (0-based).
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated class names; defaults to the two strongest classes.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Keep every class and every non-zero edge.
        #[arg(long, conflicts_with_all = ["classes", "threshold"])]
        full: bool,
        #[arg(long, default_value = "explanation.dot")]
        dot: PathBuf,
        #[arg(long, default_value = "explanation.json")]
        json: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    All,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out, report, seed } => train_command(&config, &data, &out, &report, seed),
        Command::Eval { model, data, split } => eval_command(&model, &data, split),
        Command::Predict { model, rows } => predict_command(&model, &rows),
        Command::Explain { model, row, index, classes, threshold, full, dot, json } => {
            explain_command(&model, &row, index, &classes, threshold, full, &dot, &json)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn train_command(config: &Path, data_path: &Path, out: &Path, report_path: &Path, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let prepared = data::load_and_preprocess(data_path, run.test_data.as_deref(), &run.schema, &run.split, run.train.seed)?;
    let c = prepared.schema.num_classes();
    let (trained, mut report) = train::train(&run.train, &prepared.train, &prepared.val, c)?;
    if !prepared.test.is_empty() {
        report.test = Some(trained.evaluate(&prepared.test)?);
    }
    write(report_path, &report.to_jsonl())?;
    let checkpoint = Checkpoint { trained, schema: prepared.schema, preprocessor: prepared.preprocessor, split: prepared.split };
    checkpoint.save(out)?;

    let last = report.final_epoch().expect("at least one epoch");
    println!(
        "{}",
        json!({
            "model": out,
            "report": report_path,
            "train_rows": checkpoint.split.train_ids.len(),
            "val_rows": checkpoint.split.val_ids.len(),
            "test_rows": checkpoint.split.test_ids.len(),
            "casebase_size": report.casebase_size,
            "final_train_loss": last.train.total,
            "final_val_macro_f1": last.val_macro_f1,
            "test": report.test,
        })
    );
    Ok(())
}

fn labelled_cases(ckpt: &Checkpoint, rows: &[RawRow], ids: &[usize]) -> Result<Vec<Case>> {
    ids.iter()
        .map(|&i| {
            let r = rows.get(i).ok_or_else(|| Error::Data { row: None, message: format!("row {i} is out of range") })?;
            let name = r.label.as_deref().unwrap_or("");
            let label = ckpt
                .schema
                .class_index(name)
                .ok_or_else(|| Error::Data { row: Some(r.line), message: format!("unknown label `{name}`") })?;
            Ok(Case { x: ckpt.preprocessor.transform(r)?, label, id: i })
        })
        .collect()
}

fn eval_command(model: &Path, data_path: &Path, split: EvalSplit) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let rows = data::read_csv(data_path, &ckpt.schema, true)?;
    let ids: Vec<usize> = match split {
        EvalSplit::All => (0..rows.len()).collect(),
        EvalSplit::Test if ckpt.split.external_test.is_some() => {
            return Err(Error::Config("model was trained with an external test file; evaluate that file with --split all".into()))
        }
        EvalSplit::Test => ckpt.split.test_ids.clone(),
    };
    let cases = labelled_cases(&ckpt, &rows, &ids)?;
    let metrics: Metrics = ckpt.trained.evaluate(&cases)?;
    println!("{}", json!({ "rows": cases.len(), "class_names": ckpt.schema.label_vocabulary, "metrics": metrics }));
    Ok(())
}

fn encode_rows(ckpt: &Checkpoint, rows: &[RawRow]) -> Result<Tensor> {
    let width = ckpt.preprocessor.output_width();
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        flat.extend(ckpt.preprocessor.transform(r)?);
    }
    Tensor::matrix(rows.len(), width, flat)
}

fn predict_command(model: &Path, rows_path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let rows = data::read_csv(rows_path, &ckpt.schema, false)?;
    if rows.is_empty() {
        return Err(Error::Data { row: None, message: format!("{}: no data rows", rows_path.display()) });
    }
    let prediction = ckpt.trained.predict(&encode_rows(&ckpt, &rows)?)?;
    let mut out = String::new();
    for (i, &label) in prediction.labels.iter().enumerate() {
        let line = json!({
            "row": i,
            "class": label,
            "label": ckpt.schema.label_vocabulary[label],
            "target_strengths": prediction.target_strengths.row(i),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn explain_command(
    model: &Path,
    row_path: &Path,
    index: usize,
    classes: &[String],
    threshold: f64,
    full: bool,
    dot: &Path,
    json_path: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let rows = data::read_csv(row_path, &ckpt.schema, false)?;
    let row = rows
        .get(index)
        .ok_or_else(|| Error::Data { row: None, message: format!("{} has no data row {index}", row_path.display()) })?;
    let x = encode_rows(&ckpt, std::slice::from_ref(row))?;
    let trained = &ckpt.trained;
    let qbaf = trained.mine(&x)?;
    let strengths = semantics::final_strengths(&qbaf, trained.config.iterations, trained.config.new_case_mode)?.strengths;
    let vocab = &ckpt.schema.label_vocabulary;

    let (filter, threshold): (BTreeSet<usize>, f64) = if full {
        ((0..vocab.len()).collect(), 0.0)
    } else if classes.is_empty() {
        let (_, logits) = semantics::predict(&strengths, &qbaf.target_indices)?;
        let mut order: Vec<usize> = (0..vocab.len()).collect();
        order.sort_by(|&a, &b| logits.row(0)[b].total_cmp(&logits.row(0)[a]).then(a.cmp(&b)));
        (order.into_iter().take(2).collect(), threshold)
    } else {
        let filter = classes
            .iter()
            .map(|name| {
                ckpt.schema.class_index(name.trim()).ok_or_else(|| Error::Parameter(format!("unknown class `{name}`")))
            })
            .collect::<Result<_>>()?;
        (filter, threshold)
    };

    let subgraph = explain::extract_explanation(&qbaf, &strengths, &trained.casebase, 0, vocab, &filter, threshold)?;
    explain::export_dot(&subgraph, dot)?;
    explain::export_json(&subgraph, json_path)?;
    println!(
        "{}",
        json!({
            "label": vocab[subgraph.prediction],
            "class": subgraph.prediction,
            "target_strengths": subgraph.target_strengths,
            "classes": subgraph.class_filter.iter().map(|&c| &vocab[c]).collect::<Vec<_>>(),
            "threshold": threshold,
            "nodes": subgraph.nodes.len(),
            "edges": subgraph.edges.len(),
            "dot": dot,
            "json": json_path,
        })
    );
    Ok(())
}
