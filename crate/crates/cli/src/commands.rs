use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cap_core::bank::{FeatureSet, MemoryBank};
use cap_core::heatmap::{anomaly_heatmap, write_grid_csv, write_pgm, SpatialMapSet};
use cap_core::model::{forward, ModelParams};
use cap_core::scoring::{evaluate, score_set, Evaluation};
use cap_core::synthetic::{gaussian_cluster_instance, SyntheticSpec, STANDARD_SUITE};
use cap_core::trainer::{collapse_diagnostics, train, CollapseReport, TrainingConfig};
use cap_core::CapError;
use ndarray::Axis;

use crate::config::{RunConfig, Sweep};
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.txt";

fn file_error(path: &Path) -> impl FnOnce(CapError) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| file_error(path)(e.into()))
}

fn write_with<F>(path: &Path, body: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> cap_core::Result<()>,
{
    let file = File::create(path).map_err(|e| file_error(path)(e.into()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(file_error(path))?;
    w.flush().map_err(|e| file_error(path)(e.into()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_with(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn load_set(path: &Path) -> CliResult<FeatureSet> {
    FeatureSet::read_from(open(path)?).map_err(file_error(path))
}

fn load_bank(path: &Path) -> CliResult<MemoryBank> {
    MemoryBank::load(open(path)?).map_err(file_error(path))
}

fn load_model(path: &Path) -> CliResult<(ModelParams, serde_json::Value)> {
    ModelParams::load(open(path)?).map_err(file_error(path))
}

/// Creates the output directory and writes the resolved configuration into it.
fn prepare_out(config: &RunConfig) -> CliResult<PathBuf> {
    let out = config.require(&config.out, "out")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| file_error(&out)(e.into()))?;
    write_text(&out.join(CONFIG_ECHO), &config.echo())?;
    Ok(out)
}

/// Test-time k: explicit setting, else the k the model was trained with.
fn scoring_k(config: &RunConfig, meta: &serde_json::Value) -> usize {
    if config.k_explicit {
        return config.training.k;
    }
    meta.get("training")
        .and_then(|t| t.get("k"))
        .and_then(|k| k.as_u64())
        .map_or(config.training.k, |k| k as usize)
}

fn model_metadata(training: &TrainingConfig, bank: &MemoryBank) -> serde_json::Value {
    serde_json::json!({
        "training": training,
        "bank_rows": bank.len(),
        "bank_dim": bank.dim(),
    })
}

fn diagnostics_text(report: &CollapseReport) -> String {
    let mut out = String::new();
    let mut put = |key: &str, value: String| writeln!(out, "{key}={value}").expect("string write");
    put("head_frobenius", report.head_frobenius.to_string());
    put("head_sparsity", report.head_sparsity.to_string());
    put("head_top_singular_share", report.head_top_singular_share.to_string());
    put("adapted_norm_mean", report.adapted_norm_mean.to_string());
    put("adapted_norm_var", report.adapted_norm_var.to_string());
    if let Some(v) = report.holdout_normal_mean {
        put("holdout_normal_mean", v.to_string());
    }
    if let Some(v) = report.holdout_anomaly_mean {
        put("holdout_anomaly_mean", v.to_string());
    }
    out
}

pub fn synth(config: &RunConfig) -> CliResult<String> {
    let out = prepare_out(config)?;
    let spec = SyntheticSpec::standard(config.training.seed);
    let inst = gaussian_cluster_instance(&spec)?;
    write_with(&out.join("train.bin"), |w| inst.train.write_to(w))?;
    write_with(&out.join("test.bin"), |w| inst.test.write_to(w))?;
    Ok(format!(
        "suite={STANDARD_SUITE}\nseed={}\ntrain_rows={}\ntest_rows={}\ndim={}\n",
        spec.seed,
        inst.train.len(),
        inst.test.len(),
        spec.dim
    ))
}

pub fn build_bank(config: &RunConfig) -> CliResult<String> {
    let set = match (&config.input, &config.suite) {
        (Some(path), None) => load_set(path)?,
        (None, Some(_)) => gaussian_cluster_instance(&SyntheticSpec::standard(config.training.seed))?.train,
        (Some(_), Some(_)) => return Err(CliError::usage("give either --input or --suite, not both")),
        (None, None) => return Err(CliError::usage("missing required --input (or --suite)")),
    };
    let dropped = set.labels.as_ref().map_or(0, |l| l.iter().filter(|&&y| y != 0).count());
    let set = normal_rows(set)?;
    let bank = MemoryBank::from_feature_set(set)?;
    let out = prepare_out(config)?;
    write_with(&out.join("bank.bin"), |w| bank.save(w))?;
    Ok(format!("rows={}\ndim={}\ndropped_anomalies={dropped}\n", bank.len(), bank.dim()))
}

/// Keeps label-0 rows of a labeled set; unlabeled sets pass through.
fn normal_rows(set: FeatureSet) -> CliResult<FeatureSet> {
    let Some(labels) = &set.labels else {
        return Ok(set);
    };
    let keep: Vec<usize> = (0..set.len()).filter(|&i| labels[i] == 0).collect();
    if keep.is_empty() {
        return Err(CapError::Empty("normal rows in input").into());
    }
    let rows = set.rows.select(Axis(0), &keep);
    let ids = keep.iter().map(|&i| set.ids[i].clone()).collect();
    let mut normal = FeatureSet::new(ids, rows, None)?;
    normal.provenance = set.provenance;
    Ok(normal)
}

pub fn train_cmd(config: &RunConfig) -> CliResult<String> {
    let bank = load_bank(config.require(&config.bank, "bank")?)?;
    let holdout = config.test.as_deref().map(load_set).transpose()?;
    let out = prepare_out(config)?;
    let (model, trace) = train(&bank, &config.training, holdout.as_ref())?;
    write_with(&out.join("model.bin"), |w| {
        model.save(w, &model_metadata(&config.training, &bank))
    })?;
    write_with(&out.join("trace.csv"), |w| trace.write_csv(w))?;
    let report = collapse_diagnostics(&model, &bank, holdout.as_ref(), config.training.k)?;
    let diagnostics = diagnostics_text(&report);
    write_text(&out.join("diagnostics.txt"), &diagnostics)?;
    let last = trace.last();
    Ok(format!(
        "epochs={}\nfinal_total={}\nfinal_l_s={}\nfinal_omega={}\n{diagnostics}",
        last.epoch, last.total, last.l_s, last.omega
    ))
}

pub fn score(config: &RunConfig) -> CliResult<String> {
    let (model, meta) = load_model(config.require(&config.model, "model")?)?;
    let bank = load_bank(config.require(&config.bank, "bank")?)?;
    let queries = load_set(config.require(&config.test, "test")?)?;
    let k = scoring_k(config, &meta);
    let out = prepare_out(config)?;
    let report = score_set(&model, &bank, &queries, k)?;
    write_with(&out.join("scores.csv"), |w| report.write_csv(w))?;
    let mut text = format!("k={k}\nscored={}\ndegenerate={}\n", report.scores.len(), report.degenerate_count());
    if let Some(a) = report.auroc {
        writeln!(text, "auroc={a}").expect("string write");
    }
    Ok(text)
}

fn write_evaluation(dir: &Path, eval: &Evaluation) -> CliResult<()> {
    write_with(&dir.join("scores.csv"), |w| eval.adapted.write_csv(w))?;
    write_with(&dir.join("baseline_scores.csv"), |w| eval.baseline.write_csv(w))?;
    write_text(&dir.join("summary.txt"), &eval.summary_text())
}

pub fn eval(config: &RunConfig) -> CliResult<String> {
    let (model, meta) = load_model(config.require(&config.model, "model")?)?;
    let bank = load_bank(config.require(&config.bank, "bank")?)?;
    let test_path = config.require(&config.test, "test")?;
    let test = load_set(test_path)?;
    if test.labels.is_none() {
        return Err(CliError::File {
            path: test_path.to_path_buf(),
            source: CapError::Malformed("evaluation needs a labeled test set".into()),
        });
    }
    let k = scoring_k(config, &meta);
    let out = prepare_out(config)?;
    let evaluation = evaluate(&model, &bank, &test, k)?;
    write_evaluation(&out, &evaluation)?;
    Ok(evaluation.summary_text())
}

fn format_value(v: f64) -> String {
    v.to_string()
}

pub fn ablate(config: &RunConfig) -> CliResult<String> {
    let sweep = config
        .sweep
        .ok_or_else(|| CliError::usage("missing required --sweep"))?;
    let bank = load_bank(config.require(&config.bank, "bank")?)?;
    let test = load_set(config.require(&config.test, "test")?)?;
    let values = config.values.clone().unwrap_or_else(|| sweep.default_values());
    let mut points = Vec::with_capacity(values.len());
    for &v in &values {
        let mut point = config.clone();
        match sweep {
            Sweep::K => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(CliError::usage(format!("k sweep value {v} is not a positive integer")));
                }
                point.training.k = v as usize;
                point.k_explicit = true;
            }
            Sweep::Lambda => point.training.lambda = v,
        }
        point.training.validate()?;
        points.push(point);
    }
    let out = prepare_out(config)?;

    let mut table = String::from("sweep,value,auroc,baseline_auroc,normal_mean,anomaly_mean,gap,head_frobenius\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    if sweep == Sweep::Lambda {
        let baseline = evaluate(&cap_core::init_model(bank.dim(), config.training.head_variant, false, 0), &bank, &test, config.training.k)?.baseline;
        writeln!(
            table,
            "lambda,no-ada,{},{},{},{},{},",
            opt(baseline.auroc),
            opt(baseline.auroc),
            opt(baseline.normal.map(|s| s.mean)),
            opt(baseline.anomaly.map(|s| s.mean)),
            opt(baseline.gap()),
        )
        .expect("string write");
    }
    for (point, &v) in points.iter().zip(&values) {
        let dir = out.join(format!("{}-{}", sweep.name(), format_value(v)));
        fs::create_dir_all(&dir).map_err(|e| file_error(&dir)(e.into()))?;
        let mut echo = point.clone();
        echo.out = Some(dir.clone());
        write_text(&dir.join(CONFIG_ECHO), &echo.echo())?;

        let (model, trace) = train(&bank, &point.training, Some(&test))?;
        write_with(&dir.join("model.bin"), |w| model.save(w, &model_metadata(&point.training, &bank)))?;
        write_with(&dir.join("trace.csv"), |w| trace.write_csv(w))?;
        let evaluation = evaluate(&model, &bank, &test, point.training.k)?;
        write_evaluation(&dir, &evaluation)?;
        let adapted = &evaluation.adapted;
        writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            sweep.name(),
            format_value(v),
            opt(adapted.auroc),
            opt(evaluation.baseline.auroc),
            opt(adapted.normal.map(|s| s.mean)),
            opt(adapted.anomaly.map(|s| s.mean)),
            opt(adapted.gap()),
            model.head_frobenius(),
        )
        .expect("string write");
    }
    write_text(&out.join("sweep.csv"), &table)?;
    Ok(table)
}

/// File-name-safe form of a sample id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub fn heatmap(config: &RunConfig) -> CliResult<String> {
    let (model, meta) = load_model(config.require(&config.model, "model")?)?;
    let bank = load_bank(config.require(&config.bank, "bank")?)?;
    let maps_path = config.require(&config.maps, "maps")?;
    let maps = SpatialMapSet::read_from(open(maps_path)?).map_err(file_error(maps_path))?;
    let k = scoring_k(config, &meta);
    let (target_h, target_w) = config.size;
    let out = prepare_out(config)?;

    let mut summary = String::from("id,file,min,max,zero_cells\n");
    for i in 0..maps.len() {
        let map = maps.map(i);
        // Query vector: global average of the map's cells.
        let pooled = map
            .grid
            .mean_axis(Axis(0))
            .and_then(|m| m.mean_axis(Axis(0)))
            .expect("non-empty map");
        let query: Vec<f32> = pooled.to_vec();
        let neighbors = bank.top_k_neighbors(&query, k, None)?;
        let output = forward(&model, &query, &neighbors)?;
        let z: Vec<f64> = query.iter().map(|&x| f64::from(x)).collect();
        let result = anomaly_heatmap(&z, &output.z_normal.to_vec(), &map, target_h, target_w)?;
        let stem = format!("{i:04}-{}", file_stem(&map.id));
        write_with(&out.join(format!("{stem}.pgm")), |w| {
            write_pgm(w, &result.upsampled, result.min, result.max)
        })?;
        write_with(&out.join(format!("{stem}.csv")), |w| write_grid_csv(w, &result.raw))?;
        writeln!(
            summary,
            "{},{stem},{},{},{}",
            map.id,
            result.min,
            result.max,
            result.zero_cells.len()
        )
        .expect("string write");
    }
    write_text(&out.join("heatmaps.csv"), &summary)?;
    Ok(format!("maps={}\nk={k}\nsize={target_h}x{target_w}\n", maps.len()))
}
