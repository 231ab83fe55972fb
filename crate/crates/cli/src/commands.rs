//! Command implementations. Machine-readable outputs go to stdout, human
//! notes and per-record reject reports (JSON lines) to stderr. Every command
//! is deterministic given its inputs and seeds.

use crate::config::ExperimentConfig;
use crate::svg::render_angle_histograms;
use cobbkit_core::dataset::DatasetError;
use cobbkit_core::dataset::{
    domain_batch, make_batches, record_input, scan, split, synth_generate, InputKind, Record,
    Reject,
};
use cobbkit_core::geometry::{
    cobb_angles, ensemble_mean, format_triple_fixed, parse_landmarks, rasterize_mask,
    read_angle_file, read_predictions, threshold_small_angles, write_predictions, CobbTriple,
    GeometryError, LandmarkLayout,
};
use cobbkit_core::imaging::{mask_to_image, write_pgm, ImageError};
use cobbkit_core::metrics::{smape_named, EvalReport, MetricsError};
use cobbkit_core::neural::{
    gradient_check, load_checkpoint, save_checkpoint, train_epoch, CheckLoss, CheckpointInput,
    LayerSpec, Network, NeuralError,
};
use cobbkit_core::rng::Rng;
use cobbkit_core::tensor::{Shape2D, Tensor};
use std::path::{Path, PathBuf};

/// Exit codes: 2 usage/configuration, 3 data, 4 numeric failure.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: 4,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"error": self.message, "code": self.code}).to_string()
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match &e {
            NeuralError::Numeric { .. } => CliError::numeric(e.to_string()),
            NeuralError::Io(_) | NeuralError::Checkpoint(_) => CliError::data(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Neural(inner) => inner.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match &e {
            MetricsError::DegenerateDenominator { .. } => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

/// Parse a `HxW` geometry argument, e.g. `256x128`.
pub fn parse_size(text: &str) -> Result<Shape2D, CliError> {
    let parts: Vec<&str> = text.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(CliError::usage(format!(
            "size must be HxW (e.g. 256x128), got '{text}'"
        )));
    }
    let h: usize = parts[0]
        .parse()
        .map_err(|_| CliError::usage(format!("bad height '{}'", parts[0])))?;
    let w: usize = parts[1]
        .parse()
        .map_err(|_| CliError::usage(format!("bad width '{}'", parts[1])))?;
    if h == 0 || w == 0 {
        return Err(CliError::usage("size dimensions must be >= 1"));
    }
    Ok(Shape2D::new(h, w))
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn emit_rejects(rejects: &[Reject]) {
    for r in rejects {
        eprintln!("{}", r.to_json_line());
    }
}

// ---------------------------------------------------------------------------
// cobb / rasterize / synth
// ---------------------------------------------------------------------------

pub struct LandmarkReadOptions {
    pub layout: LandmarkLayout,
    pub normalized: bool,
    pub size: Option<Shape2D>,
}

fn load_landmark_file(
    path: &Path,
    opts: &LandmarkReadOptions,
) -> Result<cobbkit_core::geometry::LandmarkSet, CliError> {
    if opts.normalized && opts.size.is_none() {
        return Err(CliError::usage(
            "--normalized needs --size HxW to scale coordinates back to pixels",
        ));
    }
    let text = read_to_string(path)?;
    let shape = opts.size.unwrap_or(Shape2D::new(1, 1));
    let lm = parse_landmarks(&text, opts.layout, opts.normalized, shape)?;
    for warning in lm.monotonicity_warnings() {
        eprintln!("warning: {}: {warning}", path.display());
    }
    Ok(lm)
}

pub fn cmd_cobb(files: &[PathBuf], opts: &LandmarkReadOptions) -> Result<(), CliError> {
    for path in files {
        let lm = load_landmark_file(path, opts)?;
        let (triple, _) = cobb_angles(&lm)?;
        println!("{}", format_triple_fixed(&triple));
    }
    Ok(())
}

pub fn cmd_rasterize(
    landmarks: &Path,
    size: Shape2D,
    out: &Path,
    opts: &LandmarkReadOptions,
) -> Result<(), CliError> {
    let lm = load_landmark_file(landmarks, opts)?;
    if lm.out_of_bounds(size) {
        eprintln!(
            "warning: {}: landmarks outside {}x{} are clamped onto the grid",
            landmarks.display(),
            size.height,
            size.width
        );
    }
    let mask = rasterize_mask(&lm, size);
    let bytes = write_pgm(&mask_to_image(&mask))?;
    std::fs::write(out, bytes)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

pub fn cmd_synth(n: usize, seed: u64, size: Shape2D, outdir: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::usage("--n must be >= 1"));
    }
    let records = synth_generate(n, seed, size, outdir)?;
    eprintln!(
        "wrote {} records under {} ({}x{})",
        records.len(),
        outdir.display(),
        size.height,
        size.width
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn output_to_triple(row: &[f64]) -> CobbTriple {
    let clamp = |v: f64| (v * 90.0).clamp(0.0, 90.0);
    CobbTriple::new(clamp(row[0]), clamp(row[1]), clamp(row[2])).expect("clamped angles are valid")
}

type PredictionRows = Vec<(String, CobbTriple)>;

/// Batched inference over records. Per-record assembly failures are
/// reported as rejects, not command failures.
fn predict_records(
    net: &Network,
    records: &[Record],
    kind: InputKind,
    size: Shape2D,
    batch_size: usize,
) -> Result<(PredictionRows, Vec<Reject>), CliError> {
    let mut rows: Vec<(String, Tensor)> = Vec::new();
    let mut rejects = Vec::new();
    for record in records {
        match record_input(record, kind, size, None) {
            Ok(input) => rows.push((record.id.clone(), input)),
            Err(e) => rejects.push(Reject {
                id: record.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let sample_len = kind.channels() * size.pixels();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * sample_len);
        for (_, input) in chunk {
            data.extend_from_slice(input.data());
        }
        let inputs = Tensor::new(
            &[chunk.len(), kind.channels(), size.height, size.width],
            data,
        )
        .expect("assembled inference batch");
        let outputs = net.forward_eval(&inputs).map_err(CliError::from)?;
        for (row, (id, _)) in chunk.iter().enumerate() {
            let base = row * 3;
            out.push((
                id.clone(),
                output_to_triple(&outputs.data()[base..base + 3]),
            ));
        }
    }
    Ok((out, rejects))
}

fn validation_smape(
    net: &Network,
    records: &[Record],
    kind: InputKind,
    size: Shape2D,
    batch_size: usize,
) -> Result<Option<f64>, CliError> {
    if records.is_empty() {
        return Ok(None);
    }
    let (preds, _) = predict_records(net, records, kind, size, batch_size)?;
    let mut pred_triples = Vec::with_capacity(preds.len());
    let mut gt_triples = Vec::with_capacity(preds.len());
    let mut ids = Vec::with_capacity(preds.len());
    for (id, p) in &preds {
        let record = records
            .iter()
            .find(|r| &r.id == id)
            .expect("prediction id came from records");
        if let Some(gt) = record.angles {
            pred_triples.push(*p);
            gt_triples.push(gt);
            ids.push(id.clone());
        }
    }
    if pred_triples.is_empty() {
        return Ok(None);
    }
    Ok(Some(smape_named(&pred_triples, &gt_triples, Some(&ids))?))
}

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path).map_err(CliError::usage)?;
    let kind = cfg.input.kind;
    let size = cfg.size();

    let outcome = scan(&cfg.data_dir, true)?;
    emit_rejects(&outcome.rejects);
    if outcome.records.is_empty() {
        return Err(CliError::data(format!(
            "no usable records under {}",
            cfg.data_dir.display()
        )));
    }
    let train_count = cfg.train_count.unwrap_or(outcome.records.len());
    let (train_records, val_records) = split(&outcome.records, train_count, cfg.seed)?;
    if train_records.is_empty() {
        return Err(CliError::data("training split is empty"));
    }

    let unlabeled_records = match (&cfg.unlabeled_dir, cfg.lambda > 0.0) {
        (Some(dir), true) => {
            let pool = scan(dir, false)?;
            emit_rejects(&pool.rejects);
            if pool.records.is_empty() {
                return Err(CliError::data(format!(
                    "unlabeled pool {} is empty",
                    dir.display()
                )));
            }
            pool.records
        }
        _ => Vec::new(),
    };

    let mut net = cfg.build_network()?;
    let mut optim = cfg.optim_state(&net);
    let augment = cfg.train_augment();

    let mut log = String::new();
    for epoch in 0..cfg.epochs {
        let lr = optim.lr_at_epoch(epoch);
        let epoch_batches = make_batches(
            &train_records,
            kind,
            size,
            cfg.batch_size,
            augment.as_ref(),
            cfg.seed,
            epoch as u64,
        )?;
        if epoch == 0 {
            emit_rejects(&epoch_batches.rejects);
        }
        let mut batches = epoch_batches.batches;
        if batches.is_empty() {
            return Err(CliError::data(
                "every training record was rejected during batch assembly",
            ));
        }

        if !unlabeled_records.is_empty() {
            // Cycle the unlabeled pool in a per-epoch shuffled order; each
            // labeled batch is extended with the same number of unlabeled
            // rows (domain label 1).
            let mut order: Vec<usize> = (0..unlabeled_records.len()).collect();
            Rng::from_seed_and_stream(cfg.seed, 0x20_0000 + epoch as u64).shuffle(&mut order);
            let mut cursor = 0usize;
            let mut combined = Vec::with_capacity(batches.len());
            for batch in &batches {
                let mut extra = Vec::with_capacity(batch.size());
                while extra.len() < batch.size() {
                    let record = &unlabeled_records[order[cursor % order.len()]];
                    cursor += 1;
                    let draw = augment
                        .as_ref()
                        .map(|p| (p, ((epoch as u64) << 32) | 0x4000_0000 | cursor as u64));
                    match record_input(record, kind, size, draw) {
                        Ok(input) => extra.push(input),
                        Err(e) => {
                            if epoch == 0 {
                                emit_rejects(&[Reject {
                                    id: record.id.clone(),
                                    reason: e.to_string(),
                                }]);
                            }
                        }
                    }
                    if cursor > order.len() * 4 && extra.is_empty() {
                        return Err(CliError::data("no usable unlabeled records"));
                    }
                }
                combined.push(domain_batch(batch, &extra)?);
            }
            batches = combined;
        }

        let report = train_epoch(&mut net, &batches, &mut optim, lr, cfg.lambda)?;
        let val = validation_smape(&net, &val_records, kind, size, cfg.batch_size)?;
        let line = serde_json::json!({
            "epoch": epoch,
            "lr": lr,
            "train_loss": report.combined,
            "val_smape": val,
        });
        log.push_str(&line.to_string());
        log.push('\n');
        eprintln!(
            "epoch {epoch}: lr {lr:.6}, train loss {:.6}{}",
            report.combined,
            val.map_or(String::new(), |v| format!(", val smape {v:.4}"))
        );
    }

    std::fs::write(&cfg.log_out, &log)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", cfg.log_out.display())))?;
    let input_meta = CheckpointInput {
        kind: kind.as_str().to_string(),
        channels: kind.channels(),
        height: size.height,
        width: size.width,
    };
    save_checkpoint(&cfg.checkpoint_out, &net, &input_meta)?;
    eprintln!(
        "checkpoint {} and log {} written",
        cfg.checkpoint_out.display(),
        cfg.log_out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict / evaluate / ensemble
// ---------------------------------------------------------------------------

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

pub fn cmd_predict(checkpoint: &Path, data_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (net, manifest) = load_checkpoint(checkpoint)?;
    let kind = InputKind::from_str_name(&manifest.input.kind).ok_or_else(|| {
        CliError::data(format!(
            "checkpoint declares unknown input kind '{}'",
            manifest.input.kind
        ))
    })?;
    let size = Shape2D::new(manifest.input.height, manifest.input.width);
    let scanned = scan(data_dir, false)?;
    emit_rejects(&scanned.rejects);
    let (preds, rejects) = predict_records(&net, &scanned.records, kind, size, 8)?;
    emit_rejects(&rejects);
    write_or_print(out, &write_predictions(&preds))
}

fn read_gt(path: &Path, pred_ids: &[String]) -> Result<Vec<(String, CobbTriple)>, CliError> {
    if path.is_dir() {
        // Dataset directory: per-record angle files under angles/.
        let mut out = Vec::with_capacity(pred_ids.len());
        for id in pred_ids {
            let angle_path = path.join("angles").join(format!("{id}.csv"));
            let text = read_to_string(&angle_path)?;
            out.push((id.clone(), read_angle_file(&text)?));
        }
        Ok(out)
    } else {
        Ok(read_predictions(&read_to_string(path)?)?)
    }
}

pub fn cmd_evaluate(predictions: &Path, ground_truth: &Path, json: bool) -> Result<(), CliError> {
    let preds = read_predictions(&read_to_string(predictions)?)?;
    if preds.is_empty() {
        return Err(CliError::data("prediction file has no rows"));
    }
    let ids: Vec<String> = preds.iter().map(|(id, _)| id.clone()).collect();
    let gts = read_gt(ground_truth, &ids)?;

    // Join by id so file order does not matter.
    let mut pred_triples = Vec::with_capacity(preds.len());
    let mut gt_triples = Vec::with_capacity(preds.len());
    for (id, p) in &preds {
        let gt = gts
            .iter()
            .find(|(gid, _)| gid == id)
            .map(|(_, t)| *t)
            .ok_or_else(|| CliError::data(format!("no ground truth for id '{id}'")))?;
        pred_triples.push(*p);
        gt_triples.push(gt);
    }
    // Named SMAPE first so a degenerate image is reported by id.
    smape_named(&pred_triples, &gt_triples, Some(&ids))?;
    let report = EvalReport::from_triples(&pred_triples, &gt_triples)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

pub fn cmd_ensemble(files: &[PathBuf], threshold: f64, out: Option<&Path>) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::usage(
            "ensemble needs at least one prediction file",
        ));
    }
    let mut tables: Vec<Vec<(String, CobbTriple)>> = Vec::with_capacity(files.len());
    for path in files {
        tables.push(read_predictions(&read_to_string(path)?)?);
    }
    let first = &tables[0];
    let mut rows = Vec::with_capacity(first.len());
    for (id, _) in first {
        let mut members = Vec::with_capacity(tables.len());
        for (table, path) in tables.iter().zip(files) {
            let t = table
                .iter()
                .find(|(tid, _)| tid == id)
                .map(|(_, t)| *t)
                .ok_or_else(|| {
                    CliError::data(format!("{} has no row for id '{id}'", path.display()))
                })?;
            members.push(t);
        }
        let mean = ensemble_mean(&members)?;
        rows.push((id.clone(), threshold_small_angles(mean, threshold)));
    }
    write_or_print(out, &write_predictions(&rows))
}

// ---------------------------------------------------------------------------
// gradcheck / plot
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(
    config_path: &Path,
    step: f64,
    tolerance: f64,
    max_params: usize,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path).map_err(CliError::usage)?;
    let net = cfg.build_network()?;
    let specs = cfg.network_specs();
    let loss = match specs.last() {
        Some(LayerSpec::SoftmaxHead) => CheckLoss::CrossEntropy,
        _ => CheckLoss::Mse,
    };
    let size = cfg.size();
    let channels = cfg.input.kind.channels();
    let batch = cfg.batch_size.clamp(2, 4);
    let sample_len = channels * size.pixels();

    // Probe points ranked by distance from ReLU/maxpool kinks. Large
    // activation maps always have some near-kink unit, so instead of
    // demanding a clean point, suspected failures are re-tested at two more
    // probes below: a wrong gradient formula fails everywhere, kink noise
    // does not repeat.
    let draw_probe = |attempt: u64| -> (Tensor, Tensor) {
        let mut rng = Rng::from_seed_and_stream(cfg.seed, 0x6000 + attempt);
        let x = Tensor::new(
            &[batch, channels, size.height, size.width],
            (0..batch * sample_len).map(|_| rng.next_f64()).collect(),
        )
        .expect("probe shape");
        let y = match loss {
            CheckLoss::Mse => Tensor::new(
                &[batch, 3],
                (0..batch * 3).map(|_| rng.next_f64()).collect(),
            )
            .expect("target shape"),
            CheckLoss::CrossEntropy => {
                let classes = 2;
                let mut data = vec![0.0; batch * classes];
                for row in 0..batch {
                    data[row * classes + rng.below(classes as u64) as usize] = 1.0;
                }
                Tensor::new(&[batch, classes], data).expect("target shape")
            }
        };
        (x, y)
    };
    let mut candidates: Vec<(f64, Tensor, Tensor)> = (0..24)
        .map(|i| {
            let (x, y) = draw_probe(i);
            let margin = net.kink_margin(&x).unwrap_or(0.0);
            (margin, x, y)
        })
        .collect();
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite margins"));
    candidates.truncate(3);

    // Subsample very large parameter sets; the sample is seeded and spread
    // uniformly over all scalars.
    let param_lens: Vec<usize> = net.param_tensors().iter().map(|t| t.len()).collect();
    let total: usize = param_lens.iter().sum();
    let subset: Option<Vec<(usize, usize)>> = if max_params > 0 && total > max_params {
        let mut rng = Rng::from_seed_and_stream(cfg.seed, 0x7000);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_params {
            let mut flat = rng.below(total as u64) as usize;
            for (pi, &len) in param_lens.iter().enumerate() {
                if flat < len {
                    picked.insert((pi, flat));
                    break;
                }
                flat -= len;
            }
        }
        Some(picked.into_iter().collect())
    } else {
        None
    };

    let (_, x0, y0) = &candidates[0];
    let first = match &subset {
        Some(list) => {
            cobbkit_core::neural::gradient_check_subset(&net, x0, y0, loss, step, tolerance, list)?
        }
        None => gradient_check(&net, x0, y0, loss, step, tolerance)?,
    };

    // Persistence rule: a parameter only counts as failed if it fails at
    // every probe point.
    let mut persistent = first.failures.clone();
    let mut transient = 0usize;
    for (_, x, y) in candidates.iter().skip(1) {
        if persistent.is_empty() {
            break;
        }
        let names = net.param_names();
        let targets: Vec<(usize, usize)> = persistent
            .iter()
            .map(|f| {
                let pi = names
                    .iter()
                    .position(|n| *n == f.param)
                    .expect("failure names a parameter");
                (pi, f.index)
            })
            .collect();
        let retest = cobbkit_core::neural::gradient_check_subset(
            &net, x, y, loss, step, tolerance, &targets,
        )?;
        let still: Vec<(String, usize)> = retest
            .failures
            .iter()
            .map(|f| (f.param.clone(), f.index))
            .collect();
        let before = persistent.len();
        persistent.retain(|f| still.contains(&(f.param.clone(), f.index)));
        transient += before - persistent.len();
    }

    let report = serde_json::json!({
        "checked": first.checked,
        "total_params": total,
        "tolerance": tolerance,
        "max_rel_err": first.max_rel_err,
        "failures": persistent,
        "transient_kink_failures": transient,
    });
    println!("{report}");
    Ok(())
}

pub fn cmd_plot_angles(angles: &Path, out: &Path) -> Result<(), CliError> {
    let text = read_to_string(angles)?;
    let mut triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match fields.len() {
            3 => triples.push(cobbkit_core::geometry::parse_triple_line(line, idx + 1)?),
            4 => {
                if idx == 0 && fields[0].trim() == "id" {
                    continue;
                }
                let rows = read_predictions(line)?;
                triples.extend(rows.into_iter().map(|(_, t)| t));
            }
            n => {
                return Err(CliError::data(format!(
                    "line {}: expected 3 or 4 comma-separated fields, found {n}",
                    idx + 1
                )))
            }
        }
    }
    if triples.is_empty() {
        return Err(CliError::data("no angle rows to plot"));
    }
    let svg = render_angle_histograms(&triples);
    std::fs::write(out, svg)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}
