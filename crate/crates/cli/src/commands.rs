use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advseg::adversarial::Example;
use advseg::bench::{self, BenchConfig, RUNTIME_BUDGET};
use advseg::checkpoint::Checkpoint;
use advseg::config::RunConfig;
use advseg::dataset::{Dataset, Split};
use advseg::eval::{binarize, correctness, dice, mcnemar};
use advseg::model::Model;
use advseg::selftest::{self, Options};
use advseg::synth::{min_max_scale, Sample};
use advseg::train::{self, EvalPlan, TrainState};
use advseg::{pgm, Error, Tensor};

use crate::output::{self, EVAL_METRICS_HEADER, PER_SAMPLE_HEADER, TRAIN_METRICS_HEADER};
use crate::{BenchArgs, ConfigArgs, EvalArgs, Failure, GenerateArgs, InferArgs, SelftestArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

pub const CHECKPOINT_FILE: &str = "checkpoint.afcr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";
pub const MCNEMAR_FILE: &str = "mcnemar.json";
pub const BENCH_FILE: &str = "bench.json";

fn base_config(c: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.paths.out.clone().ok_or_else(|| Failure::Usage("an output directory is required (--out)".into()))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn claim_dir(dir: &Path, force: bool) -> CmdResult {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::from)?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Data(format!("{} exists and is not empty (use --force to overwrite)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> CmdResult {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    let mut cfg = base_config(&a.common)?;
    if let Some(n) = a.count {
        cfg.data.count = n as usize;
    }
    if let Some(f) = a.train_fraction {
        cfg.train_fraction = f;
    }
    let cfg = cfg.resolve()?;
    let dir = out_dir(&cfg)?;
    let ds = Dataset::write(&dir, &cfg.data, cfg.train_fraction, a.common.force)?;
    cfg.write_resolved(&dir)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        m.count,
        m.splits[&Split::Train].len(),
        m.splits[&Split::Test].len(),
        dir.display()
    );
    println!("checksum {}", m.checksum);
    Ok(())
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset, Failure> {
    Ok(match &cfg.paths.dataset {
        Some(dir) => Dataset::load(dir)?,
        None => Dataset::generate(&cfg.data, cfg.train_fraction)?,
    })
}

fn split_samples(ds: &Dataset, split: Split) -> Result<Vec<Sample>, Failure> {
    ds.split(split).map_err(|e| Failure::Usage(e.to_string()))
}

fn train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = base_config(&a.common)?;
    let t = &mut cfg.training;
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(x) = a.epsilon {
        t.epsilon = x;
    }
    if let Some(x) = a.lambda {
        t.lambda = x;
    }
    if let Some(x) = a.lr {
        t.learning_rate = x;
    }
    if let Some(x) = a.epochs {
        t.epochs = x;
    }
    if let Some(x) = a.batch_size {
        t.batch_size = x;
    }
    if let Some(x) = a.crf_steps_train {
        cfg.crf.steps_train = x;
    }
    if let Some(x) = a.crf_steps_test {
        cfg.crf.steps_test = x;
    }
    if let Some(x) = a.eval_every {
        cfg.eval_every = x;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    Ok(cfg.resolve()?)
}

/// Rows of an earlier metrics file up to and including `epoch`.
fn kept_rows(path: &Path, epoch: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect()
}

pub fn train(a: TrainArgs) -> CmdResult {
    let (cfg, resumed) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.config.clone();
            if let Some(e) = a.epochs {
                cfg.training.epochs = e;
            }
            if let Some(d) = &a.dataset {
                cfg.paths.dataset = Some(d.clone());
            }
            if let Some(o) = &a.common.out {
                cfg.paths.out = Some(o.clone());
            }
            cfg.validate()?;
            (cfg, Some(ck))
        }
        None => (train_config(&a)?, None),
    };
    let mut cfg = cfg;
    let ds = load_or_generate(&cfg)?;
    if cfg.paths.dataset.is_some() {
        cfg.data = ds.manifest.spec.clone();
        cfg.train_fraction = ds.manifest.train_fraction;
    }
    if let Some(ck) = &resumed {
        if ck.dataset_checksum != ds.checksum() {
            return Err(Failure::Data("dataset checksum differs from the one the checkpoint was trained on".into()));
        }
    }
    if ds.manifest.spec.size != cfg.image_size() {
        return Err(Failure::Data(format!(
            "dataset images are {0}x{0} but the architectures expect {1}x{1}",
            ds.manifest.spec.size,
            cfg.image_size()
        )));
    }

    let dir = out_dir(&cfg)?;
    claim_dir(&dir, a.common.force || resumed.is_some())?;
    let data = train::prepare(&split_samples(&ds, Split::Train)?, &split_samples(&ds, Split::Test)?, cfg.augment)?;
    let model = Model::with_configs(cfg.training.variant, cfg.fcn_configs(), data.prior.clone(), cfg.crf)?;
    let mut state = match resumed {
        Some(ck) => {
            if ck.norm != data.norm || ck.prior != data.prior {
                return Err(Failure::Data("preprocessing statistics differ from the checkpoint's".into()));
            }
            ck.state
        }
        None => TrainState::new(model.init_params(cfg.training.seed)?),
    };
    cfg.write_resolved(&dir)?;

    let t = &cfg.training;
    eprintln!(
        "variant={} lr={} lambda={} epsilon={} batch={} epochs={} crf_steps={}/{} train_images={} test_images={} seed={}",
        t.variant,
        t.learning_rate,
        t.lambda,
        t.effective_epsilon(),
        t.batch_size,
        t.epochs,
        cfg.crf.steps_train,
        cfg.crf.steps_test,
        data.train.len(),
        data.test.len(),
        t.seed
    );

    let metrics_path = dir.join(METRICS_FILE);
    let earlier = kept_rows(&metrics_path, state.epoch);
    let mut csv = BufWriter::new(fs::File::create(&metrics_path).map_err(Error::from)?);
    let io = |e: std::io::Error| Failure::from(Error::from(e));
    writeln!(csv, "{TRAIN_METRICS_HEADER}").map_err(io)?;
    for r in &earlier {
        writeln!(csv, "{r}").map_err(io)?;
    }
    csv.flush().map_err(io)?;

    let checkpoint = |state: &TrainState| Checkpoint {
        variant: t.variant,
        architectures: model.configs.clone(),
        config: cfg.clone(),
        dataset_checksum: ds.checksum().to_string(),
        state: state.clone(),
        norm: data.norm.clone(),
        prior: data.prior.clone(),
    };
    let plan = EvalPlan { every: cfg.eval_every, train: true, test: true };
    let name = t.variant.name();
    let outcome = train::train(&model, t, &mut state, &data.train, &data.test, plan, |r, _| {
        for row in output::epoch_rows(name, r) {
            writeln!(csv, "{row}")?;
        }
        csv.flush()?;
        let dice = |m: &Option<train::SplitMetrics>| m.as_ref().map_or("-".to_string(), |m| format!("{:.4}", m.dice));
        println!("epoch {}/{} loss {:.6} train_dice {} test_dice {}", r.epoch, t.epochs, r.loss, dice(&r.train), dice(&r.test));
        Ok(())
    });
    let ck_path = dir.join(CHECKPOINT_FILE);
    checkpoint(&state).save(&ck_path)?;
    match outcome {
        Ok(_) => {
            println!("checkpoint {}", ck_path.display());
            Ok(())
        }
        Err(e @ Error::Numerical(_)) => {
            eprintln!("saved last good state (epoch {}, step {}) to {}", state.epoch, state.step, ck_path.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(path: &Path, steps_test: Option<usize>) -> Result<(Checkpoint, Model), Failure> {
    let mut ck = Checkpoint::load(path)?;
    if let Some(s) = steps_test {
        ck.config.crf.steps_test = s;
        ck.config.crf.validate()?;
    }
    let model = ck.model()?;
    Ok((ck, model))
}

pub fn infer(a: InferArgs) -> CmdResult {
    let (ck, model) = load_model(&a.checkpoint, a.crf_steps_test)?;
    let img = pgm::read(&a.image)?;
    let (h, w) = img.hw()?;
    let s = model.image_size();
    if (h, w) != (s, s) {
        return Err(Failure::Data(format!("image is {h}x{w} but the checkpoint expects {s}x{s}")));
    }
    let intensity = min_max_scale(&img.reshape(&[1, s, s])?);
    let input = ck.norm.apply(&intensity)?;
    let pred = binarize(&model.predict(&ck.state.params, &input, &intensity)?)?;

    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = a.out.join(format!("{stem}_mask.pgm"));
    let overlay_path = a.out.join(format!("{stem}_overlay.pgm"));
    pgm::write_mask(&mask_path, &pred)?;
    pgm::write(&overlay_path, &output::overlay(&intensity, &pred)?)?;
    println!("mask {}", mask_path.display());
    println!("overlay {}", overlay_path.display());
    if let Some(m) = &a.mask {
        let truth = pgm::read_mask(m)?;
        println!("dice {}", dice(&pred, &truth)?);
    }
    Ok(())
}

fn predictions(model: &Model, ck: &Checkpoint, samples: &[Sample]) -> Result<(advseg::eval::MetricsReport, Vec<Tensor>), Failure> {
    let examples: Vec<Example> = samples.iter().map(|s| Example::prepare(s, &ck.norm)).collect::<Result<_, _>>()?;
    Ok(train::evaluate(model, &ck.state.params, &examples)?)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ds = Dataset::load(&a.dataset)?;
    let indices = ds.split_indices(a.split).map_err(|e| Failure::Usage(e.to_string()))?.to_vec();
    if indices.is_empty() {
        return Err(Failure::Usage(format!("split '{}' has no samples", a.split)));
    }
    let samples = split_samples(&ds, a.split)?;
    let (ck, model) = load_model(&a.checkpoint, a.crf_steps_test)?;
    if ck.dataset_checksum != ds.checksum() {
        eprintln!("note: evaluating on a dataset other than the training one");
    }
    claim_dir(&a.out, a.force)?;
    let split = a.split.to_string();

    let mut rows = Vec::new();
    let mut sample_rows = Vec::new();
    let (report, preds) = predictions(&model, &ck, &samples)?;
    let name = ck.variant.name();
    rows.extend(output::eval_rows(name, &split, &report));
    sample_rows.extend(output::per_sample_rows(name, &split, &indices, &report));
    println!("{name} {split} dice {:.6} (pooled over {} images)", report.dice(), samples.len());

    if let Some(path_b) = &a.checkpoint_b {
        let (ck_b, model_b) = load_model(path_b, a.crf_steps_test)?;
        let (report_b, preds_b) = predictions(&model_b, &ck_b, &samples)?;
        let name_b = ck_b.variant.name();
        rows.extend(output::eval_rows(name_b, &split, &report_b));
        sample_rows.extend(output::per_sample_rows(name_b, &split, &indices, &report_b));
        println!("{name_b} {split} dice {:.6}", report_b.dice());

        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        for ((pa, pb), s) in preds.iter().zip(&preds_b).zip(&samples) {
            ca.extend(correctness(pa, &s.mask)?);
            cb.extend(correctness(pb, &s.mask)?);
        }
        let test = mcnemar(&ca, &cb)?;
        let doc = serde_json::json!({
            "model_a": name,
            "model_b": name_b,
            "split": split,
            "pixels": ca.len(),
            "b": test.b,
            "c": test.c,
            "chi2": test.chi2,
            "p_value": test.p_value,
        });
        write_json(&a.out.join(MCNEMAR_FILE), &doc)?;
        println!("mcnemar b={} c={} chi2={:.6} p={:.6}", test.b, test.c, test.chi2, test.p_value);
    }
    write_lines(&a.out.join(METRICS_FILE), EVAL_METRICS_HEADER, &rows)?;
    write_lines(&a.out.join(PER_SAMPLE_FILE), PER_SAMPLE_HEADER, &sample_rows)?;
    ck.config.write_resolved(&a.out)?;
    Ok(())
}

fn write_json(path: &Path, doc: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(doc).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

pub fn selftest(a: SelftestArgs) -> CmdResult {
    let report = selftest::run(Options { seed: a.seed, corrupt_gradients: false })?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numerical("self-test failed".into()))
    }
}

pub fn bench(a: BenchArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<BenchConfig>(&text).map_err(|e| Failure::Usage(format!("invalid bench config: {e}")))?
        }
        None => BenchConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(n) = a.train_images {
        cfg.train_images = n;
    }
    if let Some(n) = a.test_images {
        cfg.test_images = n;
    }
    cfg.data.count = cfg.data.count.max(cfg.train_images + cfg.test_images);
    if let Some(v) = a.variants {
        cfg.variants = v;
    }
    if let Some(e) = a.epsilon {
        cfg.training.epsilon = e;
    }
    cfg.validate()?;
    let data = cfg.prepare()?;
    let proj = bench::project(&cfg, &data, a.timing_batches, 2)?;
    for c in &proj.costs {
        println!(
            "{:<18} {:>8.3} s/batch {:>8.3} s/prediction {:>10.0} s/run",
            c.variant.name(),
            c.batch_seconds,
            c.predict_seconds,
            c.run_seconds
        );
    }
    println!(
        "projected total {:.0} s over {} seeds (budget {:.0} s): {}",
        proj.total_seconds,
        proj.seeds,
        RUNTIME_BUDGET,
        if proj.within(RUNTIME_BUDGET) { "within" } else { "over" }
    );
    let mut doc = serde_json::json!({ "config": cfg, "projection": proj });
    if !a.project_only {
        let results = bench::run(&cfg, &data, |r| {
            println!("{:<18} seed {} test dice {:.4} ({:.0} s)", r.variant.name(), r.seed, r.test.dice, r.seconds)
        })?;
        let summaries = bench::summarize(&results);
        for s in &summaries {
            println!("{:<18} mean test dice {:.4} over {} runs", s.variant.name(), s.dice, s.runs);
        }
        let ordering = bench::dice_ordering(&summaries);
        let trend = bench::trimap_trend(&summaries);
        println!("dice ordering: {}", ordering.map_or("n/a", |ok| if ok { "holds" } else { "violated" }));
        for p in &trend {
            println!("trimap w{} {} - {}: {:+.4}", p.width, p.adversarial.name(), p.adversarial.clean().name(), p.delta);
        }
        doc["results"] = serde_json::json!(results);
        doc["summaries"] = serde_json::json!(summaries);
        doc["dice_ordering"] = serde_json::json!(ordering);
        doc["trimap_trend"] = serde_json::json!(trend);
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        write_json(&dir.join(BENCH_FILE), &doc)?;
    }
    Ok(())
}
