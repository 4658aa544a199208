use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use request_harness::backend::{Backend, ResponseCache};
use request_harness::config::HarnessConfig;
use request_harness::dataset::{load_dataset, Dataset, ImportOptions, SourceFormat};
use request_harness::enumeration::{
    count_perrr_equal, enumerate_histogram, histogram_csv, EnumerationSpec,
};
use request_harness::labels::{predictions_from_sequence, GoldStandard, LabelSpace, TaskKind};
use request_harness::pipeline::{
    compute_matrix, elicit_or_load, epoch_clock, load_algorithm, matrix_file_name, run_matrix_job,
    run_robustness as execute_robustness, run_task_prompt, system_clock, Clock, ElicitOptions,
    EvaluationRun, MatrixJob, MatrixResult, MatrixSide, PipelineError, RunConfig,
};
use request_harness::prompt::RegimeBundle;
use request_harness::report::{
    aggregate_summary, find_baseline, render_table, BaselineEntry, ReportError, ReportFormat,
};

use crate::{ConfigArgs, Failure, ImportArgs, RunArgs};

type CmdResult = Result<(), Failure>;

/// Loaded configuration plus the shared response cache.
struct Ctx {
    cfg: HarnessConfig,
    library: BTreeMap<String, RegimeBundle>,
    offline: bool,
    cache: Option<Arc<ResponseCache>>,
    clock: Arc<dyn Clock>,
}

/// Timestamps come from `SOURCE_DATE_EPOCH` when set, so artifacts can be
/// reproduced byte for byte.
fn clock_from_env() -> Result<Arc<dyn Clock>, Failure> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Err(_) => Ok(system_clock()),
        Ok(v) => v
            .trim()
            .parse::<i64>()
            .ok()
            .and_then(epoch_clock)
            .ok_or_else(|| {
                Failure::config(anyhow!("SOURCE_DATE_EPOCH `{v}` is not a Unix timestamp"))
            }),
    }
}

impl Ctx {
    fn load(args: &ConfigArgs) -> Result<Self, Failure> {
        let mut cfg = HarnessConfig::load(&args.config).map_err(Failure::config)?;
        if let Some(run_set) = &args.run_set {
            cfg.run_set = run_set.clone();
        }
        if let Some(n) = args.concurrency {
            cfg.concurrency = n;
        }
        cfg.check().map_err(Failure::config)?;
        let library = cfg.prompt_library().map_err(Failure::config)?;
        Ok(Self {
            cfg,
            library,
            offline: args.offline,
            cache: None,
            clock: clock_from_env()?,
        })
    }

    fn cache(&mut self) -> Result<Arc<ResponseCache>, Failure> {
        if self.cache.is_none() {
            let dir = self.cfg.cache_path();
            let cache = ResponseCache::open(&dir)
                .with_context(|| format!("opening response cache in {}", dir.display()))
                .map_err(Failure::Job)?;
            self.cache = Some(Arc::new(cache));
        }
        Ok(self.cache.clone().expect("opened above"))
    }

    fn backend(&mut self, name: &str) -> Result<Backend, Failure> {
        let cache = self.cache()?;
        self.cfg
            .build_backend(name, Some(cache), self.offline)
            .map_err(Failure::config)
    }

    fn dataset(&self, task: &str) -> Result<Dataset, Failure> {
        self.cfg.load_dataset(task).map_err(Failure::config)
    }

    fn bundle(&self, task: &str, backend: &str) -> Result<&RegimeBundle, Failure> {
        self.cfg
            .bundle_for(&self.library, task, backend)
            .map_err(Failure::config)
    }

    fn run_config(
        &self,
        task: &str,
        backend: &str,
        run_id: &str,
        stop_after: Option<usize>,
    ) -> Result<RunConfig, Failure> {
        let mut rc = RunConfig::new(run_id)
            .in_dir(self.cfg.task_dir(task).join(run_id))
            .with_concurrency(self.cfg.concurrency)
            .stop_after(stop_after)
            .with_clock(self.clock.clone());
        rc.decoding = self.cfg.decoding();
        rc.extra = self
            .cfg
            .backend_config(backend)
            .map_err(Failure::config)?
            .extra
            .clone();
        Ok(rc)
    }

    fn tag(&self, backend: &str) -> Result<String, Failure> {
        Ok(self
            .cfg
            .backend_config(backend)
            .map_err(Failure::config)?
            .tag())
    }

    fn algorithm_path(&self, task: &str, backend: &str) -> PathBuf {
        self.cfg
            .task_dir(task)
            .join("algorithms")
            .join(format!("{backend}.json"))
    }

    fn baselines(&self) -> Result<Vec<BaselineEntry>, Failure> {
        self.cfg.baseline_entries().map_err(Failure::config)
    }
}

fn job_error(e: PipelineError) -> Failure {
    Failure::job(e)
}

fn print_run(run: &EvaluationRun, backend: &Backend) {
    let excluding = match (run.blocked_count, run.macro_f1_excluding_blocked) {
        (0, _) => String::new(),
        (_, Some(v)) => format!(" (without blocked: {v:.4})"),
        (_, None) => " (every datapoint blocked)".into(),
    };
    println!(
        "{}: Macro-F1 {:.4}{excluding} over {} datapoints; anomalies {}, blocked {}",
        run.manifest.run_id,
        run.macro_f1.macro_f1,
        run.outcomes.len(),
        run.anomaly_count,
        run.blocked_count,
    );
    eprintln!(
        "provider calls: {} {}",
        backend.name(),
        backend.provider_calls()
    );
}

/// A deliberately interrupted run is a success; the directory stays resumable.
fn finish_run(
    result: Result<EvaluationRun, PipelineError>,
    backend: &Backend,
    stop_after: Option<usize>,
) -> CmdResult {
    match result {
        Ok(run) => {
            print_run(&run, backend);
            Ok(())
        }
        Err(PipelineError::Interrupted { completed, total }) if stop_after.is_some() => {
            println!(
                "stopped after {completed} of {total} datapoints; rerun the same command to resume"
            );
            Ok(())
        }
        Err(e) => Err(job_error(e)),
    }
}

pub fn import(args: ImportArgs) -> CmdResult {
    let format: SourceFormat = args
        .format
        .parse()
        .map_err(|e: String| Failure::config(anyhow!(e)))?;
    let mut opts = ImportOptions {
        task_id: args.task_id,
        catalog: args.catalog,
        labels: args.labels,
        tickers: args.tickers,
        limit: args.limit,
        ..ImportOptions::default()
    };
    if let Some(n) = args.min_mentions {
        opts.min_mentions = n;
    }
    let ds = load_dataset(&args.input, format, &opts).map_err(Failure::job)?;
    ds.save(&args.out).map_err(Failure::job)?;
    println!(
        "imported {} records of `{}` ({} labels) into {} (digest {})",
        ds.len(),
        ds.task_id(),
        ds.space().len(),
        args.out.display(),
        ds.digest()
    );
    Ok(())
}

pub fn run_task(args: RunArgs) -> CmdResult {
    let mut ctx = Ctx::load(&args.cfg)?;
    let ds = ctx.dataset(&args.task)?;
    let backend = ctx.backend(&args.backend)?;
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("task__{}", args.backend));
    let rc = ctx.run_config(&args.task, &args.backend, &run_id, args.stop_after)?;
    let bundle = ctx.bundle(&args.task, &args.backend)?;
    finish_run(
        run_task_prompt(&ds, bundle, &backend, &rc),
        &backend,
        args.stop_after,
    )
}

pub fn elicit(args: ConfigArgs, backend_name: &str, task: &str) -> CmdResult {
    let mut ctx = Ctx::load(&args)?;
    let ds = ctx.dataset(task)?;
    let backend = ctx.backend(backend_name)?;
    let opts = ElicitOptions {
        examples: ctx.cfg.examples,
        decoding: ctx.cfg.decoding(),
        extra: ctx
            .cfg
            .backend_config(backend_name)
            .map_err(Failure::config)?
            .extra
            .clone(),
        clock: ctx.clock.clone(),
    };
    let path = ctx.algorithm_path(task, backend_name);
    let algo = elicit_or_load(&path, &ds, ctx.bundle(task, backend_name)?, &backend, &opts)
        .map_err(job_error)?;
    println!(
        "algorithm {} from {} at {}",
        algo.id,
        algo.source_model,
        path.display()
    );
    println!("{}", algo.text);
    Ok(())
}

pub fn run_robustness(args: RunArgs, algorithm_from: Option<String>) -> CmdResult {
    let mut ctx = Ctx::load(&args.cfg)?;
    let source = algorithm_from.unwrap_or_else(|| args.backend.clone());
    ctx.cfg.backend_config(&source).map_err(Failure::config)?;
    let path = ctx.algorithm_path(&args.task, &source);
    if !path.exists() {
        return Err(Failure::job(anyhow!(
            "no algorithm from `{source}` for `{}`; run `elicit` first",
            args.task
        )));
    }
    let algo = load_algorithm(&path).map_err(job_error)?;
    let ds = ctx.dataset(&args.task)?;
    let backend = ctx.backend(&args.backend)?;
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("robust__{source}__on__{}", args.backend));
    let rc = ctx.run_config(&args.task, &args.backend, &run_id, args.stop_after)?;
    let bundle = ctx.bundle(&args.task, &args.backend)?;
    finish_run(
        execute_robustness(&ds, bundle, &algo, &backend, &rc),
        &backend,
        args.stop_after,
    )
}

/// Writes `report__<ref>__<other>.{md,csv}` next to the matrix and returns
/// the Markdown table.
fn write_tables(
    dir: &Path,
    reference: &str,
    other: &str,
    m: &MatrixResult,
    baselines: &[BaselineEntry],
) -> Result<String, ReportError> {
    let baseline = find_baseline(baselines, &m.task_id)?;
    let md = render_table(m, baseline, ReportFormat::Markdown)?;
    let csv = render_table(m, baseline, ReportFormat::Csv)?;
    let stem = format!("report__{reference}__{other}");
    for (ext, text) in [("md", &md), ("csv", &csv)] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, text).map_err(|source| ReportError::Io { path, source })?;
    }
    Ok(md)
}

fn matrix_side<'a>(
    ctx: &'a Ctx,
    task: &str,
    name: &str,
    backend: &'a Backend,
) -> Result<MatrixSide<'a>, Failure> {
    Ok(MatrixSide {
        backend,
        bundle: ctx.bundle(task, name)?,
        tag: ctx.tag(name)?,
        extra: ctx
            .cfg
            .backend_config(name)
            .map_err(Failure::config)?
            .extra
            .clone(),
    })
}

pub fn matrix(args: ConfigArgs, backends: &[String], tasks: &[String]) -> CmdResult {
    let mut ctx = Ctx::load(&args)?;
    let jobs: Vec<([String; 2], String)> = if backends.is_empty() {
        ctx.cfg
            .matrix
            .iter()
            .filter(|m| tasks.is_empty() || tasks.contains(&m.task))
            .map(|m| (m.pair.clone(), m.task.clone()))
            .collect()
    } else {
        let [a, b] = backends else {
            return Err(Failure::config(anyhow!(
                "--backend must be given exactly twice"
            )));
        };
        if a == b {
            return Err(Failure::config(anyhow!("the two backends must differ")));
        }
        let tasks: Vec<String> = if tasks.is_empty() {
            ctx.cfg.tasks.iter().map(|t| t.name.clone()).collect()
        } else {
            tasks.to_vec()
        };
        tasks
            .into_iter()
            .map(|t| ([a.clone(), b.clone()], t))
            .collect()
    };
    if jobs.is_empty() {
        return Err(Failure::config(anyhow!("no matrix jobs selected")));
    }
    let baselines = ctx.baselines()?;
    let mut failures = Vec::new();
    for ([a, b], task) in &jobs {
        let ds = ctx.dataset(task)?;
        let backend_a = ctx.backend(a)?;
        let backend_b = ctx.backend(b)?;
        for (r, o) in [
            ((a, &backend_a), (b, &backend_b)),
            ((b, &backend_b), (a, &backend_a)),
        ] {
            let job = MatrixJob {
                dataset: &ds,
                reference: matrix_side(&ctx, task, r.0, r.1)?,
                other: matrix_side(&ctx, task, o.0, o.1)?,
                root: ctx.cfg.task_dir(task),
                concurrency: ctx.cfg.concurrency,
                decoding: ctx.cfg.decoding(),
                examples: ctx.cfg.examples,
                clock: ctx.clock.clone(),
            };
            match run_matrix_job(&job) {
                Ok(m) => match write_tables(&job.root, r.0, o.0, &m, &baselines) {
                    Ok(md) => println!("{md}"),
                    Err(e) => eprintln!("warning: {task} {} vs {}: no table: {e}", r.0, o.0),
                },
                Err(e) => {
                    eprintln!("error: {task} {} vs {}: {e}", r.0, o.0);
                    failures.push(format!("{task} ({} vs {})", r.0, o.0));
                }
            }
        }
        eprintln!(
            "{task}: provider calls: {} {}, {} {}",
            a,
            backend_a.provider_calls(),
            b,
            backend_b.provider_calls()
        );
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::job(anyhow!(
            "{} matrix job(s) failed: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

pub fn score(args: ConfigArgs, task: &str, reference: &str, other: &str) -> CmdResult {
    let ctx = Ctx::load(&args)?;
    let ds = ctx.dataset(task)?;
    let dir = ctx.cfg.task_dir(task);
    let load = |run_id: String| {
        EvaluationRun::load(&dir.join(&run_id), &ds)
            .with_context(|| format!("loading completed run `{run_id}`"))
            .map_err(Failure::Job)
    };
    let task_run = load(format!("task__{reference}"))?;
    let on_self = load(format!("robust__{reference}__on__{reference}"))?;
    let on_other = load(format!("robust__{reference}__on__{other}"))?;
    let m = compute_matrix(
        &task_run,
        &on_self,
        &on_other,
        &ctx.tag(reference)?,
        &ctx.tag(other)?,
    )
    .map_err(job_error)?;
    m.save(&dir.join(matrix_file_name(reference, other)))
        .map_err(job_error)?;
    let md = write_tables(&dir, reference, other, &m, &ctx.baselines()?).map_err(Failure::job)?;
    println!("{md}");
    Ok(())
}

pub fn analyze(
    gold: &[String],
    binary: bool,
    classes: Option<Vec<String>>,
    reference: Option<Vec<String>>,
    out: Option<PathBuf>,
) -> CmdResult {
    let space = match (binary, classes) {
        (true, _) => LabelSpace::binary("analysis"),
        (false, Some(classes)) => {
            LabelSpace::new("analysis", TaskKind::Multiclass, classes).map_err(Failure::config)?
        }
        (false, None) => return Err(Failure::config(anyhow!("pass --binary or --classes"))),
    };
    let gold = GoldStandard::from_sequence(space, gold).map_err(Failure::config)?;
    let spec = EnumerationSpec::new(gold).map_err(Failure::config)?;
    let histogram = enumerate_histogram(&spec);
    let csv = histogram_csv(&histogram);
    match &out {
        Some(path) => fs::write(path, &csv)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Job)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "{} prediction sets, {} distinct Macro-F1 values",
        histogram.total(),
        histogram.len()
    );
    if let Some(reference) = reference {
        if reference.len() != spec.gold().len() {
            return Err(Failure::config(anyhow!(
                "--reference has {} labels, --gold has {}",
                reference.len(),
                spec.gold().len()
            )));
        }
        let count = count_perrr_equal(&spec, &predictions_from_sequence(&reference))
            .map_err(Failure::config)?;
        eprintln!(
            "reference Macro-F1 {:.9}; prediction sets at PerRR 100 against it: {} including the reference, {} excluding it",
            count.reference_f1, count.inclusive, count.exclusive
        );
    }
    Ok(())
}

fn matrix_files(run_set: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if !run_set.exists() {
        return Ok(files);
    }
    for task in fs::read_dir(run_set).with_context(|| format!("listing {}", run_set.display()))? {
        let task = task?.path();
        if !task.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&task)? {
            let path = entry?.path();
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if name.starts_with("matrix__") && name.ends_with(".json") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

pub fn report(args: ConfigArgs, format: &str) -> CmdResult {
    let format: ReportFormat = format
        .parse()
        .map_err(|e: String| Failure::config(anyhow!(e)))?;
    let ctx = Ctx::load(&args)?;
    let baselines = ctx.baselines()?;
    let run_set = ctx.cfg.run_set_dir();
    let files = matrix_files(&run_set).map_err(Failure::Job)?;
    if files.is_empty() {
        return Err(Failure::job(anyhow!(
            "no matrices under {}; run `matrix` first",
            run_set.display()
        )));
    }
    let mut matrices = Vec::new();
    let mut markdown = String::new();
    let mut csv = String::new();
    for path in &files {
        let m = MatrixResult::load(path).map_err(job_error)?;
        let rendered = find_baseline(&baselines, &m.task_id).and_then(|b| {
            Ok((
                render_table(&m, b, ReportFormat::Markdown)?,
                render_table(&m, b, ReportFormat::Csv)?,
            ))
        });
        match rendered {
            Ok((md, c)) => {
                markdown.push_str(&md);
                markdown.push('\n');
                csv.push_str(&c);
                csv.push('\n');
            }
            Err(e) => {
                eprintln!("warning: {}: {e}", path.display());
                markdown.push_str(&format!(
                    "### Reproducibility: {} ({} vs {})\n\nTable omitted: {e}\n\n",
                    m.task_id, m.reference_tag, m.other_tag
                ));
            }
        }
        matrices.push(m);
    }
    let summary = aggregate_summary(&matrices);
    for (name, text) in [("report.md", &markdown), ("perrr_summary.csv", &summary)] {
        let path = run_set.join(name);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Job)?;
    }
    match format {
        ReportFormat::Markdown => print!("{markdown}"),
        ReportFormat::Csv => print!("{csv}"),
    }
    Ok(())
}

pub fn validate_config(args: ConfigArgs) -> CmdResult {
    let ctx = Ctx::load(&args)?;
    let warnings = ctx.cfg.validate().map_err(Failure::config)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if ctx.cfg.backends.is_empty() || ctx.cfg.tasks.is_empty() {
        return Err(Failure::config(anyhow!(
            "config defines no backends or no tasks"
        )));
    }
    println!(
        "config OK: {} backends, {} tasks, {} matrix jobs{}",
        ctx.cfg.backends.len(),
        ctx.cfg.tasks.len(),
        ctx.cfg.matrix.len(),
        if warnings.is_empty() {
            String::new()
        } else {
            format!(", {} warning(s)", warnings.len())
        }
    );
    Ok(())
}
