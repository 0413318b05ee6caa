//! `attriflow` command line. Every subcommand resolves its configuration as
//! defaults < `--config FILE` < explicit flags, writes the resolved result
//! to `config.json` under `--out`, and can be rerun from that snapshot.

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use attriflow::config::{ModelConfig, NormScope, Task, Variant};
use attriflow::deformation::Model;
use attriflow::geometry::{read_apc, read_xyz, write_apc, PointCloud};
use attriflow::image::Image;
use attriflow::manipulation::{
    capture_codes, capture_partial, collect_codes, default_grid, disentanglement_report, export_sweep, linspace, replay,
    swap_code_sets, sweep_from_codes, CodeSet, CodeStats, SwapSelection,
};
use attriflow::synthgen::{build_dataset, DatasetConfig, DatasetManifest, Split};
use attriflow::training::{
    ablate, code_dim_sweep, evaluate, load_split, train_samples, Checkpoint, Metric, OrthForm, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Global seed fallback when neither a flag nor a config file sets one.
pub const SEED_ENV: &str = "APC_SEED";
pub const SNAPSHOT_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(name = "attriflow", version, about = "Point-cloud reconstruction with controllable attribute codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic dataset tools.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train several variants and seeds on identical budgets and compare.
    Ablate(AblateArgs),
    /// Decode a reconstruction while one code dimension walks a grid.
    Sweep(SweepArgs),
    /// Decode A with selected code components taken from B.
    Swap(SwapArgs),
    /// Correlate attribute codes with the known generating factors.
    Report(ReportArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
enum SynthAction {
    /// Generate shapes, silhouettes and a manifest.
    Build(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Dense ground-truth points per shape.
    #[arg(long)]
    points: Option<usize>,
}

/// Model and optimisation flags shared by `train` and `ablate`.
#[derive(Args, Debug)]
struct TrainFlags {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<Task>)]
    task: Option<Task>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    code_dim: Option<usize>,
    /// Output point count.
    #[arg(long)]
    points: Option<usize>,
    /// Per-stage feature widths, e.g. `32,64,128`.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    encoder_channels: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    #[arg(long, value_parser = parse_enum::<NormScope>)]
    norm_scope: Option<NormScope>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_enum::<OrthForm>)]
    orthogonality: Option<OrthForm>,
    #[arg(long)]
    basis_lr_scale: Option<f64>,
    #[arg(long)]
    keep_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<Variant>>,
    /// Single seed; shorthand for `--seeds S`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Instead of variants, train the configured variant once per code dimension.
    #[arg(long, value_delimiter = ',')]
    code_dims: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<String>,
    /// `l1` or `l2`; defaults to L1 for reconstruction and L2 for completion.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Silhouette PNG, or a partial cloud (`.apc`/`.xyz`) for completion models.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    max: Option<f64>,
    /// Explicit grid; overrides steps/min/max.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Option<Vec<f64>>,
    /// Dataset whose test split sets the default grid's spread.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SwapArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `all`, `none`, or terms such as `z:1,2+mu:3`.
    #[arg(long, value_parser = parse_which)]
    which: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_split)]
    split: Option<String>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = attriflow_service::DEFAULT_CACHE_SIZE)]
    cache_size: usize,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.trim().replace('-', "_").to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: attriflow::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<String, String> {
    s.parse::<Split>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> Result<String, String> {
    s.parse::<Metric>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parse_which(s: &str) -> Result<String, String> {
    s.parse::<SwapSelection>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

/// Explicit flags as a sparse JSON object, merged over the config file.
#[derive(Default)]
struct Overlay(Map<String, Value>);

impl Overlay {
    fn set<T: Serialize>(&mut self, path: &[&str], value: Option<T>) -> &mut Self {
        let Some(value) = value else { return self };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let (last, parents) = path.split_last().expect("non-empty flag path");
        let mut node = &mut self.0;
        for p in parents {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("overlay nodes are objects");
        }
        node.insert(last.to_string(), value);
        self
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn read_config(path: Option<&Path>) -> CliResult<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", p.display()))?;
            if !v.is_object() {
                return Err(format!("config {} must hold a JSON object", p.display()).into());
            }
            Ok(v)
        }
    }
}

fn has(v: &Value, path: &[&str]) -> bool {
    path.iter()
        .try_fold(v, |node, key| node.get(key))
        .is_some_and(|x| !x.is_null())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().map_err(|_| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Applies `APC_SEED` at `path` when nothing else set it.
fn seed_fallback(v: &mut Value, path: &[&str]) -> CliResult<()> {
    if !has(v, path) {
        if let Some(seed) = env_seed()? {
            let mut o = Overlay::default();
            o.set(path, Some(seed));
            merge(v, Value::Object(o.0));
        }
    }
    Ok(())
}

fn resolve<T: DeserializeOwned>(v: Value) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| format!("invalid configuration: {e}").into())
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()).into())
}

fn write_snapshot(out: &Path, command: &str, config: &impl Serialize) -> CliResult<()> {
    let mut v = serde_json::to_value(config)?;
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), Value::String(command.into()));
    }
    write_file(&out.join(SNAPSHOT_FILE), serde_json::to_string_pretty(&v)?)
}

fn load_model(ckpt: &Path) -> CliResult<Model> {
    let ck = Checkpoint::load(ckpt)?;
    Ok(ck.to_model()?)
}

/// Reconstructs from an image or completes a partial cloud, by model task.
fn capture_input(model: &Model, input: &Path) -> CliResult<(PointCloud, CodeSet)> {
    match model.config().task {
        Task::Reconstruction => Ok(capture_codes(model, &Image::load_png(input)?)?),
        Task::Completion => {
            let ext = input.extension().and_then(|e| e.to_str()).unwrap_or_default();
            let partial = if ext.eq_ignore_ascii_case("xyz") { read_xyz(input)? } else { read_apc(input)? };
            Ok(capture_partial(model, &partial)?)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthRun {
    dataset: DatasetConfig,
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let file = read_config(a.config.as_deref())?;
    let explicit_seed = a.seed.is_some() || has(&file, &["dataset", "seed"]);
    let mut v = json!({ "dataset": serde_json::to_value(DatasetConfig::new(&a.out))? });
    merge(&mut v, file);
    let mut o = Overlay::default();
    o.set(&["dataset", "out_dir"], Some(&a.out))
        .set(&["dataset", "train"], a.train)
        .set(&["dataset", "val"], a.val)
        .set(&["dataset", "test"], a.test)
        .set(&["dataset", "seed"], a.seed)
        .set(&["dataset", "resolution"], a.resolution)
        .set(&["dataset", "n_points"], a.points);
    merge(&mut v, Value::Object(o.0));
    if !explicit_seed {
        if let Some(seed) = env_seed()? {
            v["dataset"]["seed"] = json!(seed);
        }
    }
    let run: SynthRun = resolve(v)?;
    prepare_out(&a.out)?;
    let manifest = build_dataset(&run.dataset)?;
    write_snapshot(&a.out, "synth build", &run)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainRun {
    data: PathBuf,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

impl TrainFlags {
    fn overlay(&self, o: &mut Overlay) {
        o.set(&["data"], self.data.as_ref())
            .set(&["model", "task"], self.task)
            .set(&["model", "num_points"], self.points)
            .set(&["model", "channels"], self.channels.as_ref())
            .set(&["model", "encoder_channels"], self.encoder_channels.as_ref())
            .set(&["model", "feature_dim"], self.feature_dim)
            .set(&["model", "k_neighbors"], self.k_neighbors)
            .set(&["model", "norm_scope"], self.norm_scope)
            .set(&["train", "variant"], self.variant)
            .set(&["train", "code_dim"], self.code_dim)
            .set(&["train", "epochs"], self.epochs)
            .set(&["train", "batch_size"], self.batch_size)
            .set(&["train", "learning_rate"], self.lr)
            .set(&["train", "min_learning_rate"], self.min_lr)
            .set(&["train", "alpha"], self.alpha)
            .set(&["train", "orthogonality"], self.orthogonality)
            .set(&["train", "basis_lr_scale"], self.basis_lr_scale)
            .set(&["train", "keep_fraction"], self.keep_fraction);
    }

    /// Merged config with the image resolution taken from the dataset when
    /// neither the file nor a flag fixes it.
    fn resolve(&self, extra: Overlay) -> CliResult<(Value, DatasetManifest)> {
        let mut v = read_config(self.config.as_deref())?;
        let mut o = extra;
        self.overlay(&mut o);
        merge(&mut v, Value::Object(o.0));
        let data: PathBuf = match v.get("data") {
            Some(d) if !d.is_null() => resolve(d.clone())?,
            _ => return Err("missing data (pass --data or set it in --config)".into()),
        };
        let manifest = DatasetManifest::load(&data)?;
        if !has(&v, &["model", "image_resolution"]) {
            let mut o = Overlay::default();
            o.set(&["model", "image_resolution"], Some(manifest.resolution));
            merge(&mut v, Value::Object(o.0));
        }
        seed_fallback(&mut v, &["train", "seed"])?;
        Ok((v, manifest))
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut extra = Overlay::default();
    extra.set(&["train", "seed"], a.seed);
    let (v, manifest) = a.flags.resolve(extra)?;
    let run: TrainRun = resolve(v)?;
    run.train.validate()?;
    run.train.model_config(&run.model).validate()?;
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "train", &run)?;

    let mc = run.train.model_config(&run.model);
    let train = load_split(&manifest, Split::Train, &mc, run.train.keep_fraction)?;
    let val = load_split(&manifest, Split::Val, &mc, run.train.keep_fraction)?;
    let outcome = train_samples(&train, &val, &run.model, &run.train)?;
    outcome.checkpoint.save(a.out.join(CHECKPOINT_FILE))?;
    let history = &outcome.checkpoint.history;
    write_file(&a.out.join("history.json"), serde_json::to_string_pretty(history)?)?;
    let best = history.epochs.iter().find(|e| e.epoch == history.best_epoch);
    println!(
        "trained {} for {} epochs; kept epoch {} (val L1 {:.5}); checkpoint {}",
        run.train.variant,
        history.epochs.len(),
        history.best_epoch,
        best.map_or(f64::NAN, |e| e.val_l1),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblateRun {
    data: PathBuf,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    variants: Vec<Variant>,
    seeds: Vec<u64>,
    #[serde(default)]
    code_dims: Option<Vec<usize>>,
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let mut extra = Overlay::default();
    extra
        .set(&["variants"], a.variants.as_ref())
        .set(&["seeds"], a.seeds.clone().or(a.seed.map(|s| vec![s])))
        .set(&["code_dims"], a.code_dims.as_ref());
    let (mut v, manifest) = a.flags.resolve(extra)?;
    if !has(&v, &["variants"]) {
        v["variants"] = serde_json::to_value([Variant::Full, Variant::OnlyMlp])?;
    }
    if !has(&v, &["seeds"]) {
        v["seeds"] = match env_seed()? {
            Some(s) => json!([s]),
            None => json!([0, 1, 2]),
        };
    }
    let run: AblateRun = resolve(v)?;
    run.train.validate()?;
    if run.seeds.is_empty() || run.variants.is_empty() {
        return Err("ablation needs at least one variant and one seed".into());
    }
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "ablate", &run)?;

    let mc = run.train.model_config(&run.model);
    let train = load_split(&manifest, Split::Train, &mc, run.train.keep_fraction)?;
    let val = load_split(&manifest, Split::Val, &mc, run.train.keep_fraction)?;
    let test = load_split(&manifest, Split::Test, &mc, run.train.keep_fraction)?;
    let runs = a.out.join("runs");
    prepare_out(&runs)?;

    if let Some(dims) = &run.code_dims {
        let report = code_dim_sweep(&train, &val, &test, &run.model, &run.train, dims, |row, outcome| {
            outcome.checkpoint.save(runs.join(format!("d{}.ckpt", row.code_dim)))
        })?;
        write_file(&a.out.join("code_dims.csv"), report.to_csv())?;
        write_file(&a.out.join("code_dims.json"), serde_json::to_string_pretty(&report)?)?;
        print!("{}", report.to_csv());
        return Ok(());
    }

    let report = ablate(&train, &val, &test, &run.model, &run.train, &run.variants, &run.seeds, |row, outcome| {
        outcome
            .checkpoint
            .save(runs.join(format!("{}_s{}.ckpt", row.variant.name(), row.seed)))
    })?;
    write_file(&a.out.join("ablation.csv"), report.to_csv())?;
    write_file(&a.out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    let table = report.comparison();
    write_file(&a.out.join("comparison.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalRun {
    ckpt: PathBuf,
    data: PathBuf,
    split: Split,
    metric: Metric,
    keep_fraction: f64,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut v = read_config(a.config.as_deref())?;
    let mut o = Overlay::default();
    o.set(&["ckpt"], a.ckpt.as_ref())
        .set(&["data"], a.data.as_ref())
        .set(&["split"], a.split.as_ref())
        .set(&["metric"], a.metric.as_ref().map(|m| m.to_ascii_lowercase()));
    merge(&mut v, Value::Object(o.0));
    let ckpt: PathBuf = resolve(v.get("ckpt").cloned().ok_or("missing ckpt (pass --ckpt or set it in --config)")?)?;
    let checkpoint = Checkpoint::load(&ckpt)?;
    if !has(&v, &["split"]) {
        v["split"] = json!("test");
    }
    if !has(&v, &["metric"]) {
        v["metric"] = json!(match checkpoint.model_config.task {
            Task::Reconstruction => "l1",
            Task::Completion => "l2",
        });
    }
    if !has(&v, &["keep_fraction"]) {
        v["keep_fraction"] = json!(checkpoint.train_config.keep_fraction);
    }
    let run: EvalRun = resolve(v)?;
    let model = checkpoint.to_model()?;
    let manifest = DatasetManifest::load(&run.data)?;
    let table = evaluate(&model, &manifest, run.split, run.metric, run.keep_fraction)?;
    let csv = table.to_csv();
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_snapshot(out, "eval", &run)?;
        write_file(&out.join(format!("eval_{}.csv", split_name(run.split))), &csv)?;
        write_file(&out.join(format!("eval_{}.txt", split_name(run.split))), table.to_pretty())?;
    }
    print!("{csv}");
    Ok(())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRun {
    ckpt: PathBuf,
    image: PathBuf,
    stage: usize,
    dim: usize,
    values: Vec<f64>,
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let mut v = read_config(a.config.as_deref())?;
    let mut o = Overlay::default();
    o.set(&["ckpt"], a.ckpt.as_ref())
        .set(&["image"], a.image.as_ref())
        .set(&["stage"], a.stage)
        .set(&["dim"], a.dim)
        .set(&["values"], a.values.as_ref())
        .set(&["data"], a.data.as_ref());
    // A new grid on the command line replaces a stored one.
    if a.values.is_none() && (a.steps.is_some() || a.min.is_some() || a.max.is_some()) {
        if let Value::Object(m) = &mut v {
            m.remove("values");
        }
    }
    merge(&mut v, Value::Object(o.0));
    let get = |k: &str| v.get(k).filter(|x| !x.is_null()).cloned();
    let ckpt: PathBuf = resolve(get("ckpt").ok_or("missing ckpt (pass --ckpt or set it in --config)")?)?;
    let image: PathBuf = resolve(get("image").ok_or("missing image (pass --image or set it in --config)")?)?;
    let stage: usize = resolve(get("stage").ok_or("missing stage (pass --stage or set it in --config)")?)?;
    let dim: usize = resolve(get("dim").ok_or("missing dim (pass --dim or set it in --config)")?)?;

    let data: Option<PathBuf> = get("data").map(resolve).transpose()?;

    let checkpoint = Checkpoint::load(&ckpt)?;
    let model = checkpoint.to_model()?;
    let (_, codes) = capture_input(&model, &image)?;
    let values: Vec<f64> = match get("values") {
        Some(vals) => resolve(vals)?,
        None => {
            let steps = a.steps.unwrap_or(7);
            match (a.min, a.max) {
                (None, None) => {
                    let original = codes
                        .stage(stage)?
                        .z
                        .as_ref()
                        .and_then(|z| z.values.get(dim).copied())
                        .unwrap_or(0.0);
                    let std = match &data {
                        Some(dir) => {
                            let manifest = DatasetManifest::load(dir)?;
                            let samples = load_split(&manifest, Split::Test, model.config(), checkpoint.train_config.keep_fraction)?;
                            Some(CodeStats::from_codes(&collect_codes(&model, &samples)?)?.std_of(stage, dim)?)
                        }
                        None => None,
                    };
                    default_grid(original, std, steps)
                }
                (lo, hi) => linspace(lo.unwrap_or(-1.0), hi.unwrap_or(1.0), steps),
            }
        }
    };
    let run = SweepRun { ckpt, image, stage, dim, values };
    let clouds = sweep_from_codes(&model, &codes, run.stage, run.dim, &run.values)?;
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "sweep", &run)?;
    let index = export_sweep(&a.out, run.stage, run.dim, &run.values, &clouds)?;
    println!(
        "stage {} dim {}: wrote {} clouds and index.json to {}",
        index.stage,
        index.dim,
        index.files.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SwapRun {
    ckpt: PathBuf,
    a: PathBuf,
    b: PathBuf,
    which: String,
}

fn cmd_swap(a: SwapArgs) -> CliResult<()> {
    let mut v = read_config(a.config.as_deref())?;
    let mut o = Overlay::default();
    o.set(&["ckpt"], a.ckpt.as_ref())
        .set(&["a"], a.a.as_ref())
        .set(&["b"], a.b.as_ref())
        .set(&["which"], a.which.as_ref());
    merge(&mut v, Value::Object(o.0));
    if !has(&v, &["which"]) {
        v["which"] = json!("all");
    }
    let run: SwapRun = resolve(v)?;
    let which: SwapSelection = run.which.parse()?;
    let model = load_model(&run.ckpt)?;
    let (cloud_a, codes_a) = capture_input(&model, &run.a)?;
    let (cloud_b, codes_b) = capture_input(&model, &run.b)?;
    let swapped = replay(&model, &swap_code_sets(&codes_a, &codes_b, &which)?)?;
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "swap", &run)?;
    write_apc(a.out.join("a.apc"), &cloud_a)?;
    write_apc(a.out.join("b.apc"), &cloud_b)?;
    write_apc(a.out.join("swap.apc"), &swapped)?;
    println!("wrote a.apc, b.apc and swap.apc to {}", a.out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRun {
    ckpt: PathBuf,
    data: PathBuf,
    split: Split,
    permutations: usize,
    seed: u64,
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut v = read_config(a.config.as_deref())?;
    let mut o = Overlay::default();
    o.set(&["ckpt"], a.ckpt.as_ref())
        .set(&["data"], a.data.as_ref())
        .set(&["split"], a.split.as_ref())
        .set(&["permutations"], a.permutations)
        .set(&["seed"], a.seed);
    merge(&mut v, Value::Object(o.0));
    seed_fallback(&mut v, &["seed"])?;
    for (k, d) in [("split", json!("test")), ("permutations", json!(1000)), ("seed", json!(0))] {
        if !has(&v, &[k]) {
            v[k] = d;
        }
    }
    let run: ReportRun = resolve(v)?;
    let checkpoint = Checkpoint::load(&run.ckpt)?;
    let model = checkpoint.to_model()?;
    let manifest = DatasetManifest::load(&run.data)?;
    let samples = load_split(&manifest, run.split, model.config(), checkpoint.train_config.keep_fraction)?;
    let report = disentanglement_report(&model, &samples, run.permutations, run.seed)?;
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "report", &run)?;
    write_file(&a.out.join("disentanglement.csv"), report.to_csv())?;
    write_file(&a.out.join("disentanglement.json"), serde_json::to_string_pretty(&report)?)?;
    println!("factor,stage,dim,abs_pearson");
    for t in &report.top {
        println!("{},{},{},{:.4}", t.factor, t.stage, t.dim, t.correlation);
    }
    println!(
        "max |r| {:.4}; shuffled-label 95% level {:.4}; p = {:.4}",
        report.max_correlation, report.null_quantile_95, report.p_value
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(attriflow_service::serve(&a.ckpt, a.addr, a.cache_size))?;
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth {
            action: SynthAction::Build(a),
        } => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Swap(a) => cmd_swap(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Runs one command. Returns 0 on success, 2 for usage errors and 1 for
/// failures during the run.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
