//! Subcommand implementations behind the `booknet` executable.
//!
//! Every command that writes to disk also writes `effective_config.json`
//! with all resolved settings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use booknet::autodiff::ParamStore;
use booknet::geometry::resize_flow;
use booknet::imageio::{load_rgb, save_rgb};
use booknet::metrics::{evaluate_set, format_table, MetricReport, RegistrationOptions};
use booknet::model::{BookNet, BookNetConfig};
use booknet::selfcheck::{run_suite, SuiteReport};
use booknet::synth::{generate_dataset, GenConfig, Manifest};
use booknet::train::{
    batch_gradients, load_dataset, train_loop, Supervision, TrainConfig, TrainLog, TrainOutput, TrainSample,
};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const MODEL_CONFIG: &str = "model_config.json";

/// Failure classes, each with its own exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generation,
    Training,
    Inference,
    Evaluation,
    SelfCheck,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Generation => 2,
            Stage::Training => 3,
            Stage::Inference => 4,
            Stage::Evaluation => 5,
            Stage::SelfCheck => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
    Tiny,
}

impl Preset {
    pub fn config(self) -> BookNetConfig {
        match self {
            Preset::Paper => BookNetConfig::paper(),
            Preset::Toy => BookNetConfig::toy(),
            Preset::Tiny => BookNetConfig::tiny(),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Model configuration from a JSON file if given, else from the preset.
pub fn resolve_model(config: Option<&Path>, preset: Preset) -> Result<BookNetConfig> {
    match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(BookNetConfig::from_json(&text)?)
        }
        None => Ok(preset.config()),
    }
}

pub struct GenerateArgs {
    pub count: usize,
    pub seed: u64,
    pub ranges: Option<PathBuf>,
    pub full_resolution: bool,
    pub out: PathBuf,
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Manifest> {
    let mut cfg: GenConfig = match &a.ranges {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if a.full_resolution {
        let full = GenConfig::full_resolution();
        cfg.height = full.height;
        cfg.width = full.width;
    }
    let manifest = generate_dataset(a.count, a.seed, &cfg, &a.out)?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG),
        &json!({"command": "generate", "count": a.count, "seed": a.seed, "config": cfg}),
    )?;
    Ok(manifest)
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub validation: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub preset: Preset,
    pub ablate_cross_page: bool,
    pub ablate_fusion: bool,
    pub supervise: Option<Supervision>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub init: Option<PathBuf>,
    pub check_isolation: bool,
    pub out: PathBuf,
}

/// Resolved configurations for a training run.
pub fn resolve_train(a: &TrainArgs) -> Result<(BookNetConfig, TrainConfig)> {
    let mut model = resolve_model(a.model_config.as_deref(), a.preset)?;
    if a.ablate_cross_page {
        model.cross_page_attention = false;
    }
    if a.ablate_fusion {
        model.use_fusion = false;
    }
    let mut train: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.supervise {
        train.supervision = s;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(s) = a.steps {
        train.steps = Some(s);
    }
    if let Some(e) = a.epochs {
        train.epochs = e;
        train.steps = None;
    }
    train.validate()?;
    Ok((model, train))
}

/// Heads that receive no loss under `sup` must get exactly zero gradient.
pub fn check_isolation(net: &BookNet, params: &ParamStore, sample: &TrainSample, sup: Supervision) -> Result<()> {
    let (_, grads) = batch_gradients(net, params, &[(&sample.image, &sample.targets)], sup)?;
    let silent: Vec<&str> = [(sup.left, "head.left."), (sup.right, "head.right.")]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, p)| *p)
        .collect();
    for (id, (name, _)) in params.ids().zip(params.iter()) {
        if silent.iter().any(|p| name.starts_with(p)) && grads[id.index()].iter().any(|&g| g != 0.0) {
            bail!("unsupervised parameter {name} received a gradient");
        }
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(ParamStore, TrainLog)> {
    let (model, train) = resolve_train(a)?;
    let data = load_dataset(&a.data, &model)?;
    let validation = match &a.validation {
        Some(p) => load_dataset(p, &model)?,
        None => Vec::new(),
    };
    let (net, params) = match &a.init {
        Some(p) => {
            let store = ParamStore::load(p)?;
            (BookNet::attach(model.clone(), &store)?, store)
        }
        None => BookNet::init(model.clone(), train.seed)?,
    };
    if a.check_isolation {
        let first = data.first().context("empty training set")?;
        check_isolation(&net, &params, first, train.supervision)?;
        eprintln!("isolation check passed for supervision {}", train.supervision);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(MODEL_CONFIG), model.to_json() + "\n")?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG),
        &json!({
            "command": "train",
            "data": a.data,
            "validation": a.validation,
            "init": a.init,
            "model": model,
            "train": train,
        }),
    )?;
    let output = TrainOutput { dir: a.out.clone() };
    Ok(train_loop(&net, params, &train, &data, &validation, Some(&output))?)
}

pub struct RectifyArgs {
    pub image: PathBuf,
    pub checkpoint: PathBuf,
    pub model_config: Option<PathBuf>,
    pub out: PathBuf,
    pub dump_flows: Option<PathBuf>,
}

/// The model configuration stored next to a checkpoint.
pub fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<BookNetConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_CONFIG),
    };
    resolve_model(Some(&path), Preset::Paper)
}

pub fn cmd_rectify(a: &RectifyArgs) -> Result<()> {
    let model = checkpoint_config(&a.checkpoint, a.model_config.as_deref())?;
    let params = ParamStore::load(&a.checkpoint)?;
    let net = BookNet::attach(model.clone(), &params)?;
    let image = load_rgb(&a.image)?;
    let rect = net.rectify(&params, &image)?;
    save_rgb(&a.out, &rect.image)?;
    if let Some(dir) = &a.dump_flows {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let (h, w) = (rect.flow.height(), rect.flow.width());
        rect.flow.save(dir.join("full.bkfl"))?;
        resize_flow(&rect.prediction.left, h, w / 2)?.save(dir.join("left.bkfl"))?;
        resize_flow(&rect.prediction.right, h, w / 2)?.save(dir.join("right.bkfl"))?;
    }
    let mut cfg_path = a.out.clone().into_os_string();
    cfg_path.push(".");
    cfg_path.push(EFFECTIVE_CONFIG);
    write_json(
        Path::new(&cfg_path),
        &json!({
            "command": "rectify",
            "image": a.image,
            "checkpoint": a.checkpoint,
            "model": model,
            "dump_flows": a.dump_flows,
        }),
    )
}

pub fn cmd_evaluate(pairs: &Path, out: &Path) -> Result<MetricReport> {
    let opts = RegistrationOptions::default();
    let report = evaluate_set(pairs, &opts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("table.txt"), format_table(&report))?;
    write_json(
        &out.join(EFFECTIVE_CONFIG),
        &json!({"command": "evaluate", "pairs": pairs, "registration": opts}),
    )?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckScale {
    /// Two 32×32 images through the smallest network.
    Toy,
}

pub struct GradcheckArgs {
    pub scale: CheckScale,
    pub seed: u64,
    pub fraction: f64,
    pub corrupt: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<SuiteReport> {
    let corrupt: Option<&'static str> = match &a.corrupt {
        Some(name) => Some(
            booknet::selfcheck::op_names()
                .iter()
                .copied()
                .find(|n| n == name)
                .with_context(|| format!("unknown op {name:?}"))?,
        ),
        None => None,
    };
    let report = run_suite(a.seed, a.fraction, corrupt)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("gradcheck.json"), &report)?;
        write_json(
            &out.join(EFFECTIVE_CONFIG),
            &json!({"command": "gradcheck", "scale": a.scale, "seed": a.seed, "fraction": a.fraction, "corrupt": a.corrupt}),
        )?;
    }
    Ok(report)
}

pub struct InitArgs {
    pub model_config: Option<PathBuf>,
    pub preset: Preset,
    pub seed: u64,
    pub identity: bool,
    pub out: PathBuf,
}

/// Zero every flow head's displacement conv so all three flows are exactly
/// the identity grid.
pub fn zero_flow_heads(params: &mut ParamStore) {
    let ids: Vec<_> = params
        .ids()
        .filter(|&id| {
            let n = params.name(id);
            n.starts_with("head.") && n.contains(".flow.")
        })
        .collect();
    for id in ids {
        params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn cmd_init(a: &InitArgs) -> Result<PathBuf> {
    let model = resolve_model(a.model_config.as_deref(), a.preset)?;
    let (_, mut params) = BookNet::init(model.clone(), a.seed)?;
    if a.identity {
        zero_flow_heads(&mut params);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("model.bkpt");
    params.save(&ckpt)?;
    fs::write(a.out.join(MODEL_CONFIG), model.to_json() + "\n")?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG),
        &json!({"command": "init", "seed": a.seed, "identity": a.identity, "model": model}),
    )?;
    Ok(ckpt)
}

/// One arm of an ablation study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Arm {
    pub name: String,
    pub cross_page_attention: bool,
    pub use_fusion: bool,
    pub supervision: Supervision,
}

/// The full model and one arm per single ablation.
pub fn ablation_arms() -> Vec<Arm> {
    let arm = |name: &str, cross: bool, fusion: bool, sup: &str| Arm {
        name: name.into(),
        cross_page_attention: cross,
        use_fusion: fusion,
        supervision: sup.parse().expect("valid supervision"),
    };
    vec![
        arm("full", true, true, "l,r,f"),
        arm("no-cross-page", false, true, "l,r,f"),
        arm("no-fusion", true, false, "l,r,f"),
        arm("full-flow-only", true, true, "f"),
        arm("page-flows-only", true, true, "l,r"),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub val_flow_l1: f64,
    pub val_mssim: Option<f64>,
    pub final_loss: f64,
}

/// Train every arm from the same initialization seed and report the final
/// validation flow L1 of each.
pub fn run_ablation(
    base: &BookNetConfig,
    train: &TrainConfig,
    data: &[TrainSample],
    validation: &[TrainSample],
    arms: &[Arm],
) -> Result<Vec<ArmResult>> {
    let mut results = Vec::new();
    for arm in arms {
        let model = BookNetConfig {
            cross_page_attention: arm.cross_page_attention,
            use_fusion: arm.use_fusion,
            ..base.clone()
        };
        let cfg = TrainConfig {
            supervision: arm.supervision,
            ..train.clone()
        };
        let (net, params) = BookNet::init(model, cfg.seed)?;
        let (_, log) = train_loop(&net, params, &cfg, data, validation, None)?;
        let last = log.epochs().last().context("training produced no validation record")?;
        results.push(ArmResult {
            arm: arm.clone(),
            val_flow_l1: last.val_flow_l1,
            val_mssim: last.val_mssim,
            final_loss: log.losses().last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(results)
}

pub fn format_ablation(results: &[ArmResult]) -> String {
    let mut s = format!("{:<18} {:>12} {:>10} {:>12}\n", "arm", "val flow L1", "val MSSIM", "final loss");
    for r in results {
        let mssim = r.val_mssim.map_or("-".to_string(), |m| format!("{m:.4}"));
        s.push_str(&format!(
            "{:<18} {:>12.6} {:>10} {:>12.6}\n",
            r.arm.name, r.val_flow_l1, mssim, r.final_loss
        ));
    }
    s
}

pub struct AblateArgs {
    pub data: PathBuf,
    pub validation: PathBuf,
    pub config: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub preset: Preset,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<ArmResult>> {
    let model = resolve_model(a.model_config.as_deref(), a.preset)?;
    let mut train: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        train.steps = Some(s);
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    train.validate()?;
    let data = load_dataset(&a.data, &model)?;
    let validation = load_dataset(&a.validation, &model)?;
    let arms = ablation_arms();
    let results = run_ablation(&model, &train, &data, &validation, &arms)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("ablation.json"), &results)?;
    fs::write(a.out.join("ablation.txt"), format_ablation(&results))?;
    write_json(
        &a.out.join(EFFECTIVE_CONFIG),
        &json!({"command": "ablate", "data": a.data, "validation": a.validation, "model": model, "train": train, "arms": arms}),
    )?;
    Ok(results)
}
