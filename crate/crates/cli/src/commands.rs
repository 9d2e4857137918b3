//! The six pipeline commands. Each one reads its inputs, runs one stage and
//! writes its artifacts; every artifact carries a provenance record with the
//! resolved config.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geopath::blocknet::BlockNet;
use geopath::diffcore::Checkpoint;
use geopath::policynet::{Policy, PolicyNetwork};
use geopath::rewards::{diversity, max_unique, uniqueness};
use geopath::synthdata::{generate as generate_data, load_csv, save_csv, ClassInfo, Dataset, Prepared};
use geopath::trainer::{
    eval_rng, evaluate as run_evaluation, joint_finetune, pretrain_recognition, train_policy,
    EpochMetrics, EvalMode, EvalReport, ForcePolicy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{write_json, write_stream, write_tsv};

pub const TRAIN_CSV: &str = "train.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const CLASSES_JSON: &str = "classes.json";

/// Top-level checkpoint key holding the provenance record; skipped on load.
pub const PROVENANCE_KEY: &str = "provenance";

/// RNG streams for network initialisation; the trainer owns streams 1–4.
const RECOGNITION_INIT_STREAM: u64 = 100;
const POLICY_INIT_STREAM: u64 = 101;

/// Resolved config plus the directory that receives reports.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub report_dir: PathBuf,
}

impl Context {
    fn provenance(&self, command: &str, inputs: Value) -> Value {
        json!({
            "tool": "geopath",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.config.seed,
            "config": self.config,
            "inputs": inputs,
        })
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.report_dir.join(name)
    }

    fn init_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    fn fresh_recognition(&self) -> CliResult<BlockNet> {
        let mut rng = self.init_rng(RECOGNITION_INIT_STREAM);
        Ok(BlockNet::new(&self.config.recognition_config(), &mut rng)?)
    }

    fn fresh_policy(&self) -> CliResult<PolicyNetwork> {
        let mut rng = self.init_rng(POLICY_INIT_STREAM);
        let mut p = PolicyNetwork::new(&self.config.policy_config(), &mut rng)?;
        p.set_use_location(!self.config.train.remove_mlp);
        Ok(p)
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub classes: usize,
    pub pairs: usize,
}

/// Writes `train.csv`, `eval.csv` and `classes.json` into `out_dir`.
pub fn generate(ctx: &Context, out_dir: &Path) -> CliResult<GenerateSummary> {
    let spec = &ctx.config.data;
    let g = generate_data(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    for (name, data) in [(TRAIN_CSV, &g.train), (EVAL_CSV, &g.eval)] {
        let path = out_dir.join(name);
        save_csv(data, &path).map_err(|e| CliError::at(&path, e))?;
    }
    let prov = ctx.provenance("generate", json!({ "out": path_str(out_dir) }));
    write_json(
        &out_dir.join(CLASSES_JSON),
        &json!({ PROVENANCE_KEY: prov, "classes": g.classes }),
    )?;
    Ok(GenerateSummary {
        train_samples: g.train.len(),
        eval_samples: g.eval.len(),
        classes: spec.classes,
        pairs: spec.pairs(),
    })
}

/// Class bookkeeping written by [`generate`].
pub fn load_classes(data_dir: &Path) -> CliResult<Vec<ClassInfo>> {
    let path = data_dir.join(CLASSES_JSON);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_value(doc["classes"].take())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Which CSV of a data directory a command reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_CSV,
            Split::Eval => EVAL_CSV,
        }
    }
}

impl FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(CliError::Usage(format!("unknown split '{other}'"))),
        }
    }
}

/// Reads one split and checks its width and labels against the config.
pub fn load_split(ctx: &Context, data_dir: &Path, split: Split) -> CliResult<Prepared> {
    let path = data_dir.join(split.file());
    let data: Dataset = load_csv(&path).map_err(|e| CliError::at(&path, e))?;
    let cfg = &ctx.config;
    if data.feature_dim != cfg.data.feature_dim {
        return Err(CliError::ShapeMismatch(format!(
            "{} has {} features, config expects {}",
            path.display(),
            data.feature_dim,
            cfg.data.feature_dim
        )));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= cfg.data.classes) {
        return Err(CliError::Data(format!(
            "{}: sample {} has label {} but config has {} classes",
            path.display(),
            s.id,
            s.label,
            cfg.data.classes
        )));
    }
    let prepared = data
        .prepare(cfg.train.geo_scheme)
        .map_err(|e| CliError::at(&path, e))?;
    if prepared.is_empty() && split == Split::Train {
        return Err(CliError::Data(format!("{} holds no samples", path.display())));
    }
    Ok(prepared)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint, provenance: Value) -> CliResult<()> {
    let mut doc = ck.to_value()?;
    if let Value::Object(map) = &mut doc {
        map.insert(PROVENANCE_KEY.into(), provenance);
    }
    write_json(path, &doc)
}

/// Reads a checkpoint, returning the parameters and the provenance record.
pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Value)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(map) = &mut doc else {
        return Err(bad("top level is not an object".into()));
    };
    let provenance = map.remove(PROVENANCE_KEY).unwrap_or(Value::Null);
    let ck = Checkpoint::from_value(doc).map_err(|e| CliError::at(path, e))?;
    Ok((ck, provenance))
}

/// Recognition network with the parameters stored at `path`.
pub fn restore_recognition(ctx: &Context, path: &Path) -> CliResult<BlockNet> {
    let (ck, _) = load_checkpoint(path)?;
    let mut net = ctx.fresh_recognition()?;
    ck.restore(net.params_mut()).map_err(|e| CliError::at(path, e))?;
    Ok(net)
}

/// Policy network stored at `path`; its location setting must match the run.
pub fn restore_policy(ctx: &Context, path: &Path) -> CliResult<PolicyNetwork> {
    let (ck, prov) = load_checkpoint(path)?;
    let recorded = &prov["config"]["train"]["remove_mlp"];
    let wanted = ctx.config.train.remove_mlp;
    if let Some(trained) = recorded.as_bool() {
        if trained != wanted {
            return Err(CliError::InvalidConfig(format!(
                "{} was trained with remove_mlp={trained} but this run has remove_mlp={wanted}",
                path.display()
            )));
        }
    }
    let mut policy = ctx.fresh_policy()?;
    ck.restore(policy.loc_params_mut()).map_err(|e| CliError::at(path, e))?;
    ck.restore(policy.img_params_mut()).map_err(|e| CliError::at(path, e))?;
    Ok(policy)
}

fn write_curves(ctx: &Context, stem: &str, rows: &[EpochMetrics]) -> CliResult<()> {
    write_tsv(
        &ctx.report_path(&format!("{stem}_diversity.tsv")),
        ("epoch", "diversity"),
        rows.iter().map(|r| (r.epoch.to_string(), r.diversity.to_string())),
    )?;
    write_tsv(
        &ctx.report_path(&format!("{stem}_accuracy_pr.tsv")),
        ("pr", "accuracy"),
        rows.iter()
            .map(|r| (r.eval_pr.to_string(), r.accuracy_greedy.to_string())),
    )
}

/// Trains the recognition network from scratch with every block active.
pub fn pretrain(ctx: &Context, data_dir: &Path, out: &Path) -> CliResult<Vec<EpochMetrics>> {
    let train = load_split(ctx, data_dir, Split::Train)?;
    let mut net = ctx.fresh_recognition()?;
    let rows = pretrain_recognition(&mut net, &train, &ctx.config.train)?;
    let prov = ctx.provenance(
        "pretrain",
        json!({ "data": path_str(data_dir), "out": path_str(out) }),
    );
    write_stream(&ctx.report_path("pretrain.jsonl"), &prov, &rows)?;
    let mut ck = Checkpoint::new();
    ck.store(net.params());
    create_parent(out)?;
    save_checkpoint(out, &ck, prov)?;
    Ok(rows)
}

/// Policy-gradient stage on top of a pretrained recognition checkpoint.
pub fn policy(
    ctx: &Context,
    data_dir: &Path,
    recognition: &Path,
    out: &Path,
) -> CliResult<Vec<EpochMetrics>> {
    let train = load_split(ctx, data_dir, Split::Train)?;
    let eval = load_split(ctx, data_dir, Split::Eval)?;
    let net = restore_recognition(ctx, recognition)?;
    let mut policy = ctx.fresh_policy()?;
    let eval_ref = (!eval.is_empty()).then_some(&eval);
    let rows = train_policy(&train, eval_ref, &mut policy, &net, &ctx.config.train)?;
    let prov = ctx.provenance(
        "train-policy",
        json!({
            "data": path_str(data_dir),
            "recognition": path_str(recognition),
            "out": path_str(out),
        }),
    );
    write_stream(&ctx.report_path("policy.jsonl"), &prov, &rows)?;
    write_curves(ctx, "policy", &rows)?;
    let mut ck = Checkpoint::new();
    ck.store(policy.loc_params());
    ck.store(policy.img_params());
    create_parent(out)?;
    save_checkpoint(out, &ck, prov)?;
    Ok(rows)
}

/// Joint finetuning; the output checkpoint holds both networks.
pub fn finetune(
    ctx: &Context,
    data_dir: &Path,
    recognition: &Path,
    policy_ckpt: &Path,
    out: &Path,
) -> CliResult<Vec<EpochMetrics>> {
    let train = load_split(ctx, data_dir, Split::Train)?;
    let eval = load_split(ctx, data_dir, Split::Eval)?;
    let mut net = restore_recognition(ctx, recognition)?;
    let mut policy = restore_policy(ctx, policy_ckpt)?;
    let eval_ref = (!eval.is_empty()).then_some(&eval);
    let rows = joint_finetune(&train, eval_ref, &mut policy, &mut net, &ctx.config.train)?;
    let prov = ctx.provenance(
        "finetune",
        json!({
            "data": path_str(data_dir),
            "recognition": path_str(recognition),
            "policy": path_str(policy_ckpt),
            "out": path_str(out),
        }),
    );
    write_stream(&ctx.report_path("finetune.jsonl"), &prov, &rows)?;
    write_curves(ctx, "finetune", &rows)?;
    let mut ck = Checkpoint::new();
    ck.store(net.params());
    ck.store(policy.loc_params());
    ck.store(policy.img_params());
    create_parent(out)?;
    save_checkpoint(out, &ck, prov)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalArgs {
    pub mode: EvalMode,
    pub force: Option<ForcePolicy>,
    pub split: Split,
}

/// Runs one evaluation pass. `policy_ckpt` may be omitted when a path is
/// forced.
pub fn evaluate(
    ctx: &Context,
    data_dir: &Path,
    recognition: &Path,
    policy_ckpt: Option<&Path>,
    args: EvalArgs,
) -> CliResult<EvalReport> {
    let data = load_split(ctx, data_dir, args.split)?;
    let net = restore_recognition(ctx, recognition)?;
    let policy = match (policy_ckpt, args.force) {
        (Some(p), _) => restore_policy(ctx, p)?,
        (None, Some(_)) => ctx.fresh_policy()?,
        (None, None) => {
            return Err(CliError::Usage(
                "evaluate needs --policy unless --force-policy is given".into(),
            ))
        }
    };
    let reward = ctx.config.train.effective_reward();
    let mut rng = eval_rng(ctx.config.seed);
    let report = run_evaluation(&data, &policy, &net, args.mode, args.force, &reward, &mut rng)?;
    let prov = ctx.provenance(
        "evaluate",
        json!({
            "data": path_str(data_dir),
            "split": args.split,
            "recognition": path_str(recognition),
            "policy": policy_ckpt.map(path_str),
            "mode": args.mode,
            "force_policy": args.force,
        }),
    );
    write_json(
        &ctx.report_path("evaluate.json"),
        &json!({ PROVENANCE_KEY: prov, "summary": report.summary }),
    )?;
    write_stream(&ctx.report_path("evaluate_policies.jsonl"), &prov, &report.records)?;
    Ok(report)
}

/// Observed paths with `k` active blocks next to the `C(N, k)` ceiling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveCountRow {
    pub active: usize,
    pub pr: f64,
    pub samples: usize,
    pub distinct: usize,
    pub max_unique: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub samples: usize,
    pub blocks: usize,
    pub diversity: usize,
    pub mean_uniqueness: f64,
    pub mean_pr: f64,
    pub by_active: Vec<ActiveCountRow>,
}

/// Reads policies from a JSON-lines log. Each line is either an object with
/// a `"policy"` bit string or a bare bit string; provenance lines are
/// skipped.
pub fn read_policy_log(path: &Path) -> CliResult<Vec<Policy>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Data(format!("{} line {}: {msg}", path.display(), i + 1));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if v.get(PROVENANCE_KEY).is_some() {
            continue;
        }
        let bits = match &v {
            Value::String(s) => s.as_str(),
            Value::Object(_) => v["policy"]
                .as_str()
                .ok_or_else(|| bad("missing \"policy\" string".into()))?,
            _ => return Err(bad("expected an object or a string".into())),
        };
        out.push(Policy::from_str(bits).map_err(|e| bad(e.to_string()))?);
    }
    if let Some(first) = out.first() {
        let n = first.len();
        if out.iter().any(|p| p.len() != n) {
            return Err(CliError::ShapeMismatch(format!(
                "{}: policies of different lengths",
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn analyze_policies(policies: &[Policy]) -> CliResult<AnalyzeReport> {
    let samples = policies.len();
    let blocks = policies.first().map_or(0, Policy::len);
    let m = samples.max(1) as f64;
    let u = uniqueness(policies)?;
    let mut by_active = Vec::with_capacity(blocks + 1);
    for k in 0..=blocks {
        let with_k: Vec<Policy> = policies.iter().filter(|p| p.active() == k).cloned().collect();
        by_active.push(ActiveCountRow {
            active: k,
            pr: if blocks == 0 { 0.0 } else { k as f64 / blocks as f64 },
            samples: with_k.len(),
            distinct: diversity(&with_k),
            max_unique: max_unique(blocks as u64, k as u64)?,
        });
    }
    Ok(AnalyzeReport {
        samples,
        blocks,
        diversity: diversity(policies),
        mean_uniqueness: u.iter().sum::<f64>() / m,
        mean_pr: policies.iter().map(Policy::keep_ratio).sum::<f64>() / m,
        by_active,
    })
}

/// Summarises a policy log and writes `analyze.json` plus the `C(N, k)`
/// curve as TSV.
pub fn analyze(report_dir: &Path, log: &Path) -> CliResult<AnalyzeReport> {
    let policies = read_policy_log(log)?;
    if policies.is_empty() {
        return Err(CliError::Data(format!("{} holds no policies", log.display())));
    }
    let report = analyze_policies(&policies)?;
    let prov = json!({
        "tool": "geopath",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "analyze",
        "inputs": { "log": path_str(log) },
    });
    write_json(
        &report_dir.join("analyze.json"),
        &json!({ PROVENANCE_KEY: prov, "report": report }),
    )?;
    write_tsv(
        &report_dir.join("analyze_max_unique.tsv"),
        ("pr", "max_unique"),
        report
            .by_active
            .iter()
            .map(|r| (r.pr.to_string(), r.max_unique.to_string())),
    )?;
    Ok(report)
}
