//! Command implementations behind the `maq-lab` binary.
//!
//! Each command writes into a run directory under the output root and
//! finishes by writing a manifest that lists every file with its digest.
//! Training and evaluation directories follow
//! `<command>/<agent>/<H>x<K>/seed<k>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use maq_core::agents::{
    curve_csv, evaluate, train_bc, train_grid_baseline, train_maq_agent, AgentKind, Controller, GridActions,
    PolicyCheckpoint, PolicyNet, GRID_SIZE,
};
use maq_core::dataset::{encode_dataset, extract_all, load_dataset, split, DataSplit, NormStats};
use maq_core::env::{scripted_demo, Trajectory};
use maq_core::similarity::{build_report, SimilarityReport, REPORT_CSV_HEADER};
use maq_core::smdp::{demo_to_macro_transitions, MacroTransition};
use maq_core::vqvae::{
    codebook_utilization, decode_model, encode_model, quantization_error, reconstruction_mse, train_vqvae,
    CodebookModel,
};
use maq_core::{agents, MaqError, Result};

use crate::config::RunConfig;
use crate::manifest::{sha256_hex, verify_dir, Manifest, RunWriter};

pub const DEMOS_FILE: &str = "demos.maqtraj";
pub const VQVAE_FILE: &str = "vqvae.maqvq";
pub const POLICY_FILE: &str = "policy.maqpol";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const ERROR_FILE: &str = "error.txt";
pub const HEATMAP_HEADER: &str = "H,K,seed,metric,raw,normalized";

/// Directory and manifest of one finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

type Files = Vec<(&'static str, Vec<u8>)>;

pub fn run_dir(root: &Path, command: &str, agent: &str, horizon: usize, codes: usize, seed: u64) -> PathBuf {
    root.join(command)
        .join(agent)
        .join(format!("{horizon}x{codes}"))
        .join(format!("seed{seed}"))
}

/// `(H, K)` used to label a policy's directory. Grid actions are single
/// steps over 27 choices; behavior cloning has no discrete action set.
fn shape_of(ckpt: &PolicyCheckpoint, model: Option<&CodebookModel>) -> (usize, usize) {
    match (ckpt.kind, model) {
        (AgentKind::GridDsac, _) => (1, GRID_SIZE),
        (AgentKind::Bc, _) => (1, 0),
        (_, Some(m)) => (m.horizon, m.codes()),
        (_, None) => (ckpt.horizon, 0),
    }
}

fn finish(dir: &Path, mut manifest: Manifest, inputs: &[&Path], files: Files) -> Result<RunOutput> {
    for input in inputs {
        manifest.add_input(input)?;
    }
    let mut writer = RunWriter::create(dir, manifest)?;
    for (name, bytes) in &files {
        writer.write(name, bytes)?;
    }
    let (_, manifest) = writer.finish()?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        manifest,
    })
}

fn echo(cfg: &RunConfig, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut map = cfg.pairs();
    for (k, v) in extra {
        map.insert((*k).to_string(), v.clone());
    }
    map
}

/// Demonstrations with their deterministic split and training statistics.
#[derive(Clone, Debug)]
pub struct Demos {
    pub split: DataSplit,
    pub norm: NormStats,
}

impl Demos {
    pub fn new(all: &[Trajectory], split_seed: u64) -> Result<Self> {
        let split = split(all, split_seed)?;
        let norm = NormStats::compute(&split.train)?;
        Ok(Self { split, norm })
    }

    /// Similarity scoring compares each held-out demonstration with the rest.
    pub fn check_scorable(&self) -> Result<()> {
        if self.split.test.len() < 2 {
            return Err(MaqError::Config(format!(
                "the held-out split has {} demonstration(s); scoring needs at least 2 (use 20 or more demonstrations)",
                self.split.test.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path, split_seed: u64) -> Result<Self> {
        if !path.exists() {
            return Err(MaqError::Config(format!("demonstration file {} not found", path.display())));
        }
        Self::new(&load_dataset(path)?, split_seed)
    }
}

pub fn generate_demos(count: usize) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(MaqError::Config("demo count must be positive".into()));
    }
    (1..=count as u64).map(scripted_demo).collect()
}

/// `gen-demos`: scripted demonstrations for seeds `1..=count`.
pub fn gen_demos(cfg: &RunConfig, count: usize) -> Result<RunOutput> {
    let demos = generate_demos(count)?;
    let manifest = Manifest::new("gen-demos", echo(cfg, &[("count", count.to_string())]));
    finish(
        &cfg.out.join("gen-demos"),
        manifest,
        &[],
        vec![(DEMOS_FILE, encode_dataset(&demos).into_bytes())],
    )
}

fn fit_vqvae(cfg: &RunConfig, demos: &Demos, horizon: usize, codes: usize, seed: u64) -> Result<(CodebookModel, Files)> {
    cfg.check_shape(horizon, codes)?;
    let (model, report) = train_vqvae(&demos.split.train, &cfg.vq_config(horizon, codes, seed))?;
    let train = extract_all(&demos.split.train, horizon);
    let test = extract_all(&demos.split.test, horizon);
    let metrics = format!(
        "split,samples,reconstruction_mse,utilization,quantization_error\n\
         train,{},{:.8},{:.6},{:.8}\ntest,{},{:.8},{:.6},{:.8}\n",
        train.len(),
        reconstruction_mse(&model, &train)?,
        codebook_utilization(&model, &train)?,
        quantization_error(&model, &train)?,
        test.len(),
        reconstruction_mse(&model, &test)?,
        codebook_utilization(&model, &test)?,
        quantization_error(&model, &test)?,
    );
    let files = vec![
        (VQVAE_FILE, encode_model(&model).into_bytes()),
        ("vq_losses.csv", report.to_csv().into_bytes()),
        ("vq_metrics.csv", metrics.into_bytes()),
    ];
    Ok((model, files))
}

/// `train-vqvae`: codebook model on the training split.
pub fn train_vqvae_run(cfg: &RunConfig, demos_path: &Path, horizon: usize, codes: usize, seed: u64) -> Result<RunOutput> {
    cfg.check_shape(horizon, codes)?;
    let demos = Demos::load(demos_path, cfg.split_seed)?;
    let (_, files) = fit_vqvae(cfg, &demos, horizon, codes, seed)?;
    let manifest = Manifest::new(
        "train-vqvae",
        echo(cfg, &[("H", horizon.to_string()), ("K", codes.to_string()), ("seed", seed.to_string())]),
    );
    finish(
        &run_dir(&cfg.out, "train-vqvae", "vqvae", horizon, codes, seed),
        manifest,
        &[demos_path],
        files,
    )
}

/// A codebook model loaded from disk together with its file digest.
#[derive(Clone, Debug)]
pub struct LoadedCodebook {
    pub path: PathBuf,
    pub digest: String,
    pub model: CodebookModel,
}

impl LoadedCodebook {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MaqError::Config(format!("VQVAE checkpoint {} not found", path.display())));
        }
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| MaqError::parse(1, format!("{} is not a text checkpoint", path.display())))?;
        let model = decode_model(&text)?;
        Ok(Self {
            path: path.to_path_buf(),
            digest: sha256_hex(&bytes),
            model,
        })
    }
}

fn offline_transitions(model: &CodebookModel, demos: &Demos, gamma: f64) -> Result<Vec<MacroTransition>> {
    let mut out = Vec::new();
    for demo in &demos.split.train {
        out.extend(demo_to_macro_transitions(demo, model, gamma)?);
    }
    Ok(out)
}

fn fit_agent(
    cfg: &RunConfig,
    kind: AgentKind,
    seed: u64,
    codebook: Option<(&CodebookModel, &str)>,
    demos: Option<&Demos>,
) -> Result<(PolicyCheckpoint, Files)> {
    let need_demos = || {
        demos.ok_or_else(|| MaqError::Config(format!("agent {} requires demonstrations (--demos)", kind.tag())))
    };
    let sac = cfg.sac_config(kind, seed);
    let (ckpt, files) = match kind {
        AgentKind::MaqDsac | AgentKind::MaqSymmetric => {
            let (model, digest) = codebook.ok_or_else(|| {
                MaqError::Config(format!("agent {} requires a VQVAE checkpoint (--vqvae)", kind.tag()))
            })?;
            cfg.check_shape(model.horizon, model.codes())?;
            let offline = if kind == AgentKind::MaqSymmetric {
                offline_transitions(model, need_demos()?, cfg.gamma)?
            } else {
                Vec::new()
            };
            let outcome = train_maq_agent(model, &offline, &sac)?;
            let ckpt = PolicyCheckpoint {
                kind,
                horizon: model.horizon,
                seed,
                codebook_digest: Some(digest.to_string()),
                policy: PolicyNet::Discrete(outcome.policy),
            };
            (ckpt, vec![("curve.csv", curve_csv(&outcome.curve).into_bytes())])
        }
        AgentKind::GridDsac => {
            let outcome = train_grid_baseline(&sac)?;
            let ckpt = PolicyCheckpoint {
                kind,
                horizon: 1,
                seed,
                codebook_digest: None,
                policy: PolicyNet::Discrete(outcome.policy),
            };
            (ckpt, vec![("curve.csv", curve_csv(&outcome.curve).into_bytes())])
        }
        AgentKind::Bc => {
            let (policy, losses) = train_bc(&need_demos()?.split.train, &cfg.bc_config(seed))?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{},{:.10}\n", i + 1, l));
            }
            let ckpt = PolicyCheckpoint {
                kind,
                horizon: 1,
                seed,
                codebook_digest: None,
                policy: PolicyNet::Bc(policy),
            };
            (ckpt, vec![("bc_losses.csv", csv.into_bytes())])
        }
    };
    let mut all = vec![(POLICY_FILE, agents::encode_policy(&ckpt).into_bytes())];
    all.extend(files);
    Ok((ckpt, all))
}

/// `train-agent`: one agent for one seed.
pub fn train_agent_run(
    cfg: &RunConfig,
    kind: AgentKind,
    seed: u64,
    vqvae: Option<&Path>,
    demos_path: Option<&Path>,
) -> Result<RunOutput> {
    if kind.uses_codebook() && vqvae.is_none() {
        return Err(MaqError::Config(format!(
            "agent {} requires a VQVAE checkpoint (--vqvae)",
            kind.tag()
        )));
    }
    let codebook = match vqvae {
        Some(p) if kind.uses_codebook() => Some(LoadedCodebook::load(p)?),
        _ => None,
    };
    let demos = demos_path.map(|p| Demos::load(p, cfg.split_seed)).transpose()?;
    let (ckpt, files) = fit_agent(
        cfg,
        kind,
        seed,
        codebook.as_ref().map(|c| (&c.model, c.digest.as_str())),
        demos.as_ref(),
    )?;
    let (h, k) = shape_of(&ckpt, codebook.as_ref().map(|c| &c.model));
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(c) = &codebook {
        inputs.push(&c.path);
    }
    if let Some(p) = demos_path.filter(|_| matches!(kind, AgentKind::MaqSymmetric | AgentKind::Bc)) {
        inputs.push(p);
    }
    let manifest = Manifest::new(
        "train-agent",
        echo(cfg, &[("agent", kind.tag().to_string()), ("seed", seed.to_string())]),
    );
    finish(&run_dir(&cfg.out, "train-agent", kind.tag(), h, k, seed), manifest, &inputs, files)
}

/// Everything `evaluate` records about one policy.
#[derive(Clone, Debug, Serialize)]
pub struct EvaluationRecord {
    pub agent: String,
    pub seed: u64,
    pub horizon: usize,
    pub codes: usize,
    pub episodes: usize,
    pub eval_seed: u64,
    pub random_episodes: usize,
    pub random_seed: u64,
    pub mean_return: f64,
    pub report: SimilarityReport,
}

fn random_reference(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    Ok(evaluate(&Controller::Random, cfg.random_episodes, cfg.random_seed)?.trajectories)
}

fn score_policy(
    cfg: &RunConfig,
    ckpt: &PolicyCheckpoint,
    model: Option<&CodebookModel>,
    demos: &Demos,
    random: &[Trajectory],
) -> Result<(EvaluationRecord, Files)> {
    let eval = match (&ckpt.policy, ckpt.kind) {
        (PolicyNet::Bc(bc), _) => evaluate(&Controller::Bc(bc), cfg.eval_episodes, cfg.eval_seed)?,
        (PolicyNet::Discrete(p), AgentKind::GridDsac) => evaluate(
            &Controller::Discrete {
                policy: p,
                actions: &GridActions,
            },
            cfg.eval_episodes,
            cfg.eval_seed,
        )?,
        (PolicyNet::Discrete(p), _) => {
            let model = model.ok_or_else(|| {
                MaqError::Config(format!("policy {} needs its VQVAE checkpoint (--vqvae)", ckpt.kind.tag()))
            })?;
            evaluate(
                &Controller::Discrete {
                    policy: p,
                    actions: model,
                },
                cfg.eval_episodes,
                cfg.eval_seed,
            )?
        }
    };
    let report = build_report(
        ckpt.kind.tag(),
        ckpt.seed,
        &eval.trajectories,
        &demos.split.test,
        random,
        &demos.norm,
        eval.success_rate,
    )?;
    let (horizon, codes) = shape_of(ckpt, model);
    let record = EvaluationRecord {
        agent: ckpt.kind.tag().to_string(),
        seed: ckpt.seed,
        horizon,
        codes,
        episodes: eval.episodes,
        eval_seed: cfg.eval_seed,
        random_episodes: random.len(),
        random_seed: cfg.random_seed,
        mean_return: eval.mean_return,
        report,
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| MaqError::Config(format!("cannot encode report: {e}")))?;
    let csv = format!("{REPORT_CSV_HEADER}\n{}\n", record.report.csv_row());
    Ok((record, vec![(REPORT_CSV, csv.into_bytes()), (REPORT_JSON, (json + "\n").into_bytes())]))
}

/// Output of `evaluate`: one run per policy plus one summary per
/// `(agent, H, K)` group with a row per seed.
#[derive(Clone, Debug)]
pub struct EvaluateOutput {
    pub runs: Vec<RunOutput>,
    pub records: Vec<EvaluationRecord>,
    pub summaries: Vec<RunOutput>,
}

/// `evaluate`: greedy rollouts of each policy scored against held-out
/// demonstrations and random rollouts.
pub fn evaluate_run(
    cfg: &RunConfig,
    policies: &[PathBuf],
    vqvaes: &[PathBuf],
    demos_path: &Path,
) -> Result<EvaluateOutput> {
    if policies.is_empty() {
        return Err(MaqError::Config("evaluate needs at least one --policy".into()));
    }
    let demos = Demos::load(demos_path, cfg.split_seed)?;
    demos.check_scorable()?;
    let codebooks: Vec<LoadedCodebook> = vqvaes.iter().map(|p| LoadedCodebook::load(p)).collect::<Result<_>>()?;
    let random = random_reference(cfg)?;
    let mut runs = Vec::new();
    let mut records: Vec<EvaluationRecord> = Vec::new();
    for path in policies {
        if !path.exists() {
            return Err(MaqError::Config(format!("policy checkpoint {} not found", path.display())));
        }
        let ckpt = agents::load_policy(path)?;
        let codebook = match &ckpt.codebook_digest {
            Some(digest) => Some(codebooks.iter().find(|c| &c.digest == digest).ok_or_else(|| {
                if codebooks.is_empty() {
                    MaqError::Config(format!("policy {} needs its VQVAE checkpoint (--vqvae)", path.display()))
                } else {
                    MaqError::Mismatch(format!(
                        "policy {} was trained with codebook {digest}, which matches none of the given VQVAE checkpoints",
                        path.display()
                    ))
                }
            })?),
            None => None,
        };
        let model = codebook.map(|c| &c.model);
        if let Some(m) = model {
            if m.horizon != ckpt.horizon {
                return Err(MaqError::Mismatch(format!(
                    "policy {} expects H = {} but its codebook has H = {}",
                    path.display(),
                    ckpt.horizon,
                    m.horizon
                )));
            }
        }
        let (record, files) = score_policy(cfg, &ckpt, model, &demos, &random)?;
        let mut inputs: Vec<&Path> = vec![path.as_path(), demos_path];
        if let Some(c) = codebook {
            inputs.push(&c.path);
        }
        let manifest = Manifest::new(
            "evaluate",
            echo(cfg, &[("agent", record.agent.clone()), ("seed", ckpt.seed.to_string())]),
        );
        let dir = run_dir(&cfg.out, "evaluate", &record.agent, record.horizon, record.codes, ckpt.seed);
        runs.push(finish(&dir, manifest, &inputs, files)?);
        records.push(record);
    }

    let mut groups: BTreeMap<(String, usize, usize), Vec<&EvaluationRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.agent.clone(), r.horizon, r.codes)).or_default().push(r);
    }
    let mut summaries = Vec::new();
    for ((agent, h, k), mut rows) in groups {
        rows.sort_by_key(|r| r.seed);
        let mut csv = format!("{REPORT_CSV_HEADER}\n");
        for r in &rows {
            csv.push_str(&r.report.csv_row());
            csv.push('\n');
        }
        let dir = cfg.out.join("evaluate").join(&agent).join(format!("{h}x{k}"));
        let manifest = Manifest::new("evaluate", echo(cfg, &[("agent", agent.clone())]));
        summaries.push(finish(&dir, manifest, &[], vec![(REPORT_CSV, csv.into_bytes())])?);
    }
    Ok(EvaluateOutput {
        runs,
        records,
        summaries,
    })
}

/// One `(H, K, seed)` point of an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub horizon: usize,
    pub codes: usize,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "H={} K={} seed={}", self.horizon, self.codes, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Computed,
    Resumed,
}

#[derive(Clone, Debug)]
pub struct AblateOutput {
    pub heatmap: RunOutput,
    pub cells: Vec<(Cell, CellStatus)>,
    pub failures: Vec<(Cell, String)>,
}

fn cell_echo(cfg: &RunConfig, cell: Cell) -> BTreeMap<String, String> {
    let mut map = echo(
        cfg,
        &[
            ("H", cell.horizon.to_string()),
            ("K", cell.codes.to_string()),
            ("seed", cell.seed.to_string()),
        ],
    );
    // the output root does not affect results, so a moved sweep still resumes
    map.remove("out");
    map
}

fn cell_is_complete(dir: &Path, expected: &BTreeMap<String, String>) -> bool {
    match verify_dir(dir) {
        Ok(m) => m.command == "ablate" && &m.config == expected && m.digest_of(REPORT_CSV).is_some(),
        Err(_) => false,
    }
}

fn run_cell(cfg: &RunConfig, cell: Cell, demos: &Demos, random: &[Trajectory], dir: &Path) -> Result<()> {
    let (model, mut files) = fit_vqvae(cfg, demos, cell.horizon, cell.codes, cell.seed)?;
    let digest = sha256_hex(&files[0].1);
    let (ckpt, agent_files) = fit_agent(cfg, cfg.ablate_agent, cell.seed, Some((&model, &digest)), Some(demos))?;
    files.extend(agent_files);
    let (_, report_files) = score_policy(cfg, &ckpt, Some(&model), demos, random)?;
    files.extend(report_files);
    finish(dir, Manifest::new("ablate", cell_echo(cfg, cell)), &[], files)?;
    Ok(())
}

fn heatmap_rows(cell: Cell, report_csv: &str) -> Result<Vec<(Cell, String, String, String)>> {
    let mut lines = report_csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let row: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header.join(",") != REPORT_CSV_HEADER || row.len() != header.len() {
        return Err(MaqError::parse(2, format!("malformed report for cell {cell}")));
    }
    let field = |name: &str| row[header.iter().position(|h| *h == name).unwrap_or(0)].to_string();
    let mut out = Vec::new();
    for metric in ["dtw_s", "dtw_a", "wd_s", "wd_a"] {
        out.push((
            cell,
            metric.to_string(),
            field(&format!("{metric}_raw")),
            field(&format!("{metric}_norm")),
        ));
    }
    let success = field("success");
    out.push((cell, "success".to_string(), success.clone(), success));
    Ok(out)
}

/// `ablate`: full factorial sweep over `H`, `K`, and seeds with the
/// configured ablation agent. Cells whose manifest verifies against the
/// current configuration are reused. Failed cells leave an `error.txt` and
/// the sweep moves on; the heatmap covers completed cells only.
pub fn ablate_run(
    cfg: &RunConfig,
    demos: &Demos,
    demos_input: Option<&Path>,
    horizons: &[usize],
    code_sizes: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblateOutput> {
    if horizons.is_empty() || code_sizes.is_empty() || seeds.is_empty() {
        return Err(MaqError::Config("ablation lists must be non-empty".into()));
    }
    if !cfg.ablate_agent.uses_codebook() {
        return Err(MaqError::Config(format!(
            "ablation agent must act through a codebook, got {}",
            cfg.ablate_agent.tag()
        )));
    }
    demos.check_scorable()?;
    for &h in horizons {
        for &k in code_sizes {
            cfg.check_shape(h, k)?;
        }
    }
    let mut cells = Vec::new();
    for &horizon in horizons {
        for &codes in code_sizes {
            for &seed in seeds {
                cells.push(Cell { horizon, codes, seed });
            }
        }
    }
    cells.sort();
    cells.dedup();

    let agent_root = cfg.out.join("ablate").join(cfg.ablate_agent.tag());
    let random = random_reference(cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(Cell, Result<CellStatus>)>> = Mutex::new(Vec::new());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&cell) = cells.get(i) else { break };
        let dir = run_dir(&cfg.out, "ablate", cfg.ablate_agent.tag(), cell.horizon, cell.codes, cell.seed);
        let outcome = if cell_is_complete(&dir, &cell_echo(cfg, cell)) {
            Ok(CellStatus::Resumed)
        } else {
            let _ = std::fs::remove_file(dir.join(ERROR_FILE));
            match run_cell(cfg, cell, demos, &random, &dir) {
                Ok(()) => Ok(CellStatus::Computed),
                Err(e) => {
                    let _ = std::fs::remove_file(dir.join(crate::manifest::MANIFEST_FILE));
                    if std::fs::create_dir_all(&dir).is_ok() {
                        let _ = maq_core::textio::write_atomic(&dir.join(ERROR_FILE), format!("{e}\n").as_bytes());
                    }
                    Err(e)
                }
            }
        };
        results.lock().unwrap_or_else(|p| p.into_inner()).push((cell, outcome));
    };
    std::thread::scope(|scope| {
        for _ in 1..jobs.max(1) {
            scope.spawn(worker);
        }
        worker();
    });
    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    results.sort_by_key(|(c, _)| *c);

    let mut done = Vec::new();
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (cell, outcome) in results {
        match outcome {
            Ok(status) => {
                let dir = run_dir(&cfg.out, "ablate", cfg.ablate_agent.tag(), cell.horizon, cell.codes, cell.seed);
                rows.extend(heatmap_rows(cell, &std::fs::read_to_string(dir.join(REPORT_CSV))?)?);
                done.push((cell, status));
            }
            Err(e) => failures.push((cell, e.to_string())),
        }
    }
    rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut csv = format!("{HEATMAP_HEADER}\n");
    for (cell, metric, raw, norm) in &rows {
        csv.push_str(&format!("{},{},{},{metric},{raw},{norm}\n", cell.horizon, cell.codes, cell.seed));
    }
    let list = |v: Vec<String>| v.join(",");
    let mut config = echo(
        cfg,
        &[
            ("H_list", list(horizons.iter().map(usize::to_string).collect())),
            ("K_list", list(code_sizes.iter().map(usize::to_string).collect())),
            ("seeds", list(seeds.iter().map(u64::to_string).collect())),
        ],
    );
    config.insert("failed_cells".into(), failures.len().to_string());
    let inputs: Vec<&Path> = demos_input.into_iter().collect();
    let heatmap = finish(&agent_root, Manifest::new("ablate", config), &inputs, vec![(HEATMAP_FILE, csv.into_bytes())])?;
    Ok(AblateOutput {
        heatmap,
        cells: done,
        failures,
    })
}

/// Parses a heatmap CSV into `(cell, metric) -> (raw, normalized)`.
pub fn read_heatmap(text: &str) -> Result<BTreeMap<(Cell, String), (f64, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEATMAP_HEADER => {}
        _ => return Err(MaqError::parse(1, "missing heatmap header")),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || MaqError::parse(i + 1, format!("malformed heatmap row '{line}'"));
        if f.len() != 6 {
            return Err(bad());
        }
        let cell = Cell {
            horizon: f[0].parse().map_err(|_| bad())?,
            codes: f[1].parse().map_err(|_| bad())?,
            seed: f[2].parse().map_err(|_| bad())?,
        };
        let raw: f64 = f[4].parse().map_err(|_| bad())?;
        let norm: f64 = f[5].parse().map_err(|_| bad())?;
        out.insert((cell, f[3].to_string()), (raw, norm));
    }
    Ok(out)
}
