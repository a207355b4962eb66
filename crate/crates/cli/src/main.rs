//! `apollo`: run the unlearning membership game stage by stage or end to end.
//!
//! Every stage reads and writes one run directory (`--out`). Stages that need
//! an earlier stage's artifact exit with status 2 when it is missing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use apollo_core::attack::{self, Conjecture, Horizon, LossContext};
use apollo_core::checkpoint::{self, Provenance};
use apollo_core::datagen;
use apollo_core::harness::{self, Challenge, GameOutcome, GameSpec, Preset, RunReport, ScoreReport};
use apollo_core::learn::{self, Method};
use apollo_core::plot;
use apollo_core::region;
use apollo_core::shadow::ShadowCache;
use apollo_core::{Error, Execution};

#[derive(Parser)]
#[command(name = "apollo", version, about = "Label-only membership inference against machine unlearning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Game configuration in TOML or JSON; defaults to the run directory's snapshot, then the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "toy")]
    preset: Preset,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the population and its splits; writes data.csv and config.toml.
    GenData,
    /// Train the original model on D.
    Train,
    /// Unlearn D_u from the original model and retrain on D_r.
    Unlearn {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Train the shadow ensemble and its unlearned counterparts into the cache.
    Shadows,
    /// Run the adversarial search for every target; writes attack.json and traces.
    Attack {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Score every target with the likelihood-ratio and posterior baselines.
    Baseline {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Play the full game on stored models; writes report.json, scores.csv, roc.csv and roc.svg.
    Eval {
        #[arg(long)]
        method: Option<Method>,
    },
    /// TPR grid over search steps for both conjectures.
    Dynamics {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Compare decision regions of original, unlearned and retrained models.
    RegionMap {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run every stage for several seeds and methods and aggregate.
    Report {
        /// Number of consecutive seeds starting at the master seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "RT,GA")]
        methods: Vec<Method>,
    },
}

struct Run {
    spec: GameSpec,
    preset: Preset,
    dir: PathBuf,
    exec: Execution,
}

fn read_spec(path: &Path) -> anyhow::Result<GameSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let json = path.extension().is_some_and(|e| e == "json");
    if json {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    match toml::from_str(&text) {
        Ok(spec) => Ok(spec),
        Err(e) => serde_json::from_str(&text).map_err(|_| anyhow::Error::new(e)).with_context(|| format!("parsing {}", path.display())),
    }
}

impl Run {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let snapshot = common.out.join("config.toml");
        let mut spec = match (&common.config, snapshot.exists()) {
            (Some(path), _) => read_spec(path)?,
            (None, true) => read_spec(&snapshot)?,
            (None, false) => GameSpec::preset(common.preset, 0),
        };
        if let Some(seed) = common.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        let exec = match common.threads {
            Some(1) => Execution::Sequential,
            Some(n) => {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
                Execution::Parallel
            }
            None => Execution::Parallel,
        };
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self { spec, preset: common.preset, dir: common.out.clone(), exec })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn with_method(&self, method: Option<Method>) -> GameSpec {
        match method {
            Some(m) if m != self.spec.challenger.unlearn.method => self.spec.clone().with_method(m, self.preset),
            _ => self.spec.clone(),
        }
    }

    fn cache(&self) -> ShadowCache {
        ShadowCache::new(&self.dir)
    }

    fn write(&self, name: &str, content: &str) -> anyhow::Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
    }

    fn snapshot(&self) -> anyhow::Result<()> {
        self.write("config.toml", &toml::to_string(&self.spec)?)
    }

    fn load_split(&self) -> anyhow::Result<datagen::SplitDataset> {
        let path = self.path("data.csv");
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.display().to_string(), hint: "run gen-data first".into() }.into());
        }
        Ok(datagen::read_csv(fs::File::open(path)?)?)
    }

    fn model_path(&self, name: &str) -> PathBuf {
        self.path(&format!("models/{name}.ckpt"))
    }

    fn load_model(&self, name: &str, hint: &str) -> anyhow::Result<apollo_core::autodiff::ParamModel> {
        match checkpoint::load(&self.model_path(name)) {
            Err(Error::MissingArtifact { path, .. }) => Err(Error::MissingArtifact { path, hint: hint.into() }.into()),
            other => Ok(other?.0),
        }
    }

    fn challenge(&self, spec: &GameSpec) -> anyhow::Result<Challenge> {
        let split = self.load_split()?;
        let original = self.load_model("original", "run train first")?;
        Ok(Challenge::new(spec, split, original)?)
    }

    /// Stored unlearned and retrained models for the spec's method.
    fn challenger_models(&self, spec: &GameSpec) -> anyhow::Result<(apollo_core::autodiff::ParamModel, apollo_core::autodiff::ParamModel)> {
        let tag = spec.challenger.unlearn.method.tag();
        let hint = format!("run unlearn --method {tag} first");
        Ok((self.load_model(&format!("unlearned-{tag}"), &hint)?, self.load_model("retrained", &hint)?))
    }

    fn play(&self, spec: &GameSpec) -> anyhow::Result<GameOutcome> {
        let challenge = self.challenge(spec)?;
        let (unlearned, retrained) = self.challenger_models(spec)?;
        let cache = self.cache();
        let ensemble = harness::build_shadows(spec, &challenge, self.exec, Some(&cache))?;
        Ok(harness::play(spec, &challenge, &ensemble, unlearned, retrained, self.exec, Some(&cache))?)
    }

    fn write_reports(&self, spec: &GameSpec, reports: Vec<ScoreReport>) -> anyhow::Result<RunReport> {
        let mut scores = Vec::new();
        harness::write_scores_csv(&reports, &mut scores)?;
        self.write("scores.csv", std::str::from_utf8(&scores)?)?;
        let mut roc = Vec::new();
        harness::write_roc_csv(&reports, &mut roc)?;
        self.write("roc.csv", std::str::from_utf8(&roc)?)?;
        for r in &reports {
            let mut curves = vec![("Apollo", r.apollo.roc.as_slice()), ("U-MIA", r.umia.roc.as_slice())];
            if let Some(u) = &r.ulira {
                curves.push(("U-LiRA", u.roc.as_slice()));
            }
            let title = format!("{} seed {}", r.method.tag(), r.seed);
            self.write(&format!("roc-{}-s{}.svg", r.method.tag(), r.seed), &plot::roc_svg(&title, &curves))?;
        }
        let report = RunReport::new(spec.clone(), reports)?;
        self.write("report.json", &report.to_json()?)?;
        Ok(report)
    }
}

fn gen_data(run: &Run) -> anyhow::Result<()> {
    let split = harness::generate_split(&run.spec)?;
    let mut buf = Vec::new();
    datagen::write_csv(&split, &mut buf)?;
    run.write("data.csv", std::str::from_utf8(&buf)?)?;
    run.snapshot()?;
    println!("wrote {} samples ({} train, {} forget, {} test)", split.store.len(), split.train.len(), split.unlearn.len(), split.test.len());
    Ok(())
}

fn train(run: &Run) -> anyhow::Result<()> {
    let split = run.load_split()?;
    let model = harness::train_original(&run.spec, &split)?;
    checkpoint::save(&run.model_path("original"), &model, run.spec.seed, Provenance::Trained)?;
    let acc = learn::accuracy(&model, &split.store, &split.test)?;
    println!("original model: test accuracy {acc:.3}");
    Ok(())
}

fn unlearn(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let split = run.load_split()?;
    let original = run.load_model("original", "run train first")?;
    let (unlearned, retrained) = harness::unlearn_challenger(&spec, &split, &original)?;
    let m = spec.challenger.unlearn.method;
    checkpoint::save(&run.model_path(&format!("unlearned-{}", m.tag())), &unlearned, spec.seed, m.into())?;
    checkpoint::save(&run.model_path("retrained"), &retrained, spec.seed, Provenance::Retrained)?;
    println!(
        "{}: forget accuracy {:.3} (retrained {:.3})",
        m.tag(),
        learn::accuracy(&unlearned, &split.store, &split.unlearn)?,
        learn::accuracy(&retrained, &split.store, &split.unlearn)?
    );
    Ok(())
}

fn shadows(run: &Run) -> anyhow::Result<()> {
    let split = run.load_split()?;
    let original = run.load_model("original", "run train first")?;
    let challenge = Challenge::new(&run.spec, split, original)?;
    let cache = run.cache();
    let ensemble = harness::build_shadows(&run.spec, &challenge, run.exec, Some(&cache))?;
    harness::target_views(&run.spec, &challenge, &ensemble, run.exec, Some(&cache))?;
    println!("{} shadows cached under {}", ensemble.len(), cache.dir(ensemble.key()).display());
    Ok(())
}

fn attack_stage(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let challenge = run.challenge(&spec)?;
    let (unlearned, _) = run.challenger_models(&spec)?;
    let cache = run.cache();
    let ensemble = harness::build_shadows(&spec, &challenge, run.exec, Some(&cache))?;
    let views = harness::target_views(&spec, &challenge, &ensemble, run.exec, Some(&cache))?;
    let contexts: Vec<LossContext<'_>> = views.iter().map(|v| LossContext::from_view(&ensemble, v)).collect();
    let mut decisions = Vec::new();
    let mut bits = vec![[false; 2]; contexts.len()];
    for (slot, conjecture) in [Conjecture::Under, Conjecture::Over].into_iter().enumerate() {
        let cfg = spec.attack_config(conjecture);
        let paths = attack::search_paths(&contexts, &cfg, Horizon::UntilStop, run.exec)?;
        for (k, path) in paths.iter().enumerate() {
            let mut outcome = path.outcome(&cfg)?;
            bits[k][slot] = attack::decide(&unlearned, &mut outcome, path.y, cfg.variant)?;
            let mut buf = Vec::new();
            attack::write_trace_jsonl(&outcome.trace, &mut buf)?;
            run.write(&format!("traces/{}/{}.jsonl", cfg.variant.tag(), views[k].target.id), std::str::from_utf8(&buf)?)?;
            decisions.push(serde_json::json!({
                "id": views[k].target.id,
                "variant": cfg.variant.tag(),
                "x_prime": outcome.x_prime,
                "steps_used": outcome.steps_used,
                "stop_reason": outcome.stop_reason,
                "decision": outcome.decision,
            }));
        }
    }
    let targets = challenge.targets();
    let combined: Vec<bool> = bits.iter().map(|b| b[0] || b[1]).collect();
    let truths: Vec<bool> = targets.iter().map(|t| t.1).collect();
    let op = apollo_core::metrics::operating_point(&combined, &truths)?;
    run.write("attack.json", &(serde_json::to_string_pretty(&serde_json::json!({ "combined": op, "searches": decisions }))? + "\n"))?;
    println!("{}: combined TPR {:.3} at FPR {:.3}", spec.challenger.unlearn.method.tag(), op.tpr, op.fpr);
    Ok(())
}

fn baseline(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let outcome = run.play(&spec)?;
    let r = &outcome.report;
    let rows: Vec<serde_json::Value> =
        r.samples.iter().map(|s| serde_json::json!({ "id": s.id, "member": s.member, "ulira": s.ulira, "umia": s.umia })).collect();
    let doc = serde_json::json!({ "ulira": r.ulira, "umia": r.umia, "samples": rows });
    run.write("baseline.json", &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    println!(
        "U-LiRA AUC {} | U-MIA AUC {:.3}",
        r.ulira.as_ref().map(|u| format!("{:.3}", u.auc)).unwrap_or_else(|| "n/a".into()),
        r.umia.auc
    );
    Ok(())
}

fn eval(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let outcome = run.play(&spec)?;
    let report = run.write_reports(&spec, vec![outcome.report])?;
    print_summary(&report);
    Ok(())
}

fn dynamics(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let outcome = run.play(&spec)?;
    let grid = &outcome.report.dynamics;
    let mut csv = String::from("t_under,t_over,tpr,fpr\n");
    for tu in 0..=grid.t_max {
        for to in 0..=grid.t_max {
            let fpr = grid.fpr.as_ref().map(|f| f[tu][to].to_string()).unwrap_or_default();
            csv.push_str(&format!("{tu},{to},{},{fpr}\n", grid.tpr[tu][to]));
        }
    }
    run.write("dynamics.csv", &csv)?;
    let tag = spec.challenger.unlearn.method.tag();
    run.write(&format!("dynamics-{tag}.svg"), &plot::dynamics_svg(&format!("{tag} TPR by search steps"), grid))?;
    println!("{tag}: TPR at ({0}, {0}) steps {1:.3}", grid.t_max, grid.tpr[grid.t_max][grid.t_max]);
    Ok(())
}

fn region_map(run: &Run, method: Option<Method>) -> anyhow::Result<()> {
    let spec = run.with_method(method);
    let split = run.load_split()?;
    let original = run.load_model("original", "run train first")?;
    let (unlearned, retrained) = run.challenger_models(&spec)?;
    let map = region::region_map(&original, &unlearned, &retrained, spec.eval.region_resolution)?;
    let mut buf = Vec::new();
    map.write_csv(&mut buf)?;
    run.write("region.csv", std::str::from_utf8(&buf)?)?;
    let points: Vec<(f64, f64, bool)> =
        split.train.iter().map(|&i| split.store.get(i)).map(|s| (s.x[0], s.x[1], split.unlearn.contains(&s.id))).collect();
    let tag = spec.challenger.unlearn.method.tag();
    run.write(&format!("region-{tag}.svg"), &map.to_svg(&points))?;
    let c = map.counts();
    println!("{tag}: {} under cells, {} over cells, {} other of {}", c.under, c.over, c.other, map.cells.len());
    Ok(())
}

fn report(run: &Run, seeds: u64, methods: &[Method]) -> anyhow::Result<()> {
    if methods.is_empty() {
        bail!("no methods requested");
    }
    let mut reports = Vec::new();
    for seed in run.spec.seed..run.spec.seed + seeds {
        let spec = GameSpec { seed, ..run.spec.clone() };
        let cache = run.cache();
        for outcome in harness::run_methods(&spec, methods, run.preset, run.exec, Some(&cache))? {
            let tag = outcome.report.method.tag();
            let grid = &outcome.report.dynamics;
            run.write(&format!("dynamics-{tag}-s{seed}.svg"), &plot::dynamics_svg(&format!("{tag} seed {seed}"), grid))?;
            run.write(&format!("region-{tag}-s{seed}.svg"), &outcome.region.to_svg(&[]))?;
            reports.push(outcome.report);
        }
    }
    run.snapshot()?;
    let report = run.write_reports(&run.spec, reports)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &RunReport) {
    for s in &report.summary {
        println!(
            "{}: combined TPR {:.3} FPR {:.3} (advantage {:+.3}) | U-LiRA AUC {} | U-MIA AUC {:.3} over {} seed(s)",
            s.method.tag(),
            s.combined_tpr,
            s.combined_fpr,
            s.advantage,
            s.ulira_auc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()),
            s.umia_auc,
            s.seeds.len()
        );
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let run = Run::new(&cli.common)?;
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::Train => train(&run),
        Command::Unlearn { method } => unlearn(&run, method),
        Command::Shadows => shadows(&run),
        Command::Attack { method } => attack_stage(&run, method),
        Command::Baseline { method } => baseline(&run, method),
        Command::Eval { method } => eval(&run, method),
        Command::Dynamics { method } => dynamics(&run, method),
        Command::RegionMap { method } => region_map(&run, method),
        Command::Report { seeds, methods } => report(&run, seeds, &methods),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::MissingArtifact { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
