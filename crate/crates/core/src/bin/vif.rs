use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vif_core::analysis::{self, mi, BenchArm, Workload};
use vif_core::config::RunConfig;
use vif_core::model::{generate, Checkpoint, GenerationConfig, Mode, ModelParams};
use vif_core::pipeline::{self, Arm, ExperimentSpec};
use vif_core::synthgrid::{per_position_accuracy, write_dataset, TaskSample};
use vif_core::tensor::Rng;
use vif_core::trainer::{grad_check_all, train_stage, GradCheckOptions, TrainLog};
use vif_core::vif::VifParams;
use vif_core::{Result, VifError};

/// Vision inference former on a toy multimodal decoder: data generation,
/// staged training, decoding, diagnostics and benchmarks.
///
/// Exit status: 0 on success, 1 on usage or configuration errors, 2 on a
/// contract violation (failed check, corrupt file, non-finite values).
#[derive(Parser, Debug)]
#[command(name = "vif", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the root seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArmArg {
    Baseline,
    Vif,
    VifNoSelfAttn,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Arm {
        match a {
            ArmArg::Baseline => Arm::Baseline,
            ArmArg::Vif => Arm::Vif,
            ArmArg::VifNoSelfAttn => Arm::VifNoSelfAttn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Warmup,
    Full,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Vif,
    Passthrough,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Vif => Mode::Vif,
            ModeArg::Passthrough => Mode::Passthrough,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the training and evaluation grid-recall datasets.
    GenData,
    /// Train one arm through the warm-up and/or full stage.
    Train {
        #[arg(long, value_enum, default_value = "vif")]
        arm: ArmArg,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Greedy-decode evaluation samples and write traces and accuracy.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "vif")]
        mode: ModeArg,
        /// Number of evaluation samples (default: all).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Consistency curve, decay slopes and accuracy of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "vif")]
        mode: ModeArg,
    },
    /// Finite-difference check of every parameter gradient (f64).
    Gradcheck {
        /// Number of random initializations.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Coordinates checked per tensor (default: all).
        #[arg(long)]
        coords: Option<usize>,
        /// Failure threshold on the relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Chain rule and monotonicity of conditional MI on random tables.
    MiCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Decoding overhead of the former versus the plain decoder.
    Bench {
        /// Benchmark trained weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Former with and without visual self-attention on identical data.
    Ablate {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Baseline versus former: accuracy by position and decay slopes.
    Reproduce {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn spec(&self) -> Result<ExperimentSpec> {
        self.cfg.experiment()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        Ok(p)
    }

    fn header(&self, what: &str) -> String {
        format!("# {what} seed={}\n", self.cfg.seed)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out)?;
    let ctx = Ctx { cfg, out };
    match cli.cmd {
        Cmd::GenData => gen_data(&ctx),
        Cmd::Train { arm, stage, from } => train(&ctx, arm.into(), stage, from.as_deref()),
        Cmd::Generate { checkpoint, mode, n } => generate_cmd(&ctx, &checkpoint, mode.into(), n),
        Cmd::Analyze { checkpoint, mode } => analyze(&ctx, &checkpoint, mode.into()),
        Cmd::Gradcheck { seeds, coords, tolerance } => gradcheck(&ctx, seeds, coords, tolerance),
        Cmd::MiCheck { trials } => mi_check(&ctx, trials),
        Cmd::Bench { checkpoint } => bench(&ctx, checkpoint.as_deref()),
        Cmd::Ablate { seeds } => ablate(&ctx, seeds),
        Cmd::Reproduce { seeds } => reproduce(&ctx, seeds),
    }
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let spec = ctx.spec()?;
    let (train, eval) = spec.datasets()?;
    for (name, set) in [("train.txt", &train), ("eval.txt", &eval)] {
        let p = ctx.path(name);
        write_dataset(&p, set, spec.task.n_symbols, spec.seed)?;
        report(&p);
    }
    Ok(())
}

fn check_matches(spec: &ExperimentSpec, ck: &Checkpoint) -> Result<()> {
    if ck.model.config != spec.model {
        return Err(VifError::Config(format!(
            "checkpoint model {:?} does not match the configuration {:?}",
            ck.model.config, spec.model
        )));
    }
    Ok(())
}

fn train(ctx: &Ctx, arm: Arm, stage: StageArg, from: Option<&Path>) -> Result<()> {
    let spec = ctx.spec()?;
    let (train_set, _) = spec.datasets()?;
    let (mut model, mut vif) = match from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            check_matches(&spec, &ck)?;
            if (arm == Arm::Baseline) != ck.vif.is_none() {
                return Err(VifError::Config(format!("checkpoint {} does not belong to arm {}", p.display(), arm.as_str())));
            }
            (ck.model, ck.vif)
        }
        None => spec.init(arm)?,
    };
    let selected: Vec<usize> = match stage {
        StageArg::Warmup => vec![0],
        StageArg::Full => vec![1],
        StageArg::All => vec![0, 1],
    };
    let mut log = TrainLog::default();
    for i in selected {
        let st = &spec.stages[i];
        log.extend(train_stage(&mut model, vif.as_mut(), &train_set, st, spec.stage_seed(i))?);
        let ck = Checkpoint { model: model.clone(), vif: vif.clone() };
        let p = ctx.path(&format!("{}.{}.ckpt", arm.as_str(), st.name));
        ck.save(&p)?;
        report(&p);
    }
    let p = ctx.write(&format!("{}.metrics.csv", arm.as_str()), &log.to_csv())?;
    report(&p);
    Ok(())
}

fn load_for_mode(spec: &ExperimentSpec, path: &Path, mode: Mode) -> Result<(ModelParams, Option<VifParams>)> {
    let ck = Checkpoint::load(path)?;
    check_matches(spec, &ck)?;
    if mode == Mode::Vif && ck.vif.is_none() {
        return Err(VifError::Config(format!("{} has no former weights; use --mode baseline", path.display())));
    }
    Ok((ck.model, ck.vif))
}

fn accuracy_csv(header: &str, acc: &[f64]) -> String {
    let mut out = String::from(header);
    out.push_str("position,accuracy\n");
    for (i, a) in acc.iter().enumerate() {
        writeln!(out, "{i},{a:.6}").unwrap();
    }
    out
}

fn generate_cmd(ctx: &Ctx, checkpoint: &Path, mode: Mode, n: Option<usize>) -> Result<()> {
    let spec = ctx.spec()?;
    let (model, vif) = load_for_mode(&spec, checkpoint, mode)?;
    let (_, eval) = spec.datasets()?;
    let n = n.unwrap_or(eval.len()).min(eval.len());
    if n == 0 {
        return Err(VifError::InvalidArgument("--n must be at least 1".into()));
    }
    let samples: &[TaskSample] = &eval[..n];
    let gen_cfg = GenerationConfig::new(mode, spec.task.side * spec.task.side + 1);
    let mut traces_txt = ctx.header(&format!("traces mode={}", mode.as_str()));
    traces_txt.push_str("sample,step,token,p_token,h_norm,z_h_norm,h_fused_norm\n");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut generated = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let tr = generate(&s.image, &s.prompt, &model, vif.as_ref(), &gen_cfg)?;
        for (l, st) in tr.steps.iter().enumerate() {
            let zh = st.z_h.as_deref().map_or(String::new(), |z| format!("{:.9}", norm(z)));
            writeln!(
                traces_txt,
                "{i},{l},{},{:.9},{:.9},{zh},{:.9}",
                st.token,
                st.probs[st.token],
                norm(&st.h),
                norm(&st.h_fused)
            )
            .unwrap();
        }
        generated.push(tr.tokens());
    }
    let acc = per_position_accuracy(&generated, samples)?;
    report(&ctx.write(&format!("traces.{}.csv", mode.as_str()), &traces_txt)?);
    let header = ctx.header(&format!("accuracy mode={}", mode.as_str()));
    report(&ctx.write(&format!("accuracy.{}.csv", mode.as_str()), &accuracy_csv(&header, &acc))?);
    Ok(())
}

fn arm_for(mode: Mode, vif: Option<&VifParams>) -> Arm {
    match (mode, vif) {
        (Mode::Vif, Some(v)) if !v.enable_self_attn => Arm::VifNoSelfAttn,
        (Mode::Vif, _) => Arm::Vif,
        _ => Arm::Baseline,
    }
}

fn analyze(ctx: &Ctx, checkpoint: &Path, mode: Mode) -> Result<()> {
    let spec = ctx.spec()?;
    let (model, vif) = load_for_mode(&spec, checkpoint, mode)?;
    let (_, eval) = spec.datasets()?;
    let vif = if mode == Mode::Vif { vif } else { None };
    let ev = pipeline::evaluate(&spec, arm_for(mode, vif.as_ref()), &model, vif.as_ref(), &eval)?;
    let tag = mode.as_str();
    report(&ctx.write(&format!("curve.{tag}.csv"), &ev.curve.to_csv())?);
    let header = ctx.header(&format!("accuracy mode={tag}"));
    report(&ctx.write(&format!("accuracy.{tag}.csv"), &accuracy_csv(&header, &ev.accuracy))?);
    let mut summary = String::new();
    writeln!(summary, "mode = {tag}").unwrap();
    writeln!(summary, "seed = {}", spec.seed).unwrap();
    writeln!(summary, "samples = {}", eval.len()).unwrap();
    writeln!(summary, "eval_loss = {:.9}", ev.eval_loss).unwrap();
    writeln!(summary, "mean_accuracy = {:.6}", ev.mean_accuracy()).unwrap();
    writeln!(summary, "last_quartile_accuracy = {:.6}", ev.last_quartile_accuracy()).unwrap();
    match ev.slope {
        Some(s) => {
            writeln!(summary, "cos_slope = {:.9e}", s.cos).unwrap();
            writeln!(summary, "cos_smooth_slope = {:.9e}", s.cos_smooth).unwrap();
            writeln!(summary, "l2_slope = {:.9e}", s.l2).unwrap();
            writeln!(summary, "l2_smooth_slope = {:.9e}", s.l2_smooth).unwrap();
        }
        None => writeln!(summary, "slopes = undefined (fewer than two generated positions)").unwrap(),
    }
    report(&ctx.write(&format!("summary.{tag}.txt"), &summary)?);
    Ok(())
}

fn gradcheck(ctx: &Ctx, seeds: u64, coords: Option<usize>, tolerance: f64) -> Result<()> {
    let mut spec = ctx.spec()?;
    spec.model.precision = vif_core::tensor::Precision::F64;
    let (train_set, _) = spec.datasets()?;
    let mut out = ctx.header("gradcheck");
    let mut worst = 0.0f64;
    for k in 0..seeds {
        let seed = spec.seed.wrapping_add(k);
        let s = ExperimentSpec { seed, ..spec.clone() };
        let (mut model, vif) = s.init(Arm::Vif)?;
        let mut vif = vif.expect("former arm");
        let sample = &train_set[(k as usize) % train_set.len()];
        let opts = GradCheckOptions { max_coords: coords, seed, ..Default::default() };
        let r = grad_check_all(&mut model, Some(&mut vif), sample, None, &opts)?;
        let w = r.worst().expect("at least one tensor");
        writeln!(out, "# init seed={seed} max_rel_err={:.3e} worst={}", r.max_rel_err(), w.name).unwrap();
        out.push_str(&r.to_text());
        worst = worst.max(r.max_rel_err());
        println!("seed {seed}: max rel err {:.3e} ({})", r.max_rel_err(), w.name);
    }
    writeln!(out, "max_rel_err = {worst:.3e}").unwrap();
    writeln!(out, "pass = {}", worst <= tolerance).unwrap();
    report(&ctx.write("gradcheck.txt", &out)?);
    if worst > tolerance {
        return Err(VifError::Contract(format!("gradient check failed: {worst:.3e} > {tolerance:e}")));
    }
    Ok(())
}

fn mi_check(ctx: &Ctx, trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(VifError::InvalidArgument("--trials must be at least 1".into()));
    }
    let reports = mi::random_trials(trials, ctx.cfg.seed)?;
    let mut out = ctx.header("mi-check");
    out.push_str("trial,joint,dims,i_o_z_given_t,i_o_a_given_z_t,i_o_za_given_t,residual,margin,pass\n");
    let mut passed = 0;
    for (i, r) in reports.iter().enumerate() {
        passed += r.passed() as usize;
        writeln!(
            out,
            "{i},{},{}x{}x{}x{},{:.17e},{:.17e},{:.17e},{:.3e},{:.17e},{}",
            r.label,
            r.dims[0],
            r.dims[1],
            r.dims[2],
            r.dims[3],
            r.i_oz_t,
            r.i_oa_zt,
            r.i_oza_t,
            r.residual,
            r.margin,
            r.passed()
        )
        .unwrap();
    }
    let max_res = reports.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    let min_margin = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    writeln!(out, "# passed = {passed}/{trials}").unwrap();
    writeln!(out, "# max_abs_residual = {max_res:.3e}").unwrap();
    writeln!(out, "# min_margin = {min_margin:.17e}").unwrap();
    report(&ctx.write("mi_check.csv", &out)?);
    println!("{passed}/{trials} passed");
    if passed != trials {
        return Err(VifError::Contract(format!("{} MI checks failed", trials - passed)));
    }
    Ok(())
}

fn bench(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    let spec = ctx.spec()?;
    let opts = ctx.cfg.bench_options()?;
    let (model, vif) = match checkpoint {
        Some(p) => load_for_mode(&spec, p, Mode::Vif)?,
        None => spec.init(Arm::Vif)?,
    };
    let vif = vif.expect("former weights");
    let (_, eval) = spec.datasets()?;
    let mut rng = Rng::new(spec.seed).fork("bench");
    let mut idx: Vec<usize> = (0..eval.len()).collect();
    rng.shuffle(&mut idx);
    let items = idx
        .iter()
        .cycle()
        .take(ctx.cfg.bench.samples)
        .map(|&i| (eval[i].image.clone(), eval[i].prompt.clone()))
        .collect();
    let workload = Workload { items, steps: ctx.cfg.bench.steps };
    let r = analysis::measure_overhead(&model, &vif, &workload, &opts)?;
    report(&ctx.write("overhead.csv", &r.to_csv(spec.seed, true))?);
    println!(
        "cached/baseline time {:.3}x, naive/cached {:.3}x, params {:.3}x",
        r.time_ratio(),
        r.arm(BenchArm::VifNaive).median_step_ns / r.arm(BenchArm::VifCached).median_step_ns,
        r.param_ratio()
    );
    if !r.cache_tokens_match {
        return Err(VifError::Contract("cached and recomputed decoding disagree".into()));
    }
    Ok(())
}

fn ablate(ctx: &Ctx, seeds: u64) -> Result<()> {
    let spec = ctx.spec()?;
    let mut out = ctx.header("ablation");
    out.push_str("seed,acc_full,acc_no_self_attn,lastq_full,lastq_no_self_attn,loss_full,loss_no_self_attn\n");
    let (mut sum_full, mut sum_no) = (0.0, 0.0);
    for k in 0..seeds {
        let s = ExperimentSpec { seed: spec.seed.wrapping_add(k), ..spec.clone() };
        let (train_set, eval) = s.datasets()?;
        let full = pipeline::run_arm(&s, Arm::Vif, &train_set, &eval)?.eval;
        let no = pipeline::run_arm(&s, Arm::VifNoSelfAttn, &train_set, &eval)?.eval;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9}",
            s.seed,
            full.mean_accuracy(),
            no.mean_accuracy(),
            full.last_quartile_accuracy(),
            no.last_quartile_accuracy(),
            full.eval_loss,
            no.eval_loss
        )
        .unwrap();
        println!("seed {}: full {:.4} no-self-attn {:.4}", s.seed, full.mean_accuracy(), no.mean_accuracy());
        sum_full += full.mean_accuracy();
        sum_no += no.mean_accuracy();
    }
    let n = seeds.max(1) as f64;
    writeln!(out, "# mean_acc_full = {:.6}", sum_full / n).unwrap();
    writeln!(out, "# mean_acc_no_self_attn = {:.6}", sum_no / n).unwrap();
    report(&ctx.write("ablation.csv", &out)?);
    Ok(())
}

fn reproduce(ctx: &Ctx, seeds: u64) -> Result<()> {
    let spec = ctx.spec()?;
    let mut out = ctx.header("decay");
    out.push_str("seed,arm,mean_accuracy,last_quartile_accuracy,cos_smooth_slope,l2_smooth_slope,eval_loss\n");
    for k in 0..seeds {
        let s = ExperimentSpec { seed: spec.seed.wrapping_add(k), ..spec.clone() };
        let (train_set, eval) = s.datasets()?;
        for arm in [Arm::Baseline, Arm::Vif] {
            let o = pipeline::run_arm(&s, arm, &train_set, &eval)?;
            let (cs, ls) = o.eval.slope.map_or((f64::NAN, f64::NAN), |d| (d.cos_smooth, d.l2_smooth));
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.9e},{:.9e},{:.9}",
                s.seed,
                arm.as_str(),
                o.eval.mean_accuracy(),
                o.eval.last_quartile_accuracy(),
                cs,
                ls,
                o.eval.eval_loss
            )
            .unwrap();
            ctx.write(&format!("curve.{}.seed{}.csv", arm.as_str(), s.seed), &o.eval.curve.to_csv())?;
            let header = ctx.header(&format!("accuracy arm={} seed={}", arm.as_str(), s.seed));
            ctx.write(
                &format!("accuracy.{}.seed{}.csv", arm.as_str(), s.seed),
                &accuracy_csv(&header, &o.eval.accuracy),
            )?;
            println!("seed {} {}: accuracy {:.4}", s.seed, arm.as_str(), o.eval.mean_accuracy());
        }
    }
    report(&ctx.write("decay.csv", &out)?);
    Ok(())
}
