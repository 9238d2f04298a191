use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use modiff::config::RunConfig;
use modiff::i2v::{synthesize_video, I2v};
use modiff::io::{self, Checkpoint};
use modiff::metrics::{evaluate, temporal_error_maps, EvalReport};
use modiff::phantom::Video4D;
use modiff::pipeline::{self, ablation_csv, csv_row, Arm, ArmModels, CSV_HEADER};
use modiff::plot::{montage, write_png, Range};
use modiff::tddm::Tddm;
use modiff::trainer::RunReport;
use modiff::vae::Vae;
use modiff::Tensor;

use crate::{Cli, Command};

pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<(), Failure>;

fn runtime<T>(r: anyhow::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.ck"))
    }

    fn report(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }
}

fn tddm_name(arm: Arm) -> &'static str {
    match arm {
        Arm::Full | Arm::NoFal => "tddm",
        Arm::NoN => "tddm-no-n",
        Arm::NoPal => "tddm-no-pal",
    }
}

fn i2v_name(arm: Arm) -> &'static str {
    match arm {
        Arm::Full | Arm::NoPal => "i2v",
        Arm::NoFal => "i2v-no-fal",
        Arm::NoN => "i2v-no-n",
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config: {}", p.display()))?,
        None => RunConfig::preset(&cli.global.preset).context("config")?,
    };
    if let Ok(s) = std::env::var("MODIFF_SEED") {
        cfg.seed = s.trim().parse().with_context(|| format!("config: MODIFF_SEED={s:?} is not an integer"))?;
    }
    if let Some(dir) = &cli.global.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate().context("config")?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli).map_err(Failure::Usage)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))?;
    }
    let ctx = Ctx { out: cfg.out_dir.clone(), cfg };
    runtime(fs::create_dir_all(&ctx.out).with_context(|| format!("cli: cannot create {}", ctx.out.display())))?;
    runtime(ctx.cfg.write_resolved(&ctx.out).context("cli: writing resolved config"))?;
    match cli.command {
        Command::GenData => runtime(gen_data(&ctx)),
        Command::TrainVae => runtime(train_vae(&ctx)),
        Command::TrainTddm { arm } => runtime(train_tddm(&ctx, arm).map(|_| ())),
        Command::TrainI2v { arm } => runtime(train_i2v(&ctx, arm).map(|_| ())),
        Command::SampleFields { prompt, frames, seed, output, arm } => {
            check_frames(frames)?;
            runtime(sample_fields(&ctx, &prompt, frames, seed, &output, arm))
        }
        Command::Synthesize { prompt, frames, seed, output, montage, arm } => {
            check_frames(frames)?;
            runtime(synthesize(&ctx, &prompt, frames, seed, &output, montage, arm))
        }
        Command::Evaluate { arm } => runtime(evaluate_cmd(&ctx, arm)),
        Command::Ablate { arms } => {
            if arms.is_empty() {
                return Err(Failure::Usage(anyhow!("--arms must name at least one arm")));
            }
            runtime(ablate(&ctx, &arms))
        }
        Command::Plot { input, reference, output } => runtime(plot(&ctx, &input, reference.as_deref(), &output)),
    }
}

fn check_frames(n: usize) -> Outcome {
    modiff::tddm::check_frame_number(n).map_err(|e| Failure::Usage(anyhow!("--frames: {e}")))
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    let ds = pipeline::dataset(&ctx.cfg).context("phantom: generating dataset")?;
    let n = io::write_dataset(&ctx.data_dir(), &ds).context("phantom: writing dataset")?;
    println!("wrote {n} sequences to {}", ctx.data_dir().display());
    Ok(())
}

fn load_split(ctx: &Ctx, split: &str) -> anyhow::Result<Vec<Video4D>> {
    io::read_split(&ctx.data_dir(), split)
        .with_context(|| format!("phantom: reading {split} split (run gen-data first)"))
}

fn write_report(ctx: &Ctx, name: &str, report: &RunReport) -> anyhow::Result<()> {
    let path = ctx.report(&format!("{name}.json"));
    fs::create_dir_all(path.parent().expect("report dir"))?;
    fs::write(&path, serde_json::to_string_pretty(report)?)?;
    println!(
        "{name}: {} steps, final loss {:.6}, best val {:?}, report {}",
        report.final_step,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.best_val_loss,
        path.display()
    );
    Ok(())
}

fn load_vae(ctx: &Ctx) -> anyhow::Result<Vae> {
    let ck = Checkpoint::read(&ctx.checkpoint("vae")).context("vae")?;
    Vae::from_checkpoint(&ck).context("vae")
}

fn load_tddm(ctx: &Ctx, arm: Arm) -> anyhow::Result<Tddm> {
    let ck = Checkpoint::read(&ctx.checkpoint(tddm_name(arm))).context("tddm")?;
    Tddm::from_checkpoint(&ck).context("tddm")
}

fn load_i2v(ctx: &Ctx, arm: Arm) -> anyhow::Result<I2v> {
    let ck = Checkpoint::read(&ctx.checkpoint(i2v_name(arm))).context("i2v")?;
    I2v::from_checkpoint(&ck).context("i2v")
}

fn train_vae(ctx: &Ctx) -> anyhow::Result<()> {
    let (train, val) = (load_split(ctx, "train")?, load_split(ctx, "val")?);
    let (vae, report) =
        pipeline::train_vae(&ctx.cfg.vae, &ctx.cfg.trainer.vae, &train, &val).context("vae: training")?;
    vae.to_checkpoint().write(&ctx.checkpoint("vae")).context("vae: saving checkpoint")?;
    write_report(ctx, "vae", &report)
}

fn train_tddm(ctx: &Ctx, arm: Arm) -> anyhow::Result<Tddm> {
    let (train, val) = (load_split(ctx, "train")?, load_split(ctx, "val")?);
    let cfg = arm.tddm_config(&ctx.cfg.tddm);
    let (tddm, report) = pipeline::train_tddm(&cfg, &ctx.cfg.trainer.tddm, &train, &val).context("tddm: training")?;
    tddm.to_checkpoint().write(&ctx.checkpoint(tddm_name(arm))).context("tddm: saving checkpoint")?;
    write_report(ctx, tddm_name(arm), &report)?;
    Ok(tddm)
}

fn train_i2v(ctx: &Ctx, arm: Arm) -> anyhow::Result<I2v> {
    let vae = load_vae(ctx)?;
    let (train, val) = (load_split(ctx, "train")?, load_split(ctx, "val")?);
    let cfg = arm.i2v_config(&ctx.cfg.i2v);
    let (i2v, report) =
        pipeline::train_i2v(&cfg, &ctx.cfg.trainer.i2v, ctx.cfg.tddm.working_downsample, &vae, &train, &val)
            .context("i2v: training")?;
    i2v.to_checkpoint().write(&ctx.checkpoint(i2v_name(arm))).context("i2v: saving checkpoint")?;
    write_report(ctx, i2v_name(arm), &report)?;
    Ok(i2v)
}

/// A rank-3 T4D is the prompt itself; a video contributes its first frame.
fn read_prompt(path: &Path) -> anyhow::Result<Tensor> {
    let (t, _) = io::read_t4d(path).with_context(|| format!("cli: reading prompt {}", path.display()))?;
    match t.rank() {
        3 => Ok(t),
        4 => {
            let s = t.shape().to_vec();
            Ok(t.slice_axis(0, 0, 1)?.reshape(&s[1..])?)
        }
        r => Err(anyhow!("cli: prompt must be a volume or video, got rank {r}")),
    }
}

fn sample_fields(ctx: &Ctx, prompt: &Path, frames: usize, seed: u64, output: &Path, arm: Arm) -> anyhow::Result<()> {
    let tddm = load_tddm(ctx, arm)?;
    let first = read_prompt(&ctx.path(prompt))?;
    let fields = tddm.sample_fields(&first, frames, seed).context("tddm: sampling")?;
    let out = ctx.path(output);
    io::write_fields(&out, &fields).context("cli: writing fields")?;
    println!("wrote {frames} fields to {}", out.display());
    Ok(())
}

fn synthesize(
    ctx: &Ctx,
    prompt: &Path,
    frames: usize,
    seed: u64,
    output: &Path,
    with_montage: bool,
    arm: Arm,
) -> anyhow::Result<()> {
    let vae = load_vae(ctx)?;
    let tddm = load_tddm(ctx, arm)?;
    let i2v = load_i2v(ctx, arm)?;
    let first = read_prompt(&ctx.path(prompt))?;
    let video = synthesize_video(&first, frames, &vae, &tddm, &i2v, seed)?;
    let out = ctx.path(output);
    io::write_video(&out, &video).context("cli: writing video")?;
    println!("wrote {frames}-frame video to {}", out.display());
    if with_montage {
        let png = out.with_extension("png");
        write_png(&png, &montage(video.frames(), Range::INTENSITY)?)?;
        println!("wrote montage {}", png.display());
    }
    Ok(())
}

fn eval_text(rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::new();
    for (name, e) in rows {
        s.push_str(&format!("[{name}]\n"));
        s.push_str(&format!("mean_psnr_db = {:.4}\n", e.mean_psnr));
        s.push_str(&format!("lpips_proxy = {:.6}\n", e.lpips_proxy));
        s.push_str(&format!("fvd_proxy = {:.6}\n", e.fvd_proxy.distance));
        s.push_str(&format!("fvd_proxy_regularized = {}\n", e.fvd_proxy.regularized));
        let per: Vec<String> = e.psnr.iter().map(|p| format!("{p:.4}")).collect();
        s.push_str(&format!("psnr_per_sequence = [{}]\n\n", per.join(", ")));
    }
    s
}

fn evaluate_cmd(ctx: &Ctx, arm: Arm) -> anyhow::Result<()> {
    let vae = load_vae(ctx)?;
    let tddm = load_tddm(ctx, arm)?;
    let i2v = load_i2v(ctx, arm)?;
    let test = load_split(ctx, "test")?;
    let k = ctx.cfg.metrics.eval_sequences;
    let refs = if k == 0 { test } else { test.into_iter().take(k).collect() };
    let preds = pipeline::synthesize_set(&vae, &tddm, &i2v, &refs, ctx.cfg.seed)?;
    let report = evaluate(&preds, &refs, &vae).context("metrics")?;
    let baseline = evaluate(&pipeline::static_baseline(&refs)?, &refs, &vae).context("metrics")?;
    let rows = vec![(arm.name().to_string(), &report), ("static".to_string(), &baseline)];
    fs::create_dir_all(ctx.report(""))?;
    fs::write(ctx.report("eval.txt"), eval_text(&rows))?;
    let csv = format!("{CSV_HEADER}\n{}\n{}\n", csv_row(arm.name(), &report), csv_row("static", &baseline));
    fs::write(ctx.report("eval.csv"), &csv)?;
    print!("{csv}");
    if ctx.cfg.metrics.montage {
        write_png(&ctx.report("eval_pred_0.png"), &montage(preds[0].frames(), Range::INTENSITY)?)?;
        write_png(&ctx.report("eval_gt_0.png"), &montage(refs[0].frames(), Range::INTENSITY)?)?;
        let maps = temporal_error_maps(&preds[0], &refs[0])?;
        if !maps.is_empty() {
            write_png(&ctx.report("eval_error_0.png"), &montage(&maps, Range::INTENSITY)?)?;
        }
    }
    Ok(())
}

fn ablate(ctx: &Ctx, arms: &[Arm]) -> anyhow::Result<()> {
    let vae = load_vae(ctx)?;
    let mut models = ArmModels { tddm: Vec::new(), i2v: Vec::new() };
    for &arm in arms {
        let tc = arm.tddm_config(&ctx.cfg.tddm);
        if !models.tddm.iter().any(|(c, _, _)| *c == tc) {
            let tddm = match load_tddm(ctx, arm) {
                Ok(m) if m.net.config == tc => m,
                _ => train_tddm(ctx, arm)?,
            };
            models.tddm.push((tc, tddm, RunReport::default()));
        }
        let ic = arm.i2v_config(&ctx.cfg.i2v);
        if !models.i2v.iter().any(|(c, _, _)| *c == ic) {
            let i2v = match load_i2v(ctx, arm) {
                Ok(m) if m.net.config == ic => m,
                _ => train_i2v(ctx, arm)?,
            };
            models.i2v.push((ic, i2v, RunReport::default()));
        }
    }
    let ds_test = load_split(ctx, "test")?;
    let k = ctx.cfg.metrics.eval_sequences;
    let refs = if k == 0 { ds_test } else { ds_test.into_iter().take(k).collect() };
    let results = pipeline::evaluate_arms(&ctx.cfg, arms, &models, &vae, &refs).context("metrics")?;
    let csv = ablation_csv(&results);
    fs::create_dir_all(ctx.report(""))?;
    fs::write(ctx.report("ablation.csv"), &csv)?;
    let rows: Vec<(String, &EvalReport)> = results.iter().map(|r| (r.arm.name().to_string(), &r.eval)).collect();
    fs::write(ctx.report("ablation.txt"), eval_text(&rows))?;
    print!("{csv}");
    Ok(())
}

fn plot(ctx: &Ctx, input: &Path, reference: Option<&Path>, output: &Path) -> anyhow::Result<()> {
    let input = ctx.path(input);
    let out = ctx.path(output);
    let img = match reference {
        Some(r) => {
            let pred = io::read_video(&input).context("cli: reading input")?;
            let gt = io::read_video(&ctx.path(r)).context("cli: reading reference")?;
            let maps = temporal_error_maps(&pred, &gt).context("metrics")?;
            if maps.is_empty() {
                return Err(anyhow!("metrics: error maps need at least 4 frames"));
            }
            montage(&maps, Range::INTENSITY)?
        }
        None => {
            let (t, flags) = io::read_t4d(&input).context("cli: reading input")?;
            let range = if flags & io::FLAG_SIGNED != 0 { Range::SIGNED } else { Range::INTENSITY };
            let frames = match t.rank() {
                3 => vec![t],
                4 => (0..t.shape()[0])
                    .map(|i| {
                        let s = t.shape()[1..].to_vec();
                        t.slice_axis(0, i, 1).and_then(|f| f.reshape(&s))
                    })
                    .collect::<modiff::Result<_>>()?,
                r => return Err(anyhow!("cli: cannot plot a rank-{r} tensor")),
            };
            montage(&frames, range)?
        }
    };
    write_png(&out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}
