//! The `tmae` command line: data generation, pre-training, evaluation,
//! gradient checking, attention dumps and the concatenation baseline.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use tmae::geometry::{synthetic_dataset, transform_to_frame};
use tmae::io::{self as tio, SequenceMeta};
use tmae::model::{pipeline_grad_check, Architecture};
use tmae::tensor::GradCheckOptions;
use tmae::training::{
    dump_attention, eval_recon, sign_test, write_attention_csv, AttnFilter, Gap, MetricsLog, PrevSource, Trainer,
};
use tmae::{Error, PointFrame, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Long flags each subcommand accepts, kept by hand so the help test can
/// catch a flag that is parsed but not documented.
pub const FLAG_REGISTRY: &[(&str, &[&str])] = &[
    ("gen-data", &["--config", "--out", "--seed", "--set"]),
    (
        "pretrain",
        &["--config", "--data", "--out", "--metrics", "--resume", "--seed", "--set"],
    ),
    (
        "eval-recon",
        &["--ckpt", "--data", "--gap", "--shuffled", "--report", "--seed"],
    ),
    (
        "gradcheck",
        &["--config", "--tol", "--eps", "--points", "--attempts", "--seed", "--set"],
    ),
    (
        "attn-dump",
        &["--ckpt", "--data", "--sequence", "--frame", "--gap", "--region", "--out", "--seed"],
    ),
    (
        "baseline-concat",
        &["--config", "--data", "--out", "--metrics", "--gap", "--seed", "--set"],
    ),
];

#[derive(Debug, Parser)]
#[command(
    name = "tmae",
    version,
    about = "Temporal masked auto-encoding for pillarized point-cloud sequences",
    after_help = "Logging: set TMAE_LOG to error, warn, info or debug.\n\
                  Exit codes: 0 success, 1 usage, 2 data/format/config error, 3 numeric failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic scene family of a config into a dataset directory.
    GenData(GenData),
    /// Pre-train the temporal model; writes a checkpoint and a metrics log.
    Pretrain(Pretrain),
    /// Masked-pillar Chamfer of a checkpoint, per previous-frame gap.
    EvalRecon(EvalRecon),
    /// Finite-difference check of the full temporal loss.
    Gradcheck(Gradcheck),
    /// Dump first-pass cross-attention scores as CSV.
    AttnDump(AttnDump),
    /// Train and evaluate the single-frame baseline fed both frames merged.
    BaselineConcat(BaselineConcat),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config with [grid] [model] [train] [scene] sections.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. --set model.d_model=32 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> tmae::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.set),
            None => RunConfig::from_toml_str("", &self.set),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output dataset directory (one seq_NNNN directory per sequence).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Scene seed (overrides scene.seed).
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint path, rewritten at every epoch boundary.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Metrics CSV (default: <CKPT>.metrics.csv).
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint; its embedded config is used.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "set", "seed"])]
    pub resume: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalRecon {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Previous-frame gap: 1..5 or `random` (repeatable; default train.inference_gap).
    #[arg(long, value_name = "GAP")]
    pub gap: Vec<Gap>,
    /// Also evaluate with previous frames taken from another sequence and
    /// report a paired sign test.
    #[arg(long)]
    pub shuffled: bool,
    /// Per-frame CSV report.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Evaluation seed (overrides train.eval_seed).
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Pass threshold on the maximum relative error.
    #[arg(long, value_name = "T", default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, value_name = "EPS", default_value_t = 1e-4)]
    pub eps: f64,
    /// Random points per frame of the check instance.
    #[arg(long, value_name = "N", default_value_t = 24)]
    pub points: usize,
    /// Instances to try before giving up on a kink-free one.
    #[arg(long, value_name = "N", default_value_t = 32)]
    pub attempts: usize,
    /// Instance seed.
    #[arg(long, value_name = "S", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AttnDump {
    /// Temporal checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Sequence index within the dataset.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub sequence: usize,
    /// Current frame index.
    #[arg(long, value_name = "K")]
    pub frame: usize,
    /// Previous-frame gap (1..5 or `random`).
    #[arg(long, value_name = "GAP", default_value = "3")]
    pub gap: Gap,
    /// Keep only current pillars centred in XMIN,YMIN,XMAX,YMAX (ego meters).
    #[arg(long, value_name = "XMIN,YMIN,XMAX,YMAX", value_parser = parse_region, allow_hyphen_values = true)]
    pub region: Option<[f64; 4]>,
    /// Output CSV.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Seed for a random gap (overrides train.eval_seed).
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BaselineConcat {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Optional checkpoint path for the baseline.
    #[arg(long, value_name = "CKPT")]
    pub out: Option<PathBuf>,
    /// Optional metrics CSV.
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Evaluation gap (default train.inference_gap).
    #[arg(long, value_name = "GAP")]
    pub gap: Option<Gap>,
    /// Training seed (overrides train.seed).
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

fn parse_region(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 => Ok([x0, y0, x1, y1]),
        [_, _, _, _] => Err("region needs XMIN <= XMAX and YMIN <= YMAX".into()),
        _ => Err(format!("expected 4 comma-separated numbers, got {}", v.len())),
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_DATA,
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

/// `key=value` pairs for the final summary line.
type Summary = Vec<(&'static str, String)>;

fn quote(v: &str) -> String {
    if v.is_empty() || v.contains([' ', '"', '=']) {
        format!("{v:?}")
    } else {
        v.to_string()
    }
}

fn summary_line(command: &str, status: &str, fields: &Summary) -> String {
    let mut s = format!("tmae: command={command} status={status}");
    for (k, v) in fields {
        s.push_str(&format!(" {k}={}", quote(v)));
    }
    s
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::EvalRecon(_) => "eval-recon",
        Command::Gradcheck(_) => "gradcheck",
        Command::AttnDump(_) => "attn-dump",
        Command::BaselineConcat(_) => "baseline-concat",
    }
}

/// Parse `argv`, run the subcommand, return the exit code. Everything
/// except command results goes to standard error, ending with one
/// `tmae: command=... status=...` line.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_OK {
                let _ = write!(stdout, "{}", e.render());
            } else {
                eprint!("{}", e.render());
                eprintln!("tmae: command=none status=error kind=usage exit={EXIT_USAGE}");
            }
            return code;
        }
    };
    let name = command_name(&cli.command);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::EvalRecon(a) => eval_cmd(a, stdout),
        Command::Gradcheck(a) => gradcheck(a, stdout),
        Command::AttnDump(a) => attn_dump(a),
        Command::BaselineConcat(a) => baseline(a, stdout),
    };
    match result {
        Ok(fields) => {
            eprintln!("{}", summary_line(name, "ok", &fields));
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            let fields = vec![
                ("kind", f.kind.to_string()),
                ("exit", f.code.to_string()),
                ("message", f.message.replace('\n', " ")),
            ];
            eprintln!("{}", summary_line(name, "error", &fields));
            f.code
        }
    }
}

fn gen_data(a: GenData) -> Result<Summary, Failure> {
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.seed {
        cfg.scene.seed = s;
    }
    let seqs = synthetic_dataset(&cfg.scene)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let mut points = 0;
    for (i, s) in seqs.iter().enumerate() {
        let meta = SequenceMeta {
            frames: s.frames.len(),
            sigma: cfg.scene.sigma,
            sequence_index: i,
            generator: Some(cfg.scene.clone()),
        };
        tio::write_sequence(&tio::sequence_dir(&a.out, i), &s.frames, &meta)?;
        points += s.frames.iter().map(PointFrame::len).sum::<usize>();
    }
    info!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(vec![
        ("sequences", seqs.len().to_string()),
        ("frames", seqs.iter().map(|s| s.frames.len()).sum::<usize>().to_string()),
        ("points", points.to_string()),
        ("out", a.out.display().to_string()),
    ])
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn train_loop(trainer: &mut Trainer, data: &[Vec<PointFrame>], ckpt: Option<&Path>, metrics: Option<(&Path, bool)>) -> Result<f64, Failure> {
    let mut log = match metrics {
        Some((p, true)) => {
            let f = OpenOptions::new().append(true).open(p).map_err(|e| io_failure(p, e))?;
            Some((p, MetricsLog::append(BufWriter::new(f))))
        }
        Some((p, false)) => Some((p, MetricsLog::new(create(p)?).map_err(|e| io_failure(p, e))?)),
        None => None,
    };
    let mut last = f64::NAN;
    let res = trainer.run(
        data,
        |r| {
            last = r.loss;
            if r.step % 10 == 0 {
                info!("step {} epoch {} lr {:.3e} loss {:.5}", r.step, r.epoch, r.lr, r.loss);
            }
            if let Some((p, log)) = log.as_mut() {
                log.write(r).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
            }
            Ok(())
        },
        |epoch, ck| {
            if let Some(p) = ckpt {
                tio::save_checkpoint(p, ck)?;
                info!("epoch {epoch}: checkpoint {}", p.display());
            }
            Ok(())
        },
    );
    if let Some((p, log)) = log {
        log.into_inner().flush().map_err(|e| io_failure(p, e))?;
    }
    res?;
    Ok(last)
}

fn read_data(dir: &Path) -> Result<Vec<Vec<PointFrame>>, Failure> {
    Ok(tio::read_dataset(dir)?)
}

fn pretrain(a: Pretrain) -> Result<Summary, Failure> {
    let data = read_data(&a.data)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    let (mut trainer, resumed) = match &a.resume {
        Some(p) => (Trainer::from_checkpoint(tio::load_checkpoint(p)?)?, true),
        None => {
            let mut cfg = a.cfg.load()?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            (Trainer::new(cfg, Architecture::Temporal)?, false)
        }
    };
    let start = trainer.step_count();
    let last = train_loop(&mut trainer, &data, Some(&a.out), Some((&metrics, resumed)))?;
    let steps = trainer.step_count() - start;
    let mut fields = vec![("steps", steps.to_string())];
    if steps > 0 {
        fields.push(("final_loss", format!("{last:.8e}")));
    }
    fields.push(("ckpt", a.out.display().to_string()));
    fields.push(("metrics", metrics.display().to_string()));
    Ok(fields)
}

fn eval_cmd(a: EvalRecon, stdout: &mut dyn Write) -> Result<Summary, Failure> {
    let ck = tio::load_checkpoint(&a.ckpt)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = a.seed {
        cfg.train.eval_seed = s;
    }
    let data = read_data(&a.data)?;
    let gaps = if a.gap.is_empty() {
        vec![Gap::Fixed(cfg.train.inference_gap)]
    } else {
        a.gap.clone()
    };
    let mut report = match &a.report {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "gap,source,sequence,frame,prev_frame,masked,chamfer").map_err(|e| io_failure(p, e))?;
            Some((p, w))
        }
        None => None,
    };
    let out_err = |e: std::io::Error| io_failure(Path::new("<stdout>"), e);
    writeln!(stdout, "gap,source,frames,mean,std").map_err(out_err)?;
    let mut summary = Summary::new();
    for gap in gaps {
        let mut sources = vec![PrevSource::True];
        if a.shuffled {
            sources.push(PrevSource::Shuffled);
        }
        let mut reports = Vec::new();
        for src in sources {
            let r = eval_recon(&ck.params, &cfg, &data, gap, src)?;
            let label = if src == PrevSource::True { "true" } else { "shuffled" };
            writeln!(stdout, "{gap},{label},{},{:.8e},{:.8e}", r.frames.len(), r.mean, r.std).map_err(out_err)?;
            if let Some((p, w)) = report.as_mut() {
                for f in &r.frames {
                    writeln!(w, "{gap},{label},{},{},{},{},{:.8e}", f.sequence, f.frame, f.prev_frame, f.masked, f.chamfer)
                        .map_err(|e| io_failure(p, e))?;
                }
            }
            reports.push(r);
        }
        summary.push(("gap", gap.to_string()));
        summary.push(("mean", format!("{:.8e}", reports[0].mean)));
        if let [t, s] = &reports[..] {
            let st = sign_test(&t.chamfers(), &s.chamfers())?;
            writeln!(
                stdout,
                "# sign test gap {gap}: true<shuffled on {} of {} frames ({} ties), p = {:.3e}",
                st.wins,
                st.wins + st.losses,
                st.ties,
                st.p_value
            )
            .map_err(out_err)?;
            summary.push(("mean_shuffled", format!("{:.8e}", s.mean)));
            summary.push(("sign_p", format!("{:.3e}", st.p_value)));
        }
    }
    if let Some((p, mut w)) = report {
        w.flush().map_err(|e| io_failure(p, e))?;
    }
    Ok(summary)
}

fn gradcheck(a: Gradcheck, stdout: &mut dyn Write) -> Result<Summary, Failure> {
    let cfg = a.cfg.load()?;
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        ..GradCheckOptions::default()
    };
    let check = pipeline_grad_check(&cfg.model, &cfg.grid, a.points, a.seed, &opts, a.attempts)?;
    let out_err = |e: std::io::Error| io_failure(Path::new("<stdout>"), e);
    write!(stdout, "{}", check.report).map_err(out_err)?;
    writeln!(
        stdout,
        "max_rel_err {:.6e} instance_seed {} attempts {} pillars {}",
        check.report.max_rel_err, check.instance_seed, check.attempts, check.pillars
    )
    .map_err(out_err)?;
    let fields = vec![
        ("max_rel_err", format!("{:.6e}", check.report.max_rel_err)),
        ("tol", format!("{:e}", a.tol)),
        ("coords", check.report.coords_checked().to_string()),
    ];
    if check.report.passed {
        Ok(fields)
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            kind: "gradcheck",
            message: format!(
                "max relative error {:.3e} exceeds tolerance {:e}",
                check.report.max_rel_err, a.tol
            ),
        })
    }
}

fn attn_dump(a: AttnDump) -> Result<Summary, Failure> {
    let ck = tio::load_checkpoint(&a.ckpt)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = a.seed {
        cfg.train.eval_seed = s;
    }
    let data = read_data(&a.data)?;
    let seq = data.get(a.sequence).ok_or_else(|| Failure {
        code: EXIT_DATA,
        kind: "argument",
        message: format!("dataset has {} sequences, asked for {}", data.len(), a.sequence),
    })?;
    let cur = seq.get(a.frame).ok_or_else(|| Failure {
        code: EXIT_DATA,
        kind: "argument",
        message: format!("sequence {} has {} frames, asked for {}", a.sequence, seq.len(), a.frame),
    })?;
    let p = tmae::training::prev_index(a.frame, a.gap, cfg.train.eval_seed, a.sequence);
    let prev = transform_to_frame(&seq[p], &cur.pose)?;
    let filter = a.region.as_ref().map(|r| AttnFilter::Region {
        min: [r[0], r[1]],
        max: [r[2], r[3]],
    });
    let rows = dump_attention(&ck.params, &cfg, &prev, cur, filter.as_ref())?;
    let mut w = create(&a.out)?;
    write_attention_csv(&mut w, &rows).map_err(|e| io_failure(&a.out, e))?;
    w.flush().map_err(|e| io_failure(&a.out, e))?;
    Ok(vec![
        ("rows", rows.len().to_string()),
        ("prev_frame", p.to_string()),
        ("out", a.out.display().to_string()),
    ])
}

fn baseline(a: BaselineConcat, stdout: &mut dyn Write) -> Result<Summary, Failure> {
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = read_data(&a.data)?;
    let gap = a.gap.unwrap_or(Gap::Fixed(cfg.train.inference_gap));
    let mut trainer = Trainer::new(cfg.clone(), Architecture::Concat)?;
    let last = train_loop(
        &mut trainer,
        &data,
        a.out.as_deref(),
        a.metrics.as_deref().map(|p| (p, false)),
    )?;
    let r = eval_recon(&trainer.params, &cfg, &data, gap, PrevSource::True)?;
    writeln!(stdout, "gap,source,frames,mean,std\n{gap},concat,{},{:.8e},{:.8e}", r.frames.len(), r.mean, r.std)
        .map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(vec![
        ("final_loss", format!("{last:.8e}")),
        ("gap", gap.to_string()),
        ("mean", format!("{:.8e}", r.mean)),
    ])
}
