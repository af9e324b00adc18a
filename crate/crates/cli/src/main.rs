use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glare_core::augmentation::{make_views, normalize, resize};
use glare_core::checkpoint::{load_checkpoint, load_encoder, read_archive, save_checkpoint, AdapterOrigin};
use glare_core::config::{resolve_file, RunConfig};
use glare_core::correspondence::match_patches;
use glare_core::data::{load_image, load_image_folder, load_segmentation_folder, save_rgb, LabeledImage};
use glare_core::evaluation::{
    denormalize, export_attention, export_pca_embedding, probe_report, render_correspondence, render_regions,
};
use glare_core::params::{ParamGroup, Parameterized};
use glare_core::regions::{sample_attention_regions_with, sample_random_regions, SamplingStrategy};
use glare_core::training::{analytic_trainable_count, stream, train, Schedule, TrainerState};
use glare_core::vit::VisionTransformer;
use glare_core::GlareError;

type S = f32;

#[derive(Parser)]
#[command(name = "glare", version, about = "Adapter-based self-supervised ViT pre-training, probing and inspection")]
struct Cli {
    /// Root directory for run directories.
    #[arg(long, env = "GLARE_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; omitted keys take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the file, e.g. `loss.regional=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Continual pre-training; writes config.toml, metrics.ndjson and checkpoints to the run directory.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Segmentation probe on a checkpoint's encoder, one run per seed.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Probe a seeded random encoder built from the config instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        #[arg(long)]
        iters: Option<usize>,
        /// Comma-separated probe seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Report path; defaults to `<run dir>/probe_report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders attention heatmaps, PCA embeddings, correspondences or regions.
    Visualize {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Input side length; defaults to `augment.global_size`.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints a checkpoint's manifest, parameter counts and stored config.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Attention,
    Pca,
    Correspondence,
    Regions,
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
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<GlareError>().is_some_and(GlareError::is_numeric));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config } => pretrain(&cli.run_root, &load_config(&config)?),
        Command::Probe {
            config,
            checkpoint,
            random_init,
            iters,
            seeds,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(i) = iters {
                cfg.probe.iters = i;
            }
            if let Some(s) = seeds {
                cfg.probe.seeds = s;
            }
            let out = out.unwrap_or_else(|| cfg.run_dir(&cli.run_root).join("probe_report.json"));
            probe(&cfg, checkpoint.as_deref().filter(|_| !random_init), &out)
        }
        Command::Visualize {
            config,
            checkpoint,
            mode,
            images,
            out,
            size,
            seed,
        } => visualize(&load_config(&config)?, &checkpoint, mode, &images, &out, size, seed),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    resolve_file(args.config.as_deref(), &args.overrides)
        .with_context(|| format!("resolving configuration {}", args.config.as_ref().map_or("(defaults)".into(), |p| p.display().to_string())))
}

fn pretrain(run_root: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let dataset: Vec<_> = if cfg.data.root.is_empty() {
        cfg.data.synthetic.train::<S>().into_iter().map(|s| s.image).collect()
    } else {
        load_image_folder::<S>(Path::new(&cfg.data.root)).with_context(|| format!("loading {}", cfg.data.root))?
    };
    let tc = &cfg.train;
    let sched = Schedule::new(tc, dataset.len())?;
    let resuming = !cfg.init.resume.is_empty();
    let mut state = if resuming {
        let (state, saved) = load_checkpoint::<S>(Path::new(&cfg.init.resume)).with_context(|| format!("resuming {}", cfg.init.resume))?;
        if saved.model != tc.model || saved.head != tc.head || saved.adapter_only != tc.adapter_only {
            bail!("resume checkpoint was trained with a different model, head or trainable set");
        }
        state
    } else if !cfg.init.checkpoint.is_empty() {
        let (enc, origin) = load_encoder::<S>(Path::new(&cfg.init.checkpoint)).with_context(|| format!("loading {}", cfg.init.checkpoint))?;
        if enc.config != tc.model {
            bail!("init checkpoint model differs from the configured model");
        }
        eprintln!("initialized from {} (adapters: {})", cfg.init.checkpoint, origin_label(origin));
        TrainerState::from_encoder(enc, tc)?
    } else {
        TrainerState::init(tc)?
    };

    let dir = cfg.run_dir(run_root);
    std::fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(dir.join("metrics.ndjson"))?;
    eprintln!(
        "run {}: {} images, {} steps ({} per epoch), lr {:.3e}",
        dir.display(),
        dataset.len(),
        sched.total_steps,
        sched.steps_per_epoch,
        tc.base_lr()
    );
    let every = cfg.output.checkpoint_every;
    train(&mut state, &dataset, tc, &sched, |st, m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        log.flush()?;
        if m.step % 10 == 0 || st.step as usize == sched.total_steps {
            eprintln!("step {:>6}  total {:.4}  glob {:.4}  reg {:.4}  loc1 {:.4}  loc2 {:.4}", m.step, m.total, m.l_glob, m.l_reg, m.l_loc1, m.l_loc2);
        }
        if every > 0 && st.step % every as u64 == 0 && (st.step as usize) < sched.total_steps {
            save_checkpoint(&dir.join(format!("checkpoints/step_{:06}.ckpt", st.step)), st, tc)?;
        }
        Ok(())
    })?;
    let last = dir.join("checkpoint.ckpt");
    save_checkpoint(&last, &state, tc)?;
    eprintln!("wrote {}", last.display());
    Ok(())
}

fn origin_label(o: AdapterOrigin) -> &'static str {
    match o {
        AdapterOrigin::Teacher => "teacher",
        AdapterOrigin::Student => "present",
        AdapterOrigin::Initialized => "absent (will initialize)",
    }
}

fn probe_data(cfg: &RunConfig) -> anyhow::Result<(Vec<LabeledImage<S>>, Vec<LabeledImage<S>>)> {
    if cfg.data.probe_root.is_empty() {
        return Ok((cfg.data.synthetic.train(), cfg.data.synthetic.val()));
    }
    let all = load_segmentation_folder::<S>(Path::new(&cfg.data.probe_root)).with_context(|| format!("loading {}", cfg.data.probe_root))?;
    if !cfg.data.probe_val_root.is_empty() {
        let val = load_segmentation_folder::<S>(Path::new(&cfg.data.probe_val_root))?;
        return Ok((all, val));
    }
    let (val, train): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 5 == 4);
    Ok((train.into_iter().map(|p| p.1).collect(), val.into_iter().map(|p| p.1).collect()))
}

fn probe(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let (encoder, source) = match checkpoint {
        Some(p) => {
            let (enc, origin) = load_encoder::<S>(p).with_context(|| format!("loading {}", p.display()))?;
            (enc, format!("{} (adapters: {})", p.display(), origin_label(origin)))
        }
        None => (TrainerState::<S>::init(&cfg.train)?.teacher.encoder, "random init".to_string()),
    };
    let (train, val) = probe_data(cfg)?;
    let aug = &cfg.train.augment;
    let report = probe_report(&encoder, &train, &val, &cfg.probe, &aug.mean, &aug.std)?;
    let doc = serde_json::json!({ "encoder": source, "report": report });
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&doc)? + "\n")?;
    for r in &report.runs {
        println!("seed {:>3}  mIoU {:.4}  aAcc {:.4}  mAcc {:.4}", r.seed, r.metrics.miou, r.metrics.aacc, r.metrics.macc);
    }
    println!(
        "mean     mIoU {:.4} ± {:.4}  aAcc {:.4} ± {:.4}  mAcc {:.4} ± {:.4}",
        report.miou.mean, report.miou.std, report.aacc.mean, report.aacc.std, report.macc.mean, report.macc.std
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn visualize(cfg: &RunConfig, checkpoint: &Path, mode: Mode, images: &[PathBuf], out: &Path, size: Option<usize>, seed: u64) -> anyhow::Result<()> {
    let (encoder, _) = load_encoder::<S>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let aug = &cfg.train.augment;
    let size = size.unwrap_or(aug.global_size);
    let p = encoder.config.patch_size;
    if size % p != 0 {
        bail!("size {size} is not a multiple of the patch size {p}");
    }
    std::fs::create_dir_all(out)?;
    let sources = images
        .iter()
        .map(|path| load_image::<S>(path).with_context(|| format!("loading {}", path.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let prepared: Vec<_> = sources
        .iter()
        .map(|im| {
            let mut x = resize(im, size);
            normalize(&mut x, &aug.mean, &aug.std);
            x
        })
        .collect();
    let mut written = Vec::new();
    match mode {
        Mode::Attention => {
            for (path, x) in images.iter().zip(&prepared) {
                let sub = out.join(stem(path));
                written.extend(export_attention(&encoder, x, &sub)?);
            }
        }
        Mode::Pca => written.extend(export_pca_embedding(&encoder, &prepared, out)?),
        Mode::Regions => {
            for (i, (path, x)) in images.iter().zip(&prepared).enumerate() {
                written.push(regions_overlay(cfg, &encoder, x, &out.join(stem(path)), seed, i as u64)?);
            }
        }
        Mode::Correspondence => {
            if sources.len() != 1 {
                bail!("correspondence mode takes exactly one image");
            }
            let mut rng = stream(seed, 0, 0, 0xC022);
            let views = make_views(&sources[0], aug, &mut rng)?;
            let (vs, vt) = (&views[0], &views[1]);
            let (gs, gt) = (vs.grid(p)?, vt.grid(p)?);
            let cmap = match_patches(&vs.record, &gs, &vt.record, &gt, cfg.train.correspondence.min_overlap);
            let img = render_correspondence(
                &denormalize(&vs.pixels, &aug.mean, &aug.std),
                &denormalize(&vt.pixels, &aug.mean, &aug.std),
                &cmap,
                &gs,
                &gt,
            );
            let png = out.join("correspondence.png");
            save_rgb(&png, &img)?;
            let doc = serde_json::json!({
                "student": { "record": vs.record, "grid": gs },
                "teacher": { "record": vt.record, "grid": gt },
                "min_overlap": cfg.train.correspondence.min_overlap,
                "matches": cmap.entries,
            });
            let json = out.join("correspondence.json");
            std::fs::write(&json, serde_json::to_string_pretty(&doc)? + "\n")?;
            written.extend([png, json]);
        }
    }
    for w in written {
        println!("{}", w.display());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn regions_overlay(cfg: &RunConfig, encoder: &VisionTransformer<S>, x: &glare_core::ndarray::Array3<S>, base: &Path, seed: u64, item: u64) -> anyhow::Result<PathBuf> {
    let rc = &cfg.train.regions;
    let mut rng = stream(seed, 0, item, 0x2E61);
    let attn = encoder.extract_attention_pixels(x, -1)?;
    let grid = attn.grid;
    let regions = match rc.strategy {
        SamplingStrategy::AttentionAware => sample_attention_regions_with(&attn, &grid, rc.count, rc.min_p, rc.max_p, rc.anchor, &mut rng)?,
        SamplingStrategy::Random => sample_random_regions(&grid, rc.count, rc.min_p, rc.max_p, &mut rng)?,
    };
    let aug = &cfg.train.augment;
    let img = render_regions(&denormalize(x, &aug.mean, &aug.std), &regions, grid.patch_size);
    let png = base.with_extension("regions.png");
    save_rgb(&png, &img)?;
    std::fs::write(base.with_extension("regions.json"), serde_json::to_string_pretty(&regions)? + "\n")?;
    Ok(png)
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let archive = read_archive::<f64>(path).map_err(|e| anyhow!(e)).with_context(|| format!("reading {}", path.display()))?;
    let m = &archive.manifest;
    println!("file: {}", path.display());
    println!("format version: {}  dtype: {}", m.version, m.dtype);
    println!(
        "model: patch {}  dim {}  depth {}  heads {}  adapter rank {}  registers {}",
        m.patch_size, m.embed_dim, m.depth, m.model.heads, m.adapter_rank, m.n_registers
    );
    println!("tensors: {}", m.tensors.len());
    let mut groups: std::collections::BTreeMap<&str, usize> = Default::default();
    for t in &m.tensors {
        let n = t.shape[0] * t.shape[1];
        let group = t
            .name
            .strip_prefix("teacher.")
            .map(|_| "teacher (EMA copies)")
            .or_else(|| t.name.strip_prefix("optim.").map(|_| "optimizer moments"))
            .unwrap_or_else(|| group_of(&t.name));
        *groups.entry(group).or_default() += n;
    }
    for (g, n) in &groups {
        println!("  {g:<22} {n:>12}");
    }
    match &m.trainer {
        None => {
            let (_, origin) = glare_core::checkpoint::encoder_from_archive(&archive)?;
            println!("adapters: {}", origin_label(origin));
            println!("training state: none (encoder archive)");
        }
        Some(meta) => {
            let (state, cfg) = load_checkpoint::<f64>(path)?;
            let part = state.partition();
            println!("adapters: {}", origin_label(AdapterOrigin::Teacher));
            println!("step: {}  seed: {}", meta.step, meta.seed);
            println!(
                "trainable: {} (analytic {})  frozen: {}",
                part.trainable_count(),
                analytic_trainable_count(&cfg),
                part.frozen_count()
            );
            let mut by_group: std::collections::BTreeMap<&str, (usize, bool)> = Default::default();
            let trainable = state.trainable;
            state.student.visit(&mut |p| {
                let e = by_group.entry(p.group.as_str()).or_insert((0, trainable.contains(p.group)));
                e.0 += p.len();
            });
            for (g, (n, t)) in by_group {
                println!("  {g:<22} {n:>12}  {}", if t { "trainable" } else { "frozen" });
            }
            println!("--- config ---");
            print!("{}", RunConfig { train: cfg, ..RunConfig::default() }.to_toml()?);
        }
    }
    Ok(())
}

fn group_of(name: &str) -> &'static str {
    let group = if name.starts_with("adapters.") {
        ParamGroup::Adapter
    } else if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.starts_with("cross_attention.") {
        ParamGroup::CrossAttention
    } else if name == "center" || name == "patch_center" {
        return "centers";
    } else {
        ParamGroup::Backbone
    };
    group.as_str()
}
