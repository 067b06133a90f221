use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crformer::checkpoint;
use crformer::data::{load_image, load_mask, save_image, DatasetIndex, Split, Triplet};
use crformer::eval::{difference_heatmap, evaluate_image, evaluate_inputs, evaluate_model, EvalReport, Stage};
use crformer::gradcheck::{self, GradcheckConfig};
use crformer::oracle;
use crformer::synth::{self, SyntheticShadowSpec};
use crformer::train::{Profile, RunConfig, Trainer, LOSS_LOG_HEADER};
use crformer::Error;

use crate::{Command, GlobalOpts, ProfileArg};

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

pub fn run(opts: &GlobalOpts, command: Command) -> Result<bool> {
    match command {
        Command::Synth { samples, size } => synth(opts, samples, size),
        Command::Train {
            data,
            manifest,
            epochs,
            max_steps,
        } => train(opts, &data, manifest.as_deref(), epochs, max_steps),
        Command::Infer {
            checkpoint,
            image,
            mask,
            gt,
        } => infer(opts, &checkpoint, &image, &mask, gt.as_deref()),
        Command::Eval {
            data,
            manifest,
            checkpoint,
        } => eval(opts, &data, manifest.as_deref(), checkpoint.as_deref()),
        Command::Gradcheck { tolerance } => gradcheck(opts, tolerance),
        Command::AttnOracle { tokens, channels } => attn_oracle(opts, tokens, channels),
    }
}

fn out_dir(opts: &GlobalOpts) -> Result<&Path> {
    let dir = opts.out.as_deref().context("--out DIR is required for this command")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(root: &Path, manifest: Option<&Path>, split: Split) -> Result<Vec<Triplet>> {
    let index = match manifest {
        Some(m) => DatasetIndex::from_manifest(root, m, split)?,
        None => DatasetIndex::from_layout(root, split)?,
    };
    if index.is_empty() {
        return Err(Error::EmptyDataset(format!("no triplets under {}", root.display())).into());
    }
    Ok(index.load_all()?)
}

fn synth(opts: &GlobalOpts, samples: Option<usize>, size: Option<usize>) -> Result<bool> {
    let mut spec: SyntheticShadowSpec = match &opts.config {
        Some(p) => read_toml(p)?,
        None => {
            let side = match opts.profile {
                ProfileArg::Desk => 64,
                ProfileArg::Paper => 400,
            };
            SyntheticShadowSpec {
                height: side,
                width: side,
                ..SyntheticShadowSpec::default()
            }
        }
    };
    if let Some(s) = opts.seed {
        spec.seed = s;
    }
    if let Some(n) = samples {
        spec.samples = n;
    }
    if let Some(s) = size {
        spec.height = s;
        spec.width = s;
    }
    let out = out_dir(opts)?;
    let set = synth::write_dataset(&spec, out)?;
    println!(
        "wrote {} triplets of {}×{} to {}",
        set.len(),
        spec.height,
        spec.width,
        out.display()
    );
    Ok(true)
}

fn run_config(opts: &GlobalOpts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(opts.profile.into()),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train(
    opts: &GlobalOpts,
    data: &Path,
    manifest: Option<&Path>,
    epochs: Option<usize>,
    max_steps: Option<usize>,
) -> Result<bool> {
    let mut cfg = run_config(opts)?;
    if let Some(e) = epochs {
        cfg.schedule.epochs = e;
    }
    if max_steps.is_some() {
        cfg.max_steps = max_steps;
    }
    cfg.validate()?;
    let set = load_dataset(data, manifest, Split::Train)?;
    let out = out_dir(opts)?;
    write_file(out.join("config.toml"), cfg.to_toml())?;

    let log_path = out.join("loss.log");
    let file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{LOSS_LOG_HEADER}")?;

    let mut trainer = Trainer::new(cfg)?;
    log::info!(
        "training {} parameters on {} triplets",
        trainer.model().num_parameters(),
        set.len()
    );
    let result = trainer.fit(&set, |rec| {
        writeln!(log, "{}", rec.log_line()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if rec.step % 50 == 0 {
            log::info!("step {} epoch {} total {:.6}", rec.step, rec.epoch, rec.losses.total);
        }
        Ok(())
    });
    log.flush()?;
    let summary = match result {
        Ok(s) => s,
        Err(Error::NonFiniteLoss { step, detail }) => {
            write_file(out.join("diverged.json"), &detail)?;
            bail!("non-finite loss at step {step}; diagnostics in {}", out.join("diverged.json").display());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join("model.ckpt");
    checkpoint::save(trainer.model(), &ckpt)?;
    write_file(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} steps over {} epochs; checkpoint {}",
        summary.steps,
        summary.epochs_completed,
        ckpt.display()
    );
    Ok(true)
}

fn load_model(opts: &GlobalOpts, path: &Path) -> Result<crformer::model::CrFormer> {
    Ok(match &opts.config {
        Some(p) => checkpoint::load_matching(path, &RunConfig::load(p)?.model)?,
        None => checkpoint::load(path)?,
    })
}

fn infer(opts: &GlobalOpts, ckpt: &Path, image: &Path, mask: &Path, gt: Option<&Path>) -> Result<bool> {
    let model = load_model(opts, ckpt)?;
    let input = load_image(image)?;
    let mask = load_mask(mask)?;
    let pred = model.predict(&input, &mask)?;
    let out = out_dir(opts)?;
    save_image(out.join("deshadowed.png"), &pred.deshadowed)?;
    save_image(out.join("composite.png"), &pred.composite)?;
    save_image(out.join("refined.png"), &pred.refined)?;
    if let Some(gt) = gt {
        let gt = load_image(gt)?;
        save_image(out.join("heatmap.png"), &difference_heatmap(&pred.refined, &gt)?)?;
        let name = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let report = EvalReport::from_images(vec![evaluate_image(
            name,
            &[
                (Stage::Input, &input),
                (Stage::Deshadowed, &pred.deshadowed),
                (Stage::Composite, &pred.composite),
                (Stage::Refined, &pred.refined),
            ],
            &gt,
            &mask,
        )?])?;
        println!("{}", report.to_table());
    }
    println!("wrote stages to {}", out.display());
    Ok(true)
}

fn eval(opts: &GlobalOpts, data: &Path, manifest: Option<&Path>, ckpt: Option<&Path>) -> Result<bool> {
    let set = load_dataset(data, manifest, Split::Test)?;
    let report = match ckpt {
        Some(p) => evaluate_model(&load_model(opts, p)?, &set)?,
        None => evaluate_inputs(&set)?,
    };
    let table = report.to_table();
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir)?;
        write_file(dir.join("report.json"), report.to_json())?;
        write_file(dir.join("report.txt"), format!("{table}\n"))?;
    }
    println!("{table}");
    Ok(true)
}

fn gradcheck(opts: &GlobalOpts, tolerance: Option<f64>) -> Result<bool> {
    let mut cfg: GradcheckConfig = match &opts.config {
        Some(p) => read_toml(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(t) = tolerance {
        cfg.tolerance = t;
    }
    let ops = gradcheck::op_suite(cfg.seed)?;
    let report = gradcheck::run(&cfg)?;
    for (title, r) in [("operations", &ops), ("model parameters", &report)] {
        println!("{title}:");
        for g in &r.groups {
            println!(
                "  {} {:<45} rel_err {:.3e} ({} entries)",
                if g.passed { "ok  " } else { "FAIL" },
                g.name,
                g.relative_error,
                g.entries
            );
        }
        println!(
            "  {} groups, max relative error {:.3e}, tolerance {:e}: {}",
            r.groups.len(),
            r.max_error(),
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir)?;
        let both = serde_json::json!({ "operations": ops, "model": report });
        write_file(dir.join("gradcheck.json"), serde_json::to_string_pretty(&both)?)?;
    }
    let passed = ops.passed() && report.passed();
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn attn_oracle(opts: &GlobalOpts, tokens: usize, channels: usize) -> Result<bool> {
    if tokens == 0 || tokens > 1024 {
        bail!("--tokens must be in 1..=1024 (the oracle is quadratic), got {tokens}");
    }
    if channels == 0 {
        bail!("--channels must be positive");
    }
    let cases = oracle::run(opts.seed.unwrap_or(0), tokens, channels)?;
    for c in &cases {
        println!(
            "{} mask={:<10} HW={} C={} shadow={} max_abs_diff={:e}",
            if c.passed { "ok  " } else { "FAIL" },
            serde_json::to_value(c.mask)?.as_str().unwrap_or("?"),
            c.tokens,
            c.channels,
            c.shadow_tokens,
            c.max_abs_diff
        );
    }
    let passed = cases.iter().all(|c| c.passed);
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir)?;
        write_file(dir.join("attn_oracle.json"), serde_json::to_string_pretty(&cases)?)?;
    }
    println!("{}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}
