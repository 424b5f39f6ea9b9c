use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hddnet::config::Config;
use hddnet::eval::{
    ablation_run, evaluate, extract, load_pair_list, match_features, mma, parse_matrix, synthetic_eval_pairs,
    transfer_error, ABLATION_HEADER, EVAL_HEADER, MMA_THRESHOLD, SOURCE_SIZE,
};
use hddnet::geometry::Homography;
use hddnet::io::{list_images, load_image, save_pgm, write_csv, Checkpoint, FeatureSet};
use hddnet::model::Model;
use hddnet::synth::synth_corpus;
use hddnet::training::{train, TrainOutputs};
use hddnet::DiffArray;

#[derive(Parser)]
#[command(name = "hddnet", version, about = "Hybrid local-feature detector and descriptor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect and describe keypoints in one image.
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        top: usize,
        #[arg(long, default_value_t = 15)]
        nms: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mutual nearest-neighbour matching of two feature files.
    Match {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Text file with the 9 entries of the homography from A to B.
        #[arg(long)]
        h: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MMA_THRESHOLD)]
        threshold: f64,
    },
    /// MMA and repeatability over a list of image pairs.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = ["100", "500", "1000"])]
        top: String,
        #[arg(long, default_value_t = 15)]
        nms: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant of an ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural training images, and optionally evaluation pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = SOURCE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write this many viewpoint pairs and a `pairs.txt` list into
        /// a `pairs` subdirectory.
        #[arg(long, default_value_t = 0)]
        pairs: usize,
    },
}

fn load_corpus(dir: &Path) -> Result<Vec<DiffArray>> {
    let files = list_images(dir).with_context(|| format!("listing {}", dir.display()))?;
    files
        .iter()
        .map(|p| load_image(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config).with_context(|| format!("reading {}", config.display()))?;
    let corpus = load_corpus(data)?;
    let start = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.config != cfg.model {
                bail!("checkpoint architecture differs from {}", config.display());
            }
            ck
        }
        None => Checkpoint::fresh(Model::new(cfg.model.clone(), cfg.train.seed)?),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let outputs = TrainOutputs { dir: out.to_path_buf() };
    let run = train(&cfg, &corpus, start, Some(&outputs))?;
    eprintln!(
        "trained to step {} on {} images; checkpoint {}",
        run.checkpoint.step,
        corpus.len(),
        outputs.final_checkpoint().display()
    );
    Ok(())
}

fn cmd_extract(image: &Path, ckpt: &Path, top: usize, nms: usize, out: &Path) -> Result<()> {
    if top == 0 {
        bail!("--top must be at least 1");
    }
    let ck = load_checkpoint(ckpt)?;
    let img = load_image(image).with_context(|| format!("loading {}", image.display()))?;
    let set = extract(&ck.model, &img, top, nms)?;
    if set.truncated() {
        eprintln!("requested {top} features, only {} local maxima found", set.len());
    }
    set.save(out)?;
    Ok(())
}

fn cmd_match(a: &Path, b: &Path, h: &Path, out: &Path, threshold: f64) -> Result<()> {
    let fa = FeatureSet::load(a).with_context(|| format!("loading {}", a.display()))?;
    let fb = FeatureSet::load(b).with_context(|| format!("loading {}", b.display()))?;
    let h_ab = Homography::parse(&fs::read_to_string(h)?).with_context(|| format!("parsing {}", h.display()))?;
    let matches = match_features(&fa, &fb)?;
    let rows: Vec<Vec<String>> = matches
        .iter()
        .map(|m| {
            let (pa, pb) = (&fa.features[m.a], &fb.features[m.b]);
            let err = transfer_error(&fa, &fb, m, &h_ab);
            vec![
                m.a.to_string(),
                m.b.to_string(),
                pa.x.to_string(),
                pa.y.to_string(),
                pb.x.to_string(),
                pb.y.to_string(),
                format!("{:.6}", m.distance),
                format!("{err:.6}"),
                ((err <= threshold) as u8).to_string(),
            ]
        })
        .collect();
    write_csv(
        out,
        &["index_a", "index_b", "x_a", "y_a", "x_b", "y_b", "distance", "error", "correct"],
        &rows,
    )?;
    println!("{:.6}", mma(&fa, &fb, &matches, &h_ab, threshold));
    Ok(())
}

fn cmd_eval(pairs: &Path, ckpt: &Path, top: usize, nms: usize, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let list = load_pair_list(pairs)?;
    let summary = evaluate(&ck.model, &list, top, nms)?;
    write_csv(out, &EVAL_HEADER, &summary.csv_rows())?;
    println!("mma {:.6} repeatability {:.6}", summary.mma, summary.repeatability);
    Ok(())
}

fn cmd_ablate(matrix: &Path, data: &Path, out: &Path) -> Result<()> {
    let variants = parse_matrix(&fs::read_to_string(matrix)?).with_context(|| format!("parsing {}", matrix.display()))?;
    let corpus = load_corpus(data)?;
    let rows = ablation_run(&variants, &corpus);
    for r in &rows {
        if let Err(e) = &r.result {
            eprintln!("variant {} failed: {e}", r.name);
        }
    }
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.cells()).collect();
    write_csv(out, &ABLATION_HEADER, &cells)?;
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64, pairs: usize) -> Result<()> {
    fs::create_dir_all(out)?;
    for (i, img) in synth_corpus(seed, count, size).iter().enumerate() {
        save_pgm(&out.join(format!("img_{i:04}.pgm")), img)?;
    }
    if pairs > 0 {
        let dir = out.join("pairs");
        fs::create_dir_all(&dir)?;
        let mut list = String::new();
        for (i, p) in synthetic_eval_pairs(seed ^ 0x5eed, pairs, 96)?.iter().enumerate() {
            let (a, b, h) = (format!("pair_{i:03}_a.pgm"), format!("pair_{i:03}_b.pgm"), format!("pair_{i:03}_h.txt"));
            save_pgm(&dir.join(&a), &p.image_a)?;
            save_pgm(&dir.join(&b), &p.image_b)?;
            fs::write(dir.join(&h), p.h_ab.to_text())?;
            list.push_str(&format!("{a} {b} {h}\n"));
        }
        fs::write(dir.join("pairs.txt"), list)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume.as_deref()),
        Command::Extract {
            image,
            ckpt,
            top,
            nms,
            out,
        } => cmd_extract(&image, &ckpt, top, nms, &out),
        Command::Match { a, b, h, out, threshold } => cmd_match(&a, &b, &h, &out, threshold),
        Command::Eval {
            pairs,
            ckpt,
            top,
            nms,
            out,
        } => cmd_eval(&pairs, &ckpt, top.parse()?, nms, &out),
        Command::Ablate { matrix, data, out } => cmd_ablate(&matrix, &data, &out),
        Command::Synth {
            out,
            count,
            size,
            seed,
            pairs,
        } => cmd_synth(&out, count, size, seed, pairs),
    }
}
