use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use convmask::masking::{compute_mask, mask_stats, stack_hypercolumn, MaskInput, MaskKind};
use convmask::model::{load_model, save_model};
use convmask::pipeline::{
    build_index, encode_corpus, fit_pipeline, run_eval, Corpus, ImageSource, PipelineConfig,
    SearchMode,
};
use convmask::retrieval::{parse_oxford_gt, search_cosine, search_hamming};
use convmask::store::{load_codes, load_descriptors, save_codes, save_descriptors};
use convmask::{Error, Result};

const DESCRIPTORS_FILE: &str = "descriptors.gdf";
const CODES_FILE: &str = "codes.bcf";

#[derive(Parser)]
#[command(
    name = "convmask",
    version,
    about = "Masked conv-feature aggregation, ITQ hashing and retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every pipeline stage on a training corpus and write a model bundle.
    Fit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Encode a corpus into a GDF1 descriptor file (and BCF1 codes when hashing is on).
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codes: Option<PathBuf>,
    },
    /// Encode a database corpus into an index directory.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank an index for every query in a GDF1 (real) or BCF1 (binary) file.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Real)]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Encode database and queries, search, and report per-query AP and mAP.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Real)]
        mode: Mode,
        /// Write the TSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retained-fraction and dot-product concentration statistics of a mask.
    MaskStats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "max")]
        mask: MaskKind,
        #[arg(long, value_delimiter = ',', default_value = "conv5_3")]
        layers: Vec<String>,
        #[arg(long, default_value_t = 20_000)]
        pair_cap: usize,
        /// Also write one `<image>.mask` text dump per image into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Real,
    Binary,
}

impl From<Mode> for SearchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Real => SearchMode::Real,
            Mode::Binary => SearchMode::Binary,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// UTF-8 `key = value` configuration file, applied after --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["D512", "D1024", "D2048", "D4096", "D8064"])]
    preset: Option<String>,
    #[arg(long)]
    mask: Option<String>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    #[arg(long)]
    embed: Option<String>,
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    drop: Option<usize>,
    #[arg(long, value_parser = ["64", "128", "256", "512"])]
    bits: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    whiten: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(path) = &self.config {
            cfg.apply_kv_file(path)?;
        }
        let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        set("mask", self.mask.clone())?;
        set("layers", self.layers.as_ref().map(|l| l.join(",")))?;
        set("embed", self.embed.clone())?;
        set("agg", self.agg.clone())?;
        set("alpha", self.alpha.map(|v| v.to_string()))?;
        set("dim", self.dim.map(|v| v.to_string()))?;
        set("codebook_size", self.codebook_size.map(|v| v.to_string()))?;
        set("drop", self.drop.map(|v| v.to_string()))?;
        set("bits", self.bits.clone())?;
        set("whiten", self.whiten.clone())?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn index_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(DESCRIPTORS_FILE), dir.join(CODES_FILE))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { train, out, config } => {
            let cfg = config.resolve()?;
            let corpus = Corpus::scan(&train, &cfg.layers)?;
            info!(
                "fitting on {} images from {}",
                corpus.len(),
                train.display()
            );
            let model = fit_pipeline(&corpus, &cfg)?;
            let manifest = save_model(&model, &out)?;
            println!("{}", manifest.display());
        }
        Command::Encode {
            model,
            input,
            out,
            codes,
        } => {
            let model = load_model(&model)?;
            let corpus = Corpus::scan(&input, &model.config.layers)?;
            let encoded = encode_corpus(&model, &corpus, None)?;
            let (descriptors, code_file) = build_index(&model, &encoded)?;
            save_descriptors(&descriptors, &out)?;
            match (codes, code_file) {
                (Some(path), Some(c)) => {
                    save_codes(&c, path)?;
                }
                (Some(_), None) => {
                    return Err(Error::Config(
                        "--codes needs a model fitted with --bits".into(),
                    ))
                }
                _ => {}
            }
        }
        Command::Index { model, db, out } => {
            let model = load_model(&model)?;
            let corpus = Corpus::scan(&db, &model.config.layers)?;
            let encoded = encode_corpus(&model, &corpus, None)?;
            let (descriptors, codes) = build_index(&model, &encoded)?;
            fs::create_dir_all(&out)?;
            let (dpath, cpath) = index_paths(&out);
            save_descriptors(&descriptors, dpath)?;
            if let Some(codes) = codes {
                save_codes(&codes, cpath)?;
            }
            println!(
                "indexed {} images into {}",
                descriptors.len(),
                out.display()
            );
        }
        Command::Search {
            index,
            queries,
            mode,
            top_k,
        } => {
            let (dpath, cpath) = index_paths(&index);
            let stdout = io::stdout();
            let mut out = stdout.lock();
            let lists = match mode {
                Mode::Real => {
                    let idx = load_descriptors(dpath)?;
                    let q = load_descriptors(queries)?;
                    q.iter()
                        .map(|(name, v)| {
                            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                            search_cosine(&idx, name, &v, Some(top_k))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                Mode::Binary => {
                    let idx = load_codes(cpath)?;
                    let q = load_codes(queries)?;
                    q.iter()
                        .map(|(name, c)| search_hamming(&idx, name, c, Some(top_k)))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            for list in lists {
                for (rank, (item, score)) in list.items.iter().enumerate() {
                    writeln!(out, "{}\t{}\t{item}\t{score}", list.query, rank + 1)?;
                }
            }
        }
        Command::Eval {
            model,
            db,
            queries,
            gt,
            mode,
            out,
        } => {
            let model = load_model(&model)?;
            let gt = parse_oxford_gt(&gt)?;
            let db = Corpus::scan(&db, &model.config.layers)?;
            let queries = Corpus::scan(&queries, &model.config.layers)?;
            let report = run_eval(&model, &db, &queries, &gt, mode.into())?;
            let tsv = report.to_tsv();
            match out {
                Some(path) => fs::write(path, &tsv)?,
                None => print!("{tsv}"),
            }
            for (phase, t) in &report.timings {
                eprintln!("time\t{phase}\t{:.3}s", t.as_secs_f64());
            }
        }
        Command::MaskStats {
            input,
            mask,
            layers,
            pair_cap,
            dump,
        } => {
            let corpus = Corpus::scan(&input, &layers)?;
            let images = (0..corpus.len())
                .map(|i| corpus.load(i))
                .collect::<Result<Vec<_>>>()?;
            let stacked = images
                .iter()
                .map(|im| stack_hypercolumn(&im.layers))
                .collect::<Result<Vec<_>>>()?;
            if let Some(dir) = &dump {
                fs::create_dir_all(dir)?;
                for (im, t) in images.iter().zip(&stacked) {
                    if let Ok(Some(m)) = compute_mask(mask, t, im.keypoints.as_ref()) {
                        m.write_text(fs::File::create(dir.join(format!("{}.mask", im.name)))?)?;
                    }
                }
            }
            let inputs: Vec<MaskInput<'_>> = images
                .iter()
                .zip(&stacked)
                .map(|(im, t)| MaskInput {
                    tensor: t,
                    keypoints: im.keypoints.as_ref(),
                })
                .collect();
            let stats = mask_stats(&inputs, mask, pair_cap)?;
            println!("images\t{}", stats.images);
            println!("retained_fraction\t{:.6}", stats.retained_fraction);
            println!("concentration\t{:.6}", stats.concentration);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
