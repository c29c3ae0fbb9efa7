use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use colorimagine::colorizer::{colorize, lightness_of, load_checkpoint, save_checkpoint, ColorizerModel, ModelConfig};
use colorimagine::composition::{assemble_reference, assign_segments};
use colorimagine::imagination::{toy_subprocess_response, BackendRegistry, CommandBackend, DirectoryBackend};
use colorimagine::io::{load_image_dir, load_rgb, save_labels_png, save_rgb};
use colorimagine::metrics::{colorfulness_table, evaluate_directory, pairing_csv, pairing_sheet};
use colorimagine::pipeline::{imagine, run_pipeline, PipelineParams};
use colorimagine::service::{serve, SessionStore};
use colorimagine::synthetic::synthetic_corpus;
use colorimagine::training::{evaluate_checkpoint, train_model, TrainConfig};

#[derive(Parser)]
#[command(name = "colorimagine", version, about = "Reference-guided automatic colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image and sample candidate references.
    Imagine {
        image: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Output directory for seg.png, refs/, composed.png and assignment.json.
        #[arg(long, default_value = "imagined")]
        out: PathBuf,
    },
    /// Colorize an image, with an explicit reference or through the full pipeline.
    Colorize {
        image: PathBuf,
        /// Use this reference instead of imagining one.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, short, default_value = "colorized.png")]
        out: PathBuf,
    },
    /// Train the colorization network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Colorfulness of every image in one or more output directories.
    Evaluate {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// JSON report path; a text table is written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a checkpoint through the pipeline over a validation directory.
    Validate {
        dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Where colorized outputs are written.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "state")]
        state_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Act as a toy segmenter/generator speaking the subprocess backend contract.
    ToyBackend,
    /// Randomised pairwise-comparison sheet over method output directories (CSV on stdout).
    PairingSheet {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write procedural training/validation images.
    SynthCorpus {
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a freshly initialised checkpoint.
    InitModel {
        out: PathBuf,
        /// Full-width networks instead of the desk-scale default.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Toy,
    Dir,
    Cmd,
}

#[derive(Args)]
struct BackendArgs {
    /// Number of references.
    #[arg(short, long, default_value_t = 6)]
    n: usize,
    /// Comma-separated seeds; overrides `-n`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendChoice,
    /// Root of a pre-generated `seg/` + `refs/` tree (`--backend dir`).
    #[arg(long)]
    backend_root: Option<PathBuf>,
    /// Program speaking the subprocess contract (`--backend cmd`).
    #[arg(long)]
    backend_cmd: Option<PathBuf>,
    /// Extra arguments for the backend program.
    #[arg(long, allow_hyphen_values = true)]
    backend_arg: Vec<String>,
}

impl BackendArgs {
    fn setup(&self, image: &Path) -> Result<(BackendRegistry, PipelineParams)> {
        let mut params = PipelineParams { n: self.n, seeds: self.seeds.clone(), ..Default::default() };
        if let Some(seeds) = &self.seeds {
            params.n = seeds.len();
        }
        let registry = match self.backend {
            BackendChoice::Toy => BackendRegistry::with_toy(),
            BackendChoice::Dir => {
                let root = self.backend_root.as_ref().context("--backend dir needs --backend-root")?;
                let stem = image.file_stem().context("image path has no file stem")?.to_string_lossy();
                let b = Arc::new(DirectoryBackend::new(root, stem.as_ref()));
                if self.seeds.is_none() {
                    params.n = params.n.min(b.reference_count());
                }
                self.register(b.clone(), b, &mut params)?
            }
            BackendChoice::Cmd => {
                let program = self.backend_cmd.as_ref().context("--backend cmd needs --backend-cmd")?;
                let b = Arc::new(CommandBackend::new(program, self.backend_arg.clone()));
                self.register(b.clone(), b, &mut params)?
            }
        };
        Ok((registry, params))
    }

    fn register<B>(&self, seg: Arc<B>, gen: Arc<B>, params: &mut PipelineParams) -> Result<BackendRegistry>
    where
        B: colorimagine::imagination::Segmenter + colorimagine::imagination::Generator + 'static,
    {
        let mut reg = BackendRegistry::default();
        params.segmenter = colorimagine::imagination::Segmenter::descriptor(seg.as_ref()).name;
        params.generator = colorimagine::imagination::Generator::descriptor(gen.as_ref()).name;
        reg.register_segmenter(seg)?;
        reg.register_generator(gen)?;
        Ok(reg)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint; without it an untrained desk-scale model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<ColorizerModel> {
        match &self.checkpoint {
            Some(path) => {
                let (model, manifest) =
                    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                log::info!("loaded {} (step {})", path.display(), manifest.step);
                Ok(model)
            }
            None => {
                log::warn!("no --checkpoint given; using an untrained model");
                Ok(ColorizerModel::new(&ModelConfig::desk())?)
            }
        }
    }
}

fn method_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Imagine { image, backend, out } => {
            let (registry, params) = backend.setup(&image)?;
            let lightness = lightness_of(&load_rgb(&image)?);
            let imagined = imagine(&lightness, &params, &registry)?;
            let assignment = assign_segments(&lightness.mapv(|v| v / 100.0), &imagined.references)?;
            let composed = assemble_reference(&assignment, &imagined.references, &lightness)?;
            let refs = out.join("refs");
            std::fs::create_dir_all(&refs)?;
            save_labels_png(&imagined.segmentation.class_labels(), out.join("seg.png"))?;
            for (i, r) in imagined.references.references.iter().enumerate() {
                save_rgb(r, refs.join(format!("ref_{i}.png")))?;
            }
            save_rgb(&composed.image, out.join("composed.png"))?;
            std::fs::write(out.join("assignment.json"), serde_json::to_string_pretty(&assignment)?)?;
            println!("{}", out.display());
        }
        Command::Colorize { image, reference, backend, model, out } => {
            let input = load_rgb(&image)?;
            let model = model.load()?;
            let result = match reference {
                Some(path) => colorize(&lightness_of(&input), &load_rgb(path)?, &model)?.image.image,
                None => {
                    let (registry, params) = backend.setup(&image)?;
                    run_pipeline(&input, &params, &registry, &model)?.rendering.result
                }
            };
            save_rgb(&result, &out)?;
            println!("{}", out.display());
        }
        Command::Train {
            config,
            corpus,
            output_dir,
            iterations,
            seed,
            learning_rate,
            batch_size,
            crop_size,
            checkpoint_every,
            resume,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            cfg.corpus = corpus.or(cfg.corpus);
            cfg.output_dir = output_dir.or(cfg.output_dir);
            cfg.iterations = iterations.unwrap_or(cfg.iterations);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.crop_size = crop_size.unwrap_or(cfg.crop_size);
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            cfg.validate()?;
            let dir = cfg.corpus.clone().context("no corpus: set `corpus` in the config or pass --corpus")?;
            let images: Vec<_> = load_image_dir(&dir)?.into_iter().map(|(_, img)| img).collect();
            log::info!("training on {} images from {}", images.len(), dir.display());
            let model = match resume {
                Some(path) => load_checkpoint(path)?.0,
                None => ColorizerModel::new(&cfg.model)?,
            };
            let every = (cfg.iterations / 20).max(1);
            let outcome = train_model(model, &images, &cfg, |e| {
                if e.step == 1 || e.step % every == 0 {
                    log::info!("step {} loss {:.4} ({} ms)", e.step, e.loss, e.wall_ms);
                }
            })?;
            for path in &outcome.checkpoints {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { dirs, report } => {
            let methods: Vec<(String, PathBuf)> = dirs.iter().map(|d| (method_name(d), d.clone())).collect();
            let reports = evaluate_directory(&methods, report.as_deref())?;
            print!("{}", colorfulness_table(&reports));
        }
        Command::Validate { dir, model, backend, dump } => {
            let (registry, params) = backend.setup(&dir)?;
            let model = model.load()?;
            let images = load_image_dir(&dir)?;
            let report = evaluate_checkpoint(&model, &images, &params, &registry, dump.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { port, state_dir, model } => {
            let model = Arc::new(Mutex::new(model.load()?));
            let store = Arc::new(SessionStore::new(state_dir, Arc::new(BackendRegistry::with_toy()), model)?);
            tokio::runtime::Runtime::new()?.block_on(serve(store, port))?;
        }
        Command::ToyBackend => {
            let mut request = Vec::new();
            std::io::stdin().read_to_end(&mut request)?;
            match toy_subprocess_response(&request) {
                Ok(png) => std::io::stdout().write_all(&png)?,
                Err(e) => bail!("toy backend: {e}"),
            }
        }
        Command::PairingSheet { dirs, seed } => {
            let methods: Vec<(String, PathBuf)> = dirs.iter().map(|d| (method_name(d), d.clone())).collect();
            print!("{}", pairing_csv(&pairing_sheet(&methods, seed)?));
        }
        Command::SynthCorpus { out, count, size, seed } => {
            std::fs::create_dir_all(&out)?;
            for (i, img) in synthetic_corpus(count, size, size, seed).iter().enumerate() {
                save_rgb(img, out.join(format!("scene_{:04}.png", seed + i as u64)))?;
            }
            println!("{}", out.display());
        }
        Command::InitModel { out, full, seed } => {
            let mut cfg = if full { ModelConfig::default() } else { ModelConfig::desk() };
            cfg.init_seed = seed;
            cfg.extractor.init_seed = seed;
            save_checkpoint(&ColorizerModel::new(&cfg)?, &out, None, 0)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
