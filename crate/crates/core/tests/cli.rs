use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use colorimagine::colorizer::{load_checkpoint, ColorizerModel, ModelConfig, UNetConfig};
use colorimagine::colorspace::RgbImage;
use colorimagine::features::ExtractorConfig;
use colorimagine::imagination::{BackendRegistry, CommandBackend, Generator, Segmenter};
use colorimagine::io::{load_labels_png, load_rgb, save_rgb};
use colorimagine::pipeline::{run_pipeline, PipelineParams};
use colorimagine::synthetic::synthetic_scene;
use colorimagine::training::LogEntry;

const BIN: &str = env!("CARGO_BIN_EXE_colorimagine");

fn run(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model() -> ColorizerModel {
    ColorizerModel::new(&ModelConfig {
        extractor: ExtractorConfig { width_divisor: 16, ..Default::default() },
        unet: UNetConfig { base_width: 4, ..Default::default() },
        ..Default::default()
    })
    .unwrap()
}

/// Gray inputs survive the 8-bit gray rendering sent to subprocess segmenters unchanged.
fn gray_scene() -> RgbImage {
    let img = synthetic_scene(36, 44, 5);
    RgbImage::from_fn(36, 44, |y, x| {
        let [r, g, b] = img.get(y, x);
        [((0.3 * r + 0.59 * g + 0.11 * b) * 255.0).round() / 255.0; 3]
    })
    .unwrap()
}

fn subprocess_backend() -> Arc<CommandBackend> {
    Arc::new(CommandBackend::new(BIN, vec!["toy-backend".into()]))
}

#[test]
fn subprocess_toy_backend_matches_in_process_toy() {
    let cmd = subprocess_backend();
    let mut registry = BackendRegistry::with_toy();
    registry.register_segmenter(cmd.clone()).unwrap();
    registry.register_generator(cmd.clone()).unwrap();
    let name = Segmenter::descriptor(cmd.as_ref()).name;
    let model = tiny_model();
    let img = gray_scene();
    let seeds = Some(vec![4, 9, 2]);
    let local = PipelineParams { n: 3, seeds: seeds.clone(), ..Default::default() };
    let remote = PipelineParams { n: 3, seeds, segmenter: name.clone(), generator: name };
    let a = run_pipeline(&img, &local, &registry, &model).unwrap();
    let b = run_pipeline(&img, &remote, &registry, &model).unwrap();
    assert_eq!(a.imagination.segmentation, b.imagination.segmentation);
    // The wire format carries 8-bit PNGs.
    let local_refs: Vec<RgbImage> = a.imagination.references.references.iter().map(RgbImage::quantized).collect();
    assert_eq!(local_refs, b.imagination.references.references);
    assert!(a.assignment.same_choices(&b.assignment));
}

#[test]
fn subprocess_failures_keep_stderr() {
    let broken = CommandBackend::new(BIN, vec!["no-such-subcommand".into()]);
    let lightness = ndarray::Array2::from_elem((4, 4), 50.0);
    let err = broken.segment(&lightness).unwrap_err();
    assert!(err.message.contains("exited with"), "{}", err.message);
    assert!(err.diagnostics.contains("no-such-subcommand"), "{}", err.diagnostics);
    let missing = CommandBackend::new("/nonexistent/backend", vec![]);
    let seg = colorimagine::imagination::SegmentationMap::from_class_map(&ndarray::Array2::from_elem((2, 2), 1)).unwrap();
    assert!(missing.generate(&seg, &colorimagine::imagination::LatentCode::from_seed(0)).is_err());
}

#[test]
fn imagine_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("scene.png");
    save_rgb(&gray_scene(), &img).unwrap();
    let out = dir.path().join("out");
    run(&["imagine", img.to_str().unwrap(), "--seeds", "0,1,2,3", "--out", out.to_str().unwrap()]);
    let seg = load_labels_png(out.join("seg.png")).unwrap();
    assert_eq!(seg.dim(), (36, 44));
    assert!(seg.iter().all(|&c| (1..=4).contains(&c)));
    for i in 0..4 {
        assert_eq!(load_rgb(out.join("refs").join(format!("ref_{i}.png"))).unwrap().dim(), (36, 44));
    }
    assert!(out.join("composed.png").is_file());
    let assignment: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("assignment.json")).unwrap()).unwrap();
    assert!(assignment["beta"].as_object().unwrap().len() >= 1);

    // The directory backend replays a pre-generated tree.
    let tree = dir.path().join("tree");
    std::fs::create_dir_all(tree.join("seg")).unwrap();
    std::fs::copy(out.join("seg.png"), tree.join("seg").join("scene.png")).unwrap();
    std::fs::create_dir_all(tree.join("refs").join("scene")).unwrap();
    for i in 0..4 {
        let name = format!("ref_{i}.png");
        std::fs::copy(out.join("refs").join(&name), tree.join("refs").join("scene").join(&name)).unwrap();
    }
    let replay = dir.path().join("replay");
    run(&[
        "imagine",
        img.to_str().unwrap(),
        "--backend",
        "dir",
        "--backend-root",
        tree.to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(out.join("composed.png")).unwrap(), std::fs::read(replay.join("composed.png")).unwrap());
}

fn write_config(path: &Path, corpus: &Path, out: &Path) {
    let text = format!(
        "iterations = 2\nbatch_size = 2\ncrop_size = 32\ncheckpoint_every = 2\ncorpus = {:?}\noutput_dir = {:?}\n\n\
         [model.unet]\nbase_width = 4\n\n[model.extractor]\nwidth_divisor = 16\n",
        corpus.to_str().unwrap(),
        out.to_str().unwrap()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn train_colorize_and_evaluate_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    run(&["synth-corpus", corpus.to_str().unwrap(), "--count", "3", "--size", "40"]);
    let runs = dir.path().join("run");
    let config = dir.path().join("train.toml");
    write_config(&config, &corpus, &runs);

    // Command-line values win over the file.
    run(&["train", "--config", config.to_str().unwrap(), "--iterations", "3", "--seed", "5"]);
    let log: Vec<LogEntry> = std::fs::read_to_string(runs.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.iter().map(|e| e.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(log.iter().all(|e| e.loss.is_finite() && e.lr == 2e-4));
    let written = std::fs::read_to_string(runs.join("config.toml")).unwrap();
    assert!(written.contains("iterations = 3") && written.contains("seed = 5"), "{written}");
    assert!(runs.join("checkpoint_000002.safetensors").is_file());
    let ckpt = runs.join("model.safetensors");
    let (_, manifest) = load_checkpoint(&ckpt).unwrap();
    assert_eq!((manifest.step, manifest.training_seed), (3, Some(5)));

    let outputs = dir.path().join("ours");
    std::fs::create_dir_all(&outputs).unwrap();
    let input = corpus.join("scene_0000.png");
    let with_ref = outputs.join("a.png");
    run(&[
        "colorize",
        input.to_str().unwrap(),
        "--ref",
        corpus.join("scene_0001.png").to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "-o",
        with_ref.to_str().unwrap(),
    ]);
    let piped = outputs.join("b.png");
    run(&["colorize", input.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "-o", piped.to_str().unwrap()]);
    assert_eq!(load_rgb(&with_ref).unwrap().dim(), (40, 40));

    let gray = dir.path().join("gray");
    std::fs::create_dir_all(&gray).unwrap();
    save_rgb(&gray_scene(), gray.join("g.png")).unwrap();
    let report = dir.path().join("report.json");
    let table = run(&["evaluate", outputs.to_str().unwrap(), gray.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(table.contains("Colorfulness") && table.contains("ours") && table.contains("gray"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["gray"]["mean"], 0.0);
    assert_eq!(json["ours"]["count"], 2);
    assert!(report.with_extension("txt").is_file());

    let csv = run(&["pairing-sheet", outputs.to_str().unwrap(), outputs.to_str().unwrap()]);
    assert!(csv.lines().count() >= 1);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "learning_rat = 1.0\n").unwrap();
    let out = Command::new(BIN).args(["train", "--config", config.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}
