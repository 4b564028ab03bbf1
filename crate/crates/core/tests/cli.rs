mod common;

use std::path::{Path, PathBuf};

use common::tiny_config;
use protopart::cli::run_cli_with;
use protopart::config::RunConfig;
use protopart::data::read_ppm;
use protopart::explain::ensemble_logits;
use protopart::{load_checkpoint, ProtoPNet};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let argv = std::iter::once("protopart")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli_with(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn parse_floats(line: &str, key: &str) -> Vec<f64> {
    let rest = line.strip_prefix(key).unwrap();
    rest.split(',').map(|v| v.parse().unwrap()).collect()
}

/// A workspace with an 8×8 blobs dataset, a small run config, a trained
/// checkpoint and one test image.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let r = run(&[
            "synth",
            "--kind",
            "blobs",
            "--size",
            "8",
            "--per-class",
            "6",
            "--seed",
            "2",
            "--out",
            s(&f.path("train.ppds")),
        ]);
        assert_eq!(r.code, 0, "{}", r.err);
        let mut cfg = RunConfig::defaults(2);
        cfg.model = tiny_config(2, 2);
        cfg.train.stage1_epochs = 2;
        cfg.train.stage3_epochs = 3;
        cfg.train.cycles = 1;
        cfg.train.batch_size = 4;
        std::fs::write(f.path("run.cfg"), cfg.to_text()).unwrap();
        let r = run(&[
            "train",
            "--data",
            s(&f.path("train.ppds")),
            "--config",
            s(&f.path("run.cfg")),
            "--out",
            s(&f.path("model.ppnx")),
        ]);
        assert_eq!(r.code, 0, "{}", r.err);
        let img = load_dataset_image(&f.path("train.ppds"), 1);
        protopart::data::write_ppm(&img, f.path("x.ppm")).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn load_dataset_image(path: &Path, i: usize) -> protopart::Tensor {
    let ds = protopart::load_dataset(path, protopart::DatasetFormat::Ppds).unwrap();
    ds.images[i].clone()
}

#[test]
fn eval_and_exit_codes() {
    let f = Fixture::new();
    let ckpt = f.path("model.ppnx");
    let r = run(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&f.path("train.ppds")),
    ]);
    assert_eq!(r.code, 0);
    let line = r.out.trim();
    assert!(
        line.starts_with("accuracy=") && line.ends_with(" n=12"),
        "{line}"
    );

    let r = run(&["eval", "--ckpt", s(&ckpt), "--image", s(&f.path("x.ppm"))]);
    assert_eq!(r.code, 0);
    let lines: Vec<&str> = r.out.lines().collect();
    let predicted: usize = lines[0]
        .strip_prefix("predicted=")
        .unwrap()
        .parse()
        .unwrap();
    let logits = parse_floats(lines[1], "logits=");
    let model = load_checkpoint(&ckpt).unwrap();
    let want = model.forward(&read_ppm(f.path("x.ppm")).unwrap()).unwrap();
    assert_eq!(predicted, want.predicted());
    for (a, b) in logits.iter().zip(&want.logits) {
        assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0));
    }

    let missing = run(&[
        "eval",
        "--ckpt",
        s(&f.path("absent.ppnx")),
        "--data",
        s(&f.path("train.ppds")),
    ]);
    assert_eq!(missing.code, 1);
    assert!(missing.err.starts_with("error: "));
    assert_eq!(run(&["eval", "--ckpt", s(&ckpt)]).code, 2);
    assert_eq!(run(&["eval", "--ckpt", s(&ckpt), "--frobnicate"]).code, 2);
    assert_eq!(run(&["no-such-command"]).code, 2);
    assert_eq!(
        run(&["--workers", "0", "gradcheck", "--trials", "1"]).code,
        2
    );
    assert_eq!(run(&["--help"]).code, 0);
}

#[test]
fn training_is_reproducible_and_worker_count_free() {
    let f = Fixture::new();
    let again = f.path("again.ppnx");
    let r = run(&[
        "--workers",
        "3",
        "train",
        "--data",
        s(&f.path("train.ppds")),
        "--config",
        s(&f.path("run.cfg")),
        "--out",
        s(&again),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(
        std::fs::read(f.path("model.ppnx")).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn explain_writes_images_and_totals_match_eval() {
    let f = Fixture::new();
    let ckpt = f.path("model.ppnx");
    let out_dir = f.path("explained");
    let r = run(&[
        "explain",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&f.path("x.ppm")),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(
        std::fs::read_to_string(out_dir.join("report.txt")).unwrap(),
        r.out
    );
    let model = load_checkpoint(&ckpt).unwrap();
    for j in 0..model.num_prototypes() {
        let heat = read_ppm(out_dir.join(format!("prototype_{j:03}_heatmap.ppm"))).unwrap();
        assert_eq!(heat.shape(), &[8, 8, 3]);
        assert!(read_ppm(out_dir.join(format!("prototype_{j:03}_patch.ppm"))).is_ok());
    }

    let totals: Vec<f64> = r
        .out
        .lines()
        .filter_map(|l| {
            l.split_once(" points=")
                .filter(|(h, _)| h.starts_with("total "))
        })
        .map(|(_, v)| v.parse().unwrap())
        .collect();
    let e = run(&["eval", "--ckpt", s(&ckpt), "--image", s(&f.path("x.ppm"))]);
    let logits = parse_floats(e.out.lines().nth(1).unwrap(), "logits=");
    assert_eq!(totals.len(), logits.len());
    for (t, l) in totals.iter().zip(&logits) {
        assert!((t - l).abs() <= 1e-9, "{t} vs {l}");
    }
}

#[test]
fn push_last_layer_prune_verify_chain() {
    let f = Fixture::new();
    let data = f.path("train.ppds");
    let r = run(&[
        "push",
        "--ckpt",
        s(&f.path("model.ppnx")),
        "--data",
        s(&data),
        "--out",
        s(&f.path("pushed.ppnx")),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(
        r.out
            .lines()
            .filter(|l| l.starts_with("prototype="))
            .count(),
        4
    );

    let r = run(&[
        "last-layer",
        "--ckpt",
        s(&f.path("pushed.ppnx")),
        "--data",
        s(&data),
        "--config",
        s(&f.path("run.cfg")),
        "--out",
        s(&f.path("tuned.ppnx")),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let pushed = load_checkpoint(f.path("pushed.ppnx")).unwrap();
    let tuned = load_checkpoint(f.path("tuned.ppnx")).unwrap();
    assert!(tuned.prototypes_bit_eq(&pushed));
    assert!(tuned.backbone.bit_eq(&pushed.backbone));

    let r = run(&[
        "prune",
        "--ckpt",
        s(&f.path("tuned.ppnx")),
        "--data",
        s(&data),
        "--z",
        "3",
        "--tau",
        "2",
        "--out",
        s(&f.path("pruned.ppnx")),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(
        load_checkpoint(f.path("pruned.ppnx"))
            .unwrap()
            .num_prototypes()
            <= 4
    );

    let r = run(&[
        "verify-theorem",
        "--before",
        s(&f.path("model.ppnx")),
        "--after",
        s(&f.path("pushed.ppnx")),
        "--delta",
        "0.5",
        "--data",
        s(&data),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let last = r.out.lines().last().unwrap();
    assert!(last.starts_with("images=12 "), "{last}");
    assert!(
        last.ends_with("bound_violations=0 prediction_violations=0"),
        "{last}"
    );

    let r = run(&[
        "nearest",
        "--ckpt",
        s(&f.path("pushed.ppnx")),
        "--prototype",
        "0",
        "--data",
        s(&data),
        "--top",
        "3",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 3);
    // A pushed prototype sits exactly on a training patch.
    assert!(r
        .out
        .lines()
        .next()
        .unwrap()
        .ends_with("distance=0.000000000000e0"));
    let r = run(&[
        "nearest",
        "--ckpt",
        s(&f.path("pushed.ppnx")),
        "--image",
        s(&f.path("x.ppm")),
        "--top",
        "2",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 2);
    assert_eq!(
        run(&[
            "nearest",
            "--ckpt",
            s(&f.path("pushed.ppnx")),
            "--prototype",
            "0"
        ])
        .code,
        2
    );
}

#[test]
fn ensemble_and_augment() {
    let f = Fixture::new();
    let (a, b) = (f.path("model.ppnx"), f.path("other.ppnx"));
    let r = run(&[
        "train",
        "--data",
        s(&f.path("train.ppds")),
        "--config",
        s(&f.path("run.cfg")),
        "--seed",
        "5",
        "--out",
        s(&b),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let r = run(&[
        "ensemble",
        "--ckpt",
        s(&a),
        "--ckpt",
        s(&b),
        "--image",
        s(&f.path("x.ppm")),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let logits = parse_floats(r.out.lines().nth(1).unwrap(), "logits=");
    let models: Vec<ProtoPNet> = [&a, &b]
        .iter()
        .map(|p| load_checkpoint(p).unwrap())
        .collect();
    let refs: Vec<&ProtoPNet> = models.iter().collect();
    let want = ensemble_logits(&refs, &read_ppm(f.path("x.ppm")).unwrap()).unwrap();
    for (x, y) in logits.iter().zip(&want) {
        assert!((x - y).abs() <= 1e-11 * y.abs().max(1.0));
    }
    let r = run(&[
        "ensemble",
        "--ckpt",
        s(&a),
        "--ckpt",
        s(&b),
        "--data",
        s(&f.path("train.ppds")),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 3);

    let r = run(&[
        "augment",
        "--data",
        s(&f.path("train.ppds")),
        "--out",
        s(&f.path("aug.ppds")),
        "--copies",
        "2",
        "--seed",
        "1",
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.trim(), "images_in=12 images_out=36");
    let r = run(&[
        "augment",
        "--data",
        s(&f.path("train.ppds")),
        "--out",
        s(&f.path("bad.ppds")),
        "--ops",
        "blur",
    ]);
    assert_eq!(r.code, 1);
}

#[test]
fn inputs_are_never_modified() {
    let f = Fixture::new();
    let inputs = ["train.ppds", "run.cfg", "model.ppnx", "x.ppm"];
    let before: Vec<u32> = inputs
        .iter()
        .map(|n| crc32fast::hash(&std::fs::read(f.path(n)).unwrap()))
        .collect();
    let data = s(&f.path("train.ppds")).to_string();
    let ckpt = s(&f.path("model.ppnx")).to_string();
    let img = s(&f.path("x.ppm")).to_string();
    let out = s(&f.path("out")).to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["eval", "--ckpt", &ckpt, "--data", &data],
        vec!["eval", "--ckpt", &ckpt, "--image", &img],
        vec![
            "explain",
            "--ckpt",
            &ckpt,
            "--image",
            &img,
            "--out-dir",
            &out,
        ],
        vec![
            "nearest",
            "--ckpt",
            &ckpt,
            "--prototype",
            "1",
            "--data",
            &data,
        ],
        vec![
            "verify-theorem",
            "--before",
            &ckpt,
            "--after",
            &ckpt,
            "--delta",
            "0.5",
            "--data",
            &data,
        ],
        vec!["ensemble", "--ckpt", &ckpt, "--data", &data],
    ];
    for c in &commands {
        let r = run(c);
        assert_eq!(r.code, 0, "{c:?}: {}", r.err);
    }
    let after: Vec<u32> = inputs
        .iter()
        .map(|n| crc32fast::hash(&std::fs::read(f.path(n)).unwrap()))
        .collect();
    assert_eq!(before, after);
}

#[test]
fn gradcheck_and_synth() {
    let r = run(&["gradcheck", "--trials", "1", "--seed", "4"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.lines().last().unwrap().starts_with("max_rel_error="));
    let r = run(&["gradcheck", "--trials", "1", "--tolerance", "1e-30"]);
    assert_eq!(r.code, 1);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ppds");
    let r = run(&["synth", "--size", "12", "--per-class", "2", "--out", s(&p)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.trim(), "images=10 classes=5");
}
