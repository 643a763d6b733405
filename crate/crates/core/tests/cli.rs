use std::path::{Path, PathBuf};

use splatforge::assets::{read_png, SceneData};
use splatforge::cli::run;
use splatforge::gaussians::{read_splat, write_splat, GaussianSet, Provenance};
use splatforge::numerics::ParamStore;
use splatforge::pipeline::{init_params, PipelineConfig};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("splatforge").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scene(root: &Path) -> PathBuf {
    assert_eq!(
        cli(&["gen-scene", "--out", s(root), "--size", "32", "--seed", "4"]),
        0
    );
    root.join("desk")
}

#[test]
fn zero_step_training_saves_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let out = dir.path().join("params.json");
    let report = dir.path().join("report.csv");
    let code = cli(&[
        "train",
        "--scene",
        s(&scene),
        "--steps",
        "0",
        "--out",
        s(&out),
        "--report",
        s(&report),
    ]);
    assert_eq!(code, 0);
    let saved = ParamStore::load(&out).unwrap();
    let fresh = init_params(&PipelineConfig::default()).unwrap();
    saved.check_layout(&fresh).unwrap();
    for name in fresh.names() {
        assert_eq!(
            saved.value(name).unwrap().data(),
            fresh.value(name).unwrap().data(),
            "{name}"
        );
    }
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(
        csv.trim(),
        "step,loss_mse,loss_perc,loss_tex,psnr,ssim,loss_total,seconds"
    );
}

#[test]
fn reconstruct_render_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let params = dir.path().join("params.json");
    assert_eq!(
        cli(&[
            "train",
            "--scene",
            s(&scene),
            "--steps",
            "0",
            "--out",
            s(&params)
        ]),
        0
    );

    let splat = dir.path().join("scene.splat");
    assert_eq!(
        cli(&[
            "reconstruct",
            "--scene",
            s(&scene),
            "--params",
            s(&params),
            "--out",
            s(&splat)
        ]),
        0
    );
    // one coarse primitive per HR pixel of both context views, plus children
    assert!(read_splat(&splat).unwrap().len() >= 2 * 32 * 32);

    let image = dir.path().join("view.png");
    let camera = scene.join("cams/003.json");
    assert_eq!(
        cli(&[
            "render",
            "--splat",
            s(&splat),
            "--camera",
            s(&camera),
            "--out",
            s(&image)
        ]),
        0
    );
    assert_eq!(read_png(&image).unwrap().shape(), &[32, 32, 3]);

    let csv = dir.path().join("eval.csv");
    assert_eq!(
        cli(&[
            "eval",
            "--scene",
            s(&scene),
            "--splat",
            s(&splat),
            "--views",
            "all",
            "--csv",
            s(&csv)
        ]),
        0
    );
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 1 + 6 + 1);
    assert!(table.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn eval_of_ground_truth_renders_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let csv = dir.path().join("eval.csv");
    let renders = scene.join("hr");
    assert_eq!(
        cli(&[
            "eval",
            "--scene",
            s(&scene),
            "--renders",
            s(&renders),
            "--views",
            "all",
            "--csv",
            s(&csv)
        ]),
        0
    );
    let table = std::fs::read_to_string(&csv).unwrap();
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "100.0000", "{line}");
        assert_eq!(cols[2], "1.000000", "{line}");
    }
}

#[test]
fn empty_splat_renders_background() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let splat = dir.path().join("empty.splat");
    write_splat(&GaussianSet::new(Provenance::Coarse), &splat).unwrap();
    let image = dir.path().join("empty.png");
    let camera = scene.join("cams/000.json");
    assert_eq!(
        cli(&[
            "render",
            "--splat",
            s(&splat),
            "--camera",
            s(&camera),
            "--out",
            s(&image)
        ]),
        0
    );
    assert!(read_png(&image).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn corrupt_inputs_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let params = dir.path().join("params.json");
    assert_eq!(
        cli(&[
            "train",
            "--scene",
            s(&scene),
            "--steps",
            "0",
            "--out",
            s(&params)
        ]),
        0
    );

    let cam = scene.join("cams/001.json");
    std::fs::write(&cam, "{ \"fx\": 1.0").unwrap();
    let err = SceneData::load(&scene).unwrap_err();
    assert!(err.to_string().contains("001.json"), "{err}");
    let splat = dir.path().join("out.splat");
    assert_eq!(
        cli(&[
            "reconstruct",
            "--scene",
            s(&scene),
            "--params",
            s(&params),
            "--out",
            s(&splat)
        ]),
        2
    );
    assert!(!splat.exists());

    let garbage = dir.path().join("garbage.splat");
    std::fs::write(&garbage, b"not a splat file").unwrap();
    let image = dir.path().join("x.png");
    assert_eq!(
        cli(&[
            "render",
            "--splat",
            s(&garbage),
            "--camera",
            s(&scene.join("cams/000.json")),
            "--out",
            s(&image)
        ]),
        2
    );
}

#[test]
fn mismatched_params_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let params = dir.path().join("params.json");
    let mut store = ParamStore::new();
    store.insert("enc.l1.w", splatforge::numerics::Tensor::zeros(&[1]));
    store.save(&params).unwrap();
    let splat = dir.path().join("out.splat");
    assert_eq!(
        cli(&[
            "reconstruct",
            "--scene",
            s(&scene),
            "--params",
            s(&params),
            "--out",
            s(&splat)
        ]),
        1
    );
}

#[test]
fn tr_map_writes_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let out = dir.path().join("tr.png");
    assert_eq!(
        cli(&[
            "tr-map",
            "--image",
            s(&scene.join("hr/000.png")),
            "--out",
            s(&out)
        ]),
        0
    );
    assert_eq!(read_png(&out).unwrap().shape()[..2], [32, 32]);
    let missing = dir.path().join("nope.png");
    assert_eq!(
        cli(&["tr-map", "--image", s(&missing), "--out", s(&out)]),
        2
    );
}

#[test]
fn shipped_desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.depth.far, 10.0);
    assert_eq!(
        PipelineConfig {
            depth: cfg.depth,
            eval_every: cfg.eval_every,
            ..PipelineConfig::default()
        },
        cfg
    );
}
