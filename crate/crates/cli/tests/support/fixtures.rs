//! Deterministic fixture projects, models and images.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fieldforge_core::manifest::{self, LabelDef, ProjectManifest, Rgb, MANIFEST_FILE};
use fieldforge_core::raster::{encode_png, RgbImage};
use fieldforge_core::refdet::RefDetModel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const PROJECT_ID: &str = "coastal-watch";
pub const PROJECT_NAME: &str = "Coastal watch";

/// Prototype colors the fixture detector looks for, by label id.
pub const PROTOTYPES: [Rgb; 2] = [Rgb::new(200, 40, 40), Rgb::new(40, 160, 60)];
pub const IMAGE_SIZE: u32 = 64;

pub fn labels() -> Vec<LabelDef> {
    vec![
        LabelDef {
            id: 0,
            name: "rip-current".into(),
            display_color: Rgb::new(0, 114, 255),
        },
        LabelDef {
            id: 1,
            name: "sea-foam".into(),
            display_color: Rgb::new(230, 159, 0),
        },
    ]
}

pub fn model() -> RefDetModel {
    RefDetModel {
        grid: 4,
        prototypes: PROTOTYPES.to_vec(),
        score_threshold: 0.85,
        nms_iou_threshold: 0.3,
        max_detections: 8,
    }
}

/// The manifest `forge init` writes, with the fixture labels swapped in.
pub fn manifest() -> ProjectManifest {
    let mut m = manifest::new_from_template(PROJECT_ID, PROJECT_NAME).unwrap();
    m.labels = labels();
    m
}

/// Replaces the labels of the manifest in `dir` with the fixture labels.
pub fn set_fixture_labels(dir: &Path) {
    let path = dir.join(MANIFEST_FILE);
    let mut m = manifest::parse(&std::fs::read(&path).unwrap()).unwrap();
    m.labels = labels();
    std::fs::write(&path, manifest::canonicalize(&m).unwrap()).unwrap();
}

/// Gray noise with, for `class = Some(k)`, a block of prototype `k` covering
/// whole grid cells (so the detector fires on at least one cell).
pub fn class_image(class: Option<usize>, seed: u64) -> RgbImage {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut img = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, Rgb::new(0, 0, 0));
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let v = rng.gen_range(95..=135);
            img.put_pixel(x, y, Rgb::new(v, v, v));
        }
    }
    if let Some(k) = class {
        let cell = IMAGE_SIZE / 4;
        let (cw, ch) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let (cx, cy) = (rng.gen_range(0..=4 - cw), rng.gen_range(0..=4 - ch));
        let p = PROTOTYPES[k].0;
        for y in cy * cell..(cy + ch) * cell {
            for x in cx * cell..(cx + cw) * cell {
                let mut j = |c: u8| c.saturating_add(rng.gen_range(0..=6)).saturating_sub(3);
                let px = Rgb::new(j(p[0]), j(p[1]), j(p[2]));
                img.put_pixel(x, y, px);
            }
        }
    }
    img
}

/// 4 images per label plus 4 background images, named so that the sorted
/// order is rip, foam, background.
pub fn write_field_images(dir: &Path, gps: bool) -> Vec<(PathBuf, Option<usize>)> {
    std::fs::create_dir_all(dir).unwrap();
    let mut out = Vec::new();
    for (prefix, class) in [("a-rip", Some(0)), ("b-foam", Some(1)), ("c-bg", None)] {
        for i in 0..4u64 {
            let path = dir.join(format!("{prefix}-{i}.png"));
            let seed = class.map_or(1000, |k| 100 * (k as u64 + 1)) + i;
            std::fs::write(&path, encode_png(&class_image(class, seed))).unwrap();
            if gps {
                std::fs::write(
                    dir.join(format!("{prefix}-{i}.png.gps")),
                    format!("-33.89{i},151.27{i},4.5,{}", 30 * i),
                )
                .unwrap();
            }
            out.push((path, class));
        }
    }
    out
}

/// A random image with arbitrary (not cell-aligned) prototype rectangles.
pub fn random_scene(seed: u64) -> (RgbImage, RefDetModel) {
    let mut rng = StdRng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(17..90), rng.gen_range(17..90));
    let mut img = RgbImage::filled(w, h, Rgb::new(0, 0, 0));
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x, y, Rgb::new(rng.gen(), rng.gen(), rng.gen()));
        }
    }
    let protos: Vec<Rgb> = (0..rng.gen_range(1..=3))
        .map(|_| Rgb::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    for _ in 0..rng.gen_range(1..6) {
        let p = protos[rng.gen_range(0..protos.len())];
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (x1, y1) = (rng.gen_range(x0..=w), rng.gen_range(y0..=h));
        img.fill_rect(x0, y0, x1, y1, p);
    }
    let model = RefDetModel {
        grid: rng.gen_range(2..=9),
        prototypes: protos,
        score_threshold: [0.6, 0.75, 0.9][rng.gen_range(0..3)],
        nms_iou_threshold: [0.0, 0.3, 0.5][rng.gen_range(0..3)],
        max_detections: rng.gen_range(1..40),
    };
    (img, model)
}

pub fn bin(name: &str) -> PathBuf {
    match name {
        "forge" => PathBuf::from(env!("CARGO_BIN_EXE_forge")),
        "fieldsim" => PathBuf::from(env!("CARGO_BIN_EXE_fieldsim")),
        other => panic!("no binary {other}"),
    }
}

/// Runs a binary with a scrubbed environment.
pub fn run_bin(name: &str, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin(name));
    cmd.args(args)
        .env_remove("FIELDFORGE_SERVER")
        .env_remove("FIELDFORGE_TOKEN");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| {
        panic!(
            "no stdout; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    });
    serde_json::from_str(line).unwrap()
}

/// Runs a command in-process, returning (exit code, last stdout line as JSON, stderr).
pub fn run_inproc(
    f: fn(Vec<String>, &mut dyn std::io::Write, &mut dyn std::io::Write) -> u8,
    args: &[&str],
) -> (u8, Option<serde_json::Value>, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = f(
        args.iter().map(|s| s.to_string()).collect(),
        &mut out,
        &mut err,
    );
    let json = String::from_utf8_lossy(&out)
        .lines()
        .last()
        .and_then(|l| serde_json::from_str(l).ok());
    (code, json, String::from_utf8_lossy(&err).into_owned())
}

pub fn forge(args: Vec<String>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> u8 {
    fieldforge_cli::forge::run(std::iter::once("forge".to_string()).chain(args), out, err)
}

pub fn fieldsim(
    args: Vec<String>,
    out: &mut dyn std::io::Write,
    err: &mut dyn std::io::Write,
) -> u8 {
    fieldforge_cli::fieldsim::run(
        std::iter::once("fieldsim".to_string()).chain(args),
        out,
        err,
    )
}

/// A project directory after init, label setup, pack and build-app.
pub struct BuiltProject {
    pub dir: PathBuf,
    pub bundle: PathBuf,
    pub package: PathBuf,
}

pub fn build_project(root: &Path, version: &str) -> BuiltProject {
    let dir = root.join("project");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    if !dir.join(MANIFEST_FILE).exists() {
        let (code, _, err) = run_inproc(
            forge,
            &["init", &s(&dir), "--id", PROJECT_ID, "--name", PROJECT_NAME],
        );
        assert_eq!(code, 0, "{err}");
        set_fixture_labels(&dir);
    }
    let model_path = root.join("refdet.json");
    std::fs::write(&model_path, serde_json::to_vec(&model()).unwrap()).unwrap();
    let bundle = dir.join(format!("model-{version}.bundle"));
    let (code, _, err) = run_inproc(
        forge,
        &[
            "pack",
            &s(&dir),
            "--model",
            &s(&model_path),
            "--version",
            version,
        ],
    );
    assert_eq!(code, 0, "{err}");
    let package = root.join(format!("app-{version}.ffpkg"));
    let (code, _, err) = run_inproc(
        forge,
        &[
            "build-app",
            &s(&dir),
            "--bundle",
            &s(&bundle),
            "--out",
            &s(&package),
        ],
    );
    assert_eq!(code, 0, "{err}");
    BuiltProject {
        dir,
        bundle,
        package,
    }
}
