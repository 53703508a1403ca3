//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../support/mod.rs"]
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use fieldforge_client::HttpClient;
use fieldforge_core::capture::{ObservationState, ObservationStore, SensorFrame};
use fieldforge_core::digest::sha256_hex;
use fieldforge_core::protocol::{
    AnnotationSource, BeginUploadRequest, ObservationRecord, ReviewRequest, StoredObservation,
    Verdict,
};
use fieldforge_core::raster::{encode_png, RgbImage};
use fieldforge_core::sync::SyncApi;
use fieldforge_core::{canon, iou, nms, refdet, BBox, Detection};
use fieldforge_server::{BackgroundServer, ObservationFilter, ServerConfig};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use support::fixtures::*;
use support::oracles::*;
use tempfile::TempDir;
use uuid::Uuid;

/// sha256 of `forge pack` output for the fixture model at 1.0.0, as rebuilt
/// by `tests/golden/rebuild.py`.
const GOLDEN_BUNDLE_DIGEST: &str =
    "fffdd3445d902ca59274c331d5ac3c85eae4450930c5c13703b7695996122184";
/// sha256 of `forge build-app` output wrapping that bundle.
const GOLDEN_PACKAGE_DIGEST: &str =
    "27dec4c0bd0fc0fe84858ef6ef0ed6b4a255182424d9341165d8127dc34f4127";

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn server(root: &Path) -> BackgroundServer {
    BackgroundServer::start(root.join("server"), ServerConfig::default()).unwrap()
}

fn rows(server: &BackgroundServer) -> Vec<StoredObservation> {
    server
        .registry()
        .list_observations(PROJECT_ID, &ObservationFilter::default(), None, None)
        .unwrap()
        .items
}

fn sensor() -> SensorFrame {
    SensorFrame {
        latitude: -33.89,
        longitude: 151.27,
        gps_accuracy: 4.0,
        heading: 90.0,
        captured_at: Utc.with_ymd_and_hms(2024, 3, 2, 7, 30, 0).unwrap(),
    }
}

fn record(oid: Uuid, media: &[u8]) -> ObservationRecord {
    ObservationRecord {
        observation_id: oid,
        project_id: PROJECT_ID.into(),
        content_digest: sha256_hex(media),
        captured_at: sensor().captured_at,
        sensor: Some(sensor()),
        detections: vec![],
        model_version: "1.0.0".into(),
    }
}

fn publish(built: &BuiltProject, url: &str) {
    let (code, _, err) = run_inproc(
        forge,
        &[
            "publish",
            &s(&built.dir),
            "--package",
            &s(&built.package),
            "--server",
            url,
        ],
    );
    assert_eq!(code, 0, "{err}");
}

fn end_to_end() -> String {
    let started = Instant::now();
    let tmp = TempDir::new().unwrap();
    let server = server(tmp.path());
    let url = server.url();
    let dir = tmp.path().join("project");
    let run = |name: &str, args: &[&str]| {
        let out = run_bin(name, args, &[]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{name} {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        stdout_json(&out)
    };

    run(
        "forge",
        &["init", &s(&dir), "--id", PROJECT_ID, "--name", PROJECT_NAME],
    );
    set_fixture_labels(&dir);
    let model_path = tmp.path().join("refdet.json");
    std::fs::write(&model_path, serde_json::to_vec(&model()).unwrap()).unwrap();
    let packed = run(
        "forge",
        &[
            "pack",
            &s(&dir),
            "--model",
            &s(&model_path),
            "--version",
            "1.0.0",
        ],
    );
    let bundle = packed["bundle"].as_str().unwrap().to_string();
    let package = tmp.path().join("app.ffpkg");
    run(
        "forge",
        &[
            "build-app",
            &s(&dir),
            "--bundle",
            &bundle,
            "--out",
            &s(&package),
        ],
    );
    run(
        "forge",
        &[
            "publish",
            &s(&dir),
            "--package",
            &s(&package),
            "--server",
            &url,
        ],
    );

    let images = tmp.path().join("images");
    let files = write_field_images(&images, true);
    let store = tmp.path().join("device");
    let captured = run(
        "fieldsim",
        &[
            "capture",
            "--store",
            &s(&store),
            "--package",
            &s(&package),
            "--images",
            &s(&images),
        ],
    );
    assert_eq!(captured["captured"], 12);
    let report = run(
        "fieldsim",
        &[
            "sync",
            "--store",
            &s(&store),
            "--server",
            &url,
            "--select-all",
        ],
    );
    assert_eq!(report["uploaded"], 12, "{report}");

    let class_of: BTreeMap<String, Option<usize>> = files
        .iter()
        .map(|(p, k)| (sha256_hex(&std::fs::read(p).unwrap()), *k))
        .collect();
    let client = HttpClient::new(&url).unwrap();
    let listed = client
        .list_all_observations(PROJECT_ID, Default::default())
        .unwrap();
    assert_eq!(listed.len(), 12);
    let corrected = Detection {
        label_id: 1,
        bbox: BBox::new(0.25, 0.25, 0.75, 0.75).unwrap(),
        confidence: 1.0,
    };
    for row in &listed {
        let (verdict, corrected_detections) = match class_of[&row.content_digest] {
            Some(0) => {
                assert!(
                    !row.detections.is_empty() && row.detections.iter().all(|d| d.label_id == 0)
                );
                (Verdict::Confirm, vec![])
            }
            Some(_) => (Verdict::Correct, vec![corrected]),
            None => (Verdict::Refute, vec![]),
        };
        client
            .submit_review(
                row.observation_id,
                &ReviewRequest {
                    verdict,
                    corrected_detections,
                    reviewer: "shore-team".into(),
                    decided_at: None,
                },
            )
            .unwrap();
    }

    let snapshot = client.export_snapshot(PROJECT_ID).unwrap();
    let reviewed = client
        .list_all_observations(PROJECT_ID, Default::default())
        .unwrap();
    let expected = snapshot_annotations(&reviewed);
    let actual: Vec<(String, Detection, &str)> = snapshot
        .annotations
        .iter()
        .map(|a| {
            let source = match a.source {
                AnnotationSource::Model => "model",
                AnnotationSource::Expert => "expert",
            };
            (a.content_digest.clone(), a.detection, source)
        })
        .collect();
    assert_eq!(actual, expected);
    let images: BTreeSet<&String> = snapshot.images.iter().map(|i| &i.content_digest).collect();
    assert_eq!(snapshot.images.len(), 12);
    assert_eq!(images, class_of.keys().collect());
    let verdicts = snapshot.stats.per_verdict;
    assert_eq!(
        (verdicts.confirm, verdicts.correct, verdicts.refute),
        (4, 4, 4)
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!(
        "12 images, {} annotations, {:.2}s",
        actual.len(),
        elapsed.as_secs_f64()
    )
}

/// All multisets of size <= `max` over `0..types`, as nondecreasing index lists.
fn multisets(types: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max {
        let mut next = Vec::new();
        for m in &frontier {
            let from = m.last().copied().unwrap_or(0);
            for t in from..types {
                let mut grown: Vec<usize> = m.clone();
                grown.push(t);
                next.push(grown);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn check_nms(dets: &[GridDet], q: u32, threshold: f64, max_outs: &[usize], rng: &mut StdRng) {
    let expected = nms_fixed_point(dets, q, threshold, usize::MAX);
    let mut input: Vec<Detection> = dets.iter().map(|d| d.to_detection(q)).collect();
    for &max_out in max_outs {
        let want: Vec<Detection> = expected
            .iter()
            .take(max_out)
            .map(|d| d.to_detection(q))
            .collect();
        assert_eq!(
            nms(&input, threshold, max_out),
            want,
            "{dets:?} t={threshold} max={max_out}"
        );
        input.shuffle(rng);
        assert_eq!(nms(&input, threshold, max_out), want, "shuffled {dets:?}");
    }
}

fn detection_math() -> String {
    let mut iou_pairs = 0;
    for q in [4, 8] {
        let boxes = all_grid_boxes(q);
        for &a in &boxes {
            for &b in &boxes {
                let got = iou(&a.to_bbox(q), &b.to_bbox(q));
                assert_eq!(
                    got.to_bits(),
                    iou_by_cells(a, b, q).to_bits(),
                    "{a:?} {b:?} q={q}"
                );
                iou_pairs += 1;
            }
        }
    }

    // 4 overlapping boxes on a 2x2 lattice x 2 labels x 2 confidences
    let q = 2;
    let shapes = [
        GridBox {
            x0: 0,
            y0: 0,
            x1: 2,
            y1: 2,
        },
        GridBox {
            x0: 0,
            y0: 0,
            x1: 1,
            y1: 2,
        },
        GridBox {
            x0: 0,
            y0: 0,
            x1: 1,
            y1: 1,
        },
        GridBox {
            x0: 1,
            y0: 0,
            x1: 2,
            y1: 1,
        },
    ];
    let mut types = Vec::new();
    for &gbox in &shapes {
        for label_id in 0..2 {
            for confidence in [0.5, 0.9] {
                types.push(GridDet {
                    label_id,
                    gbox,
                    confidence,
                });
            }
        }
    }
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let inputs = multisets(types.len(), 6);
    for m in &inputs {
        let dets: Vec<GridDet> = m.iter().map(|&t| types[t]).collect();
        for threshold in [0.0, 0.3, 0.5] {
            check_nms(&dets, q, threshold, &[0, 1, 3, 6], &mut rng);
        }
    }

    let q = 16;
    for _ in 0..10_000 {
        let n = rng.gen_range(0..=8);
        let dets: Vec<GridDet> = (0..n)
            .map(|_| {
                let (x0, y0) = (rng.gen_range(0..q), rng.gen_range(0..q));
                GridDet {
                    label_id: rng.gen_range(0..3),
                    gbox: GridBox {
                        x0,
                        y0,
                        x1: rng.gen_range(x0 + 1..=q),
                        y1: rng.gen_range(y0 + 1..=q),
                    },
                    confidence: [0.25, 0.5, 0.75, 1.0][rng.gen_range(0..4)],
                }
            })
            .collect();
        let threshold = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][rng.gen_range(0..6)];
        check_nms(&dets, q, threshold, &[rng.gen_range(0..=9)], &mut rng);
    }

    let mut fired = 0;
    for seed in 0..20 {
        let (image, model) = random_scene(seed);
        let got = canon::to_vec(&refdet::infer(&model, &image)).unwrap();
        let oracle = refdet_by_cell_means(&model, image.as_raw(), image.width(), image.height());
        assert_eq!(
            String::from_utf8(got).unwrap(),
            canon::to_string(&oracle).unwrap(),
            "scene {seed}"
        );
        fired += oracle.len();
    }
    assert!(fired > 0, "the scenes never trigger the detector");
    format!(
        "{iou_pairs} IoU pairs, {} exhaustive NMS inputs, 10000 random NMS, 20 refdet scenes ({fired} detections)",
        inputs.len()
    )
}

fn resumability() -> String {
    const UPLOADS: usize = 50;
    const CUTS: usize = 10;
    const CHUNK: u64 = 1024;
    let tmp = TempDir::new().unwrap();
    let server = server(tmp.path());
    let url = server.url();
    let built = build_project(tmp.path(), "1.0.0");
    publish(&built, &url);

    let images = tmp.path().join("images");
    std::fs::create_dir(&images).unwrap();
    for i in 0..UPLOADS {
        let path = images.join(format!("{i:03}.png"));
        std::fs::write(
            &path,
            encode_png(&class_image(Some(i % 2), 5000 + i as u64)),
        )
        .unwrap();
        std::fs::write(images.join(format!("{i:03}.gps")), "10.5,20.25").unwrap();
    }
    let store = tmp.path().join("device");
    let (code, _, err) = run_inproc(
        fieldsim,
        &[
            "capture",
            "--store",
            &s(&store),
            "--package",
            &s(&built.package),
            "--images",
            &s(&images),
        ],
    );
    assert_eq!(code, 0, "{err}");
    let device = ObservationStore::open(&store).unwrap();
    let observations = device.list_observations(None);
    assert_eq!(observations.len(), UPLOADS);

    let chunk = CHUNK.to_string();
    let mut rng = StdRng::seed_from_u64(44);
    let (mut faults, mut worst_waste, mut resumed) = (0, 0, 0);
    for obs in &observations {
        let id = obs.observation_id;
        let size = device.read_media(obs).unwrap().len() as u64;
        let mut cuts: Vec<u64> = rand::seq::index::sample(&mut rng, size as usize - 1, CUTS)
            .into_iter()
            .map(|c| c as u64 + 1)
            .collect();
        cuts.sort_unstable();
        assert_eq!(
            run_inproc(
                fieldsim,
                &["select", "--store", &s(&store), &id.to_string()]
            )
            .0,
            0
        );
        let committed = || {
            server
                .registry()
                .open_session_for(PROJECT_ID, id)
                .unwrap()
                .map_or(0, |s| s.committed_offset)
        };
        for cut in cuts {
            let before = committed();
            assert!(before < cut, "committed {before} passed cut {cut}");
            let budget = (cut - before).to_string();
            let (code, report, _) = run_inproc(
                fieldsim,
                &[
                    "sync",
                    "--store",
                    &s(&store),
                    "--server",
                    &url,
                    "--chunk-size",
                    &chunk,
                    "--max-retries",
                    "1",
                    "--fail-after-bytes",
                    &budget,
                ],
            );
            let report = report.unwrap();
            assert_eq!((code, report["failed"].as_u64()), (1, Some(1)), "{report}");
            let after = committed();
            let waste = before + report["bytes_sent"].as_u64().unwrap() - after;
            assert!(
                waste <= CHUNK,
                "fault at {cut}/{size} re-sent {waste} bytes"
            );
            worst_waste = worst_waste.max(waste);
            faults += 1;
        }
        let (code, report, _) = run_inproc(
            fieldsim,
            &[
                "sync",
                "--store",
                &s(&store),
                "--server",
                &url,
                "--chunk-size",
                &chunk,
            ],
        );
        let report = report.unwrap();
        assert_eq!(
            (code, report["uploaded"].as_u64()),
            (0, Some(1)),
            "{report}"
        );
        resumed += report["resumed"].as_u64().unwrap();
    }

    let local = ObservationStore::open(&store)
        .unwrap()
        .list_observations(None);
    assert!(local.iter().all(|o| o.state == ObservationState::Uploaded));
    let stored = rows(&server);
    let digests: BTreeSet<&String> = stored.iter().map(|r| &r.content_digest).collect();
    assert_eq!((stored.len(), digests.len()), (UPLOADS, UPLOADS));
    let expected: BTreeSet<&String> = local.iter().map(|o| &o.content_digest).collect();
    assert_eq!(digests, expected);
    format!("{faults} faults over {UPLOADS} uploads, max re-sent {worst_waste} B per fault (chunk {CHUNK}), {resumed} final runs resumed")
}

fn upload_whole(client: &HttpClient, oid: Uuid, media: &[u8]) -> Uuid {
    let session = client
        .begin_upload(
            PROJECT_ID,
            &BeginUploadRequest {
                observation_id: oid,
                content_digest: sha256_hex(media),
                total_size: media.len() as u64,
            },
        )
        .unwrap();
    let mut offset = session.committed_offset;
    if session.state == fieldforge_core::protocol::SessionState::Open {
        while offset < media.len() as u64 {
            let end = (offset as usize + 4096).min(media.len());
            offset = client
                .put_chunk(session.session_id, offset, &media[offset as usize..end])
                .unwrap();
        }
    }
    client
        .complete_upload(session.session_id, &record(oid, media))
        .unwrap()
}

fn concurrently<T: Send + 'static>(
    n: usize,
    f: impl Fn(usize) -> T + Send + Sync + 'static,
) -> Vec<T> {
    let barrier = Arc::new(Barrier::new(n));
    let f = Arc::new(f);
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let (barrier, f) = (barrier.clone(), f.clone());
            std::thread::spawn(move || {
                barrier.wait();
                f(i)
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn idempotency() -> String {
    let tmp = TempDir::new().unwrap();
    let server = Arc::new(server(tmp.path()));
    let url = server.url();
    HttpClient::new(&url)
        .unwrap()
        .create_project(&manifest())
        .unwrap();
    let media = |seed: u64| encode_png(&class_image(Some(0), seed));

    // 8 duplicate completes of one finished session
    let first = media(1);
    let client = HttpClient::new(&url).unwrap();
    let oid = Uuid::new_v4();
    let session = client
        .begin_upload(
            PROJECT_ID,
            &BeginUploadRequest {
                observation_id: oid,
                content_digest: sha256_hex(&first),
                total_size: first.len() as u64,
            },
        )
        .unwrap();
    client.put_chunk(session.session_id, 0, &first).unwrap();
    let (u, m) = (url.clone(), first.clone());
    let ids = concurrently(8, move |_| {
        HttpClient::new(&u)
            .unwrap()
            .complete_upload(session.session_id, &record(oid, &m))
            .unwrap()
    });
    assert!(ids.iter().all(|&i| i == oid));

    // 8 devices uploading the same media under different observation ids
    let second = media(2);
    let (u, m) = (url.clone(), second.clone());
    let ids: BTreeSet<Uuid> = concurrently(8, move |_| {
        upload_whole(&HttpClient::new(&u).unwrap(), Uuid::new_v4(), &m)
    })
    .into_iter()
    .collect();
    assert_eq!(ids.len(), 1);

    // 8 duplicate ingests of identical media
    let third = media(3);
    let (srv, m) = (server.clone(), third.clone());
    let oid3 = Uuid::new_v4();
    let ids: BTreeSet<Uuid> = concurrently(8, move |_| {
        srv.registry()
            .ingest(PROJECT_ID, &m, &record(oid3, &m))
            .unwrap()
            .observation_id
    })
    .into_iter()
    .collect();
    assert_eq!(ids, BTreeSet::from([oid3]));

    // 8 devices capturing the same picture and syncing at once
    let fourth = media(4);
    let built = build_project(tmp.path(), "1.0.0");
    let stores: Vec<_> = (0..8)
        .map(|i| {
            let images = tmp.path().join(format!("images-{i}"));
            std::fs::create_dir(&images).unwrap();
            std::fs::write(images.join("same.png"), &fourth).unwrap();
            std::fs::write(images.join("same.gps"), "1,1").unwrap();
            let store = tmp.path().join(format!("device-{i}"));
            let (code, _, err) = run_inproc(
                fieldsim,
                &[
                    "capture",
                    "--store",
                    &s(&store),
                    "--package",
                    &s(&built.package),
                    "--images",
                    &s(&images),
                ],
            );
            assert_eq!(code, 0, "{err}");
            s(&store)
        })
        .collect();
    let u = url.clone();
    let codes = concurrently(8, move |i| {
        run_inproc(
            fieldsim,
            &[
                "sync",
                "--store",
                &stores[i],
                "--server",
                &u,
                "--select-all",
            ],
        )
        .0
    });
    assert!(codes.iter().all(|&c| c == 0), "{codes:?}");

    let stored = rows(&server);
    let mut per_digest: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &stored {
        *per_digest.entry(&r.content_digest).or_default() += 1;
    }
    assert_eq!(stored.len(), 4, "{per_digest:?}");
    for m in [&first, &second, &third, &fourth] {
        assert_eq!(per_digest.get(sha256_hex(m).as_str()), Some(&1));
    }
    "8-way duplicate complete, upload, ingest and device sync each stored once".into()
}

fn determinism() -> String {
    let build = |root: &Path| {
        let built = build_project(root, "1.0.0");
        (
            std::fs::read(&built.bundle).unwrap(),
            std::fs::read(&built.package).unwrap(),
        )
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = build(a.path());
    std::thread::sleep(Duration::from_millis(1100));
    let second = build(&b.path().join("elsewhere"));
    assert!(first == second, "two builds differ");

    // the released binaries agree with the library path
    let c = TempDir::new().unwrap();
    let dir = c.path().join("p");
    let model_path = c.path().join("m.json");
    std::fs::write(&model_path, serde_json::to_vec(&model()).unwrap()).unwrap();
    for args in [
        vec![
            "init",
            dir.to_str().unwrap(),
            "--id",
            PROJECT_ID,
            "--name",
            PROJECT_NAME,
        ],
        vec![
            "pack",
            dir.to_str().unwrap(),
            "--model",
            model_path.to_str().unwrap(),
            "--version",
            "1.0.0",
        ],
    ] {
        if args[0] == "pack" {
            set_fixture_labels(&dir);
        }
        assert_eq!(run_bin("forge", &args, &[]).status.code(), Some(0));
    }
    let bundle = dir.join("model-1.0.0.bundle");
    let out = run_bin(
        "forge",
        &["build-app", &s(&dir), "--bundle", &s(&bundle)],
        &[],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(std::fs::read(&bundle).unwrap() == first.0);
    assert!(std::fs::read(dir.join("app.ffpkg")).unwrap() == first.1);

    let (bundle_digest, package_digest) = (sha256_hex(&first.0), sha256_hex(&first.1));
    assert_eq!(
        (bundle_digest.as_str(), package_digest.as_str()),
        (GOLDEN_BUNDLE_DIGEST, GOLDEN_PACKAGE_DIGEST),
        "golden digests"
    );
    format!(
        "bundle {}..., package {}...",
        &bundle_digest[..12],
        &package_digest[..12]
    )
}

fn offline() -> String {
    // anything that tries the network lands here and is counted
    let trap = TcpListener::bind("127.0.0.1:0").unwrap();
    trap.set_nonblocking(true).unwrap();
    let trap_url = format!("http://{}", trap.local_addr().unwrap());

    let tmp = TempDir::new().unwrap();
    let built = build_project(tmp.path(), "1.0.0");
    let images = tmp.path().join("images");
    write_field_images(&images, true);
    let store = tmp.path().join("device");
    let env = [
        ("FIELDFORGE_SERVER", trap_url.as_str()),
        ("HTTP_PROXY", trap_url.as_str()),
        ("HTTPS_PROXY", trap_url.as_str()),
        ("ALL_PROXY", trap_url.as_str()),
        ("http_proxy", trap_url.as_str()),
        ("https_proxy", trap_url.as_str()),
        ("NO_PROXY", ""),
    ];
    let out = run_bin(
        "fieldsim",
        &[
            "capture",
            "--store",
            &s(&store),
            "--package",
            &s(&built.package),
            "--images",
            &s(&images),
        ],
        &env,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(stdout_json(&out)["captured"], 12);
    let list = run_bin("fieldsim", &["list", "--store", &s(&store)], &env);
    assert_eq!(list.status.code(), Some(0));
    let overlays = std::fs::read_dir(store.join("overlays")).unwrap().count();
    assert_eq!(overlays, 12);

    let attempts = AtomicUsize::new(0);
    while trap.accept().is_ok() {
        attempts.fetch_add(1, Ordering::SeqCst);
    }
    let attempts = attempts.load(Ordering::SeqCst);
    assert_eq!(attempts, 0, "capture opened {attempts} connection(s)");

    // the capture library links no networking code at all
    let core = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core");
    let manifest = std::fs::read_to_string(core.join("Cargo.toml")).unwrap();
    for net in ["reqwest", "hyper", "tokio", "ureq", "curl", "axum"] {
        assert!(!manifest.contains(net), "core depends on {net}");
    }
    for entry in std::fs::read_dir(core.join("src")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        assert!(!text.contains("std::net"));
    }
    "12 captures with every route to the network trapped; 0 connections".into()
}

fn installed(store: &Path) -> (String, String) {
    let m = ObservationStore::open(store)
        .unwrap()
        .installed_model()
        .unwrap()
        .unwrap();
    (m.version.to_string(), m.digest)
}

fn model_update() -> String {
    let tmp = TempDir::new().unwrap();
    let server = server(tmp.path());
    let url = server.url();
    let images = tmp.path().join("images");
    std::fs::create_dir(&images).unwrap();
    std::fs::write(
        images.join("x.png"),
        encode_png(&RgbImage::filled(32, 32, PROTOTYPES[0])),
    )
    .unwrap();
    std::fs::write(images.join("x.gps"), "1,1").unwrap();
    let capture = |package: &Path, store: &Path| {
        let (code, _, err) = run_inproc(
            fieldsim,
            &[
                "capture",
                "--store",
                &s(store),
                "--package",
                &s(package),
                "--images",
                &s(&images),
            ],
        );
        assert_eq!(code, 0, "{err}");
    };
    let sync = |store: &Path| {
        let (code, report, err) =
            run_inproc(fieldsim, &["sync", "--store", &s(store), "--server", &url]);
        assert_eq!(code, 0, "{err}");
        report.unwrap()
    };

    let v1 = build_project(tmp.path(), "1.0.0");
    publish(&v1, &url);
    let old_device = tmp.path().join("old-device");
    capture(&v1.package, &old_device);
    assert_eq!(sync(&old_device)["model_updated"], false);

    let v11 = build_project(tmp.path(), "1.1.0");
    publish(&v11, &url);
    let published = sha256_hex(&std::fs::read(&v11.bundle).unwrap());
    let report = sync(&old_device);
    assert_eq!(report["model_updated"], true, "{report}");
    assert_eq!(installed(&old_device), ("1.1.0".into(), published.clone()));
    ObservationStore::open(&old_device)
        .unwrap()
        .load_model()
        .unwrap();
    assert_eq!(sync(&old_device)["model_updated"], false);

    let other = TempDir::new().unwrap();
    let v2 = build_project(other.path(), "2.0.0");
    let new_device = tmp.path().join("new-device");
    capture(&v2.package, &new_device);
    let before = installed(&new_device);
    let report = sync(&new_device);
    assert_eq!(report["model_updated"], false, "{report}");
    assert_eq!(installed(&new_device), before);
    assert_eq!(before.0, "2.0.0");
    format!(
        "1.0.0 -> 1.1.0 ({}...) installed and verified; 2.0.0 kept",
        &published[..12]
    )
}

fn main() {
    let criteria: [(&str, fn() -> String); 7] = [
        ("end-to-end", end_to_end),
        ("detection-math", detection_math),
        ("resumability", resumability),
        ("idempotency", idempotency),
        ("determinism", determinism),
        ("offline", offline),
        ("model-update", model_update),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        match std::panic::catch_unwind(check) {
            Ok(detail) => println!(
                "PASS {name}: {detail} [{:.1}s]",
                started.elapsed().as_secs_f64()
            ),
            Err(payload) => {
                failed += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {name}: {}", msg.lines().next().unwrap_or("panicked"));
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
