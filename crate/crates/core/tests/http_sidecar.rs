//! Wire-contract tests against an in-process stub sidecar built on `TcpListener`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use base64::Engine;
use serde_json::{json, Value};

use propfield::integration::MassReport;
use propfield::materials::{PropertyKind, ValueRange};
use propfield::pipeline::{Pipeline, PipelineConfig, ProviderMode};
use propfield::provider::{Captioner, Completer, CompletionRequest, CompletionTask, HttpProvider, PatchEmbedder, TextEmbedder};
use propfield::scene::{Camera, Frame, Raster};
use propfield::synthetic::{generate_scene, SyntheticSpec};
use propfield::Error;

fn tiny_frame() -> Frame {
    let pose = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let mut image = Raster::filled(8, 8, [10, 20, 30]);
    image.set(7, 7, [200, 80, 60]);
    Frame {
        camera: Camera::new(8.0, 8.0, 4.0, 4.0, 8, 8, &pose).unwrap(),
        image,
        depth: Raster::filled(8, 8, 2.0),
        depth_scale: 1.0,
        mask: None,
    }
}

type Log = Arc<Mutex<Vec<(String, String, Value)>>>;

struct Stub {
    url: String,
    log: Log,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String, Vec<u8>)> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        if h == "\r\n" || h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((method, path, body))
}

fn respond(stream: &mut TcpStream, status: u16, body: &Value) {
    let text = body.to_string();
    let reason = if status == 200 { "OK" } else { "Error" };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

/// Unit-free color embedding `[r, g, b, 1]`, so mask pixels and background separate cleanly.
fn color_vector(rgb: [u8; 3]) -> Vec<f64> {
    vec![rgb[0] as f64, rgb[1] as f64, rgb[2] as f64, 1.0]
}

fn handle(method: &str, path: &str, body: &Value) -> (u16, Value) {
    match (method, path) {
        ("GET", "/health") => (200, json!({"mode": "mock", "dim": 4})),
        ("POST", "/embed_patches") => {
            let png = base64::engine::general_purpose::STANDARD
                .decode(body["image"].as_str().unwrap())
                .unwrap();
            let img = image::load_from_memory(&png).unwrap().to_rgb8();
            let vectors: Vec<Vec<f64>> = body["centers"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| {
                    let p = img.get_pixel(c[0].as_u64().unwrap() as u32, c[1].as_u64().unwrap() as u32);
                    color_vector(p.0)
                })
                .collect();
            (200, json!({ "vectors": vectors }))
        }
        ("POST", "/embed_text") => {
            let vectors: Vec<Vec<f64>> = body["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| match t.as_str().unwrap() {
                    "plastic" => color_vector([200, 80, 60]),
                    "glass" => vec![0.0, 0.0, 1.0, 0.0],
                    _ => vec![0.0, 1.0, 0.0, 0.0],
                })
                .collect();
            (200, json!({ "vectors": vectors }))
        }
        ("POST", "/caption") => (200, json!({"caption": "a flat red plastic plate"})),
        ("POST", "/complete") => {
            let system = body["system"].as_str().unwrap();
            let text = if system.contains("thickness") {
                "(plastic: 1 cm);(glass: 0.4 cm)"
            } else {
                "(plastic: 900-1100 kg/m^3);(glass: 2500 kg/m^3)"
            };
            (200, json!({ "text": text }))
        }
        ("POST", "/broken") => (500, json!({"error": "boom"})),
        _ => (404, json!({"error": "no route"})),
    }
}

fn start(override_status: Option<(&'static str, u16, Value)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let log: Log = Arc::default();
    let sink = log.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some((method, path, body)) = read_request(&mut stream) else { continue };
            let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            sink.lock().unwrap().push((method.clone(), path.clone(), json.clone()));
            let (status, resp) = match &override_status {
                Some((p, s, v)) if *p == path => (*s, v.clone()),
                _ => handle(&method, &path, &json),
            };
            respond(&mut stream, status, &resp);
        }
    });
    Stub { url, log }
}

#[test]
fn endpoints_follow_the_wire_contract() {
    let stub = start(None);
    let http = HttpProvider::new(format!("{}/", stub.url));
    let health = http.health().unwrap();
    assert_eq!((health.mode.as_str(), health.dim), ("mock", 4));

    let frame = tiny_frame();
    let v = http.embed_patches(3, &frame, &[(0, 0), (7, 7)], 57).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[0], color_vector(frame.image.get(0, 0)));

    let t = http.embed_texts(&["plastic".into(), "glass".into()]).unwrap();
    assert_eq!(t[1], vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(http.caption(0, &frame).unwrap(), "a flat red plastic plate");
    let reply = http
        .complete(&CompletionRequest {
            task: CompletionTask::Property(PropertyKind::MassDensity),
            system: "sys".into(),
            user: "usr".into(),
        })
        .unwrap();
    assert!(reply.starts_with("(plastic"));

    let log = stub.log.lock().unwrap();
    let paths: Vec<&str> = log.iter().map(|(_, p, _)| p.as_str()).collect();
    assert_eq!(paths, ["/health", "/embed_patches", "/embed_text", "/caption", "/complete"]);
    let patches = &log[1].2;
    assert_eq!(patches["patch"], 57);
    assert_eq!(patches["centers"], json!([[0, 0], [7, 7]]));
    assert_eq!(log[2].2, json!({"texts": ["plastic", "glass"]}));
    assert_eq!(log[4].2, json!({"system": "sys", "user": "usr"}));
    // the task tag never goes on the wire
    assert!(log[4].2.get("task").is_none());
}

#[test]
fn server_errors_and_bad_replies_surface() {
    let stub = start(Some(("/embed_text", 500, json!({"error": "boom"}))));
    let http = HttpProvider::new(&stub.url);
    match http.embed_texts(&["x".into()]) {
        Err(Error::Provider(m)) => assert!(m.contains("/embed_text"), "{m}"),
        other => panic!("{other:?}"),
    }

    let stub = start(Some(("/embed_patches", 200, json!({"vectors": [[1.0]]}))));
    let http = HttpProvider::new(&stub.url);
    let err = http.embed_patches(0, &tiny_frame(), &[(0, 0), (1, 1)], 5).unwrap_err();
    assert!(err.to_string().contains("expected 2 vectors"), "{err}");

    let stub = start(Some(("/caption", 200, json!({"nope": 1}))));
    assert!(HttpProvider::new(&stub.url).caption(0, &tiny_frame()).is_err());
}

#[test]
fn unreachable_sidecar_is_a_provider_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let http = HttpProvider::new(format!("http://127.0.0.1:{port}"));
    assert!(matches!(http.health(), Err(Error::Provider(_))));
}

#[test]
fn pipeline_runs_over_http() {
    let stub = start(None);
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::plate();
    spec.resolution = 48;
    let scene = dir.path().join("scene");
    generate_scene(&spec).unwrap().write(&scene).unwrap();

    let mut cfg = PipelineConfig::for_synthetic(&spec);
    cfg.provider.mode = ProviderMode::Http;
    cfg.provider.endpoint = Some(stub.url.clone());
    cfg.fusion.feature_dim = 4;
    cfg.propose.k = Some(2);
    let p = Pipeline::new(Some(scene), dir.path().join("out"), cfg).unwrap();
    p.run_to_prediction().unwrap();

    let dict = propfield::materials::MaterialDictionary::load(dir.path().join("out/dictionary_mass_density.json")).unwrap();
    assert_eq!(dict.names(), ["plastic", "glass"]);
    assert_eq!(dict.entries[0].value, ValueRange::new(900.0, 1100.0).unwrap());
    assert_eq!(dict.caption, "a flat red plastic plate");
    let report: MassReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/mass.json")).unwrap()).unwrap();
    assert!((report.mass_kg - 0.1).abs() < 0.015, "{report:?}");
    assert!(report.mass_low_kg < report.mass_kg && report.mass_kg < report.mass_high_kg);

    // one batched patch call per frame
    let log = stub.log.lock().unwrap();
    let patch_calls = log.iter().filter(|(_, p, _)| p == "/embed_patches").count();
    assert_eq!(patch_calls, spec.cameras);
}
