//! Wire-protocol tests against a minimal in-test HTTP server that serves the
//! synthetic oracle.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use relmap_core::classifier::{
    CountingOracle, OracleError, RemoteConfig, RemoteOracle, SyntheticOracle, SyntheticParams,
};
use relmap_core::relevance::{compute_relevance, MethodFamily};
use relmap_core::perturbation::SearchBudget;
use relmap_core::superpixel::{slic3d, SlicParams};
use relmap_core::volume::{BinaryMask, Dims, MultiSequenceVolume, ScalarVolume, SequenceKind};
use relmap_core::Oracle;

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Normal,
    /// `/v1/score_batch` answers 404.
    NoBatch,
    /// Every scoring request answers with this status.
    Status(u16),
    /// The first `n` connections are closed without a response.
    DropFirst(usize),
    /// Scores come back as 1.5.
    OutOfRange,
}

struct Server {
    url: String,
    requests: Arc<AtomicUsize>,
}

struct Request {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).ok()?;
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some(Request { method, path, body })
}

fn respond(stream: &mut TcpStream, code: u16, body: &Value) {
    let text = body.to_string();
    let reason = match code {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        422 => "Unprocessable Entity",
        _ => "Service Unavailable",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn decode_volume(item: &Value, expected: Dims) -> Result<MultiSequenceVolume<f32>, (u16, String)> {
    let bad = |m: &str| (400, m.to_string());
    let dims: Vec<usize> = serde_json::from_value(item["dims"].clone()).map_err(|_| bad("dims"))?;
    if item["order"] != "seq,z,y,x" || item["dtype"] != "f32le" || item["encoding"] != "base64" {
        return Err(bad("unsupported layout"));
    }
    if dims != [4, expected.depth, expected.height, expected.width] {
        return Err((422, format!("expected dims [4,{},{},{}]", expected.depth, expected.height, expected.width)));
    }
    let raw = base64::engine::general_purpose::STANDARD
        .decode(item["data"].as_str().ok_or_else(|| bad("data"))?)
        .map_err(|_| bad("base64"))?;
    if raw.len() != 16 * expected.len() {
        return Err(bad("payload length"));
    }
    let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let n = expected.len();
    MultiSequenceVolume::new(
        SequenceKind::ALL.map(|k| (k, ScalarVolume::new(expected, values[k.index() * n..(k.index() + 1) * n].to_vec()).unwrap())),
    )
    .map_err(|e| bad(&e.to_string()))
}

fn handle(mut stream: TcpStream, oracle: &SyntheticOracle, dims: Dims, mode: Mode) {
    let Some(req) = read_request(&mut stream) else { return };
    let score = |item: &Value| -> Result<f64, (u16, String)> {
        let v = decode_volume(item, dims)?;
        let p = oracle.score(&v).map_err(|e| (400, e.to_string()))?.probability();
        Ok(if mode == Mode::OutOfRange { 1.5 } else { p })
    };
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/v1/health") => respond(&mut stream, 200, &json!({"status": "ok", "model": "synthetic"})),
        (_, _) if matches!(mode, Mode::Status(_)) => {
            let Mode::Status(code) = mode else { unreachable!() };
            respond(&mut stream, code, &json!({"error": format!("status {code}")}));
        }
        ("POST", "/v1/score") => {
            let Ok(body) = serde_json::from_slice::<Value>(&req.body) else {
                return respond(&mut stream, 400, &json!({"error": "malformed json"}));
            };
            match score(&body) {
                Ok(p) => respond(&mut stream, 200, &json!({ "probability": p })),
                Err((code, msg)) => respond(&mut stream, code, &json!({ "error": msg })),
            }
        }
        ("POST", "/v1/score_batch") if mode == Mode::NoBatch => {
            respond(&mut stream, 404, &json!({"error": "not found"}))
        }
        ("POST", "/v1/score_batch") => {
            let Ok(body) = serde_json::from_slice::<Value>(&req.body) else {
                return respond(&mut stream, 400, &json!({"error": "malformed json"}));
            };
            let items = body["items"].as_array().cloned().unwrap_or_default();
            let scores: Result<Vec<f64>, _> = items.iter().map(score).collect();
            match scores {
                Ok(p) => respond(&mut stream, 200, &json!({ "probabilities": p })),
                Err((code, msg)) => respond(&mut stream, code, &json!({ "error": msg })),
            }
        }
        _ => respond(&mut stream, 404, &json!({"error": "not found"})),
    }
}

fn serve(oracle: SyntheticOracle, dims: Dims, mode: Mode) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    let oracle = Arc::new(oracle);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let seen = counter.fetch_add(1, Ordering::SeqCst);
            if let Mode::DropFirst(n) = mode {
                if seen < n {
                    drop(stream);
                    continue;
                }
            }
            let oracle = oracle.clone();
            std::thread::spawn(move || handle(stream, &oracle, dims, mode));
        }
    });
    Server { url, requests }
}

fn region(dims: Dims) -> BinaryMask {
    BinaryMask::from_fn(dims, |z, y, x| z < dims.depth / 2 && y < dims.height / 2 && x > 0)
}

fn synthetic(dims: Dims) -> SyntheticOracle {
    SyntheticOracle::new(SyntheticParams::focused(region(dims), SequenceKind::T2w, 10.0, 0.5)).unwrap()
}

fn random_volume(rng: &mut ChaCha8Rng, dims: Dims) -> MultiSequenceVolume<f32> {
    MultiSequenceVolume::new(SequenceKind::ALL.map(|k| {
        let data = (0..dims.len()).map(|_| rng.random_range(0.0f32..1.0)).collect();
        (k, ScalarVolume::new(dims, data).unwrap())
    }))
    .unwrap()
}

fn client(url: &str) -> RemoteOracle {
    let mut config = RemoteConfig::new(url);
    config.timeout = Duration::from_secs(10);
    config.backoff_base = Duration::from_millis(5);
    RemoteOracle::new(config)
}

#[test]
fn remote_scores_match_in_process() {
    let dims = Dims::new(4, 6, 5);
    let server = serve(synthetic(dims), dims, Mode::Normal);
    let remote = client(&server.url);
    let local = synthetic(dims);
    assert_eq!(remote.health().unwrap(), "synthetic");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let v = random_volume(&mut rng, dims);
        let a = remote.score(&v).unwrap().probability();
        let b = local.score(&v).unwrap().probability();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn batch_and_fallback_agree() {
    let dims = Dims::new(3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let volumes: Vec<_> = (0..5).map(|_| random_volume(&mut rng, dims)).collect();
    let local: Vec<f64> = volumes.iter().map(|v| synthetic(dims).score(v).unwrap().probability()).collect();

    let batched = serve(synthetic(dims), dims, Mode::Normal);
    let remote = client(&batched.url);
    let got: Vec<f64> = remote.score_batch(&volumes).into_iter().map(|r| r.unwrap().probability()).collect();
    assert_eq!(got, local);
    assert_eq!(batched.requests.load(Ordering::SeqCst), 1);

    let single = serve(synthetic(dims), dims, Mode::NoBatch);
    let remote = client(&single.url);
    let got: Vec<f64> = remote.score_batch(&volumes).into_iter().map(|r| r.unwrap().probability()).collect();
    assert_eq!(got, local);
    assert_eq!(single.requests.load(Ordering::SeqCst), 1 + volumes.len());
    // The 404 is remembered: the next batch goes straight to single scoring.
    remote.score_batch(&volumes[..2]);
    assert_eq!(single.requests.load(Ordering::SeqCst), 1 + volumes.len() + 2);
}

#[test]
fn status_codes_surface_without_retry() {
    let dims = Dims::new(2, 2, 2);
    let v = random_volume(&mut ChaCha8Rng::seed_from_u64(3), dims);
    for code in [400u16, 422, 503] {
        let server = serve(synthetic(dims), dims, Mode::Status(code));
        let err = client(&server.url).score(&v).unwrap_err();
        match &err {
            OracleError::Status { code: got, message } => {
                assert_eq!(*got, code);
                assert_eq!(message, &format!("status {code}"));
            }
            other => panic!("expected status error, got {other:?}"),
        }
        assert!(!err.is_retryable());
        assert_eq!(server.requests.load(Ordering::SeqCst), 1);
    }
}

#[test]
fn dims_mismatch_is_422() {
    let served = Dims::new(4, 4, 4);
    let server = serve(synthetic(served), served, Mode::Normal);
    let sent = Dims::new(2, 4, 4);
    let v = random_volume(&mut ChaCha8Rng::seed_from_u64(4), sent);
    match client(&server.url).score(&v) {
        Err(OracleError::Status { code: 422, .. }) => {}
        other => panic!("expected 422, got {other:?}"),
    }
}

#[test]
fn dropped_connections_are_retried() {
    let dims = Dims::new(2, 3, 3);
    let v = random_volume(&mut ChaCha8Rng::seed_from_u64(5), dims);
    let expected = synthetic(dims).score(&v).unwrap().probability();

    let server = serve(synthetic(dims), dims, Mode::DropFirst(2));
    assert_eq!(client(&server.url).score(&v).unwrap().probability(), expected);
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);

    let server = serve(synthetic(dims), dims, Mode::DropFirst(3));
    let err = client(&server.url).score(&v).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn out_of_range_probability_is_not_retried() {
    let dims = Dims::new(2, 2, 2);
    let v = random_volume(&mut ChaCha8Rng::seed_from_u64(6), dims);
    let server = serve(synthetic(dims), dims, Mode::OutOfRange);
    match client(&server.url).score(&v) {
        Err(OracleError::OutOfRange(p)) => assert_eq!(p, 1.5),
        other => panic!("expected out-of-range, got {other:?}"),
    }
    assert_eq!(server.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn relevance_over_the_wire_matches_in_process() {
    let dims = Dims::new(8, 8, 8);
    let v = random_volume(&mut ChaCha8Rng::seed_from_u64(7), dims);
    let lm = slic3d(v.require(SequenceKind::T2w).unwrap(), &SlicParams::with_segments(8)).unwrap();
    let server = serve(synthetic(dims), dims, Mode::Normal);
    let remote = CountingOracle::new(client(&server.url));
    let budget = SearchBudget::default();
    let a = compute_relevance(&v, &lm, &remote, MethodFamily::Blank, &budget).unwrap();
    let b = compute_relevance(&v, &lm, &synthetic(dims), MethodFamily::Blank, &budget).unwrap();
    assert_eq!(a.voxel_map(), b.voxel_map());
    assert_eq!(remote.calls(), lm.count() + 1);
    assert_eq!(server.requests.load(Ordering::SeqCst), lm.count() + 1);
}
