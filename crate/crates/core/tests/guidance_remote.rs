use pacnerf::guidance::{GuidanceError, GuidanceOracle, Prompt, Provenance, RemoteClipOracle};
use pacnerf::image::Image;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

type Handler = dyn Fn(&str, &str, usize) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, answered by
/// `handler(method path, body, request index)`.
struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<(String, String)>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let target = format!("{} {}", parts.next()?, parts.next()?);
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
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
    Some((target, String::from_utf8_lossy(&body).into_owned()))
}

impl MockServer {
    fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some((target, body)) = read_request(&mut stream) else { continue };
                let index = {
                    let mut l = log.lock().unwrap();
                    l.push((target.clone(), body.clone()));
                    l.len() - 1
                };
                let (status, text) = handler(&target, &body, index);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        MockServer { url, requests }
    }

    fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn client(url: &str) -> RemoteClipOracle {
    let mut c = RemoteClipOracle::new(url, Duration::from_secs(5), 3);
    c.backoff = Duration::from_millis(1);
    c
}

fn grad_json(w: usize, h: usize, v: f64) -> String {
    let px = format!("[{v},{v},{v}]");
    let row = vec![px; w].join(",");
    let rows = vec![format!("[{row}]"); h].join(",");
    format!("[{rows}]")
}

fn prompt() -> Prompt {
    Prompt::text(["a face with an open mouth", "open-mouthed face"]).unwrap()
}

#[test]
fn health_reports_model() {
    let s = MockServer::start(Box::new(|t, _, _| {
        assert_eq!(t, "GET /health");
        (200, r#"{"status":"ok","model_id":"clip-test"}"#.into())
    }));
    let h = client(&s.url).health().unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_id.as_deref(), Some("clip-test"));
}

#[test]
fn health_retries_while_loading() {
    let s = MockServer::start(Box::new(|_, _, i| {
        if i < 2 {
            (503, r#"{"status":"loading"}"#.into())
        } else {
            (200, r#"{"status":"ok","model_id":"m"}"#.into())
        }
    }));
    assert_eq!(client(&s.url).health().unwrap().status, "ok");
    assert_eq!(s.count(), 3);
}

#[test]
fn similarity_request_and_gradient_sign() {
    let s = MockServer::start(Box::new(|t, body, _| {
        assert_eq!(t, "POST /similarity");
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["want_grad"], true);
        assert_eq!(v["text_variants"].as_array().unwrap().len(), 2);
        let img = v["image"].as_array().unwrap();
        assert_eq!(img.len(), 2, "rows are image height");
        assert_eq!(img[0].as_array().unwrap().len(), 3, "columns are image width");
        assert_eq!(img[1][2][0].as_f64().unwrap() as f32, 0.25f32);
        (200, format!(r#"{{"similarity":0.3,"grad":{},"model_id":"m"}}"#, grad_json(3, 2, 0.5)))
    }));
    let mut img = Image::new(3, 2);
    img.set_pixel(2, 1, [0.25, 0.5, 0.75]);
    let r = client(&s.url).score(0, &img, &prompt()).unwrap();
    assert_eq!(r.similarity, 0.3);
    assert_eq!(r.provenance, Provenance::Remote);
    // the service sends d(similarity)/dI; the oracle reports d(1 - similarity)/dI
    assert!(r.grad.data.iter().all(|&g| g == -0.5));
}

#[test]
fn client_errors_are_not_retried() {
    for status in [400, 413] {
        let s = MockServer::start(Box::new(move |_, _, _| (status, r#"{"error":"no"}"#.into())));
        let err = client(&s.url).score(0, &Image::new(2, 2), &prompt()).unwrap_err();
        assert!(matches!(err, GuidanceError::Status { status: st, .. } if st == status));
        assert_eq!(s.count(), 1);
    }
}

#[test]
fn overload_is_retried_until_budget_runs_out() {
    let s = MockServer::start(Box::new(|_, _, _| (503, "{}".into())));
    let err = client(&s.url).score(0, &Image::new(2, 2), &prompt()).unwrap_err();
    assert!(matches!(err, GuidanceError::Status { status: 503, .. }));
    assert_eq!(s.count(), 4);
}

#[test]
fn malformed_responses() {
    let cases: Vec<String> = vec![
        "not json".into(),
        r#"{"similarity":0.1}"#.into(),
        format!(r#"{{"similarity":1.5,"grad":{}}}"#, grad_json(2, 2, 0.0)),
        format!(r#"{{"similarity":0.1,"grad":{}}}"#, grad_json(3, 2, 0.0)),
    ];
    for body in cases {
        let b = body.clone();
        let s = MockServer::start(Box::new(move |_, _, _| (200, b.clone())));
        let err = client(&s.url).score(0, &Image::new(2, 2), &prompt()).unwrap_err();
        assert!(matches!(err, GuidanceError::Malformed(_)), "{body}: {err:?}");
    }
}

#[test]
fn unreachable_service_counts_attempts() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let err = client(&format!("http://127.0.0.1:{port}")).health().unwrap_err();
    assert!(matches!(err, GuidanceError::Unreachable { attempts: 4, .. }), "{err:?}");
}

#[test]
fn slow_service_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let mut held = Vec::new();
        for s in listener.incoming() {
            held.push(s);
        }
    });
    let mut c = RemoteClipOracle::new(&url, Duration::from_millis(100), 0);
    c.backoff = Duration::from_millis(1);
    let err = c.score(0, &Image::new(2, 2), &prompt()).unwrap_err();
    assert!(matches!(err, GuidanceError::Unreachable { attempts: 1, .. }), "{err:?}");
}

#[test]
fn environment_configuration() {
    // the only test in this binary that touches the environment
    std::env::remove_var("GUIDANCE_URL");
    assert!(RemoteClipOracle::from_env().unwrap().is_none());
    std::env::set_var("GUIDANCE_URL", "http://127.0.0.1:9");
    std::env::set_var("GUIDANCE_TIMEOUT_MS", "soon");
    assert!(matches!(RemoteClipOracle::from_env(), Err(GuidanceError::Prompt(_))));
    std::env::set_var("GUIDANCE_TIMEOUT_MS", "250");
    assert!(RemoteClipOracle::from_env().unwrap().is_some());
    std::env::remove_var("GUIDANCE_URL");
    std::env::remove_var("GUIDANCE_TIMEOUT_MS");
}

#[test]
fn text_prompt_edit_runs_against_a_service() {
    use pacnerf::pac::AnchorSet;
    use pacnerf::render::{Bounds, Camera, Intrinsics, ViewCache};
    use pacnerf::scene::{ModelConfig, SceneManipulator, SceneModel};
    use pacnerf::trainer::{train_edit, EditConfig};
    use rand::SeedableRng;

    // similarity is the mean brightness; its gradient is constant
    let s = MockServer::start(Box::new(|_, body, _| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let img = v["image"].as_array().unwrap();
        let (h, w) = (img.len(), img[0].as_array().unwrap().len());
        let n = (h * w * 3) as f64;
        let mean: f64 = img
            .iter()
            .flat_map(|r| r.as_array().unwrap().iter())
            .flat_map(|p| p.as_array().unwrap().iter())
            .map(|x| x.as_f64().unwrap())
            .sum::<f64>()
            / n;
        (200, format!(r#"{{"similarity":{mean},"grad":{}}}"#, grad_json(w, h, 1.0 / n)))
    }));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig {
        deform_width: 8,
        slice_width: 8,
        template_width: 16,
        color_width: 8,
        ..ModelConfig::default()
    };
    let g = SceneManipulator::new(SceneModel::new(cfg, 4, &mut rng), 1).unwrap();
    let anchors = AnchorSet::from_frames(&g.model.latents, &[0, 2]).unwrap();
    let intr = Intrinsics {
        fx: 12.0,
        fy: 12.0,
        cx: 4.0,
        cy: 4.0,
    };
    let cam = Camera::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0], intr, 8, 8, 1.0, 3.0);
    let views = vec![ViewCache::build(&g, &cam, 8, Bounds { radius: 0.75 }).unwrap()];
    let config = EditConfig {
        iterations: 10,
        samples: 8,
        pac_width: 8,
        ..EditConfig::default()
    };
    let res = train_edit(&g, &anchors, &client(&s.url), &prompt(), &views, &config, &mut |_| {}).unwrap();
    assert_eq!(res.trace.len(), 10);
    assert!(res.trace.iter().all(|l| l.loss.is_finite()));
    // ten training calls plus the final evaluation
    assert_eq!(s.count(), 11);
}
