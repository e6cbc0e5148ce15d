use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use cfsize_core::clients::{
    canonical_key, Clients, Endpoint, FixtureTransport, HttpConfig, RecordingTransport, Transport,
};
use cfsize_core::synthetic::SyntheticWorld;
use cfsize_core::Error;

type Seen = Arc<Mutex<Vec<(String, String, Option<String>)>>>;

/// Minimal HTTP/1.1 server: answers each connection with the next scripted
/// response, or with `fallback` applied to the request once the script runs out.
struct Stub {
    url: String,
    seen: Seen,
}

type Fallback = Box<dyn Fn(&str, &str) -> (u16, String) + Send>;

fn stub(script: Vec<(u16, String)>, fallback: Fallback) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen: Seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        let mut script = script.into_iter();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let (status, text) = script.next().unwrap_or_else(|| fallback(&path, &body));
            log.lock().unwrap().push((path, body, auth));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Stub { url, seen }
}

fn config(url: &str) -> HttpConfig {
    HttpConfig {
        backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        ..HttpConfig::single(url)
    }
}

fn sim_ok() -> Fallback {
    Box::new(|_, _| (200, r#"{"version":1,"similarity":0.42}"#.to_string()))
}

#[test]
fn retries_transient_failures_then_succeeds() {
    let s = stub(vec![(500, "{}".into()), (503, "{}".into())], sim_ok());
    let clients = Clients::http(config(&s.url)).unwrap();
    let sim = clients.clip_sim("img", "text").unwrap();
    assert_eq!(sim, 0.42);
    let seen = s.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|(p, _, _)| p == "/clip_sim"));
    let body: Value = serde_json::from_str(&seen[0].1).unwrap();
    assert_eq!(body, json!({"version": 1, "image_ref": "img", "text": "text"}));
}

#[test]
fn gives_up_after_retries() {
    let s = stub(vec![], Box::new(|_, _| (500, "{}".into())));
    let clients = Clients::http(HttpConfig {
        retries: 2,
        ..config(&s.url)
    })
    .unwrap();
    let err = clients.clip_sim("img", "t").unwrap_err();
    assert!(matches!(err, Error::ClientUnavailable { .. }), "{err}");
    assert_eq!(s.seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![], Box::new(|_, _| (400, r#"{"error":"bad"}"#.into())));
    let clients = Clients::http(config(&s.url)).unwrap();
    assert!(matches!(clients.clip_sim("i", "t"), Err(Error::ClientUnavailable { .. })));
    assert_eq!(s.seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_bodies_are_schema_errors() {
    let s = stub(vec![(200, "not json".into()), (200, r#"{"version":1,"similarity":"high"}"#.into())], sim_ok());
    let clients = Clients::http(config(&s.url)).unwrap();
    assert!(matches!(clients.clip_sim("i", "t"), Err(Error::SchemaError { .. })));
    match clients.clip_sim("i", "t") {
        Err(Error::SchemaError { message, .. }) => assert!(message.contains("similarity"), "{message}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unsupported_response_version_rejected() {
    let s = stub(vec![(200, r#"{"version":2,"similarity":0.1}"#.into())], sim_ok());
    let clients = Clients::http(config(&s.url)).unwrap();
    match clients.clip_sim("i", "t") {
        Err(Error::SchemaError { message, .. }) => assert!(message.contains("version")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bearer_token_is_sent() {
    let s = stub(vec![], sim_ok());
    let clients = Clients::http(HttpConfig {
        bearer_token: Some("secret".into()),
        ..config(&s.url)
    })
    .unwrap();
    clients.clip_sim("i", "t").unwrap();
    assert_eq!(s.seen.lock().unwrap()[0].2.as_deref(), Some("Bearer secret"));
}

#[test]
fn missing_service_url_is_unavailable() {
    let clients = Clients::http(HttpConfig::default()).unwrap();
    match clients.generate("p", 1) {
        Err(Error::ClientUnavailable { service, .. }) => assert_eq!(service, "generator"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn http_and_fixture_backends_agree() {
    let world = SyntheticWorld::new(&["button", "walrus"]).unwrap();
    let served = world.clone();
    let s = stub(
        vec![],
        Box::new(move |path, body| {
            let endpoint = Endpoint::ALL.into_iter().find(|e| e.path() == path).unwrap();
            let req: Value = serde_json::from_str(body).unwrap();
            match served.call(endpoint, &req) {
                Ok(v) => (200, v.to_string()),
                Err(e) => (422, json!({ "error": e.to_string() }).to_string()),
            }
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let recording = Clients::new(RecordingTransport::new(Clients::http(config(&s.url)).unwrap().transport().clone(), dir.path()).unwrap());
    let replay = Clients::fixtures(dir.path()).unwrap();

    let prompt = "A giant button towering over a tiny walrus.";
    let live_ref = recording.generate(prompt, 7).unwrap();
    assert_eq!(replay.generate(prompt, 7).unwrap(), live_ref);
    let base = "Big button and small walrus. The walrus is much smaller than the button.";
    assert_eq!(
        recording.clip_sim(&live_ref, base).unwrap(),
        replay.clip_sim(&live_ref, base).unwrap()
    );
    let direct = Clients::new(world);
    assert_eq!(direct.generate(prompt, 7).unwrap(), live_ref);
    assert!(matches!(replay.generate(prompt, 8), Err(Error::FixtureMissing { .. })));
}

#[test]
fn corrupted_fixture_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let transport = FixtureTransport::open(dir.path()).unwrap();
    let req = json!({"version": 1, "image_ref": "i", "text": "t"});
    let path = transport.path_for(Endpoint::ClipSim, &canonical_key(Endpoint::ClipSim, &req));
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, r#"{"version":1,"similarty":0.5}"#).unwrap();
    let clients = Clients::fixtures(dir.path()).unwrap();
    match clients.clip_sim("i", "t") {
        Err(Error::SchemaError { message, .. }) => assert!(message.contains("similarity"), "{message}"),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "{ truncated").unwrap();
    assert!(matches!(clients.clip_sim("i", "t"), Err(Error::SchemaError { .. })));
    assert!(matches!(clients.clip_sim("other", "t"), Err(Error::FixtureMissing { .. })));
}

#[test]
fn fixture_root_must_exist() {
    assert!(Clients::fixtures("/nonexistent/cfsize/fixtures").is_err());
}
