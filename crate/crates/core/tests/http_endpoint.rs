use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use cpt_curate::clients::{
    ChatClient, ChatCompletion, ChatMessage, ChatRequest, ClientError, Endpoint, EndpointConfig, PplScorer, ScoreClient,
};
use serde_json::json;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: String,
}

/// Serves one scripted (status, body) per connection, in order; `{echo}` in
/// a body is replaced by the request body.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_owned()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let req_body = String::from_utf8(buf).unwrap();
            let out = body.replace("{echo}", &req_body);
            log.lock().unwrap().push(Seen {
                path,
                authorization,
                body: req_body,
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}",
                out.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (format!("http://{addr}"), seen, handle)
}

fn endpoint(url: &str) -> Endpoint {
    let mut cfg = EndpointConfig::new(url);
    cfg.backoff_base_secs = 0.0;
    cfg.timeout_secs = 5.0;
    Endpoint::from_config(cfg).unwrap()
}

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        model: "m".into(),
        messages: vec![ChatMessage::user(text)],
        temperature: 0.0,
        max_tokens: 16,
    }
}

fn completion(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let script = vec![
        (500, "boom".into()),
        (503, "busy".into()),
        (200, completion("hello")),
    ];
    let (url, seen, handle) = serve(script);
    let client = ChatClient::new(endpoint(&url));
    assert_eq!(client.chat_complete(&request("hi")).unwrap(), "hello");
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.path == "/chat/completions"));
    assert!(seen.iter().all(|s| s.body == seen[0].body));
}

#[test]
fn client_errors_are_terminal() {
    let (url, seen, handle) = serve(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let client = ChatClient::new(endpoint(&url));
    let err = client.chat_complete(&request("hi")).unwrap_err();
    assert!(matches!(err, ClientError::Http { status: 401, .. }), "{err}");
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn exhausted_retries_report_attempts() {
    let (url, _, handle) = serve(vec![(500, "a".into()), (429, "b".into()), (502, "c".into()), (500, "d".into())]);
    let client = ChatClient::new(endpoint(&url));
    let err = client.chat_complete(&request("hi")).unwrap_err();
    assert!(matches!(err, ClientError::RetriesExhausted { attempts: 4, .. }), "{err}");
    handle.join().unwrap();
}

#[test]
fn bearer_token_and_request_shape() {
    std::env::set_var("CPT_CURATE_TEST_TOKEN", "s3cret");
    let (url, seen, handle) = serve(vec![(200, completion("ok"))]);
    let mut cfg = EndpointConfig::new(url);
    cfg.auth_token_env_var = Some("CPT_CURATE_TEST_TOKEN".into());
    let client = ChatClient::new(Endpoint::from_config(cfg).unwrap());
    client.chat_complete(&request("ping")).unwrap();
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer s3cret"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][0]["content"], "ping");
    assert_eq!(body["messages"][0]["role"], "user");
}

#[test]
fn echo_completion_round_trips_unicode() {
    let (url, _, handle) = serve(vec![(200, "{echo}".into())]);
    let ep = endpoint(&url);
    let body = json!({"choices": [{"message": {"content": "数学 ∑ ok"}}]});
    let back = ep.post_json("/chat/completions", &body).unwrap();
    assert_eq!(back, body);
    handle.join().unwrap();
}

#[test]
fn scorer_rejects_length_mismatch() {
    let (url, _, handle) = serve(vec![(200, "{\"ppl\": [1.5]}".into())]);
    let scorer = ScoreClient::new(endpoint(&url), 8);
    let err = scorer.score_ppl(&["a".into(), "b".into()]).unwrap_err();
    assert!(matches!(err, ClientError::LengthMismatch { expected: 2, actual: 1, .. }), "{err}");
    handle.join().unwrap();
}

#[test]
fn malformed_success_body_is_reported() {
    let (url, _, handle) = serve(vec![(200, "not json".into())]);
    let client = ChatClient::new(endpoint(&url));
    let err = client.chat_complete(&request("x")).unwrap_err();
    assert!(matches!(err, ClientError::Malformed { .. }), "{err}");
    handle.join().unwrap();
}
