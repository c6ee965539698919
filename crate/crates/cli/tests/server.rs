use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use mintiqa::dataset::Dataset;
use mintiqa::levels::LevelVocabularies;
use mintiqa::study::read_ratings_jsonl;
use mintiqa::synth::{generate, SynthConfig};
use mintiqa_cli::server::{router, serve, AppState, ServerConfig};
use serde_json::{json, Value};

struct Server {
    base: String,
    _rt: tokio::runtime::Runtime,
}

fn start(ds: Dataset, log: &Path, static_dir: Option<&Path>) -> Server {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let state = Arc::new(AppState::new(ds, log, static_dir.map(Path::to_owned), 11).unwrap());
    rt.spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        _rt: rt,
    }
}

fn corpus(dir: &Path) -> Dataset {
    generate(
        dir,
        &SynthConfig {
            n_prompts: 3,
            images_per_prompt: 2,
            n_annotated: 0,
            ..Default::default()
        },
    )
    .unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_vec().unwrap())
}

fn get_json(url: &str) -> (u16, Value) {
    let (s, b) = get(url);
    (s, serde_json::from_slice(&b).unwrap())
}

fn post(url: &str, body: &str) -> (u16, Value) {
    let mut r = agent()
        .post(url)
        .header("Content-Type", "application/json")
        .send(body)
        .unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap())
}

fn rating(quality: f64) -> String {
    json!({
        "scores": {"quality": quality, "authenticity": 2.5, "correspondence": 4.0},
        "choices": {
            "clarity": "very clear",
            "outline": "partially recognizable",
            "detail_richness": "adequate details",
            "geometry_distortion": "partially distorted",
            "text_image_consistency": "essentially consistent"
        },
        "explanation": "sharp edges, \"odd\" colours"
    })
    .to_string()
}

fn open_session(base: &str, subject: &str) -> (String, usize) {
    let (s, v) = get_json(&format!("{base}/api/session?subject_id={subject}"));
    assert_eq!(s, 200);
    (
        v["session_id"].as_str().unwrap().to_owned(),
        v["n_items"].as_u64().unwrap() as usize,
    )
}

#[test]
fn item_payload_matches_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(dir.path());
    let srv = start(ds.clone(), &dir.path().join("ratings.jsonl"), None);
    let (sid, n) = open_session(&srv.base, "alice");
    assert_eq!(n, ds.images.len());

    let (s, item) = get_json(&format!("{}/api/session/{sid}/item/0", srv.base));
    assert_eq!(s, 200);
    assert_eq!(
        item["perspectives"],
        json!(["quality", "authenticity", "correspondence"])
    );
    let questions = item["questions"].as_array().unwrap();
    let ids: Vec<&str> = questions.iter().map(|q| q["id"].as_str().unwrap()).collect();
    assert_eq!(
        ids,
        [
            "clarity",
            "outline",
            "detail_richness",
            "geometry_distortion",
            "text_image_consistency"
        ]
    );
    let vocab = LevelVocabularies::default();
    assert_eq!(questions[0]["options"], json!(vocab.clarity));
    assert_eq!(questions[4]["options"], json!(vocab.text_image_consistency));

    let url = item["image_url"].as_str().unwrap();
    let image_id = url.strip_prefix("/images/").unwrap();
    let img = ds.image(image_id).unwrap();
    let prompt = ds.prompt(&img.prompt_id).unwrap();
    assert_eq!(item["prompt_text"], prompt.raw_text);
    let (s, png) = get(&format!("{}{url}", srv.base));
    assert_eq!(s, 200);
    assert_eq!(png, std::fs::read(ds.image_path(img)).unwrap());

    assert_eq!(get(&format!("{}/api/session/{sid}/item/{n}", srv.base)).0, 404);
    assert_eq!(get(&format!("{}/api/session/nope/item/0", srv.base)).0, 404);
}

#[test]
fn posted_payload_round_trips_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let srv = start(corpus(dir.path()), &log, None);
    let (sid, _) = open_session(&srv.base, "bob");
    let body = rating(3.7);
    let (s, v) = post(&format!("{}/api/session/{sid}/item/1/rating", srv.base), &body);
    assert_eq!((s, v), (200, json!({"accepted": true})));

    let (s, export) = get(&format!("{}/api/export", srv.base));
    assert_eq!(s, 200);
    let text = String::from_utf8(export).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains(&format!("\"payload\":{body}")), "{text}");
    assert_eq!(text, std::fs::read_to_string(&log).unwrap());

    let line: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(line["subject_id"], "bob");
    assert_eq!(line["item"], 1);
    assert!(line["session_seed"].is_u64());

    // The export feeds straight into the study pipeline.
    let ratings = read_ratings_jsonl(text.as_bytes()).unwrap();
    assert_eq!(ratings.len(), 3);
    assert!(ratings.iter().any(|r| r.rating == 3.7));
}

#[test]
fn pretty_printed_body_is_stored_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let srv = start(corpus(dir.path()), &dir.path().join("r.jsonl"), None);
    let (sid, _) = open_session(&srv.base, "carol");
    let pretty = serde_json::to_string_pretty(&serde_json::from_str::<Value>(&rating(1.0)).unwrap()).unwrap();
    assert_eq!(
        post(&format!("{}/api/session/{sid}/item/0/rating", srv.base), &pretty).0,
        200
    );
    let (_, export) = get(&format!("{}/api/export", srv.base));
    let text = String::from_utf8(export).unwrap();
    assert_eq!(text.lines().count(), 1);
    let line: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(line["payload"], serde_json::from_str::<Value>(&pretty).unwrap());
}

#[test]
fn out_of_range_score_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let srv = start(corpus(dir.path()), &log, None);
    let (sid, _) = open_session(&srv.base, "dave");
    let (s, v) = post(&format!("{}/api/session/{sid}/item/0/rating", srv.base), &rating(5.1));
    assert_eq!(s, 400);
    assert_eq!(v["accepted"], false);
    assert!(v["errors"]["scores.quality"].is_string());

    let mut bad: Value = serde_json::from_str(&rating(2.0)).unwrap();
    bad["choices"]["clarity"] = json!("crystal");
    bad["scores"]["authenticity"] = json!(-0.1);
    let (s, v) = post(
        &format!("{}/api/session/{sid}/item/0/rating", srv.base),
        &bad.to_string(),
    );
    assert_eq!(s, 400);
    let errs = v["errors"].as_object().unwrap();
    assert!(errs.contains_key("choices.clarity") && errs.contains_key("scores.authenticity"));

    assert_eq!(
        post(&format!("{}/api/session/{sid}/item/0/rating", srv.base), "{").0,
        400
    );
    assert_eq!(std::fs::read_to_string(&log).unwrap(), "");
}

#[test]
fn concurrent_sessions_do_not_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let ds = corpus(dir.path());
    let n_items = ds.images.len();
    let srv = start(ds, &log, None);
    let subjects: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    std::thread::scope(|scope| {
        for subject in &subjects {
            let base = srv.base.clone();
            scope.spawn(move || {
                let (sid, n) = open_session(&base, subject);
                for i in 0..n {
                    let (s, _) = post(
                        &format!("{base}/api/session/{sid}/item/{i}/rating"),
                        &rating(i as f64 / 2.0),
                    );
                    assert_eq!(s, 200);
                }
            });
        }
    });
    let (_, export) = get(&format!("{}/api/export", srv.base));
    let text = String::from_utf8(export).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), subjects.len() * n_items);
    for s in &subjects {
        let mine: Vec<&Value> = lines.iter().filter(|l| l["subject_id"] == s.as_str()).collect();
        assert_eq!(mine.len(), n_items);
        let mut images: Vec<&str> = mine.iter().map(|l| l["image_id"].as_str().unwrap()).collect();
        images.sort_unstable();
        images.dedup();
        assert_eq!(images.len(), n_items);
    }
}

#[test]
fn sessions_get_distinct_recorded_orders() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(
        dir.path(),
        &SynthConfig {
            n_prompts: 10,
            images_per_prompt: 2,
            n_annotated: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let srv = start(ds, &dir.path().join("r.jsonl"), None);
    let order = |sid: &str| -> Vec<String> {
        (0..20)
            .map(|i| {
                get_json(&format!("{}/api/session/{sid}/item/{i}", srv.base)).1["image_url"]
                    .as_str()
                    .unwrap()
                    .to_owned()
            })
            .collect()
    };
    let (a, _) = open_session(&srv.base, "x");
    let (b, _) = open_session(&srv.base, "y");
    assert_ne!(order(&a), order(&b));
    let mut sorted = order(&a);
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 20);
}

#[test]
fn write_failure_is_a_500() {
    let full = Path::new("/dev/full");
    if !full.exists() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let srv = start(corpus(dir.path()), full, None);
    let (sid, _) = open_session(&srv.base, "eve");
    let (s, v) = post(&format!("{}/api/session/{sid}/item/0/rating", srv.base), &rating(3.0));
    assert_eq!(s, 500);
    assert!(v.get("accepted").is_none());
}

#[test]
fn static_bundle_is_served_without_traversal() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("ui");
    std::fs::create_dir_all(bundle.join("assets")).unwrap();
    std::fs::write(bundle.join("index.html"), "<html></html>").unwrap();
    std::fs::write(bundle.join("assets/app.js"), "console.log(1)").unwrap();
    let srv = start(corpus(dir.path()), &dir.path().join("r.jsonl"), Some(&bundle));
    assert_eq!(
        get(&format!("{}/static/index.html", srv.base)),
        (200, b"<html></html>".to_vec())
    );
    assert_eq!(get(&format!("{}/static/assets/app.js", srv.base)).0, 200);
    assert_eq!(get(&format!("{}/static/missing.js", srv.base)).0, 404);
    assert_ne!(get(&format!("{}/static/..%2Fr.jsonl", srv.base)).0, 200);
}

#[test]
fn port_in_use_fails_at_startup() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr: SocketAddr = taken.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let err = rt
        .block_on(serve(
            Dataset::default(),
            ServerConfig {
                bind: addr,
                out: dir.path().join("r.jsonl"),
                static_dir: None,
                seed: 0,
            },
        ))
        .unwrap_err();
    assert!(format!("{err:#}").contains("binding"), "{err:#}");
}
