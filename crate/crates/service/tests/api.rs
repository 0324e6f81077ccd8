use std::collections::{HashMap, HashSet};
use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use percept_core::answers::{ComparisonKey, TrialKind};
use percept_core::data::DatasetBundle;
use percept_core::synth::{generate_synthetic, SynthConfig};
use percept_service::{router, AppState, ServiceConfig, SharedState, Status};
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "secret-admin";

fn bundle() -> DatasetBundle {
    generate_synthetic(&SynthConfig {
        n_materials: 20,
        views_per_material: 4,
        latent_dim: 2,
        descriptor_dim: 8,
        noise_sigma: 0.01,
        seed: 3,
    })
    .unwrap()
    .0
}

fn config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(dir);
    cfg.admin_token = Some(TOKEN.into());
    cfg.seed = 11;
    cfg
}

fn open(dir: &Path) -> (SharedState, Router) {
    open_with(bundle(), config(dir))
}

fn open_with(bundle: DatasetBundle, cfg: ServiceConfig) -> (SharedState, Router) {
    let state = AppState::open(bundle, cfg).unwrap();
    let app = router(state.clone());
    (state, app)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let (status, bytes, _) = call_raw(app, method, uri, body, token).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, value)
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn create(app: &Router, worker: &str) -> (StatusCode, Value) {
    call(app, "POST", "/api/sessions", Some(json!({ "worker": worker })), None).await
}

fn view_material(bundle: &DatasetBundle) -> HashMap<String, String> {
    bundle
        .views
        .iter()
        .map(|v| (v.view_id.clone(), v.material_id.clone()))
        .collect()
}

/// Answers a full HIT through the API. `pick` maps (reference, a, b)
/// materials to "a" or "b". Returns the trial payloads received.
async fn run_hit(
    app: &Router,
    id: &str,
    views: &HashMap<String, String>,
    mut pick: impl FnMut(usize, &str, &str, &str) -> &'static str,
) -> Vec<Value> {
    let mut seen = Vec::new();
    loop {
        let (status, trial) = call(app, "GET", &format!("/api/sessions/{id}/next"), None, None).await;
        if status == StatusCode::GONE {
            assert_eq!(trial["done"], true);
            return seen;
        }
        assert_eq!(status, StatusCode::OK, "{trial}");
        let i = trial["trial_index"].as_u64().unwrap() as usize;
        let m = |k: &str| views[trial[k].as_str().unwrap()].clone();
        let chosen = pick(i, &m("reference_view"), &m("candidate_a_view"), &m("candidate_b_view"));
        let (status, ack) = call(
            app,
            "POST",
            &format!("/api/sessions/{id}/answer"),
            Some(json!({ "trial_index": i, "chosen": chosen })),
            None,
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{ack}");
        assert_eq!(ack["accepted"], true);
        seen.push(trial);
    }
}

/// A consistent worker: always the lexicographically smaller material.
fn consistent(_: usize, _: &str, a: &str, b: &str) -> &'static str {
    if a < b {
        "a"
    } else {
        "b"
    }
}

fn control_indices(state: &SharedState, id: &str) -> Vec<usize> {
    let g = state.lock();
    let s = g.sessions[id].lock().unwrap();
    s.hit
        .trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TrialKind::Control)
        .map(|(i, _)| i)
        .collect()
}

fn unique_keys(state: &SharedState, id: &str) -> HashSet<ComparisonKey> {
    let g = state.lock();
    let s = g.sessions[id].lock().unwrap();
    s.hit
        .trials
        .iter()
        .filter(|t| t.kind == TrialKind::Trial)
        .map(|t| t.key())
        .collect()
}

#[tokio::test]
async fn sessions_get_distinct_ids_and_disjoint_trials() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path());
    let (s1, b1) = create(&app, "w1").await;
    let (s2, b2) = create(&app, "w1").await;
    assert_eq!(s1, StatusCode::CREATED);
    assert_eq!(s2, StatusCode::CREATED);
    let (id1, id2) = (b1["session_id"].as_str().unwrap(), b2["session_id"].as_str().unwrap());
    assert_ne!(id1, id2);
    let (k1, k2) = (unique_keys(&state, id1), unique_keys(&state, id2));
    assert_eq!(k1.len(), 95);
    assert_eq!(k2.len(), 95);
    assert!(k1.is_disjoint(&k2));
    let g = state.lock();
    let s = g.sessions[id1].lock().unwrap();
    assert_eq!(s.hit.len(), 110);
    assert_eq!(s.hit.trials.iter().filter(|t| t.kind == TrialKind::Training).count(), 5);
    assert_eq!(s.hit.trials.iter().filter(|t| t.kind == TrialKind::Control).count(), 10);
}

#[tokio::test]
async fn exhausted_plan_conflicts_and_last_hit_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path());
    let pairs = state.lock().plan.as_ref().unwrap().pairs.len();
    assert_eq!(pairs, 200);
    let mut sizes = Vec::new();
    loop {
        let (status, body) = create(&app, "w").await;
        if status == StatusCode::CONFLICT {
            assert!(body["error"].is_string());
            break;
        }
        let id = body["session_id"].as_str().unwrap().to_string();
        sizes.push(unique_keys(&state, &id).len());
    }
    assert_eq!(sizes, vec![95, 95, 10]);
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = open(dir.path());
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({ "name": 1 })), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({ "worker": "" })), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({ "worker": "w", "hit_size": 3 })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    let uri = format!("/api/sessions/{id}/answer");
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 0, "chosen": "c" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn full_hit_never_reveals_kind_and_merges_valid_answers() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let (state, app) = open_with(b, config(dir.path()));
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    let payloads = run_hit(&app, id, &views, consistent).await;
    assert_eq!(payloads.len(), 110);
    let expected: HashSet<&str> = [
        "trial_index",
        "total",
        "reference_view",
        "candidate_a_view",
        "candidate_b_view",
    ]
    .into();
    for (i, p) in payloads.iter().enumerate() {
        let keys: HashSet<&str> = p.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, expected);
        assert_eq!(p["trial_index"], i);
        let text = p.to_string();
        for word in ["kind", "control", "training", "original"] {
            assert!(!text.contains(word), "{text}");
        }
    }
    let (status, result) = call(&app, "GET", &format!("/api/sessions/{id}/result"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(result, json!({ "status": "complete", "inconsistencies": 0 }));
    assert_eq!(state.lock().store.len(), 95);
    let (status, done) = call(&app, "GET", &format!("/api/sessions/{id}/next"), None, None).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(done["status"], "complete");
}

/// Flips the answer on the first `flips` control trials.
async fn run_with_flips(flips: usize) -> (Status, usize, usize) {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let (state, app) = open_with(b, config(dir.path()));
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap().to_string();
    let flipped: HashSet<usize> = control_indices(&state, &id).into_iter().take(flips).collect();
    let queue_before = state.lock().queue.len();
    run_hit(&app, &id, &views, |i, r, a, b| {
        let c = consistent(i, r, a, b);
        if flipped.contains(&i) {
            if c == "a" {
                "b"
            } else {
                "a"
            }
        } else {
            c
        }
    })
    .await;
    let (_, result) = call(&app, "GET", &format!("/api/sessions/{id}/result"), None, None).await;
    assert_eq!(result["inconsistencies"], flips);
    let g = state.lock();
    let status = g.sessions[&id].lock().unwrap().status;
    (status, g.store.len(), g.queue.len() - queue_before)
}

#[tokio::test]
async fn one_inconsistency_is_accepted() {
    let (status, stored, requeued) = run_with_flips(1).await;
    assert_eq!(status, Status::Complete);
    assert_eq!(stored, 95);
    assert_eq!(requeued, 0);
}

#[tokio::test]
async fn two_inconsistencies_reject_and_contribute_nothing() {
    let (status, stored, requeued) = run_with_flips(2).await;
    assert_eq!(status, Status::Rejected);
    assert_eq!(stored, 0);
    assert_eq!(requeued, 95);
}

#[tokio::test]
async fn answers_are_idempotent_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path());
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    let uri = format!("/api/sessions/{id}/answer");
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 1, "chosen": "a" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, first) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 0, "chosen": "a" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first, json!({ "accepted": true, "remaining": 109 }));
    let (status, again) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 0, "chosen": "b" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, first);
    {
        let g = state.lock();
        let s = g.sessions[id].lock().unwrap();
        assert_eq!(s.answers.len(), 1);
        assert_eq!(s.answers[0].chosen, percept_core::answers::Choice::A);
    }
    let (status, _) = call(&app, "GET", "/api/sessions/nope/next", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &app,
        "POST",
        "/api/sessions/nope/answer",
        Some(json!({ "trial_index": 0, "chosen": "a" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn inactive_sessions_are_gone() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let (_, app) = open_with(b, config(dir.path()));
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    run_hit(&app, id, &views, consistent).await;
    let uri = format!("/api/sessions/{id}/answer");
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 110, "chosen": "a" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::GONE);
    let (status, ack) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "trial_index": 109, "chosen": "a" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["remaining"], 0);
}

#[tokio::test]
async fn state_endpoints_need_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let (_, app) = open_with(b, config(dir.path()));
    for token in [None, Some("wrong")] {
        let (status, _) = call(&app, "GET", "/api/state/convergence", None, token).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        let (status, _) = call(&app, "POST", "/api/state/advance", None, token).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
    }
    let (status, conv) = call(&app, "GET", "/api/state/convergence", None, Some(TOKEN)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(conv["iteration"], 0);
    assert_eq!(conv["mean_information_gain"], Value::Null);
    assert_eq!(conv["answers_total"], 0);

    // Below 80% coverage the plan cannot advance.
    let (status, _) = call(&app, "POST", "/api/state/advance", None, Some(TOKEN)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    for _ in 0..2 {
        let (_, body) = create(&app, "w").await;
        run_hit(&app, body["session_id"].as_str().unwrap(), &views, consistent).await;
    }
    let (_, conv) = call(&app, "GET", "/api/state/convergence", None, Some(TOKEN)).await;
    assert_eq!(conv["answers_total"], 190);
    assert!((conv["coverage"].as_f64().unwrap() - 0.95).abs() < 1e-12);

    let mut last = 0;
    for expected in 1..=3 {
        let (status, adv) = call(&app, "POST", "/api/state/advance", None, Some(TOKEN)).await;
        assert_eq!(status, StatusCode::OK, "{adv}");
        assert_eq!(adv["new_iteration"], expected);
        let (_, conv) = call(&app, "GET", "/api/state/convergence", None, Some(TOKEN)).await;
        let log = conv["log"].as_array().unwrap();
        let iters: Vec<u64> = log.iter().map(|e| e["iteration"].as_u64().unwrap()).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*iters.last().unwrap(), expected);
        assert!(conv["mean_information_gain"].as_f64().unwrap() >= 0.0);
        last = expected;
        // Fill the new plan so the next advance is allowed.
        loop {
            let (status, body) = create(&app, "w").await;
            if status != StatusCode::CREATED {
                break;
            }
            run_hit(&app, body["session_id"].as_str().unwrap(), &views, consistent).await;
        }
    }
    assert_eq!(last, 3);
}

#[tokio::test]
async fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let (id_done, id_partial) = {
        let (state, app) = open_with(b.clone(), config(dir.path()));
        let (_, body) = create(&app, "w1").await;
        let done = body["session_id"].as_str().unwrap().to_string();
        run_hit(&app, &done, &views, consistent).await;
        let (_, body) = create(&app, "w2").await;
        let partial = body["session_id"].as_str().unwrap().to_string();
        for i in 0..7 {
            let uri = format!("/api/sessions/{partial}/answer");
            call(
                &app,
                "POST",
                &uri,
                Some(json!({ "trial_index": i, "chosen": "b" })),
                None,
            )
            .await;
        }
        assert_eq!(state.lock().store.len(), 95);
        (done, partial)
    };
    let (state, app) = open_with(b, config(dir.path()));
    {
        let g = state.lock();
        assert_eq!(g.store.len(), 95);
        assert_eq!(g.sessions[&id_done].lock().unwrap().status, Status::Complete);
        assert_eq!(g.sessions[&id_partial].lock().unwrap().cursor(), 7);
        assert_eq!(g.queue.len(), 10);
    }
    let (status, trial) = call(&app, "GET", &format!("/api/sessions/{id_partial}/next"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(trial["trial_index"], 7);
    let (_, body) = create(&app, "w3").await;
    let fresh = body["session_id"].as_str().unwrap();
    assert!(fresh != id_done && fresh != id_partial);
}

#[tokio::test]
async fn truncated_final_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let n_lines = {
        let (_, app) = open(dir.path());
        create(&app, "w").await;
        std::fs::read_to_string(dir.path().join("events.jsonl"))
            .unwrap()
            .lines()
            .count()
    };
    let path = dir.path().join("events.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"event\":\"answ");
    std::fs::write(&path, text).unwrap();
    let (state, _) = open(dir.path());
    assert_eq!(state.lock().sessions.len(), 1);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), n_lines);
}

#[tokio::test]
async fn views_share_one_condition_unless_asymmetric() {
    let b = bundle();
    let condition: HashMap<String, (String, String)> = b
        .views
        .iter()
        .map(|v| (v.view_id.clone(), (v.shape_tag.clone(), v.illumination_tag.clone())))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open_with(b.clone(), config(dir.path()));
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    let conds: HashSet<(String, String)> = {
        let g = state.lock();
        let s = g.sessions[id].lock().unwrap();
        s.views.iter().flatten().map(|v| condition[v].clone()).collect()
    };
    assert_eq!(conds.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.asymmetric = true;
    let (state, app) = open_with(b, cfg);
    let (_, body) = create(&app, "w").await;
    let id = body["session_id"].as_str().unwrap();
    let g = state.lock();
    let s = g.sessions[id].lock().unwrap();
    let conds: HashSet<(String, String)> = s.views.iter().flatten().map(|v| condition[v].clone()).collect();
    assert!(conds.len() > 1);
    let mixed = s
        .views
        .iter()
        .filter(|t| t.iter().map(|v| &condition[v]).collect::<HashSet<_>>().len() > 1);
    assert!(mixed.count() > 0);
}

#[tokio::test]
async fn assets_are_served_for_known_views() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    let mut b = bundle();
    b.assets_dir = Some(assets.path().to_path_buf());
    let first = b.views[0].view_id.clone();
    std::fs::write(assets.path().join(format!("{first}.png")), b"\x89PNG fake").unwrap();
    std::fs::write(assets.path().join("secret.png"), b"no").unwrap();
    let (_, app) = open_with(b.clone(), config(dir.path()));
    let (status, bytes, ctype) = call_raw(&app, "GET", &format!("/api/assets/{first}"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"\x89PNG fake");
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let second = &b.views[1].view_id;
    let (status, _, _) = call_raw(&app, "GET", &format!("/api/assets/{second}"), None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call_raw(&app, "GET", "/api/assets/secret", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_ui_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>ui</html>").unwrap();
    let mut cfg = config(dir.path());
    cfg.ui_dir = Some(ui.path().to_path_buf());
    let (_, app) = open_with(bundle(), cfg);
    let (status, bytes, _) = call_raw(&app, "GET", "/", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"<html>ui</html>");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_record_every_answer_once() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    let views = view_material(&b);
    let mut cfg = config(dir.path());
    cfg.hit.hit_size = 30;
    cfg.hit.n_control = 4;
    let (state, app) = open_with(b, cfg);
    let mut tasks = Vec::new();
    for w in 0..6 {
        let app = app.clone();
        let views = views.clone();
        tasks.push(tokio::spawn(async move {
            let (_, body) = create(&app, &format!("w{w}")).await;
            let id = body["session_id"].as_str().unwrap().to_string();
            run_hit(&app, &id, &views, consistent).await.len()
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), 30);
    }
    let g = state.lock();
    assert_eq!(g.store.len(), 6 * 21);
    assert_eq!(g.store.n_comparisons(), 6 * 21);
    assert!(g.store.tallies_consistent());
}
