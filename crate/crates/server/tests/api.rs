use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use forumlm::annotation::AnswerStore;
use forumlm::bpe::Vocabulary;
use forumlm::decode::DecodeConfig;
use forumlm::exec::Execution;
use forumlm::format::render_thread;
use forumlm::lm::train_ngram;
use forumlm::study::{build_study, select_threads, Origin, Study, StudyConfig};
use forumlm::thread::{ForumPath, ForumThread, Post};
use forumlm_server::{router, AppState, ItemsResponse, NextResponse, ResultsResponse};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture_study() -> Study {
    let mut pool = Vec::new();
    for (f, forum) in ["Politik", "Resor"].iter().enumerate() {
        for i in 0..3 {
            let posts = vec![
                Post::new("anna", format!("Vad tycker ni om {forum} nummer {i}?")),
                Post::new("bert", "Jag tycker det är bra."),
                Post::new("anna", format!("Håller med, svar {f}{i}.")),
            ];
            let path = ForumPath::new(vec![forum.to_string(), "Allmänt".into()]).unwrap();
            pool.push(ForumThread::new(path, format!("Tråd {i}"), posts).unwrap());
        }
    }
    let vocab = Vocabulary::byte_level();
    let records: Vec<_> = pool.iter().map(|t| vocab.encode(&render_thread(t))).collect();
    let model = train_ngram(&records, vocab.size(), 3, 0.1, None).unwrap();
    let cfg = StudyConfig {
        num_threads: 4,
        num_strata: 2,
        min_context_posts: 2,
        max_context_posts: 2,
        ..StudyConfig::default()
    };
    let decode = DecodeConfig {
        max_new_tokens: 30,
        beam_size: 2,
        ..DecodeConfig::default()
    };
    let sel = select_threads(&pool, &vocab, &cfg, Execution::Sequential).unwrap();
    build_study(&sel, &model, &vocab, &decode, &cfg, Execution::Sequential).unwrap()
}

fn app(study: Study) -> (axum::Router, Arc<Study>) {
    let study = Arc::new(study);
    let state = AppState::new([AnswerStore::in_memory(study.clone())]);
    (router(state, None), study)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn answer(item: &str, annotator: &str, q1: bool) -> Value {
    json!({ "item_id": item, "annotator_id": annotator, "q1_not_human": q1, "q2_adds_info": true })
}

#[tokio::test]
async fn items_are_blind_and_ordered() {
    let (app, study) = app(fixture_study());
    let uri = format!("/api/study/{}/items?annotator=g1-a1", study.id());
    let (status, body) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let text = body.to_string();
    assert!(!text.contains("origin") && !text.contains("\"model\"") && !text.contains("\"human\""));
    let parsed: ItemsResponse = serde_json::from_value(body).unwrap();
    let expected: Vec<_> = study.file.groups[0].items.clone();
    let got: Vec<_> = parsed.items.iter().map(|i| i.item_id.clone()).collect();
    assert_eq!(got, expected);
}

#[tokio::test]
async fn unknown_study_and_annotator() {
    let (app, study) = app(fixture_study());
    let (s, _) = call(&app, "GET", "/api/study/nope/items?annotator=g1-a1", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(
        &app,
        "GET",
        &format!("/api/study/{}/items?annotator=zed", study.id()),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = call(&app, "GET", &format!("/api/study/{}/next", study.id()), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn answers_are_idempotent_and_conflicts_rejected() {
    let (app, study) = app(fixture_study());
    let uri = format!("/api/study/{}/answers", study.id());
    let item = study.file.groups[0].items[0].clone();
    let (s, b) = call(&app, "POST", &uri, Some(answer(&item, "g1-a1", false))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(b["answered"], 1);
    let (s, b) = call(&app, "POST", &uri, Some(answer(&item, "g1-a1", false))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["status"], "duplicate");
    let (s, _) = call(&app, "POST", &uri, Some(answer(&item, "g1-a1", true))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &uri, Some(answer(&item, "g2-a1", true))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = call(&app, "POST", &uri, Some(answer("ffff", "g1-a1", true))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &uri, Some(json!({"item_id": item}))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn next_walks_presentation_order() {
    let (app, study) = app(fixture_study());
    let next_uri = format!("/api/study/{}/next?annotator=g2-a3", study.id());
    let post_uri = format!("/api/study/{}/answers", study.id());
    for expected in &study.file.groups[1].items {
        let (_, b) = call(&app, "GET", &next_uri, None).await;
        let n: NextResponse = serde_json::from_value(b).unwrap();
        let item = n.item.expect("item pending");
        assert_eq!(&item.item_id, expected);
        call(&app, "POST", &post_uri, Some(answer(&item.item_id, "g2-a3", false))).await;
    }
    let (_, b) = call(&app, "GET", &next_uri, None).await;
    let n: NextResponse = serde_json::from_value(b).unwrap();
    assert!(n.item.is_none());
    assert_eq!(n.answered, n.total);
}

#[tokio::test]
async fn results_strict_and_partial() {
    let (app, study) = app(fixture_study());
    let results_uri = |strict: bool| format!("/api/study/{}/results?strict={strict}", study.id());
    let (s, _) = call(&app, "GET", &results_uri(true), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let post_uri = format!("/api/study/{}/answers", study.id());
    for (g, group) in study.file.groups.iter().enumerate() {
        for a in &group.annotators {
            for id in &group.items {
                // every annotator calls human items humanlike, model items not
                let q1 = study.origin(id) == Some(Origin::Model);
                let (s, _) = call(&app, "POST", &post_uri, Some(answer(id, a, q1))).await;
                assert_eq!(s, StatusCode::CREATED, "group {g}");
            }
        }
    }
    let (s, b) = call(&app, "GET", &results_uri(true), None).await;
    assert_eq!(s, StatusCode::OK);
    let r: ResultsResponse = serde_json::from_value(b).unwrap();
    assert_eq!(r.results.human.humanlike_majority.count, 4);
    assert_eq!(r.results.model.humanlike_majority.count, 0);
    assert!(r.table.contains("100% (100%)"));
}

#[tokio::test]
async fn placeholder_index_without_ui() {
    let (app, _) = app(fixture_study());
    let resp = app
        .oneshot(Request::builder().uri("/").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn serves_ui_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>ui</h1>").unwrap();
    let study = Arc::new(fixture_study());
    let state = AppState::new([AnswerStore::in_memory(study)]);
    let app = router(state, Some(dir.path().to_path_buf()));
    let resp = app
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<h1>ui</h1>");
}
