use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use colorimagine::colorizer::{ColorizerModel, ModelConfig, UNetConfig};
use colorimagine::colorspace::RgbImage;
use colorimagine::composition::{Choice, EditAction};
use colorimagine::features::ExtractorConfig;
use colorimagine::imagination::BackendRegistry;
use colorimagine::io::{decode_labels_png, decode_rgb, encode_png};
use colorimagine::pipeline::PipelineParams;
use colorimagine::service::{router, SegmentView, Session, SessionStore, SessionView};
use colorimagine::synthetic::synthetic_scene;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> ColorizerModel {
    ColorizerModel::new(&ModelConfig {
        extractor: ExtractorConfig { width_divisor: 16, ..Default::default() },
        unet: UNetConfig { base_width: 4, ..Default::default() },
        ..Default::default()
    })
    .unwrap()
}

fn store(root: &std::path::Path) -> Arc<SessionStore> {
    Arc::new(SessionStore::new(root, Arc::new(BackendRegistry::with_toy()), Arc::new(Mutex::new(model()))).unwrap())
}

fn input() -> RgbImage {
    synthetic_scene(40, 48, 7)
}

const BOUNDARY: &str = "XtestboundaryX";

fn multipart(fields: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"image\"; filename=\"in.png\"\r\nContent-Type: image/png\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes, _) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn create(app: &Router, fields: &[(&str, Vec<u8>)]) -> (StatusCode, Value) {
    let req = Request::post("/api/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(fields)))
        .unwrap();
    let (status, bytes, _) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[test]
fn create_then_get_returns_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let created = s.create(&input(), &PipelineParams { n: 3, ..Default::default() }).unwrap();
    assert_eq!(s.get(&created.meta.id).unwrap(), created);
    assert_eq!(s.list().unwrap(), vec![created.meta.id.clone()]);
}

#[test]
fn sessions_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let created = {
        let s = store(dir.path());
        let c = s.create(&input(), &PipelineParams { n: 3, ..Default::default() }).unwrap();
        s.apply_edit(&c.meta.id, *c.assignment.beta().keys().next().unwrap(), EditAction::Exclude, Some(1))
            .unwrap()
            .session
    };
    let loaded = Session::load(&dir.path().join(&created.meta.id)).unwrap();
    assert_eq!(loaded, created);
    assert_eq!(store(dir.path()).get(&created.meta.id).unwrap(), created);
}

#[test]
fn input_file_is_never_rewritten() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let c = s.create(&input(), &PipelineParams { n: 2, ..Default::default() }).unwrap();
    let path = dir.path().join(&c.meta.id).join("input.png");
    let before = (std::fs::read(&path).unwrap(), std::fs::metadata(&path).unwrap().modified().unwrap());
    let j = *c.assignment.beta().keys().next().unwrap();
    s.apply_edit(&c.meta.id, j, EditAction::Exclude, None).unwrap();
    s.recolorize(&c.meta.id).unwrap();
    let after = (std::fs::read(&path).unwrap(), std::fs::metadata(&path).unwrap().modified().unwrap());
    assert_eq!(before, after);
}

#[test]
fn exclude_recolorize_reset_recolorize_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let c = s.create(&input(), &PipelineParams { n: 4, ..Default::default() }).unwrap();
    let id = c.meta.id.clone();
    let j = *c.assignment.beta().keys().max_by_key(|&&j| c.segmentation().pixels(j).len()).unwrap();

    let edited = s.apply_edit(&id, j, EditAction::Exclude, Some(c.meta.version)).unwrap();
    assert!(!edited.conflict);
    assert_eq!(edited.session.assignment.choice(j), Some(Choice::Excluded));
    assert_eq!(edited.session.meta.version, c.meta.version + 1);
    assert_eq!(edited.session.result, c.result, "edits alone do not re-render");

    let excluded = s.recolorize(&id).unwrap();
    assert_ne!(excluded.result, c.result);
    let again = s.recolorize(&id).unwrap();
    assert_eq!(again, excluded, "recolorize is idempotent");

    s.apply_edit(&id, j, EditAction::Reset, None).unwrap();
    let restored = s.recolorize(&id).unwrap();
    assert!(restored.assignment.same_choices(&c.assignment));
    assert_eq!(restored.result, c.result);
    assert_eq!(
        encode_png(&restored.result).unwrap(),
        std::fs::read(dir.path().join(&id).join("result.png")).unwrap()
    );
}

#[test]
fn stale_versions_are_flagged_but_applied() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let c = s.create(&input(), &PipelineParams { n: 3, ..Default::default() }).unwrap();
    let j = *c.assignment.beta().keys().next().unwrap();
    let first = s.apply_edit(&c.meta.id, j, EditAction::SetReference { index: 2 }, Some(1)).unwrap();
    assert!(!first.conflict);
    let second = s.apply_edit(&c.meta.id, j, EditAction::SetReference { index: 1 }, Some(1)).unwrap();
    assert!(second.conflict);
    assert_eq!(second.session.assignment.choice(j), Some(Choice::Reference(1)));
    assert_eq!(second.session.meta.version, 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_api_drives_a_full_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(dir.path()));
    let img = input();
    let png = encode_png(&img).unwrap();

    let (status, view) = create(&app, &[("image", png.clone()), ("seeds", b"3,1,2".to_vec())]).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    let view: SessionView = serde_json::from_value(view).unwrap();
    assert_eq!(view.reference_count, 3);
    assert_eq!(view.params.seeds, Some(vec![3, 1, 2]));
    assert_eq!((view.height, view.width), img.dim());
    let id = view.id.clone();

    let (status, bytes, _) = get(&app, &format!("/api/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<SessionView>(&bytes).unwrap(), view);

    let (_, bytes, _) = get(&app, "/api/sessions").await;
    assert_eq!(serde_json::from_slice::<Vec<String>>(&bytes).unwrap(), vec![id.clone()]);

    let (status, bytes, ctype) = get(&app, &format!("/api/sessions/{id}/input.png")).await;
    assert_eq!((status, ctype.as_deref()), (StatusCode::OK, Some("image/png")));
    assert_eq!(decode_rgb(&bytes).unwrap(), img.quantized());

    // 16-bit segment ids, every segment listed exactly once.
    let (_, seg_png, _) = get(&app, &format!("/api/sessions/{id}/segmentation.png")).await;
    assert_eq!(&seg_png[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(seg_png[24], 16, "bit depth");
    let labels = decode_labels_png(&seg_png).unwrap();
    assert_eq!(labels.dim(), img.dim());
    let (_, bytes, _) = get(&app, &format!("/api/sessions/{id}/segments")).await;
    let segments: Vec<SegmentView> = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(segments.len(), view.segment_count);
    let mut counted = 0;
    for s in &segments {
        let pixels: Vec<(usize, usize)> = labels.indexed_iter().filter(|(_, &v)| v == s.id).map(|(p, _)| p).collect();
        assert_eq!(pixels.len(), s.pixel_count);
        assert!(pixels.iter().all(|&(y, x)| (s.bbox.y0..s.bbox.y1).contains(&y) && (s.bbox.x0..s.bbox.x1).contains(&x)));
        assert_eq!(s.candidates.len(), 3);
        assert_eq!(s.beta, s.automatic);
        assert!(!s.edited);
        assert!(!s.class_name.is_empty());
        counted += pixels.len();
    }
    assert_eq!(counted, labels.len());

    // Thumbnails are the candidate cropped to the segment's bbox.
    let s = &segments[0];
    let (status, thumb, _) = get(&app, &s.candidates[2]).await;
    assert_eq!(status, StatusCode::OK);
    let thumb = decode_rgb(&thumb).unwrap();
    let (_, full, _) = get(&app, &format!("/api/sessions/{id}/references/2")).await;
    let full = decode_rgb(&full).unwrap();
    assert_eq!(thumb, full.crop(s.bbox.y0, s.bbox.x0, s.bbox.height(), s.bbox.width()));

    let (_, original, _) = get(&app, &format!("/api/sessions/{id}/result.png")).await;

    // Edit with the current version, then a stale one.
    let big = segments.iter().max_by_key(|s| s.pixel_count).unwrap().id;
    let uri = format!("/api/sessions/{id}/edits");
    let (status, v) = post_json(&app, &uri, json!({"segment_id": big, "action": {"type": "exclude"}, "version": 1})).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["conflict"], false);
    assert_eq!(v["version"], 2);
    assert_eq!(v["beta"][big.to_string()], -1);
    assert_eq!(v["edited_segments"], json!([big]));
    let (_, v) = post_json(&app, &uri, json!({"segment_id": big, "action": {"type": "exclude"}, "version": 1})).await;
    assert_eq!(v["conflict"], true);
    assert_eq!(v["version"], 3);

    let (status, v) = post_json(&app, &format!("/api/sessions/{id}/recolorize"), json!({})).await;
    assert_eq!(status, StatusCode::OK);
    let changed_version = v["version"].as_u64().unwrap();
    let (_, v) = post_json(&app, &format!("/api/sessions/{id}/recolorize"), json!({})).await;
    assert_eq!(v["version"].as_u64().unwrap(), changed_version, "idempotent recolorize keeps the version");
    let (_, excluded, _) = get(&app, &format!("/api/sessions/{id}/result.png")).await;
    assert_ne!(excluded, original);

    post_json(&app, &uri, json!({"segment_id": big, "action": {"type": "reset"}})).await;
    post_json(&app, &format!("/api/sessions/{id}/recolorize"), json!({})).await;
    let (_, restored, _) = get(&app, &format!("/api/sessions/{id}/result.png")).await;
    assert_eq!(restored, original);

    let (status, bytes, ctype) = get(&app, &format!("/api/sessions/{id}/composed.png")).await;
    assert_eq!((status, ctype.as_deref()), (StatusCode::OK, Some("image/png")));
    assert_eq!(decode_rgb(&bytes).unwrap().dim(), img.dim());
}

#[tokio::test]
async fn errors_name_code_and_stage() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(store(dir.path()));

    let (status, bytes, _) = get(&app, "/api/sessions/doesnotexist").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let e: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(e["code"], "not_found");
    assert_eq!(e["stage"], "session");
    assert!(e["message"].as_str().unwrap().contains("doesnotexist"));

    let (status, e) = create(&app, &[("n", b"2".to_vec())]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["stage"], "input");

    let (status, e) = create(&app, &[("image", b"not a png".to_vec())]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "bad_request");

    let png = encode_png(&input()).unwrap();
    let (status, e) = create(&app, &[("image", png.clone()), ("generator", b"nope".to_vec())]).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(e["stage"], "generation");

    let (_, v) = create(&app, &[("image", png), ("n", b"2".to_vec())]).await;
    let id = v["id"].as_str().unwrap();
    let (status, e) =
        post_json(&app, &format!("/api/sessions/{id}/edits"), json!({"segment_id": 9999, "action": {"type": "exclude"}})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["stage"], "composition");
    let (status, e) = post_json(
        &app,
        &format!("/api/sessions/{id}/edits"),
        json!({"segment_id": 1, "action": {"type": "set_reference", "index": 5}}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{e}");
    let (status, _, _) = get(&app, &format!("/api/sessions/{id}/references/7")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = get(&app, "/api/sessions/..%2F..%2Fetc/input.png").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
