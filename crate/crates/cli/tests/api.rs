mod common;

use axum::http::{Method, StatusCode};
use base64::Engine as _;
use common::*;
use rap_cli::server::router;
use serde_json::{json, Value};

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

struct World {
    _dir: tempfile::TempDir,
    path: std::path::PathBuf,
    app: axum::Router,
    imgs: Vec<Vec<u8>>,
}

/// Three planted images: A at the origin, B at (3,4,0), C at (1,0,0). A fourth
/// image maps to (0,0,1) and a fifth has no vector at all.
fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Vec<u8>> = (0..5u8).map(|i| png([i * 40, 10, 200])).collect();
    let planted = vec![
        (imgs[0].clone(), vec![0.0, 0.0, 0.0]),
        (imgs[1].clone(), vec![3.0, 4.0, 0.0]),
        (imgs[2].clone(), vec![1.0, 0.0, 0.0]),
        (imgs[3].clone(), vec![0.0, 0.0, 1.0]),
    ];
    let path = dir.path().to_path_buf();
    let app = router(engine(&path, 3, &planted));
    World {
        _dir: dir,
        path,
        app,
        imgs,
    }
}

async fn seed(w: &World) -> Vec<Value> {
    let metas = [
        json!({"name": "⟨A⟩", "category": "dog", "description": "likes chicken"}),
        json!({"name": "⟨B⟩", "category": "cat", "description": "sleeps a lot"}),
        json!({"name": "⟨C⟩", "category": "dog"}),
    ];
    let mut out = Vec::new();
    for (m, img) in metas.iter().zip(&w.imgs) {
        let r = create(&w.app, m, img).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
        out.push(r.json());
    }
    out
}

#[tokio::test]
async fn empty_store_health_and_list() {
    let w = world();
    let h = get(&w.app, "/health").await;
    assert_eq!(h.status, StatusCode::OK);
    assert_eq!(
        h.json(),
        json!({"status": "ok", "store_size": 0, "backends": {"detector": "whole-image", "embedder": "map", "generator": "mock"}})
    );
    assert_eq!(get(&w.app, "/concepts").await.json(), json!([]));
    assert_eq!(get(&w.app, "/categories").await.json(), json!([]));
    assert!(w.path.join("manifest.json").is_file());
}

#[tokio::test]
async fn create_returns_record_and_persists() {
    let w = world();
    let recs = seed(&w).await;
    assert_eq!(recs[0]["name"], "⟨A⟩");
    assert_eq!(recs[0]["embedding"], json!([0.0, 0.0, 0.0]));
    assert_eq!(recs[2]["description"], "");
    let image_ref = recs[0]["image_ref"].as_str().unwrap();
    assert!(image_ref.starts_with("images/"));
    assert_eq!(std::fs::read(w.path.join(image_ref)).unwrap(), w.imgs[0]);

    let reloaded = rap_core::ConceptStore::load(&w.path).unwrap();
    assert_eq!(reloaded.len(), 3);
    assert_eq!(get(&w.app, "/health").await.json()["store_size"], 3);
}

#[tokio::test]
async fn create_accepts_separate_fields() {
    let w = world();
    let body = multipart(&[
        Part::Text("name", "⟨A⟩"),
        Part::Text("category", "mug"),
        Part::Text("description", "red"),
        Part::File("image", &w.imgs[0]),
    ]);
    let ct = format!("multipart/form-data; boundary={BOUNDARY}");
    let r = send(&w.app, Method::POST, "/concepts", Some(&ct), body).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.json()["category"], "mug");
}

#[tokio::test]
async fn duplicate_name_is_409_and_changes_nothing() {
    let w = world();
    seed(&w).await;
    let before = store_files(&w.path);
    let r = create(&w.app, &json!({"name": "⟨A⟩", "category": "dog"}), &w.imgs[3]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["code"], "duplicate_name");
    assert_eq!(store_files(&w.path), before);
    assert_eq!(get(&w.app, "/concepts").await.json().as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn failed_embedding_leaves_no_trace() {
    let w = world();
    seed(&w).await;
    let before = store_files(&w.path);
    let r = create(&w.app, &json!({"name": "⟨E⟩", "category": "dog"}), &w.imgs[4]).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["code"], "validation_failed");
    assert_eq!(store_files(&w.path), before);
}

#[tokio::test]
async fn malformed_creates_are_rejected() {
    let w = world();
    let ct = format!("multipart/form-data; boundary={BOUNDARY}");
    let no_image = multipart(&[Part::Text("meta", r#"{"name":"⟨A⟩","category":"dog"}"#)]);
    let r = send(&w.app, Method::POST, "/concepts", Some(&ct), no_image).await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::BAD_REQUEST, json!("validation_failed"))
    );

    let bad_name = create(&w.app, &json!({"name": "plain", "category": "dog"}), &w.imgs[0]).await;
    assert_eq!(bad_name.status, StatusCode::BAD_REQUEST);

    let not_multipart = json(&w.app, Method::POST, "/concepts", &json!({"name": "⟨A⟩"})).await;
    assert_eq!(not_multipart.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&w.app, "/concepts").await.json(), json!([]));
}

#[tokio::test]
async fn get_patch_delete_round_trip() {
    let w = world();
    let recs = seed(&w).await;
    let id = recs[1]["id"].as_str().unwrap();
    let uri = format!("/concepts/{id}");

    assert_eq!(get(&w.app, &uri).await.json(), recs[1]);

    let p = json(
        &w.app,
        Method::PATCH,
        &uri,
        &json!({"description": "guards the door", "category": "pet"}),
    )
    .await;
    assert_eq!(p.status, StatusCode::OK);
    let patched = p.json();
    assert_eq!(patched["description"], "guards the door");
    assert_eq!(patched["category"], "pet");
    assert_eq!(patched["name"], "⟨B⟩");
    assert_eq!(patched["embedding"], recs[1]["embedding"]);
    assert_eq!(get(&w.app, &uri).await.json(), patched);

    let image_ref = recs[1]["image_ref"].as_str().unwrap().to_string();
    let d = send(&w.app, Method::DELETE, &uri, None, Vec::new()).await;
    assert_eq!(d.status, StatusCode::OK);
    assert_eq!(d.json()["id"], id);
    let gone = get(&w.app, &uri).await;
    assert_eq!(
        (gone.status, gone.json()["code"].clone()),
        (StatusCode::NOT_FOUND, json!("not_found"))
    );
    assert!(!w.path.join(&image_ref).exists());
    assert_eq!(rap_core::ConceptStore::load(&w.path).unwrap().len(), 2);

    let again = send(&w.app, Method::DELETE, &uri, None, Vec::new()).await;
    assert_eq!(again.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn patch_with_image_reembeds() {
    let w = world();
    let recs = seed(&w).await;
    let uri = format!("/concepts/{}", recs[0]["id"].as_str().unwrap());
    let old_ref = recs[0]["image_ref"].as_str().unwrap().to_string();
    let p = json(&w.app, Method::PATCH, &uri, &json!({"image_b64": b64(&w.imgs[3])})).await;
    assert_eq!(p.status, StatusCode::OK);
    let rec = p.json();
    assert_eq!(rec["embedding"], json!([0.0, 0.0, 1.0]));
    assert_ne!(rec["image_ref"], json!(old_ref));
    assert!(!w.path.join(&old_ref).exists());
    assert!(w.path.join(rec["image_ref"].as_str().unwrap()).is_file());
}

#[tokio::test]
async fn failed_patch_changes_nothing() {
    let w = world();
    let recs = seed(&w).await;
    let uri = format!("/concepts/{}", recs[0]["id"].as_str().unwrap());
    let before = store_files(&w.path);

    let clash = json(&w.app, Method::PATCH, &uri, &json!({"name": "⟨B⟩"})).await;
    assert_eq!(
        (clash.status, clash.json()["code"].clone()),
        (StatusCode::CONFLICT, json!("duplicate_name"))
    );
    let unplanted = json(&w.app, Method::PATCH, &uri, &json!({"image_b64": b64(&w.imgs[4])})).await;
    assert_eq!(unplanted.status, StatusCode::BAD_REQUEST);
    let unknown_field = json(&w.app, Method::PATCH, &uri, &json!({"colour": "red"})).await;
    assert_eq!(unknown_field.status, StatusCode::BAD_REQUEST);
    let missing = json(&w.app, Method::PATCH, "/concepts/nope", &json!({"description": "x"})).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);

    assert_eq!(store_files(&w.path), before);
    assert_eq!(get(&w.app, &uri).await.json(), recs[0]);
}

#[tokio::test]
async fn retrieve_by_embedding_matches_hand_distances() {
    let w = world();
    let recs = seed(&w).await;
    // From (0,0,1): A is 1 away, C is sqrt(2), B is sqrt(26).
    let r = json(
        &w.app,
        Method::POST,
        "/retrieve",
        &json!({"embedding": [0.0, 0.0, 1.0], "k": 3}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let hits = r.json()["hits"].as_array().unwrap().clone();
    let expect = [(0, 1.0f64), (2, 2f64.sqrt()), (1, 26f64.sqrt())];
    assert_eq!(hits.len(), 3);
    for (hit, (i, d)) in hits.iter().zip(expect) {
        assert_eq!(hit["concept_id"], recs[i]["id"]);
        assert_eq!(hit["name"], recs[i]["name"]);
        assert!((hit["distance"].as_f64().unwrap() - d).abs() < 1e-9, "{hit}");
    }

    let default_k = json(
        &w.app,
        Method::POST,
        "/retrieve",
        &json!({"embedding": [0.0, 0.0, 1.0]}),
    )
    .await;
    assert_eq!(default_k.json()["hits"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn retrieve_by_image() {
    let w = world();
    let recs = seed(&w).await;
    let r = json(
        &w.app,
        Method::POST,
        "/retrieve",
        &json!({"image_b64": b64(&w.imgs[1]), "k": 2}),
    )
    .await;
    let hits = r.json()["hits"].clone();
    assert_eq!(hits[0]["concept_id"], recs[1]["id"]);
    assert_eq!(hits[0]["distance"], 0.0);
    // C at (1,0,0) to B at (3,4,0) is sqrt(20).
    assert!((hits[1]["distance"].as_f64().unwrap() - 20f64.sqrt()).abs() < 1e-9);
}

#[tokio::test]
async fn retrieve_rejects_bad_requests() {
    let w = world();
    seed(&w).await;
    let wrong_dim = json(&w.app, Method::POST, "/retrieve", &json!({"embedding": [1.0, 2.0]})).await;
    assert_eq!(
        (wrong_dim.status, wrong_dim.json()["code"].clone()),
        (StatusCode::UNPROCESSABLE_ENTITY, json!("dimension_mismatch"))
    );
    for body in [
        json!({}),
        json!({"embedding": [0.0, 0.0, 1.0], "image_b64": b64(&w.imgs[0])}),
        json!({"image_b64": "***"}),
        json!({"embedding": [0.0, 0.0, 1.0], "extra": 1}),
        json!({"embedding": [0.0, 0.0, 1.0], "k": 0}),
    ] {
        let r = json(&w.app, Method::POST, "/retrieve", &body).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(r.json()["code"], "validation_failed");
    }
    let garbage = send(
        &w.app,
        Method::POST,
        "/retrieve",
        Some("application/json"),
        b"{not json".to_vec(),
    )
    .await;
    assert_eq!(garbage.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn retrieve_on_empty_store_is_empty() {
    let w = world();
    let r = json(
        &w.app,
        Method::POST,
        "/retrieve",
        &json!({"embedding": [0.0, 0.0, 1.0]}),
    )
    .await;
    assert_eq!(r.json(), json!({"hits": []}));
}

#[tokio::test]
async fn chat_reflects_edits_immediately() {
    let w = world();
    let recs = seed(&w).await;
    let ask = json!({"text": "What does ⟨A⟩ like to eat?"});
    let first = json(&w.app, Method::POST, "/chat", &ask).await.json();
    assert_eq!(first["provenance"][0]["concept_id"], recs[0]["id"]);
    assert_eq!(first["provenance"][0]["source"], "name");
    assert!(first["text"].as_str().unwrap().contains("likes chicken"));

    let uri = format!("/concepts/{}", recs[0]["id"].as_str().unwrap());
    json(&w.app, Method::PATCH, &uri, &json!({"description": "likes beef"})).await;
    let second = json(&w.app, Method::POST, "/chat", &ask).await.json();
    let text = second["text"].as_str().unwrap();
    assert!(text.contains("likes beef") && !text.contains("chicken"), "{text}");
}

#[tokio::test]
async fn chat_with_image_reports_visual_provenance() {
    let w = world();
    let recs = seed(&w).await;
    let r = json(
        &w.app,
        Method::POST,
        "/chat",
        &json!({"image_b64": b64(&w.imgs[3]), "text": "caption this"}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let out = r.json();
    let prov = out["provenance"].as_array().unwrap();
    // (0,0,1) is nearest A (1.0) then C (sqrt 2).
    assert_eq!(prov.len(), 2);
    assert_eq!(prov[0]["concept_id"], recs[0]["id"]);
    assert_eq!(prov[0]["source"], "visual");
    assert_eq!(prov[0]["region_index"], 0);
    assert!((prov[0]["distance"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(prov[1]["concept_id"], recs[2]["id"]);
    assert_eq!(out["prompt"]["concept_order"], json!([recs[0]["id"], recs[2]["id"]]));

    let again = json(
        &w.app,
        Method::POST,
        "/chat",
        &json!({"image_b64": b64(&w.imgs[3]), "text": "caption this"}),
    )
    .await;
    assert_eq!(again.json()["text"], out["text"]);
}

#[tokio::test]
async fn chat_embed_failure_is_reported() {
    let w = world();
    seed(&w).await;
    let r = json(&w.app, Method::POST, "/chat", &json!({"image_b64": b64(&w.imgs[4])})).await;
    assert!(r.status.is_client_error() || r.status.is_server_error());
    assert!(r.json()["code"].is_string());
}

#[tokio::test]
async fn categories_are_sorted_and_unique() {
    let w = world();
    seed(&w).await;
    assert_eq!(get(&w.app, "/categories").await.json(), json!(["cat", "dog"]));
}

#[tokio::test]
async fn images_are_served_and_paths_confined() {
    let w = world();
    let recs = seed(&w).await;
    let image_ref = recs[0]["image_ref"].as_str().unwrap();
    let r = get(&w.app, &format!("/{image_ref}")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    assert_eq!(r.bytes, w.imgs[0]);

    for uri in [
        "/images/../manifest.json",
        "/images/%2e%2e%2fmanifest.json",
        "/images/..%2fmanifest.json",
        "/images/sub/x.png",
        "/images/.hidden",
        "/images/missing.png",
    ] {
        let r = get(&w.app, uri).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn unknown_routes_and_methods() {
    let w = world();
    let r = get(&w.app, "/nowhere").await;
    assert_eq!(
        (r.status, r.json()["code"].clone()),
        (StatusCode::NOT_FOUND, json!("not_found"))
    );
    let r = send(&w.app, Method::PUT, "/concepts", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(r.json()["code"], "validation_failed");
}

#[tokio::test]
async fn concurrent_creates_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Vec<u8>> = (0..16u8).map(|i| png([i, 99, 7])).collect();
    let planted: Vec<_> = imgs
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), vec![i as f32, 0.0, 0.0]))
        .collect();
    let app = router(engine(dir.path(), 3, &planted));
    let mut tasks = Vec::new();
    for (i, img) in imgs.into_iter().enumerate() {
        let app = app.clone();
        // Every pair of requests shares a name, so exactly one of each pair wins.
        tasks.push(tokio::spawn(async move {
            create(&app, &json!({"name": format!("⟨c{}⟩", i / 2), "category": "x"}), &img)
                .await
                .status
        }));
    }
    let mut created = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::CREATED => created += 1,
            StatusCode::CONFLICT => {}
            s => panic!("unexpected {s}"),
        }
    }
    assert_eq!(created, 8);
    let store = rap_core::ConceptStore::load(dir.path()).unwrap();
    assert_eq!(store.len(), 8);
    let images = std::fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(images, 8);
}
