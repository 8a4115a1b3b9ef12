mod common;

use std::collections::HashSet;
use std::io::Write;

use common::{records, server, Client};
use etongue_core::edge::{upload, RetryPolicy};
use etongue_service::{spawn, ServiceConfig};
use serde_json::json;

#[test]
fn ingest_is_idempotent() {
    let srv = server();
    let c = Client::new(&srv);
    let r = records("beverages", 1).remove(0);

    let (status, body) = c.post("/v1/measurements", &r);
    assert_eq!(status, 201, "{body}");
    assert_eq!(body, json!({"record_id": r.record_id, "duplicate": false}));

    let (status, body) = c.post("/v1/measurements", &r);
    assert_eq!(status, 200);
    assert_eq!(body["record_id"], json!(r.record_id));
    assert_eq!(srv.state().store.len(), 1);
}

#[test]
fn conflicting_content_is_409() {
    let srv = server();
    let c = Client::new(&srv);
    let mut r = records("beverages", 1).remove(0);
    assert_eq!(c.post("/v1/measurements", &r).0, 201);
    r.frames[5].codes[0] += 1;
    let (status, body) = c.post("/v1/measurements", &r);
    assert_eq!(status, 409);
    assert_eq!(body["error"], "conflict");
    assert_eq!(srv.state().store.len(), 1);
}

#[test]
fn invalid_records_name_the_field() {
    let srv = server();
    let c = Client::new(&srv);
    let mut r = records("beverages", 1).remove(0);
    r.immersion_index = r.frames.len() as u32;
    let (status, body) = c.post("/v1/measurements", &r);
    assert_eq!(status, 400);
    assert_eq!(body["field"], "immersion_index");

    // Schema violations carry the JSON path.
    let mut v = serde_json::to_value(records("beverages", 1).remove(0)).unwrap();
    v["frames"][3]["codes"] = json!([1, 2, "x"]);
    let (status, body) = c.post("/v1/measurements", &v);
    assert_eq!(status, 400);
    assert_eq!(body["field"], "frames[3].codes[2]");

    let (status, _) = c.post_raw("/v1/measurements", "{not json");
    assert_eq!(status, 400);
    assert_eq!(srv.state().store.len(), 0);
}

#[test]
fn hundred_concurrent_clients_store_exactly_hundred() {
    let srv = server();
    let url = srv.url();
    let all: Vec<_> = (0..5).flat_map(|s| records("beverages", s)).take(100).collect();
    assert_eq!(all.iter().map(|r| r.record_id).collect::<HashSet<_>>().len(), 100);

    let handles: Vec<_> = all
        .iter()
        .cloned()
        .map(|r| {
            let url = url.clone();
            std::thread::spawn(move || Client::at(&url).post("/v1/measurements", &r).0)
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), 201);
    }
    assert_eq!(srv.state().store.len(), 100);
    let stored: HashSet<_> = srv
        .state()
        .store
        .all()
        .iter()
        .map(|s| s.record.record_id)
        .collect();
    assert_eq!(stored, all.iter().map(|r| r.record_id).collect());
}

#[test]
fn pagination_and_filters() {
    let srv = server();
    let c = Client::new(&srv);
    let (status, page) = c.get("/v1/measurements");
    assert_eq!(status, 200);
    assert_eq!(page, json!({"items": [], "next_page_token": null}));

    let mut all = records("beverages", 3);
    all.extend(records("beverages", 4).into_iter().take(4));
    assert_eq!(all.len(), 25);
    for r in &all {
        assert_eq!(c.post("/v1/measurements", r).0, 201);
    }

    let mut sizes = Vec::new();
    let mut seen = Vec::new();
    let mut path = "/v1/measurements?page_size=10".to_string();
    loop {
        let (status, page) = c.get(&path);
        assert_eq!(status, 200, "{page}");
        let items = page["items"].as_array().unwrap();
        sizes.push(items.len());
        seen.extend(items.iter().map(|i| i["record_id"].as_str().unwrap().to_string()));
        match page["next_page_token"].as_str() {
            Some(t) => path = format!("/v1/measurements?page_size=10&page_token={t}"),
            None => break,
        }
    }
    assert_eq!(sizes, vec![10, 10, 5]);
    let expected: Vec<String> = all.iter().map(|r| r.record_id.to_string()).collect();
    assert_eq!(seen, expected, "receipt order");

    let (_, page) = c.get("/v1/measurements?label=A&page_size=100");
    let items = page["items"].as_array().unwrap();
    let n_a = all.iter().filter(|r| r.label.as_deref() == Some("A")).count();
    assert_eq!(items.len(), n_a);
    assert!(items.iter().all(|i| i["label"] == "A"));

    let (_, page) = c.get("/v1/measurements?label=A&device=nobody");
    assert!(page["items"].as_array().unwrap().is_empty());
    let (_, page) = c.get("/v1/measurements?since=2999-01-01T00:00:00Z");
    assert!(page["items"].as_array().unwrap().is_empty());

    for bad in [
        "page_size=0",
        "page_size=x",
        "since=yesterday",
        "page_token=%21%21",
        "colour=red",
    ] {
        let (status, body) = c.get(&format!("/v1/measurements?{bad}"));
        assert_eq!(status, 400, "{bad}: {body}");
    }

    let id = all[7].record_id;
    let (status, body) = c.get(&format!("/v1/measurements/{id}"));
    assert_eq!(status, 200);
    assert_eq!(
        serde_json::from_value::<etongue_core::MeasurementRecord>(body).unwrap(),
        all[7]
    );
}

#[test]
fn edge_upload_against_live_server() {
    let srv = server();
    let r = records("mineral-water", 0).remove(0);
    let receipt = upload(&r, &srv.url(), &RetryPolicy::default()).unwrap();
    assert_eq!(receipt.record_id, r.record_id);
    assert_eq!(receipt.attempts, 1);
    assert!(!receipt.duplicate);
    assert!(upload(&r, &srv.url(), &RetryPolicy::default()).unwrap().duplicate);
}

#[test]
fn log_survives_restart_and_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        addr: "127.0.0.1:0".parse().unwrap(),
        data_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let rs = records("beverages", 9);
    {
        let srv = spawn(&config).unwrap();
        let c = Client::new(&srv);
        for r in &rs[..5] {
            assert_eq!(c.post("/v1/measurements", r).0, 201);
        }
        srv.shutdown().unwrap();
    }
    // Crash mid-append: half a line at the end of the log.
    let log = dir.path().join(etongue_service::store::LOG_FILE);
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    f.write_all(br#"{"received_at":"2020-01-01T00:00:00Z","offset":1,"content_ha"#)
        .unwrap();
    drop(f);

    let srv = spawn(&config).unwrap();
    let c = Client::new(&srv);
    assert_eq!(srv.state().store.len(), 5);
    assert_eq!(c.post("/v1/measurements", &rs[0]).0, 200);
    assert_eq!(c.post("/v1/measurements", &rs[5]).0, 201);
    srv.shutdown().unwrap();
    assert_eq!(
        etongue_service::LogStore::open(dir.path())
            .map(|s| {
                use etongue_service::RecordStore;
                s.len()
            })
            .unwrap(),
        6
    );
}
