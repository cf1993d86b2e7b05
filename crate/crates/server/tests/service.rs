use gpmap_client::{Client, ClientError};
use gpmap_core::config::PipelineConfig;
use gpmap_core::eval::{Aabb, Axis, SliceSpec};
use gpmap_core::frame::Frame;
use gpmap_core::scene::{look_at, Primitive, Scene, SensorModel, Shape};
use gpmap_core::wire::{OracleDto, RmseRequest, SliceRequest};
use gpmap_core::Vec3;

fn wall() -> Scene {
    Scene::new(vec![Primitive::new(Shape::Plane {
        normal: Vec3::new(-1.0, 0.0, 0.0),
        offset: -2.0,
    })])
}

fn frames(n: usize) -> Vec<Frame> {
    let scene = wall();
    let sensor = SensorModel::pinhole(40, 30, 60.0, 6.0);
    (0..n)
        .map(|i| {
            let pose = look_at(Vec3::new(0.0, 0.1 * i as f64, 0.0), Vec3::new(2.0, 0.1 * i as f64, 0.0));
            scene.render(&sensor, &pose, i as f64).unwrap()
        })
        .collect()
}

async fn start() -> Client {
    let (addr, _) = gpmap_server::spawn(([127, 0, 0, 1], 0).into(), PipelineConfig::default()).await.unwrap();
    Client::new(format!("http://{addr}"))
}

fn api_kind(e: ClientError) -> (u16, String) {
    match e {
        ClientError::Api { status, kind, .. } => (status, kind),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test]
async fn integrate_then_query() {
    let c = start().await;
    c.health().await.unwrap();
    let stats = c.integrate(&frames(3)).await.unwrap();
    assert_eq!(stats.len(), 3);
    assert_eq!(stats.iter().map(|s| s.frame).collect::<Vec<_>>(), vec![0, 1, 2]);

    let map = c.stats().await.unwrap();
    assert_eq!(map.frames, 3);
    assert!(map.mesh_triangles > 0 && map.global_nodes > 0);

    let r = c.query(&[Vec3::new(1.8, 0.1, 0.0)]).await.unwrap();
    assert!((r[0].distance - 0.2).abs() < 0.05, "distance {}", r[0].distance);

    let ply = c.mesh_ply().await.unwrap();
    assert!(ply.starts_with(b"ply\n"));
}

#[tokio::test]
async fn errors_carry_a_kind() {
    let c = start().await;
    let (status, kind) = api_kind(c.query(&[Vec3::zeros()]).await.unwrap_err());
    assert_eq!((status, kind.as_str()), (409, "empty_field"));

    let mut bad = frames(2);
    bad[1].points.clear();
    bad[1].properties.clear();
    match c.integrate(&bad).await.unwrap_err() {
        ClientError::Api { status, kind, error } => {
            assert_eq!((status, kind.as_str()), (422, "empty_frame"));
            assert!(error.contains("frame 1"), "{error}");
        }
        other => panic!("{other}"),
    }

    let (status, kind) = api_kind(c.load_snapshot(b"not a snapshot".to_vec()).await.unwrap_err());
    assert_eq!((status, kind.as_str()), (422, "format"));

    let raw = raw_post(&c, "/query", "{not json").await;
    assert_eq!(raw.0, 400);
    assert!(raw.1.contains("\"kind\":\"bad_request\""), "{}", raw.1);
}

/// A malformed body has to be sent by hand; the client only speaks valid JSON.
async fn raw_post(c: &Client, path: &str, body: &str) -> (u16, String) {
    use std::io::{Read, Write};
    let addr = c.base_url().trim_start_matches("http://").to_string();
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let out = tokio::task::spawn_blocking(move || {
        let mut s = std::net::TcpStream::connect(&addr).unwrap();
        s.write_all(req.as_bytes()).unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    let status = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, out)
}

#[tokio::test]
async fn snapshot_round_trip() {
    let c = start().await;
    c.integrate(&frames(2)).await.unwrap();
    let probes = [Vec3::new(1.7, 0.0, 0.1), Vec3::new(1.95, 0.05, -0.1)];
    let before = c.query(&probes).await.unwrap();
    let stats = c.stats().await.unwrap();
    let snap = c.snapshot().await.unwrap();

    c.reset(None).await.unwrap();
    assert_eq!(c.stats().await.unwrap().frames, 0);

    // Active leaves and training counts describe the session, not the map.
    let loaded = c.load_snapshot(snap.clone()).await.unwrap();
    assert_eq!(
        (loaded.frames, loaded.leaves, loaded.voxels, loaded.mesh_triangles, loaded.global_nodes),
        (stats.frames, stats.leaves, stats.voxels, stats.mesh_triangles, stats.global_nodes)
    );
    assert_eq!(c.query(&probes).await.unwrap(), before);
    assert_eq!(c.snapshot().await.unwrap(), snap);
}

#[tokio::test]
async fn reset_switches_config() {
    let c = start().await;
    let mut cfg = PipelineConfig::default();
    cfg.voxel_size = 0.1;
    let stats = c.reset(Some(&cfg)).await.unwrap();
    assert_eq!(stats.voxel_size, 0.1);
    assert_eq!(c.config().await.unwrap().voxel_size, 0.1);

    cfg.voxel_size = -1.0;
    assert_eq!(api_kind(c.reset(Some(&cfg)).await.unwrap_err()).1, "config");
    assert_eq!(c.config().await.unwrap().voxel_size, 0.1);
}

#[tokio::test]
async fn slice_and_rmse_against_the_scene() {
    let c = start().await;
    c.integrate(&frames(3)).await.unwrap();
    let oracle = OracleDto {
        scene: wall().to_text(),
        time: 0.0,
    };
    let slice = c
        .slice(&SliceRequest {
            spec: SliceSpec {
                axis: Axis::Z,
                offset: 0.0,
                bounds: [1.7, 2.0, -0.1, 0.1],
                resolution: 0.05,
            },
            oracle: Some(oracle.clone()),
        })
        .await
        .unwrap();
    assert_eq!(slice.samples.len(), slice.nu * slice.nv);
    assert!(slice.samples.iter().all(|s| s.error.is_some()));

    let rmse = c
        .eval_rmse(&RmseRequest {
            oracle,
            region: Aabb::new(Vec3::new(1.7, -0.2, -0.2), Vec3::new(2.0, 0.2, 0.2)),
            resolution: 0.05,
            band: [0.0, 0.15],
        })
        .await
        .unwrap();
    assert!(rmse.samples > 0 && rmse.rmse < 0.05, "{rmse:?}");

    let empty = OracleDto {
        scene: String::new(),
        time: 0.0,
    };
    let err = c
        .eval_rmse(&RmseRequest {
            oracle: empty,
            region: Aabb::cube(Vec3::zeros(), 1.0),
            resolution: 0.1,
            band: [0.0, 1.0],
        })
        .await
        .unwrap_err();
    assert_eq!(api_kind(err).1, "empty_input");
}
