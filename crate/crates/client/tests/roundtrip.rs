use klio_client::{Client, ClientError};
use klio_core::config::Config;
use klio_core::geometry::Pose;
use klio_core::pipeline::StampedPose;
use klio_core::pointcloud::{ScanCloud, ScanPoint};
use klio_core::preintegration::ImuSample;
use nalgebra::Vector3;
use reqwest::StatusCode;

async fn start() -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(klio_server::serve(listener));
    Client::new(format!("http://{addr}/"))
}

fn rest(t: f64) -> ImuSample {
    ImuSample::new(t, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81))
}

/// Three walls around the origin, about 1500 points.
fn room(timestamp: f64) -> ScanCloud {
    let mut points = Vec::new();
    for i in 0..25 {
        for j in 0..20 {
            let (u, v) = (i as f64 * 0.2 - 2.5, j as f64 * 0.15);
            points.push(ScanPoint::new(Vector3::new(4.0, u, v), 0.0));
            points.push(ScanPoint::new(Vector3::new(u, 3.0, v), 0.0));
            points.push(ScanPoint::new(Vector3::new(u, v - 1.5, -1.0), 0.0));
        }
    }
    ScanCloud::new(timestamp, points)
}

#[tokio::test]
async fn session_lifecycle() {
    let client = start().await;
    client.health().await.unwrap();

    let session = client.create_session(None).await.unwrap();
    assert!(session.resolved_config().contains("[mapping]"));
    let imu: Vec<_> = (1..=60).map(|k| rest(k as f64 * 0.005)).collect();
    let ack = session.push_imu(imu).await.unwrap();
    assert_eq!((ack.accepted, ack.rejected), (60, 0));

    let first = session.push_scan(&room(0.1)).await.unwrap();
    assert!(first.keyframe_inserted);
    let second = session.push_scan(&room(0.2)).await.unwrap();
    assert!(second.state.pose.translation.norm() < 1e-3);

    let snap = session.snapshot().await.unwrap();
    assert_eq!(snap.scans_processed, 2);
    assert_eq!(snap.keyframes, 1);

    let out = session.finalize().await.unwrap();
    assert_eq!(out.trajectory.len(), 2);
    let id = session.id();
    session.clone().close().await.unwrap();
    match session.snapshot().await {
        Err(ClientError::Service { status, message }) => {
            assert_eq!(status, StatusCode::NOT_FOUND);
            assert!(message.contains(&id.to_string()));
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn invalid_config_surfaces_the_key() {
    let client = start().await;
    let mut config = Config::default();
    config.matcher.voxel_resolution = 0.0;
    match client.create_session(Some(config)).await {
        Err(ClientError::Service { status, message }) => {
            assert_eq!(status, StatusCode::BAD_REQUEST);
            assert!(message.contains("voxel_resolution"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn evaluation_round_trip() {
    let client = start().await;
    let poses: Vec<_> = (0..20)
        .map(|k| StampedPose {
            timestamp: k as f64 * 0.1,
            pose: Pose::from_translation(Vector3::new(k as f64, (k * k) as f64 * 0.1, 0.5)),
        })
        .collect();
    let report = client.evaluate(poses.clone(), poses, 0.02).await.unwrap();
    assert_eq!(report.pairs, 20);
    assert!(report.rmse < 1e-9);
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let client = Client::new("http://127.0.0.1:9");
    assert!(matches!(
        client.health().await,
        Err(ClientError::Transport(_))
    ));
}
