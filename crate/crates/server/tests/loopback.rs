mod common;

use std::time::{Duration, Instant};

use fvv_core::transport::{ControlMessage, MediaType};
use fvv_server::sweep::arc_camera;
use fvv_server::viewer::{ViewerClient, ViewerEvent};
use fvv_server::RunMode;

use common::*;

const TICKS: u64 = 120;
const SWEEP_FRAMES: f64 = 100.0;

#[test]
fn nine_nodes_sweep_end_to_end() {
    let started = Instant::now();
    let rig = rig(320, 180);
    let clock = system_clock();
    let server = start_server(&config(RunMode::Lockstep), &rig, clock.clone());
    let viewer = ViewerClient::connect(server.control_addr, server.media_addr).unwrap();
    viewer.send_viewpoint(&arc_camera(&rig, 0.0), 0).unwrap();
    assert!(wait_until(Duration::from_secs(5), || server.viewer_connected()));
    let nodes = spawn_nodes(&server, &rig, Some(TICKS), &clock);

    let mut ticks = Vec::new();
    // Order in which cameras first become active, and cameras that left.
    let mut entered: Vec<u16> = Vec::new();
    let mut left: Vec<u16> = Vec::new();
    let mut current: Vec<u16> = Vec::new();
    while (ticks.len() as u64) < TICKS {
        match viewer.recv_timeout(Duration::from_secs(20)) {
            Some(ViewerEvent::Frame(msg)) => {
                assert_eq!(msg.msg_type, MediaType::Color);
                assert_eq!((msg.width, msg.height), (320, 180));
                msg.to_color().unwrap();
                ticks.push(msg.capture_ts.0);
                let s = (ticks.len() as f64 / SWEEP_FRAMES).min(1.0);
                viewer.send_viewpoint(&arc_camera(&rig, s), ticks.len() as u64).unwrap();
            }
            Some(ViewerEvent::Control(ControlMessage::SelectionReport { active, subscribed, .. })) => {
                assert_eq!(active.len(), 3);
                assert_eq!(subscribed.len(), 5);
                assert!(active.iter().all(|a| subscribed.contains(a)));
                let mut sorted = active.clone();
                sorted.sort_unstable();
                for id in &sorted {
                    assert!(!left.contains(id), "camera {id} re-entered the active set");
                    if !entered.contains(id) {
                        entered.push(*id);
                    }
                }
                left.extend(current.iter().filter(|id| !sorted.contains(id)));
                current = sorted;
            }
            Some(ViewerEvent::Control(_)) => {}
            Some(ViewerEvent::Closed) => panic!("viewer connection closed after {} frames", ticks.len()),
            None => panic!("no frame within 20 s after {} frames; stats {:?}", ticks.len(), server.stats()),
        }
    }
    for n in nodes {
        let report = n.join().unwrap();
        assert_eq!(report.frames_sent, TICKS);
        assert!(report.offset.unwrap().delay_us < 50_000);
    }
    let stats = server.stats();
    server.shutdown();

    assert_eq!(stats.frames_synthesized, TICKS);
    assert_eq!(stats.incomplete_sets, 0);
    assert_eq!(stats.streams_lost, 0);
    assert!(ticks.windows(2).all(|w| w[1] > w[0]), "ticks not monotone");
    assert_eq!(entered, (0..9).collect::<Vec<u16>>());
    assert_eq!(current, vec![6, 7, 8]);
    eprintln!("loopback: {} frames in {:.1} s", ticks.len(), started.elapsed().as_secs_f64());
    assert!(started.elapsed() < Duration::from_secs(120));
}
