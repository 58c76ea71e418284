#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use fvv_core::scene_sim::{ArcRigSpec, Scene};
use fvv_core::synthesis::{build_background_model, BackgroundModel, BackgroundSource};
use fvv_core::Rig;
use fvv_server::capture::{CaptureConfig, CaptureNode};
use fvv_server::{start, OutputEncoding, RunMode, ServerConfig, ServerHandle, SharedClock, SystemClock};

pub fn rig(width: u32, height: u32) -> Rig {
    ArcRigSpec::default().with_resolution(width, height).build()
}

pub fn background(rig: &Rig) -> BackgroundModel {
    build_background_model(rig, BackgroundSource::Oracle(&Scene::by_name("default").unwrap())).unwrap()
}

pub fn config(mode: RunMode) -> ServerConfig {
    ServerConfig {
        media_port: 0,
        control_port: 0,
        bridge_port: 0,
        output: OutputEncoding::Raw,
        mode,
        ..ServerConfig::default()
    }
}

pub fn system_clock() -> SharedClock {
    Arc::new(SystemClock)
}

pub fn start_server(cfg: &ServerConfig, rig: &Rig, clock: SharedClock) -> ServerHandle {
    start(cfg, rig.clone(), background(rig), clock).unwrap()
}

pub fn node(server: &ServerHandle, rig: &Rig, id: u16, frames: Option<u64>) -> CaptureConfig {
    let cam = *rig.camera(id).unwrap();
    let mut c = CaptureConfig::new(cam, *rig.quantizer(), Scene::by_name("default").unwrap(), server.media_addr, server.control_addr);
    c.frames = frames;
    c.start = Some(fvv_core::Timestamp(0));
    c
}

pub fn spawn_nodes(server: &ServerHandle, rig: &Rig, frames: Option<u64>, clock: &SharedClock) -> Vec<CaptureNode> {
    rig.ids().into_iter().map(|id| CaptureNode::spawn(node(server, rig, id, frames), clock.clone())).collect()
}

/// Polls `cond` until it holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}
