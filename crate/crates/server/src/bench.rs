//! In-process pipeline benchmark: pre-rendered capture streams are decoded,
//! assembled, synthesized and encoded while a virtual camera sweeps the arc.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fvv_core::scene_sim::{render, ArcRigSpec, Scene};
use fvv_core::sync::{Assembler, Poll, TimedFrame};
use fvv_core::synthesis::{build_background_model, BackgroundSource};
use fvv_core::transport::{decode_media, encode_media, MediaMessage};
use fvv_core::{CameraId, Timestamp};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ServerConfig;
use crate::pipeline::{Ingested, Pipeline};
use crate::stats::PipelineStats;
use crate::sweep::arc_camera;
use crate::ServerError;

/// Distinct capture instants rendered per camera; the stream loops over them.
const DISTINCT_FRAMES: u64 = 30;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub width: u32,
    pub height: u32,
    pub ticks: u64,
    pub scene: String,
    pub server: ServerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { width: 640, height: 360, ticks: 300, scene: "default".into(), server: ServerConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub width: u32,
    pub height: u32,
    pub cameras: usize,
    pub threads: usize,
    pub stats: PipelineStats,
    /// Wall-clock rate over the whole loop.
    pub wall_fps: f64,
    pub setup: Duration,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "{}x{}, {} cameras, {} threads\n{}\nwall fps {:.1}\n",
            self.width,
            self.height,
            self.cameras,
            self.threads,
            self.stats.table(),
            self.wall_fps
        )
    }
}

pub fn run(config: &BenchConfig) -> Result<BenchReport, ServerError> {
    let setup_started = Instant::now();
    let scene = Scene::by_name(&config.scene).ok_or_else(|| ServerError::Config(format!("unknown scene {:?}", config.scene)))?;
    if config.ticks == 0 {
        return Err(ServerError::Config("ticks must be positive".into()));
    }
    let rig = ArcRigSpec::default().with_resolution(config.width, config.height).build();
    let background = build_background_model(&rig, BackgroundSource::Oracle(&scene)).map_err(|e| ServerError::Startup(e.to_string()))?;
    let period = config.server.period_us;

    // Wire bytes per camera per distinct instant: color, depth, mask.
    let streams: BTreeMap<CameraId, Vec<[Vec<u8>; 3]>> = rig
        .cameras()
        .par_iter()
        .map(|cam| {
            let frames = (0..DISTINCT_FRAMES)
                .map(|k| {
                    let ts = Timestamp(k * period);
                    let f = TimedFrame::from_view(cam.id, ts, &render(&scene, cam, ts, rig.quantizer()));
                    [
                        encode_media(&MediaMessage::color(cam.id, ts, &f.color, false)),
                        encode_media(&MediaMessage::depth(cam.id, ts, &f.foreground_depth, false)),
                        encode_media(&MediaMessage::mask(cam.id, ts, &f.foreground_mask, false)),
                    ]
                })
                .collect();
            (cam.id, frames)
        })
        .collect();

    let mut pipeline = Pipeline::new(rig.clone(), background, config.server.synthesis(), config.server.selection(), config.server.output)?;
    let mut assembler = Assembler::new(config.server.assembler()).map_err(|e| ServerError::Config(e.to_string()))?;
    let setup = setup_started.elapsed();

    let started = Instant::now();
    for k in 0..config.ticks {
        let tick = Timestamp(k * period);
        let s = if config.ticks > 1 { k as f64 / (config.ticks - 1) as f64 } else { 0.0 };
        pipeline.set_viewpoint(arc_camera(&rig, s));
        pipeline.prepare_tick(tick);
        let required = pipeline.required();
        let decode = pipeline.decode_set();

        let assembly_started = Instant::now();
        let arrived = Instant::now();
        let decoded: Vec<(CameraId, Option<Arc<TimedFrame>>)> = required
            .par_iter()
            .map(|id| {
                if decode.as_ref().is_some_and(|d| !d.contains(id)) {
                    return Ok((*id, None));
                }
                let [c, d, m] = &streams[id][(k % DISTINCT_FRAMES) as usize];
                let err = |e: fvv_core::transport::TransportError| ServerError::Protocol(e.to_string());
                let frame = TimedFrame {
                    camera_id: *id,
                    capture_ts: tick,
                    color: decode_media(c).and_then(|m| m.to_color()).map_err(err)?,
                    foreground_depth: decode_media(d).and_then(|m| m.to_depth()).map_err(err)?,
                    foreground_mask: decode_media(m).and_then(|m| m.to_mask()).map_err(err)?,
                };
                Ok((*id, Some(Arc::new(frame))))
            })
            .collect::<Result<_, ServerError>>()?;
        for (id, frame) in decoded {
            assembler.push(id, tick, Ingested { frame, arrived }).map_err(|e| ServerError::Protocol(e.to_string()))?;
        }
        // Every frame for this tick is in, so there is nothing to wait for.
        let set = match assembler.force(&required).map_err(|e| ServerError::Protocol(e.to_string()))? {
            Poll::Ready(set) => set,
            _ => return Err(ServerError::Protocol(format!("tick {k} did not assemble"))),
        };
        if let Some(next) = assembler.next_tick() {
            assembler.retire_before(next, &[]);
        }
        let assembly = assembly_started.elapsed();
        pipeline.process(&set, assembly)?;
    }
    let elapsed = started.elapsed();
    let stats = pipeline.stats().clone();
    Ok(BenchReport {
        width: config.width,
        height: config.height,
        cameras: rig.len(),
        threads: rayon::current_num_threads(),
        wall_fps: stats.frames_synthesized as f64 / elapsed.as_secs_f64(),
        stats,
        setup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_synthesizes_every_tick() {
        let cfg = BenchConfig { width: 160, height: 90, ticks: 12, ..Default::default() };
        let report = run(&cfg).unwrap();
        assert_eq!(report.stats.frames_synthesized, 12);
        assert_eq!(report.stats.incomplete_sets, 0);
        assert!(report.render().contains("composite"));
    }
}
