use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Per-stage durations in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub assembly_us: u64,
    pub warp_us: u64,
    pub blend_us: u64,
    pub composite_us: u64,
    pub encode_us: u64,
}

impl StageTimings {
    pub fn total_us(&self) -> u64 {
        self.assembly_us + self.warp_us + self.blend_us + self.composite_us + self.encode_us
    }

    fn add(&mut self, o: &StageTimings) {
        self.assembly_us += o.assembly_us;
        self.warp_us += o.warp_us;
        self.blend_us += o.blend_us;
        self.composite_us += o.composite_us;
        self.encode_us += o.encode_us;
    }

    fn max(&mut self, o: &StageTimings) {
        self.assembly_us = self.assembly_us.max(o.assembly_us);
        self.warp_us = self.warp_us.max(o.warp_us);
        self.blend_us = self.blend_us.max(o.blend_us);
        self.composite_us = self.composite_us.max(o.composite_us);
        self.encode_us = self.encode_us.max(o.encode_us);
    }

    fn rows(&self) -> [(&'static str, u64); 5] {
        [
            ("assembly", self.assembly_us),
            ("warp", self.warp_us),
            ("blend", self.blend_us),
            ("composite", self.composite_us),
            ("encode", self.encode_us),
        ]
    }
}

pub fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Ticks decided, synthesized or not.
    pub ticks: u64,
    pub frames_synthesized: u64,
    /// Ticks decided without a viewpoint.
    pub idle_ticks: u64,
    /// Ticks abandoned because the pipeline fell behind.
    pub dropped_ticks: u64,
    /// Sets where a subscribed camera was stale or an active camera had no
    /// decoded frame.
    pub incomplete_sets: u64,
    /// Stale frame entries across all sets.
    pub stale_frames: u64,
    pub streams_lost: u64,
    pub selection_changes: u64,
    pub last: StageTimings,
    pub total: StageTimings,
    pub max: StageTimings,
    /// Estimated latency of the last emitted frame.
    pub latency_us: u64,
    pub total_latency_us: u64,
    pub last_tick_us: Option<u64>,
}

impl PipelineStats {
    pub fn record_frame(&mut self, timings: StageTimings, latency_us: u64) {
        self.frames_synthesized += 1;
        self.last = timings;
        self.total.add(&timings);
        self.max.max(&timings);
        self.latency_us = latency_us;
        self.total_latency_us += latency_us;
    }

    pub fn mean(&self) -> StageTimings {
        let n = self.frames_synthesized.max(1);
        let t = &self.total;
        StageTimings {
            assembly_us: t.assembly_us / n,
            warp_us: t.warp_us / n,
            blend_us: t.blend_us / n,
            composite_us: t.composite_us / n,
            encode_us: t.encode_us / n,
        }
    }

    pub fn mean_latency_us(&self) -> u64 {
        self.total_latency_us / self.frames_synthesized.max(1)
    }

    /// Frames per second if the stages ran back to back.
    pub fn pipeline_fps(&self) -> f64 {
        let per_frame = self.mean().total_us();
        if per_frame == 0 {
            0.0
        } else {
            1e6 / per_frame as f64
        }
    }

    /// Per-stage timing table in milliseconds.
    pub fn table(&self) -> String {
        let mean = self.mean();
        let mut out = String::new();
        writeln!(out, "{:<10} {:>10} {:>10}", "stage", "mean_ms", "max_ms").unwrap();
        for ((name, m), (_, x)) in mean.rows().iter().zip(self.max.rows()) {
            writeln!(out, "{:<10} {:>10.2} {:>10.2}", name, *m as f64 / 1e3, x as f64 / 1e3).unwrap();
        }
        writeln!(out, "{:<10} {:>10.2}", "total", mean.total_us() as f64 / 1e3).unwrap();
        write!(out, "frames {}  fps {:.1}", self.frames_synthesized, self.pipeline_fps()).unwrap();
        out
    }
}
