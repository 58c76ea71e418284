use std::collections::BTreeMap;

use fvv_core::scene_sim::{default_rig, render, Scene};
use fvv_core::selection::{camera_distance, ViewState};
use fvv_core::synthesis::{build_background_model, luma_psnr, synthesize, BackgroundSource, SynthesisConfig};
use fvv_core::sync::{FrameSet, SetEntry, TimedFrame};
use fvv_core::Timestamp;

#[test]
fn camera_five_from_its_neighbors() {
    let rig = default_rig();
    let scene = Scene::by_name("default").unwrap();
    let t = Timestamp(0);
    let bg = build_background_model(&rig, BackgroundSource::Oracle(&scene)).unwrap();
    let target = *rig.camera(5).unwrap();
    let mut frames = BTreeMap::new();
    for id in [3u16, 4, 6] {
        let cam = rig.camera(id).unwrap();
        let v = render(&scene, cam, t, rig.quantizer());
        frames.insert(id, SetEntry { frame: TimedFrame::from_view(id, t, &v), capture_ts: t, staleness: 0 });
    }
    let set = FrameSet { tick_ts: t, frames };
    let active = vec![4u16, 6, 3];
    let view = ViewState {
        virtual_camera: target,
        active_distances: active.iter().map(|id| camera_distance(&target, rig.camera(*id).unwrap(), 1.0)).collect(),
        active,
        subscribed: Default::default(),
        last_update_ts: t,
    };
    let out = synthesize(&set, &view, &bg, &rig, &SynthesisConfig::default()).unwrap();
    let oracle = render(&scene, &target, t, rig.quantizer());
    let q = rig.quantizer();
    let valid = &out.composite.valid;
    let mut err = 0.0;
    let mut n = 0;
    for (i, ok) in valid.iter().enumerate() {
        if *ok {
            err += (f64::from(q.quantize(out.composite.depth[i])) - f64::from(oracle.depth.codes()[i])).abs();
            n += 1;
        }
    }
    let psnr = luma_psnr(&out.composite.color, &oracle.color, Some(valid));
    assert!(out.prefill_valid_fraction() >= 0.95, "valid {}", out.prefill_valid_fraction());
    assert!(err / n as f64 <= 2.0, "depth mae {}", err / n as f64);
    assert!(psnr >= 30.0, "psnr {psnr}");
    // Hole filling covers the whole frame.
    assert!(luma_psnr(&out.final_frame, &oracle.color, None) >= 28.0);
}
