//! Acceptance suite. Runs every criterion in turn and prints one PASS/FAIL
//! line for each; exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fvv_core::depth_codec::{pack_codes, pack_depth, unpack_depth, DepthMap};
use fvv_core::frame::{I420Frame, Mask};
use fvv_core::scene_sim::{default_rig, render, ArcRigSpec, Scene};
use fvv_core::selection::{camera_distance, select, SelectionParams, ViewState};
use fvv_core::sync::{assemble, estimate_offset, simulate_exchange, AssemblerConfig, ClockModel, FrameSet, SetEntry, TimedFrame};
use fvv_core::synthesis::{
    build_background_model, forward_warp, luma_psnr, synthesize, BackgroundSource, PixelFilter, SplatMode, SynthesisConfig,
};
use fvv_core::transport::{
    decode_media, encode_media, ControlMessage, MediaMessage, MediaStreamDecoder, MediaType,
};
use fvv_core::{CameraIntrinsics, CameraModel, CameraPose, DepthQuantizer, Rig, Timestamp};
use fvv_server::capture::{CaptureConfig, CaptureNode};
use fvv_server::sweep::arc_camera;
use fvv_server::viewer::{ViewerClient, ViewerEvent};
use fvv_server::{start, Clock, ManualClock, OutputEncoding, RunMode, ServerConfig, ServerHandle, SharedClock, SystemClock};
use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("depth packing", depth_packing),
        ("depth quantizer", depth_quantizer),
        ("geometry", geometry),
        ("warp identity", warp_identity),
        ("held-out camera", held_out_camera),
        ("selection", selection),
        ("sync", sync),
        ("transport", transport),
        ("loopback", loopback),
        ("bench", bench),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<16} {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<16} {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn within(started: Instant, limit_s: u64) -> Result<f64, String> {
    let secs = started.elapsed().as_secs_f64();
    check!(secs < limit_s as f64, "took {secs:.1} s, limit {limit_s} s");
    Ok(secs)
}

fn depth_packing() -> Outcome {
    let started = Instant::now();
    let mut cases = 0;
    // Every code in every cell of a 2x2 block, against empty and full neighbors.
    for fill in [0u16, 4095] {
        for cell in 0..4 {
            for code in 0..4096u16 {
                let mut codes = vec![fill; 4];
                codes[cell] = code;
                let d = DepthMap::new(2, 2, codes).map_err(|e| e.to_string())?;
                check!(unpack_depth(&pack_depth(&d)) == d, "cell {cell} code {code} (fill {fill}) altered");
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps = 10_000;
    for i in 0..maps {
        let codes: Vec<u16> = (0..64 * 64)
            .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..=4095) })
            .collect();
        let packed = pack_codes(64, 64, codes.clone()).map_err(|e| e.to_string())?;
        check!(unpack_depth(&packed).codes() == codes.as_slice(), "random map {i} altered");
    }
    let secs = within(started, 10)?;
    Ok(format!("{cases} single-cell cases and {maps} random 64x64 maps bit-exact in {secs:.2} s (limit 10 s)"))
}

fn depth_quantizer() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ranges = [(0.5, 20.0), (0.1, 100.0), (1.0, 1.5)];
    for (near, far) in ranges {
        let q = DepthQuantizer::new(near, far).map_err(|e| e.to_string())?;
        check!(q.dequantize(0).is_none(), "code 0 decodes to a depth");
        for code in 1..=4095u16 {
            let z = q.dequantize(code).ok_or(format!("code {code} has no depth"))?;
            check!(q.quantize(z) == code, "[{near}, {far}] code {code} -> {z} m -> {}", q.quantize(z));
        }
    }
    let q = DepthQuantizer::new(0.5, 20.0).unwrap();
    let pairs = 100_000;
    for _ in 0..pairs {
        let a = rng.random_range(0.5..=20.0);
        let b = rng.random_range(0.5..=20.0);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        let (cn, cf) = (q.quantize(near), q.quantize(far));
        check!((1..=4095).contains(&cn) && (1..=4095).contains(&cf), "in-range depth got an invalid code");
        check!(cn >= cf, "{near} m -> {cn} but {far} m -> {cf}");
    }
    let secs = within(started, 5)?;
    Ok(format!("4095 codes exact for {} ranges, {pairs} monotone pairs in {secs:.2} s (limit 5 s)", ranges.len()))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::y() } else { axis.normalize() };
    Rotation3::from_scaled_axis(axis * rng.random_range(0.0..std::f64::consts::PI)).into_inner()
}

fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Point3<f64> {
    Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let w = 2 * rng.random_range(16..=960u32);
        let h = 2 * rng.random_range(16..=540u32);
        let f = rng.random_range(100.0..3000.0);
        let k = CameraIntrinsics::new(f, f * rng.random_range(0.9..1.1), w as f64 / 2.0, h as f64 / 2.0, w, h)
            .map_err(|e| e.to_string())?;
        let pose = CameraPose::from_center(random_point(&mut rng, 10.0), random_rotation(&mut rng)).map_err(|e| e.to_string())?;
        let cam = CameraModel::new(0, k, pose);
        let u = rng.random_range(0.0..w as f64);
        let v = rng.random_range(0.0..h as f64);
        let p = cam.unproject(u, v, rng.random_range(0.1..50.0)).map_err(|e| e.to_string())?;
        let proj = cam.project(&p);
        let back = cam.unproject(proj.u, proj.v, proj.z).map_err(|e| e.to_string())?;
        worst = worst.max((back - p).norm());
    }
    check!(worst <= 1e-9, "round-trip error {worst:e} m");

    // Fronto-parallel pair: a point at depth Z shifts by f*b/Z pixels, also
    // after its depth went through the 12-bit quantizer.
    let q = DepthQuantizer::new(0.5, 20.0).unwrap();
    let mut worst_px: f64 = 0.0;
    for _ in 0..10_000 {
        let f = rng.random_range(200.0..1500.0);
        let b = rng.random_range(0.05..0.5);
        let k = CameraIntrinsics::new(f, f, 320.0, 180.0, 640, 360).unwrap();
        let left = CameraModel::new(0, k, CameraPose::from_center(Point3::origin(), Matrix3::identity()).unwrap());
        let right = CameraModel::new(1, k, CameraPose::from_center(Point3::new(b, 0.0, 0.0), Matrix3::identity()).unwrap());
        let z = rng.random_range(0.5..20.0);
        let (u, v) = (rng.random_range(0..640) as f64, rng.random_range(0..360) as f64);
        let zq = q.dequantize(q.quantize(z)).unwrap();
        let p = left.unproject(u, v, zq).map_err(|e| e.to_string())?;
        let pr = right.project(&p);
        let expected = u - f * b / z;
        worst_px = worst_px.max((pr.u - expected).abs()).max((pr.v - v).abs());
    }
    check!(worst_px <= 1.0, "disparity off by {worst_px:.3} px");
    Ok(format!("10000 round trips, max error {worst:.1e} m (limit 1e-9); disparity max error {worst_px:.3} px (limit 1)"))
}

fn warp_identity() -> Outcome {
    let rig = default_rig();
    let scene = Scene::by_name("default").unwrap();
    let q = rig.quantizer();
    let cam = rig.camera(4).unwrap();
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    check!((w, h) == (640, 360), "rig renders {w}x{h}");
    let view = render(&scene, cam, Timestamp(0), q);
    let out = forward_warp(&view.color, &view.depth, q, cam, cam, PixelFilter::All, SplatMode::default());
    let (mut valid, mut exact) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if view.depth.codes()[i] == 0 {
                continue;
            }
            valid += 1;
            let c = (y / 2) * (w / 2) + x / 2;
            if out.valid[i]
                && out.color.y[i] == view.color.y[i]
                && out.color.u[c] == view.color.u[c]
                && out.color.v[c] == view.color.v[c]
            {
                exact += 1;
            }
        }
    }
    let frac = exact as f64 / valid as f64;
    check!(frac >= 0.999, "{exact}/{valid} = {:.4}% bit-exact", 100.0 * frac);
    Ok(format!("{exact}/{valid} valid pixels bit-exact at 640x360 ({:.3}%, limit 99.9%)", 100.0 * frac))
}

fn held_out_camera() -> Outcome {
    let started = Instant::now();
    let rig = default_rig();
    let scene = Scene::by_name("default").unwrap();
    let t = Timestamp(0);
    let bg = build_background_model(&rig, BackgroundSource::Oracle(&scene)).map_err(|e| e.to_string())?;
    let target = *rig.camera(5).unwrap();
    let mut frames = BTreeMap::new();
    for id in [3u16, 4, 6] {
        let v = render(&scene, rig.camera(id).unwrap(), t, rig.quantizer());
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
    let out = synthesize(&set, &view, &bg, &rig, &SynthesisConfig::default()).map_err(|e| e.to_string())?;
    let oracle = render(&scene, &target, t, rig.quantizer());
    let q = rig.quantizer();
    let valid = &out.composite.valid;
    let (mut err, mut n) = (0.0, 0usize);
    for (i, ok) in valid.iter().enumerate() {
        if *ok {
            err += (f64::from(q.quantize(out.composite.depth[i])) - f64::from(oracle.depth.codes()[i])).abs();
            n += 1;
        }
    }
    let mae = err / n as f64;
    let frac = out.prefill_valid_fraction();
    let psnr = luma_psnr(&out.composite.color, &oracle.color, Some(valid));
    let secs = within(started, 60)?;
    check!(frac >= 0.95, "valid {:.2}% < 95%", 100.0 * frac);
    check!(mae <= 2.0, "depth MAE {mae:.3} steps > 2");
    check!(psnr >= 30.0, "PSNR {psnr:.2} dB < 30");
    Ok(format!(
        "valid {:.2}% (>= 95), depth MAE {mae:.3} steps (<= 2), PSNR {psnr:.2} dB (>= 30) in {secs:.1} s (limit 60 s)",
        100.0 * frac
    ))
}

/// Nearest-first `(distance, id)` order computed without the library.
fn brute_force(virtual_cam: &CameraModel, rig: &[CameraModel], lambda: f64) -> Vec<u16> {
    let axis = |c: &CameraModel| c.pose.rotation().row(2).transpose();
    let mut d: Vec<(f64, u16)> = rig
        .iter()
        .map(|c| {
            let cos = axis(virtual_cam).dot(&axis(c)).clamp(-1.0, 1.0);
            ((virtual_cam.center() - c.center()).norm() + lambda * cos.acos(), c.id)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, id)| id).collect()
}

fn random_camera(rng: &mut ChaCha8Rng, id: u16) -> CameraModel {
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
    CameraModel::new(id, k, CameraPose::from_center(random_point(rng, 5.0), random_rotation(rng)).unwrap())
}

fn line_camera(id: u16, x: f64) -> CameraModel {
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
    CameraModel::new(id, k, CameraPose::from_center(Point3::new(x, 0.0, 0.0), Matrix3::identity()).unwrap())
}

fn active_changes(rig: &[CameraModel], params: &SelectionParams, path: impl Iterator<Item = CameraModel>) -> usize {
    let mut prev: Option<ViewState> = None;
    let mut changes = 0;
    for (i, v) in path.enumerate() {
        let next = select(&v, rig, prev.as_ref(), params, Timestamp(i as u64));
        if let Some(p) = &prev {
            let a: BTreeSet<_> = p.active.iter().collect();
            let b: BTreeSet<_> = next.active.iter().collect();
            changes += usize::from(a != b);
        }
        prev = Some(next);
    }
    changes
}

fn selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rigs = 1000;
    for trial in 0..rigs {
        let n = rng.random_range(1..=12u16);
        let rig: Vec<CameraModel> = (0..n).map(|id| random_camera(&mut rng, id)).collect();
        let params = SelectionParams { lambda: rng.random_range(0.0..2.0), hysteresis: 0.0 };
        let v = random_camera(&mut rng, 999);
        let order = brute_force(&v, &rig, params.lambda);
        let active: Vec<u16> = order.iter().copied().take(3).collect();
        let subscribed: BTreeSet<u16> = order.iter().copied().take(5).collect();
        let fresh = select(&v, &rig, None, &params, Timestamp(0));
        check!(fresh.active == active && fresh.subscribed == subscribed, "rig {trial}: {fresh:?} vs {active:?} {subscribed:?}");
        // With h = 0 history must not matter either.
        let earlier = select(&random_camera(&mut rng, 999), &rig, None, &params, Timestamp(0));
        let after = select(&v, &rig, Some(&earlier), &params, Timestamp(1));
        check!(after.active == active && after.subscribed == subscribed, "rig {trial} with history: {:?} vs {active:?}", after.active);
    }

    // Oscillation below h/2 around a viewpoint never changes the active set.
    let params = SelectionParams::default();
    let h = params.hysteresis;
    let mut oscillations = 0;
    for _ in 0..200 {
        let n = rng.random_range(4..=12u16);
        let rig: Vec<CameraModel> = (0..n).map(|id| random_camera(&mut rng, id)).collect();
        let v0 = random_camera(&mut rng, 999);
        let dir = random_point(&mut rng, 1.0).coords.normalize();
        let amp = rng.random_range(0.0..h / 2.0);
        let path = (0..200).map(|i| {
            let c = v0.center() + dir * (amp * (i as f64 * 0.7).sin());
            CameraModel::new(999, v0.intrinsics, CameraPose::from_center(c, v0.pose.rotation().transpose()).unwrap())
        });
        let changes = active_changes(&rig, &params, path);
        check!(changes == 0, "{changes} changes at amplitude {amp:.4}");
        oscillations += 1;
    }
    // Straddling every boundary of the line rig, where the sets would flip
    // without hysteresis.
    let line: Vec<CameraModel> = (0..9).map(|i| line_camera(i, f64::from(i))).collect();
    for k in 1..7 {
        let boundary = f64::from(k) + 0.5;
        for amp in [0.01, 0.03, 0.9 * h / 2.0] {
            let path = (0..400).map(|i| line_camera(999, boundary + amp * (i as f64 * 0.9).sin()));
            let changes = active_changes(&line, &params, path);
            check!(changes == 0, "line boundary {boundary}: {changes} changes at amplitude {amp}");
            oscillations += 1;
        }
        // Above h/2 the same oscillation does switch, so the test has teeth.
        let path = (0..400).map(|i| line_camera(999, boundary + 0.06 * (i as f64 * 0.9).sin()));
        check!(active_changes(&line, &params, path) > 0, "amplitude 0.06 never switched at {boundary}");
    }

    let v = line_camera(999, 3.4);
    let s = select(&v, &line, None, &params, Timestamp(0));
    check!(s.active == vec![3, 4, 2], "line example active {:?}", s.active);
    check!(s.subscribed == (1..=5).collect::<BTreeSet<u16>>(), "line example subscribed {:?}", s.subscribed);
    Ok(format!(
        "{rigs} random rigs match brute force, {oscillations} sub-h/2 oscillations with 0 changes, x=3.4 -> active [3, 4, 2] subscribed {{1..5}}"
    ))
}

fn assemble_fresh_fraction(seed: u64, ticks: u64, jitter: i64, loss: f64) -> Result<(usize, usize, usize), String> {
    const T0: u64 = 1_000_000_000_000;
    let config = AssemblerConfig { phase: Some(Timestamp(T0)), ..AssemblerConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut streams = BTreeMap::new();
    for cam in 0..3u16 {
        let mut frames: Vec<(Timestamp, ())> = Vec::new();
        for k in 0..ticks {
            let ts = Timestamp(T0 + k * config.period_us).offset_by(rng.random_range(-jitter..=jitter));
            if loss == 0.0 || !rng.random_bool(loss) {
                frames.push((ts, ()));
            }
        }
        streams.insert(cam, frames);
    }
    let (mut sets, mut fresh, mut stale_le1) = (0, 0, 0);
    for set in assemble(streams, config).map_err(|e| e.to_string())? {
        let set = set.map_err(|e| e.to_string())?;
        sets += 1;
        fresh += usize::from(set.is_fresh());
        stale_le1 += usize::from(set.max_staleness() <= 1);
    }
    Ok((sets, fresh, stale_le1))
}

fn sync() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let server = ClockModel::perfect();
    let mut exchanges = 0;
    for round in 0..3334 {
        for node in 0..3 {
            let offset = match (round, node) {
                (0, 0) => -1_000_000,
                (0, 1) => 1_000_000,
                (0, 2) => 0,
                _ => rng.random_range(-1_000_000..=1_000_000i64),
            };
            let client = ClockModel::new(offset, 0.0, Timestamp(0)).map_err(|e| e.to_string())?;
            let delay = rng.random_range(0..50_000);
            let send_at = Timestamp(1_000_000_000_000 + rng.random_range(0..1_000_000_000));
            let [t1, t2, t3, t4] = simulate_exchange(&client, &server, send_at, delay, rng.random_range(0..5_000), delay);
            let est = estimate_offset(t1, t2, t3, t4).map_err(|e| e.to_string())?;
            check!(est.offset_us == -offset, "node offset {offset} estimated as {}", -est.offset_us);
            check!(est.delay_us == delay, "delay {delay} estimated as {}", est.delay_us);
            exchanges += 1;
        }
    }

    let tolerance = AssemblerConfig::default().tolerance_us as i64;
    let (sets, fresh, _) = assemble_fresh_fraction(8, 1000, tolerance - 1, 0.0)?;
    check!(sets == 1000 && fresh == 1000, "jitter below tolerance: {fresh}/{sets} fresh sets");

    let mut worst = f64::INFINITY;
    for seed in 0..10 {
        let (sets, _, ok) = assemble_fresh_fraction(100 + seed, 1000, tolerance / 2, 0.01)?;
        check!(sets >= 990, "1% loss: only {sets} sets");
        worst = worst.min(ok as f64 / sets as f64);
    }
    check!(worst >= 0.99, "1% loss: staleness <= 1 in only {:.2}% of sets", 100.0 * worst);
    Ok(format!(
        "{exchanges} exchanges exact, 1000/1000 fresh sets with jitter < tolerance, staleness <= 1 in >= {:.2}% of sets at 1% loss (limit 99%)",
        100.0 * worst
    ))
}

fn random_message(rng: &mut ChaCha8Rng) -> MediaMessage {
    let w = 2 * rng.random_range(1..=32u32);
    let h = 2 * rng.random_range(1..=32u32);
    let id = rng.random_range(0..64u16);
    let ts = Timestamp(rng.random());
    let compress = rng.random_bool(0.5);
    let kind = rng.random_range(0..3);
    let mut bytes = |n: usize| (0..n).map(|_| rng.random::<u8>()).collect::<Vec<u8>>();
    match kind {
        0 => {
            let (y, u, v) = (bytes((w * h) as usize), bytes((w * h / 4) as usize), bytes((w * h / 4) as usize));
            MediaMessage::color(id, ts, &I420Frame::from_planes(w, h, y, u, v).unwrap(), compress)
        }
        1 => {
            let codes = (0..w * h).map(|_| rng.random_range(0..=4095u16)).collect();
            MediaMessage::depth(id, ts, &pack_codes(w, h, codes).unwrap(), compress)
        }
        _ => {
            let bits = (0..w * h).map(|_| rng.random_bool(0.3)).collect();
            MediaMessage::mask(id, ts, &Mask::from_bits(w, h, bits).unwrap(), compress)
        }
    }
}

fn transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let messages: Vec<MediaMessage> = (0..10_000).map(|_| random_message(&mut rng)).collect();
    for (i, m) in messages.iter().enumerate() {
        let bytes = encode_media(m);
        let back = decode_media(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        check!(&back == m && encode_media(&back) == bytes, "message {i} changed in a round trip");
    }
    // Streams of 100 messages cut at random points.
    for (s, chunk) in messages.chunks(100).enumerate() {
        let stream: Vec<u8> = chunk.iter().flat_map(encode_media).collect();
        let mut dec = MediaStreamDecoder::new();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < stream.len() {
            let end = (pos + rng.random_range(1..=4096)).min(stream.len());
            dec.feed(&stream[pos..end]);
            pos = end;
            while let Some(m) = dec.next_message().map_err(|e| format!("stream {s}: {e}"))? {
                out.push(m);
            }
        }
        check!(out.as_slice() == chunk && dec.buffered() == 0, "stream {s} decoded differently");
    }
    let detected = kill_detection()?;
    Ok(format!(
        "10000 messages round-trip, 100 split streams bit-exact; kill detected {:.2} s after kill on a fake clock (limit 5 s)",
        detected as f64 / 1e6
    ))
}

fn small_rig(width: u32, height: u32) -> Rig {
    ArcRigSpec::default().with_resolution(width, height).build()
}

fn server_config(mode: RunMode) -> ServerConfig {
    ServerConfig { media_port: 0, control_port: 0, bridge_port: 0, output: OutputEncoding::Raw, mode, ..ServerConfig::default() }
}

fn start_server(rig: &Rig, mode: RunMode, clock: SharedClock) -> Result<ServerHandle, String> {
    let bg = build_background_model(rig, BackgroundSource::Oracle(&Scene::by_name("default").unwrap())).map_err(|e| e.to_string())?;
    start(&server_config(mode), rig.clone(), bg, clock).map_err(|e| e.to_string())
}

fn spawn_nodes(server: &ServerHandle, rig: &Rig, frames: Option<u64>, clock: &SharedClock) -> Vec<CaptureNode> {
    rig.ids()
        .into_iter()
        .map(|id| {
            let cam = *rig.camera(id).unwrap();
            let scene = Scene::by_name("default").unwrap();
            let mut c = CaptureConfig::new(cam, *rig.quantizer(), scene, server.media_addr, server.control_addr);
            c.frames = frames;
            c.start = Some(Timestamp(0));
            CaptureNode::spawn(c, clock.clone())
        })
        .collect()
}

fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}

/// Fake-clock time in µs from killing node 4 until the server reports it lost.
fn kill_detection() -> Result<u64, String> {
    let rig = small_rig(64, 36);
    let clock = Arc::new(ManualClock::new(Timestamp(1_000_000_000_000)));
    let shared: SharedClock = clock.clone();
    let server = start_server(&rig, RunMode::Lockstep, shared.clone())?;
    let nodes = spawn_nodes(&server, &rig, None, &shared);
    let result = (|| {
        check!(wait_until(Duration::from_secs(20), || server.stats().ticks > 20), "server never started ticking");
        nodes[4].kill();
        let killed_at = clock.now();
        // 50 ms fake steps with real pauses so the server threads keep up.
        loop {
            std::thread::sleep(Duration::from_millis(30));
            let elapsed = clock.now().0 - killed_at.0;
            if server.lost_cameras().contains(&4) {
                check!(server.lost_cameras().len() == 1, "other cameras lost too: {:?}", server.lost_cameras());
                return Ok(elapsed);
            }
            check!(elapsed < 5_000_000, "camera 4 not reported lost within 5 s of fake time");
            clock.advance(50_000);
        }
    })();
    for n in &nodes {
        n.kill();
    }
    server.shutdown();
    result
}

fn loopback() -> Outcome {
    const TICKS: u64 = 300;
    let started = Instant::now();
    let rig = small_rig(320, 180);
    let clock: SharedClock = Arc::new(SystemClock);
    let server = start_server(&rig, RunMode::Lockstep, clock.clone())?;
    let viewer = ViewerClient::connect(server.control_addr, server.media_addr).map_err(|e| e.to_string())?;
    viewer.send_viewpoint(&arc_camera(&rig, 0.0), 0).map_err(|e| e.to_string())?;
    check!(wait_until(Duration::from_secs(5), || server.viewer_connected()), "viewer not registered");
    let nodes = spawn_nodes(&server, &rig, Some(TICKS), &clock);

    let mut ticks = Vec::new();
    let (mut entered, mut left, mut current) = (Vec::<u16>::new(), Vec::<u16>::new(), Vec::<u16>::new());
    while (ticks.len() as u64) < TICKS {
        match viewer.recv_timeout(Duration::from_secs(20)) {
            Some(ViewerEvent::Frame(msg)) => {
                check!(msg.msg_type == MediaType::Color && (msg.width, msg.height) == (320, 180), "unexpected frame {:?}", msg.header());
                ticks.push(msg.capture_ts.0);
                // The sweep reaches the last camera at frame 250 and stays there.
                let s = (ticks.len() as f64 / 250.0).min(1.0);
                viewer.send_viewpoint(&arc_camera(&rig, s), ticks.len() as u64).map_err(|e| e.to_string())?;
            }
            Some(ViewerEvent::Control(ControlMessage::SelectionReport { active, .. })) => {
                let mut sorted = active.clone();
                sorted.sort_unstable();
                for id in &sorted {
                    check!(!left.contains(id), "camera {id} re-entered the active set");
                    if !entered.contains(id) {
                        entered.push(*id);
                    }
                }
                left.extend(current.iter().filter(|id| !sorted.contains(id)));
                current = sorted;
            }
            Some(ViewerEvent::Control(_)) => {}
            Some(ViewerEvent::Closed) => return Err(format!("viewer closed after {} frames", ticks.len())),
            None => return Err(format!("stalled after {} frames: {:?}", ticks.len(), server.stats())),
        }
    }
    for n in nodes {
        n.join().map_err(|e| e.to_string())?;
    }
    let stats = server.stats();
    server.shutdown();
    let secs = within(started, 120)?;
    check!(stats.frames_synthesized == TICKS, "{} frames synthesized", stats.frames_synthesized);
    check!(stats.incomplete_sets == 0, "{} incomplete sets", stats.incomplete_sets);
    check!(ticks.windows(2).all(|w| w[1] > w[0]), "output ticks not monotone");
    check!(entered == (0..9).collect::<Vec<u16>>(), "cameras became active in order {entered:?}");
    Ok(format!(
        "{TICKS} ticks at 320x180, 0 incomplete sets, monotone ticks, cameras activated in order {entered:?} in {secs:.1} s (limit 120 s)"
    ))
}

fn bench() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_fvv"))
        .args(["bench", "--resolution", "640x360", "--ticks", "30", "--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    check!(out.status.success(), "fvv bench failed: {}", String::from_utf8_lossy(&out.stderr));
    for stage in ["assembly", "warp", "blend", "composite", "encode", "total"] {
        check!(stdout.lines().any(|l| l.starts_with(stage)), "no {stage} row in\n{stdout}");
    }
    let fps = stdout
        .lines()
        .find_map(|l| l.strip_prefix("wall fps "))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or(format!("no fps line in\n{stdout}"))?;
    check!(fps > 0.0, "fps {fps}");
    Ok(format!("table with 5 stages at 640x360, {fps:.1} fps (test profile; release numbers in README)"))
}
