use std::time::Instant;

use aapt_core::config::RunConfig;
use aapt_core::world::ControlSignal;
use aapt_service::{codes, Client, ModelBundle, Server, ServerConfig, ServerHandle, SessionMessage};
use base64::Engine;

fn serve(cfg: &RunConfig, fps: f32) -> ServerHandle {
    let model = ModelBundle::untrained(cfg, 11).unwrap();
    Server::bind(model, &ServerConfig { host: "127.0.0.1".into(), port: 0, fps }).unwrap().spawn().unwrap()
}

fn tiny() -> RunConfig {
    RunConfig::tiny()
}

#[test]
fn paced_rate_matches_target() {
    let h = serve(&tiny(), 8.0);
    let mut c = Client::connect(h.addr).unwrap();
    let started = c.start(Some(4), None, None).unwrap();
    assert_eq!(started.fps, 8.0);
    c.run_trace(&[ControlSignal::default()]).unwrap();
    let t0 = Instant::now();
    let r = c.run_trace(&vec![ControlSignal::default(); 24]).unwrap();
    let fps = 24.0 / t0.elapsed().as_secs_f64();
    assert!((7.2..=8.8).contains(&fps), "measured {fps} fps");
    assert!(r.errors.is_empty());
    c.close();
}

#[test]
fn slow_model_degrades_without_failing() {
    let mut cfg = tiny();
    cfg.set("model.dim", "128").unwrap();
    cfg.set("model.layers", "4").unwrap();
    let h = serve(&cfg, 1000.0);
    let mut c = Client::connect(h.addr).unwrap();
    c.start(Some(4), None, None).unwrap();
    let t0 = Instant::now();
    let r = c.run_trace(&vec![ControlSignal::default(); 12]).unwrap();
    let fps = 12.0 / t0.elapsed().as_secs_f64();
    assert!(fps < 1000.0, "{fps}");
    let mean_ms = r.stats.iter().map(|s| s.2).sum::<f64>() / r.stats.len() as f64;
    // Stats report the real step time, which bounds the achieved rate.
    assert!(fps <= 1000.0 / mean_ms * 1.05, "fps {fps} vs step {mean_ms} ms");
    assert!(r.errors.is_empty());
}

#[test]
fn stats_count_one_forward_per_latent_frame() {
    let h = serve(&tiny(), 50.0);
    let mut c = Client::connect(h.addr).unwrap();
    let s = c.start(Some(2), None, None).unwrap();
    assert_eq!(s.first.frame_index, 0);
    let r = c.run_trace(&vec![ControlSignal::new(1.0, 0.0, 0.0, 0.0); 6]).unwrap();
    for (k, st) in r.stats.iter().enumerate() {
        assert_eq!(st.3, k + 1);
        assert_eq!(st.1, k + 1);
    }
    let idx: Vec<u32> = r.frames.iter().map(|f| f.frame_index).collect();
    assert!(idx.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(idx[0], 1);
    assert_eq!(r.stats.last().unwrap().0, *idx.last().unwrap());
}

#[test]
fn control_after_end_session_is_closed() {
    let h = serve(&tiny(), 50.0);
    let mut c = Client::connect(h.addr).unwrap();
    c.control(&ControlSignal::default()).unwrap();
    assert!(matches!(c.recv_msg().unwrap(), SessionMessage::Error { code, .. } if code == codes::NOT_STARTED));
    c.start(Some(2), None, None).unwrap();
    c.end().unwrap();
    c.control(&ControlSignal::new(1.0, 0.0, 0.0, 0.0)).unwrap();
    loop {
        match c.recv_msg().unwrap() {
            SessionMessage::Error { code, .. } => {
                assert_eq!(code, codes::CLOSED);
                break;
            }
            SessionMessage::Stats { .. } => {}
            m => panic!("unexpected {m:?}"),
        }
    }
    c.send(&SessionMessage::StartSession { seed: Some(1), image: None, prompt_id: None }).unwrap();
    assert!(matches!(c.recv_msg().unwrap(), SessionMessage::Error { code, .. } if code == codes::ALREADY_STARTED));
}

#[test]
fn malformed_requests_get_errors() {
    let h = serve(&tiny(), 50.0);
    let mut c = Client::connect(h.addr).unwrap();
    c.send_raw("{not json").unwrap();
    assert!(matches!(c.recv_msg().unwrap(), SessionMessage::Error { code, .. } if code == codes::BAD_REQUEST));
    c.send(&SessionMessage::StartSession { seed: None, image: Some("AAAA".into()), prompt_id: None }).unwrap();
    assert!(matches!(c.recv_msg().unwrap(), SessionMessage::Error { code, .. } if code == codes::BAD_REQUEST));
    c.send(&SessionMessage::StartSession { seed: None, image: None, prompt_id: None }).unwrap();
    assert!(matches!(c.recv_msg().unwrap(), SessionMessage::Error { code, .. } if code == codes::BAD_REQUEST));
}

#[test]
fn image_start_echoes_its_frame_size() {
    let cfg = tiny();
    let h = serve(&cfg, 50.0);
    let mut c = Client::connect(h.addr).unwrap();
    let rgb = vec![128u8; 3 * cfg.height * cfg.width];
    let b64 = base64::engine::general_purpose::STANDARD.encode(&rgb);
    let s = c.start(None, Some(b64), Some(1)).unwrap();
    assert_eq!((s.width as usize, s.height as usize), (cfg.width, cfg.height));
    assert_eq!(s.first.rgb.len(), rgb.len());
}

#[test]
fn controls_reach_the_immediately_next_frame_and_sessions_are_isolated() {
    let h = serve(&tiny(), 20.0);
    let zero = ControlSignal::default();
    let pan = ControlSignal::new(2.0, 0.0, 0.0, 0.0);
    let k = 3;
    let run = |trace: Vec<ControlSignal>| {
        let mut c = Client::connect(h.addr).unwrap();
        c.start(Some(8), None, None).unwrap();
        c.run_trace(&trace).unwrap()
    };
    let still = run(vec![zero; 6]);
    let mut trace = vec![zero; 6];
    trace[k] = pan;
    let steered = run(trace);
    let per = still.frames.len() / 6;
    let bytes = |r: &aapt_service::Received, j: usize| r.frames[j * per..(j + 1) * per].iter().flat_map(|f| f.rgb.clone()).collect::<Vec<u8>>();
    for j in 0..k {
        assert_eq!(bytes(&still, j), bytes(&steered, j), "latent frame {j} changed before the control");
    }
    assert_ne!(bytes(&still, k), bytes(&steered, k), "control did not reach latent frame {k}");
}
