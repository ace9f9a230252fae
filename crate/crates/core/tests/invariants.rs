//! Property checks of the structural invariants.

use aapt_core::backbone::{build_mask, Backbone, BackboneConfig, FrameInput, Provenance, TokenLayout};
use aapt_core::checkpoint::Checkpoint;
use aapt_core::config::{RunConfig, Stage};
use aapt_core::eval::gaussian_frechet;
use aapt_core::stages::adversarial::{rpgan_loss, Side};
use aapt_core::stages::diffusion::shift_timestep;
use aapt_core::stream::FrameOut;
use aapt_core::{Graph, ParamSet, Tensor};
use proptest::prelude::*;

fn small(window_n: usize) -> BackboneConfig {
    BackboneConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        prompt_tokens: 2,
        latent_h: 2,
        latent_w: 2,
        window_n,
        latent_channels: 3,
        control_channels: 4,
        mlp_ratio: 2,
        time_embed_dim: 8,
        ..BackboneConfig::desk()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn mask_is_prompt_sink_and_window(p in 1usize..4, frames in 1usize..7, tpf in 1usize..4, n in 1usize..6) {
        let layout = TokenLayout::new(p, frames, tpf);
        let m = build_mask(&layout, n);
        let t = p + frames * tpf;
        prop_assert_eq!(m.len(), t * t);
        let frame_of = |i: usize| if i < p { None } else { Some((i - p) / tpf) };
        for i in 0..t {
            for j in 0..t {
                let want = match (frame_of(i), frame_of(j)) {
                    (None, None) | (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (Some(q), Some(k)) => k <= q && (k == 0 || q - k < n),
                };
                prop_assert_eq!(m[i * t + j], want, "query {} key {}", i, j);
            }
        }
    }

    #[test]
    fn shifted_timestep_is_monotone_in_unit_interval(a in 0.0f32..1.0, b in 0.0f32..1.0, s in 1.0f32..40.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (x, y) = (shift_timestep(lo, s).unwrap(), shift_timestep(hi, s).unwrap());
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= y);
        prop_assert!(x >= lo - 1e-6);
    }

    #[test]
    fn relativistic_loss_ignores_common_shifts(
        pairs in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..8),
        c in -20.0f32..20.0,
    ) {
        let g = Graph::no_grad();
        let col = |x: Vec<f32>| g.constant(&Tensor::new(vec![x.len(), 1], x).unwrap());
        let fake: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let real: Vec<f32> = pairs.iter().map(|p| p.1).collect();
        for side in [Side::Generator, Side::Discriminator] {
            let a = rpgan_loss(col(fake.clone()), col(real.clone()), side).unwrap().item();
            let b = rpgan_loss(col(fake.iter().map(|v| v + c).collect()), col(real.iter().map(|v| v + c).collect()), side).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..20),
    ) {
        let ab = gaussian_frechet(&a, &b).unwrap();
        let ba = gaussian_frechet(&b, &a).unwrap();
        prop_assert!(ab >= -1e-6);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(gaussian_frechet(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(
        tensors in prop::collection::vec(prop::collection::vec(any::<f32>(), 1..20), 1..5),
        stage in 0usize..4,
    ) {
        let stage = [Stage::Codec, Stage::Stage1, Stage::Stage2, Stage::Stage3][stage];
        let mut ps = ParamSet::new();
        for (i, t) in tensors.iter().enumerate() {
            ps.push(format!("p{i}"), Tensor::new(vec![t.len()], t.clone()).unwrap());
        }
        let mut c = Checkpoint::new(stage, &RunConfig::tiny());
        c.insert_group("gen", &ps);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.stage, stage);
        prop_assert_eq!(back.run_config().unwrap(), RunConfig::tiny());
        let g = back.group("gen").unwrap();
        for (a, b) in ps.tensors().iter().zip(g.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn frame_messages_round_trip(w in 1u16..9, h in 1u16..9, index in any::<u32>(), seed in any::<u8>()) {
        let rgb: Vec<u8> = (0..3 * w as usize * h as usize).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let f = FrameOut { frame_index: index, width: w, height: h, rgb };
        prop_assert_eq!(FrameOut::decode(&f.encode()).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn eviction_keeps_first_frame_and_last_window(n in 1usize..5, len in 1usize..10) {
        let cfg = small(n);
        let m = Backbone::new(cfg.clone(), 1).unwrap();
        let g = Graph::no_grad();
        let b = m.bind_const(&g);
        let mut cache = b.prompt_cache(0).unwrap();
        let x = g.constant(&Tensor::ones(&[cfg.tokens_per_frame(), cfg.latent_channels]));
        let c = g.constant(&Tensor::zeros(&[1, cfg.control_channels]));
        let mut bytes = Vec::new();
        for k in 0..len {
            b.forward_step(&mut cache, &FrameInput { noisy: x, recycled: x, control: c, t: 0.5 }, k, Provenance::Real).unwrap();
            cache.evict();
            let want: Vec<usize> = std::iter::once(0).chain((1..=k).filter(|&j| j + n > k)).collect();
            prop_assert_eq!(cache.resident_frames(), want);
            bytes.push(cache.nbytes());
        }
        if len > n + 1 {
            prop_assert!(bytes[n + 1..].iter().all(|&v| v == bytes[n]));
        }
    }
}
