mod common;

use common::*;
use latte_core::analysis::temporal_coherence;
use latte_core::backbone::{AttnRole, BlockKind, CondMode, Denoiser, Variant};
use latte_core::data::{
    build_joint_batch, clip_sample, clip_span, hflip_augment, import_videos, read_clip_dir, read_pnm,
    synth_moving_shapes, write_clip_frames, write_pnm, Codec, MovingShapes, VideoClip,
};
use latte_core::diffusion::{training_losses, DiffusionSchedule};
use latte_core::embedding::{Conditioning, LatentShape, TemporalPos, VideoLatent};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn centroid(clip: &VideoClip, f: usize) -> (f64, f64) {
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    let base = clip.frame(0).iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    for y in 0..clip.height {
        for x in 0..clip.width {
            let w = clip.frame(f)[y * clip.width + x] as f64 - base;
            sx += w * x as f64;
            sy += w * y as f64;
            m += w;
        }
    }
    (sx / m, sy / m)
}

#[test]
fn synthetic_clips_are_deterministic_and_quantized() {
    let a = synth_moving_shapes(7, 8, 32, 32, 4).unwrap();
    let b = synth_moving_shapes(7, 8, 32, 32, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_moving_shapes(8, 8, 32, 32, 4).unwrap());
    for &v in &a.data {
        assert!((-1.0..=1.0).contains(&v));
        let k = (v as f64 + 1.0) * 127.5;
        assert!((k - k.round()).abs() < 1e-4);
    }
    assert!(synth_moving_shapes(0, 8, 7, 32, 4).is_err());
}

#[test]
fn classes_move_in_different_directions() {
    let gen = MovingShapes {
        height: 32,
        width: 32,
        channels: 1,
        num_classes: 4,
    };
    let disp = |class| {
        let clip = gen.clip_with_class(3, 4, class).unwrap();
        let (x0, y0) = centroid(&clip, 0);
        let (x1, y1) = centroid(&clip, 1);
        (x1 - x0, y1 - y0)
    };
    let d: Vec<(f64, f64)> = (0..4).map(disp).collect();
    for i in 0..4 {
        let (dx, dy) = gen.direction(i);
        // displacement points along the class direction
        assert!(d[i].0 * dx + d[i].1 * dy > 0.5, "class {i}: {:?}", d[i]);
        for j in 0..i {
            assert!((d[i].0 - d[j].0).abs() + (d[i].1 - d[j].1).abs() > 0.5);
        }
    }
}

#[test]
fn consecutive_frames_beat_shuffled_frames() {
    let mut r = rng(0);
    for seed in 0..20 {
        let clip = synth_moving_shapes(seed, 16, 32, 32, 4).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        while order.windows(2).any(|w| w[1] == w[0] + 1) {
            order.shuffle(&mut r);
        }
        let shuffled: Vec<f64> = order.iter().flat_map(|&f| clip.frame(f).iter().map(|&v| v as f64)).collect();
        let ordered = temporal_coherence(&clip.as_f64(), 16).unwrap();
        let base = temporal_coherence(&shuffled, 16).unwrap();
        assert!(ordered > base, "seed {seed}: {ordered} vs {base}");
    }
}

fn long_video(frames: usize) -> VideoClip {
    let data = (0..frames * 4).map(|i| ((i / 4) as f32 / frames as f32) * 2.0 - 1.0).collect();
    VideoClip::new(frames, 2, 2, 1, data).unwrap()
}

fn frame_ids(clip: &VideoClip, source_frames: usize) -> Vec<usize> {
    (0..clip.frames)
        .map(|f| (((clip.frame(f)[0] + 1.0) / 2.0 * source_frames as f32).round()) as usize)
        .collect()
}

#[test]
fn clip_sampling_examples() {
    let video = long_video(20);
    let clip = clip_sample(&video, 1, 5, &mut rng(1)).unwrap();
    let ids = frame_ids(&clip, 20);
    assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(clip_span(16, 3), 46);
    let video = long_video(46);
    for seed in 0..10 {
        let clip = clip_sample(&video, 3, 16, &mut rng(seed)).unwrap();
        let ids = frame_ids(&clip, 46);
        assert_eq!(ids[0], 0);
        assert_eq!(ids[15], 45);
    }
    assert!(clip_sample(&long_video(45), 3, 16, &mut rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn clip_sampler_stays_in_range(len in 1usize..60, interval in 1usize..6, frames in 1usize..12, seed in any::<u64>()) {
        let video = long_video(len);
        match clip_sample(&video, interval, frames, &mut rng(seed)) {
            Ok(clip) => {
                prop_assert!(clip_span(frames, interval) <= len);
                let ids = frame_ids(&clip, len);
                prop_assert!(ids.iter().all(|&i| i < len));
                prop_assert!(ids.windows(2).all(|w| w[1] == w[0] + interval));
            }
            Err(_) => prop_assert!(clip_span(frames, interval) > len),
        }
    }

    #[test]
    fn codec_roundtrip_is_bit_exact(seed in any::<u64>(), factor in 1usize..5, c3 in any::<bool>()) {
        let channels = if c3 { 3 } else { 1 };
        let mut r = rng(seed);
        let (h, w) = (factor * 3, factor * 2);
        let data: Vec<f32> = (0..2 * h * w * channels).map(|_| (r.gen_range(0..=255u8) as f64 / 127.5 - 1.0) as f32).collect();
        let clip = VideoClip::new(2, h, w, channels, data).unwrap();
        let codec = Codec::new(factor).unwrap();
        let l32 = codec.encode::<f32>(&clip).unwrap();
        prop_assert_eq!(&codec.decode(&l32).unwrap().data, &clip.data);
        let l64 = codec.encode::<f64>(&clip).unwrap();
        prop_assert_eq!(&codec.decode(&l64).unwrap().data, &clip.data);
    }
}

#[test]
fn codec_examples() {
    let clip = synth_moving_shapes(2, 3, 32, 32, 4).unwrap();
    let codec = Codec::default();
    let z = codec.encode::<f64>(&clip).unwrap();
    assert_eq!(z.shape(), LatentShape::new(3, 4, 4, 64));
    assert_eq!(codec.decode(&z).unwrap().data, clip.data);
    let mut a: Vec<f64> = clip.as_f64().iter().map(|v| v * v).collect();
    let mut b: Vec<f64> = z.tensor().data().iter().map(|v| v * v).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let odd = synth_moving_shapes(2, 1, 12, 16, 4).unwrap();
    assert!(codec.encode::<f64>(&odd).is_err());
    // the desk dataset: 32×32 grayscale at factor 2 is a 16×16×4 latent
    let desk = Codec::new(2).unwrap().encode::<f32>(&clip).unwrap();
    assert_eq!(desk.shape(), LatentShape::new(3, 16, 16, 4));
}

fn latent_clip(frames: usize, seed: u64) -> VideoLatent<f64> {
    latent(LatentShape::new(frames, 2, 2, 1), seed)
}

#[test]
fn joint_batch_examples() {
    let pool: Vec<_> = (0..5).map(|s| latent_clip(16, 100 + s)).collect();
    let clips = vec![(latent_clip(16, 1), Some(2)), (latent_clip(16, 2), None)];
    let plain = build_joint_batch(&clips, &pool, 0, &mut rng(0)).unwrap();
    assert_eq!(plain.temporal_valid, 16);
    assert_eq!(plain.latents[0].tensor().data(), clips[0].0.tensor().data());
    let joint = build_joint_batch(&clips, &pool, 4, &mut rng(0)).unwrap();
    assert_eq!(joint.temporal_valid, 16);
    assert_eq!(joint.labels, vec![Some(2), None]);
    for (out, (src, _)) in joint.latents.iter().zip(&clips) {
        assert_eq!(out.shape().frames, 20);
        assert_eq!(&out.tensor().data()[..64], src.tensor().data());
        // every appended frame is some frame of some pool clip
        for f in 16..20 {
            let frame = &out.tensor().data()[f * 4..(f + 1) * 4];
            assert!(pool.iter().any(|p| p.tensor().data().chunks(4).any(|c| c == frame)));
        }
    }
    assert!(build_joint_batch(&clips, &[], 2, &mut rng(0)).is_err());
    let mismatched = vec![(latent_clip(16, 1), None), (latent_clip(8, 2), None)];
    assert!(build_joint_batch(&mismatched, &pool, 1, &mut rng(0)).is_err());
}

#[test]
fn hflip_examples() {
    let clip = MovingShapes {
        height: 8,
        width: 12,
        channels: 3,
        num_classes: 4,
    }
    .clip(5, 3)
    .unwrap();
    let mut r = rng(9);
    for _ in 0..20 {
        assert_eq!(hflip_augment(&clip, 0.0, &mut r), (clip.clone(), false));
    }
    let (once, flipped) = hflip_augment(&clip, 1.0, &mut r);
    assert!(flipped);
    assert_ne!(once, clip);
    // every frame flips, pixel triples stay intact
    for f in 0..3 {
        for y in 0..8 {
            for x in 0..12 {
                let a = &clip.frame(f)[(y * 12 + x) * 3..(y * 12 + x + 1) * 3];
                let b = &once.frame(f)[(y * 12 + 11 - x) * 3..(y * 12 + 12 - x) * 3];
                assert_eq!(a, b);
            }
        }
    }
    assert_eq!(hflip_augment(&once, 1.0, &mut r).0, clip);
    let n = 10_000;
    let flips = (0..n).filter(|_| hflip_augment(&clip, 0.5, &mut r).1).count();
    let frac = flips as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

#[test]
fn frame_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for channels in [1, 3] {
        let clip = MovingShapes {
            height: 8,
            width: 16,
            channels,
            num_classes: 4,
        }
        .clip(1, 5)
        .unwrap();
        let sub = dir.path().join(format!("video_c{channels}"));
        write_clip_frames(&sub, &clip).unwrap();
        let back = read_clip_dir(&sub).unwrap();
        assert_eq!(back.data, clip.data);
        assert_eq!((back.frames, back.height, back.width, back.channels), (5, 8, 16, channels));
    }
    let videos = import_videos(dir.path()).unwrap();
    assert_eq!(videos.len(), 2);
    assert_eq!(videos[1].channels, 3);
}

#[test]
fn pnm_header_comments_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.pgm");
    std::fs::write(&p, b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff").unwrap();
    let (w, h, c, px) = read_pnm(&p).unwrap();
    assert_eq!((w, h, c), (2, 1, 1));
    assert_eq!(px, vec![-1.0, 1.0]);
    write_pnm(&dir.path().join("a.pgm"), 2, 1, 1, &[1.0, 1.0]).unwrap();
    let clip = read_clip_dir(dir.path()).unwrap();
    // a.pgm sorts before b.pgm
    assert_eq!(clip.frame(0), &[1.0, 1.0]);
    assert_eq!(clip.frame(1), &[-1.0, 1.0]);
    std::fs::write(dir.path().join("c.pgm"), b"P5\n2 1\n65535\n\x00\x00\x00\x00").unwrap();
    assert!(read_clip_dir(dir.path()).is_err());
}

fn temporal_param(kind: BlockKind, name: &str) -> bool {
    match kind {
        BlockKind::Temporal => true,
        BlockKind::Sequential => name.contains(".attn_t.") || name.contains(".norm_t."),
        _ => false,
    }
}

#[test]
fn appended_frames_get_zero_temporal_weight() {
    for variant in ALL_VARIANTS {
        for cond in COND_MODES {
            for pos in POS_MODES {
                let config = tiny(variant, cond, pos);
                let store = random_store(&config, 40);
                let v = latent_clip(7, 41);
                let model = Denoiser::traced(&config, &store);
                model.forward(&v, &Conditioning::unconditional(5), Some(4)).unwrap();
                let trace = model.take_trace();
                let temporal: Vec<_> = trace.iter().filter(|r| r.role == AttnRole::Temporal).collect();
                assert!(!temporal.is_empty());
                for rec in temporal {
                    let sk = *rec.probs.shape().last().unwrap();
                    for row in rec.probs.data().chunks(sk) {
                        assert!(row[sk - 3..].iter().all(|&w| w == 0.0), "{variant:?} {cond:?} {pos:?}");
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn temporal_gradients_ignore_appended_frames() {
    let s = DiffusionSchedule::linear(20).unwrap();
    for variant in [Variant::Interleaved, Variant::LateFusion, Variant::Sequential] {
        for cond in COND_MODES {
            for pos in POS_MODES {
                let config = tiny(variant, cond, pos);
                let store = random_store(&config, 50);
                let video = latent_clip(4, 51);
                let plan = config.block_plan();
                let grads = |extra_seed: u64| {
                    let pool = vec![latent_clip(4, extra_seed)];
                    let batch = build_joint_batch(&[(video.clone(), None)], &pool, 3, &mut rng(extra_seed)).unwrap();
                    let eps = latent(batch.latents[0].shape(), 52);
                    let model = Denoiser::new(&config, &store);
                    let out = training_losses(
                        &s,
                        |z, t| model.forward(z, &Conditioning::unconditional(t), Some(batch.temporal_valid)),
                        &batch.latents[0],
                        9,
                        &eps,
                        0.001,
                    )
                    .unwrap();
                    let g = out.total.backward().unwrap();
                    let mut picked = Vec::new();
                    for (name, t) in store.trainable() {
                        let block = name.strip_prefix("blocks.").and_then(|r| r.split('.').next()?.parse::<usize>().ok());
                        if let Some(i) = block {
                            if temporal_param(plan[i], name) {
                                picked.push((name.to_string(), g.wrt(t)));
                            }
                        }
                    }
                    picked
                };
                let a = grads(60);
                let b = grads(61);
                assert!(!a.is_empty());
                assert!(a.iter().any(|(_, g)| g.iter().any(|&v| v != 0.0)));
                for ((na, ga), (_, gb)) in a.iter().zip(&b) {
                    let same = ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits());
                    assert!(same, "{variant:?} {cond:?} {pos:?} {na}");
                }
            }
        }
    }
}

#[test]
fn appended_frame_content_changes_spatial_gradients() {
    // control: the perturbation is not a no-op elsewhere
    let config = tiny(Variant::Interleaved, CondMode::SAdaln, TemporalPos::Absolute);
    let store = random_store(&config, 50);
    let s = DiffusionSchedule::linear(20).unwrap();
    let g = |seed: u64| {
        let pool = vec![latent_clip(4, seed)];
        let batch = build_joint_batch(&[(latent_clip(4, 51), None)], &pool, 3, &mut rng(seed)).unwrap();
        let eps = latent(batch.latents[0].shape(), 52);
        let model = Denoiser::new(&config, &store);
        let out = training_losses(
            &s,
            |z, t| model.forward(z, &Conditioning::unconditional(t), Some(4)),
            &batch.latents[0],
            9,
            &eps,
            0.001,
        )
        .unwrap();
        out.total.backward().unwrap().wrt(store.get("blocks.0.attn.q.weight").unwrap())
    };
    assert_ne!(g(60), g(61));
}
