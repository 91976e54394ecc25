use dynsplat::config::TrainConfig;
use dynsplat::img::Image;
use dynsplat::metrics::psnr;
use dynsplat::objective::{motion_loss, photometric, ssim, topk_count, topk_frame_loss, LossConfig};
use dynsplat::quat;
use dynsplat::sampling::{GroupSampler, SamplerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-2.0..2.0f64).prop_filter("away from zero", |q| quat::norm(q) > 1e-3)
}

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, w * h * 3).prop_map(move |data| Image::from_data(w, h, data).unwrap())
}

proptest! {
    #[test]
    fn normalized_quaternions_have_unit_norm(q in quat_strategy()) {
        let (u, n) = quat::normalize(&q);
        prop_assert!((quat::norm(&u) - 1.0).abs() < 1e-12);
        prop_assert!((n - quat::norm(&q)).abs() < 1e-12);
    }

    #[test]
    fn rotation_matrices_are_orthonormal(q in quat_strategy()) {
        let r = quat::to_matrix(&quat::normalize(&q).0);
        let gram = r.transpose() * r;
        prop_assert!((gram - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn product_norm_is_multiplicative(a in quat_strategy(), b in quat_strategy()) {
        let p = quat::mul(&a, &b);
        prop_assert!((quat::norm(&p) - quat::norm(&a) * quat::norm(&b)).abs() < 1e-10);
    }

    #[test]
    fn sampled_groups_satisfy_invariants(seed in any::<u64>(), window in 2usize..8, frames in 8usize..24, views in 1usize..4) {
        let timelines: Vec<Vec<f64>> = (0..views).map(|_| (0..frames).map(|i| i as f64 / (frames - 1) as f64).collect()).collect();
        let cfg = SamplerConfig { window, ..SamplerConfig::default() };
        let mut s = GroupSampler::new(cfg, timelines, (0..views).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 * frames * views {
            let g = s.next_group(&mut rng).unwrap();
            prop_assert!(g.check_invariants().is_ok());
            prop_assert_eq!(g.slots.len(), window);
            prop_assert!(g.view < views);
            prop_assert!(g.timestamps().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.real_flags().iter().filter(|&&r| r).count() >= 2);
        }
    }

    #[test]
    fn topk_ignores_frame_order(losses in prop::collection::vec(0.0..10.0f64, 1..12), ratio in 0.05..1.0f64, rot in 0usize..12) {
        let per: Vec<Option<f64>> = losses.iter().copied().map(Some).collect();
        let mut shifted = per.clone();
        shifted.rotate_left(rot % per.len());
        let (a, sel) = topk_frame_loss(&per, ratio).unwrap();
        let (b, _) = topk_frame_loss(&shifted, ratio).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert_eq!(sel.len(), topk_count(per.len(), ratio));
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        prop_assert!(a >= mean - 1e-12);
    }

    #[test]
    fn photometric_terms_are_bounded(x in image_strategy(6, 5), y in image_strategy(6, 5)) {
        let cfg = LossConfig::default();
        prop_assert!(photometric(&x, &y, &cfg).unwrap() >= 0.0);
        prop_assert!(photometric(&x, &x, &cfg).unwrap().abs() < 1e-12);
        let s = ssim(&x, &y).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn motion_terms_are_in_range(frames in prop::collection::vec(image_strategy(4, 4), 6), gts in prop::collection::vec(image_strategy(4, 4), 6)) {
        let r: Vec<Option<&Image>> = frames.iter().map(Some).collect();
        let g: Vec<Option<&Image>> = gts.iter().map(Some).collect();
        let m = motion_loss(&r, &g, &LossConfig::default()).unwrap();
        prop_assert!(m.l_diff >= 0.0 && m.l_amp >= 0.0);
        prop_assert!(m.l_dir >= 0.0 && m.l_dir <= 2.0 + 1e-12);
        let same = motion_loss(&g, &g, &LossConfig::default()).unwrap();
        prop_assert!(same.l_motion.abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), nodes in 4usize..4096, window in 2usize..10, ratio in 0.0..1.0f64, full in any::<bool>()) {
        let mut c = TrainConfig::default();
        if full {
            c.set("profile", "full").unwrap();
        }
        c.set("seed", &seed.to_string()).unwrap();
        c.set("nodes", &nodes.to_string()).unwrap();
        c.set("window", &window.to_string()).unwrap();
        c.set("sparse_ratio", &ratio.to_string()).unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}
