use modiff::diffusion::{score_loss, FrameMask};
use modiff::fields::{compute_fields, cumulate, reconstruct_video};
use modiff::io::{decode_t4d, encode_t4d};
use modiff::phantom::Video4D;
use modiff::Tensor;
use proptest::prelude::*;

fn video(frames: usize, dims: [usize; 3], values: &[f64]) -> Video4D {
    let len = dims.iter().product::<usize>();
    Video4D::new(
        (0..frames)
            .map(|f| Tensor::new(&dims, values[f * len..(f + 1) * len].to_vec()).unwrap())
            .collect(),
    )
    .unwrap()
}

fn arb_video() -> impl Strategy<Value = Video4D> {
    (2usize..7, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, d, h, w)| {
        prop::collection::vec(-1.0f64..2.0, n * d * h * w).prop_map(move |v| video(n, [d, h, w], &v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fields_telescope_and_roundtrip(v in arb_video()) {
        let fs = compute_fields(&v).unwrap();
        prop_assert_eq!(fs.frame_number(), v.frame_number());
        prop_assert!(fs.fields()[0].data().iter().all(|&x| x == 0.0));
        let cum = cumulate(&fs);
        for i in 0..v.frame_number() {
            let direct = v.frame(i).sub(v.frame(0)).unwrap();
            prop_assert!(cum.cum_fields()[i].max_abs_diff(&direct) < 1e-12);
        }
        let back = reconstruct_video(v.frame(0), &fs, false).unwrap();
        for (a, b) in back.frames().iter().zip(v.frames()) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn t4d_roundtrip_is_exact_at_f32(v in arb_video(), flags in 0u8..4) {
        let t = v.to_stacked();
        let (back, f) = decode_t4d(&encode_t4d(&t, flags)).unwrap();
        prop_assert_eq!(f, flags);
        prop_assert_eq!(back, t.map(|x| x as f32 as f64));
    }

    #[test]
    fn masked_loss_ignores_padding(n in 1usize..16, seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let eps = Tensor::randn(&[1, 16, 2, 2, 2], &mut rng);
        let pred = Tensor::randn(&[1, 16, 2, 2, 2], &mut rng);
        let mask = FrameMask::leading(n, 16);
        let mut other = pred.clone();
        other.data_mut()[n * 8..].iter_mut().for_each(|x| *x += 5.0);
        prop_assert_eq!(score_loss(&eps, &pred, Some(&mask)).unwrap(), score_loss(&eps, &other, Some(&mask)).unwrap());
    }
}
