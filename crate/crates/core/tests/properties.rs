use proptest::prelude::*;

use carreg::augment::{apply_rc, sample_rc_stack, RcConfig};
use carreg::io::carf::{image_from_carf, image_to_carf, mask_from_carf, mask_to_carf, CarfArray};
use carreg::io::checkpoint::Checkpoint;
use carreg::io::config;
use carreg::losses::lncc_value;
use carreg::metrics::{dice_labels, jacobian_det};
use carreg::simnet::{ArchSpec, CarModel};
use carreg::trainer::TrainConfig;
use carreg::warp::warp_image;
use carreg::{DeformationField, Image2D, LabelMask};

fn image(h: usize, w: usize) -> impl Strategy<Value = Image2D> {
    prop::collection::vec(0.0f32..=1.0, h * w)
        .prop_map(move |v| Image2D::new(h, w, v.into_iter().map(f64::from).collect()).unwrap())
}

fn field(h: usize, w: usize, m: f64) -> impl Strategy<Value = DeformationField> {
    prop::collection::vec(-m..m, 2 * h * w).prop_map(move |v| DeformationField::new(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn warp_stays_in_range(img in image(9, 11), phi in field(9, 11, 4.0)) {
        let out = warp_image(&img, &phi).unwrap();
        let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.pixels().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn lncc_symmetric_and_bounded(a in image(12, 12), b in image(12, 12)) {
        let (ta, tb) = (a.to_tensor(), b.to_tensor());
        let ab = lncc_value(&ta, &tb, 5).unwrap();
        let ba = lncc_value(&tb, &ta, 5).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&ab));
    }

    #[test]
    fn constant_field_has_unit_jacobian(dr in -5.0f64..5.0, dc in -5.0f64..5.0) {
        let f = DeformationField::from_fn(7, 8, |_, _| (dr, dc));
        prop_assert!(jacobian_det(&f).unwrap().values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dice_symmetric_unit_interval(a in prop::collection::vec(0u32..3, 64), b in prop::collection::vec(0u32..3, 64)) {
        let (ma, mb) = (LabelMask::new(8, 8, a).unwrap(), LabelMask::new(8, 8, b).unwrap());
        let d = dice_labels(&ma, &mb).unwrap();
        prop_assert_eq!(d, dice_labels(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn rc_is_a_pointwise_map(seed in any::<u64>(), levels in prop::collection::vec(0u8..6, 30)) {
        let img = Image2D::new(5, 6, levels.iter().map(|&l| l as f64 / 5.0).collect()).unwrap();
        let out = apply_rc(&sample_rc_stack(seed, &RcConfig::default()).unwrap(), &img).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                if levels[i] == levels[j] {
                    prop_assert_eq!(out.pixels()[i].to_bits(), out.pixels()[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn carf_round_trip(img in image(5, 7), labels in prop::collection::vec(any::<u32>(), 35)) {
        let b = image_to_carf(&img).unwrap().encode();
        let a = CarfArray::decode(&b).unwrap();
        prop_assert_eq!(a.encode(), b);
        prop_assert_eq!(image_from_carf(&a).unwrap(), img);
        let m = LabelMask::new(5, 7, labels).unwrap();
        let mb = mask_to_carf(&m).unwrap().encode();
        prop_assert_eq!(mask_from_carf(&CarfArray::decode(&mb).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..60) {
        let img = Image2D::from_fn(3, 4, |r, c| (r + c) as f64 / 6.0).unwrap();
        let b = image_to_carf(&img).unwrap().encode();
        let cut = cut.min(b.len() - 1);
        prop_assert!(CarfArray::decode(&b[..cut]).is_err());
    }

    #[test]
    fn config_is_idempotent(epochs in 1usize..500, lr in 1e-6f64..1e-2, l1 in 0.0f64..5.0, seed in any::<u64>(), nc in any::<bool>()) {
        let cfg = TrainConfig { epochs, lr_init: lr, lr_final: lr / 10.0, lambda1: l1, seed, no_clr: nc, ..TrainConfig::default() };
        let text = config::serialize(&cfg);
        let back = config::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(config::serialize(&back), text);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), epoch in any::<u32>(), share in any::<bool>()) {
        let arch = ArchSpec { levels: 1, enc_channels: 2, dec_channels: 3, proj_channels: 2, share_encoders: share, ..ArchSpec::default() };
        let c = Checkpoint { model: CarModel::init(arch, seed).unwrap(), config_digest: [seed as u8; 32], rng_seed: seed, epoch };
        let b = c.encode();
        let back = Checkpoint::decode(&b).unwrap();
        prop_assert_eq!(back.encode(), b);
        prop_assert_eq!(back, c);
    }
}
