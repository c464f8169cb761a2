use proptest::prelude::*;

use subband_core::imageio;
use subband_core::metrics::{pixel_loss, subband_loss, Norm};
use subband_core::wavelet::{decompose, reconstruct, Filter, FilterBank, ScaleMode};
use subband_core::{Shape, Tensor};

// (shape, data) with both sides divisible by 2^k
fn image(k: u32) -> impl Strategy<Value = Tensor> {
    let unit = 1usize << k;
    (1usize..=3, 1usize..=4, 1usize..=4).prop_flat_map(move |(c, a, b)| {
        let s = Shape::new(c, a * unit, b * unit);
        prop::collection::vec(-4.0f64..4.0, s.len())
            .prop_map(move |d| Tensor::from_vec(s, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_reconstruct_round_trip((k, img) in (1u32..=3).prop_flat_map(|k| (Just(k), image(k)))) {
        for bank in [FilterBank::raw(), FilterBank::orthonormal()] {
            let back = reconstruct(&decompose(&img, k as usize, &bank).unwrap(), &bank).unwrap();
            prop_assert!(img.max_abs_diff(&back).unwrap() < 1e-9);
        }
    }

    #[test]
    fn orthonormal_bands_split_pixel_energy(a in image(1), shift in -1.0f64..1.0) {
        let b = a.map(|v| 0.5 * v + shift);
        let l2 = pixel_loss(&a, &b, Norm::L2).unwrap();
        let quarter: f64 = Filter::ALL
            .iter()
            .map(|&f| 0.25 * subband_loss(&a, &b, f, 0, Norm::L2, ScaleMode::Orthonormal).unwrap())
            .sum();
        prop_assert!((l2 - quarter).abs() <= 1e-9 * l2.max(1e-12));
    }

    #[test]
    fn pnm_round_trips_quantized_images(a in image(0)) {
        // PNM carries one or three channels
        let a = if a.channels() == 2 { a.slice_channels(0, 1).unwrap() } else { a };
        let q = imageio::quantize(&a.map(|v| (v + 4.0) / 8.0), 255);
        let bytes = imageio::write_pnm(&q, 255).unwrap();
        prop_assert!(imageio::read_pnm(&bytes).unwrap().bit_eq(&q));
    }

    #[test]
    fn raw_round_trips_any_f64(a in image(0)) {
        let bytes = imageio::write_raw(&a, imageio::DTYPE_F64).unwrap();
        prop_assert!(imageio::read_raw(&bytes).unwrap().bit_eq(&a));
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        let _ = imageio::read_pnm(&bytes);
        let _ = imageio::read_raw(&bytes);
    }
}
