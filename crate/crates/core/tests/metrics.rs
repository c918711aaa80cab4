use serde::Deserialize;
use stbn_core::metrics::{evaluate, psnr, ssim_plane};
use stbn_core::videodata::{add_awgn, NoiseModel, VideoSequence};

#[derive(Deserialize)]
struct Fixture {
    height: usize,
    width: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
}

fn fixture() -> Fixture {
    let raw = include_str!("fixtures/ssim_pair.json");
    serde_json::from_str(raw).unwrap()
}

#[test]
fn ssim_matches_the_frozen_reference() {
    let f = fixture();
    let v = ssim_plane(&f.a, &f.b, f.height, f.width).unwrap();
    assert!((v - f.ssim).abs() < 1e-6, "{v} vs {}", f.ssim);
    assert!((ssim_plane(&f.b, &f.a, f.height, f.width).unwrap() - v).abs() < 1e-15);
}

#[test]
fn psnr_of_awgn_matches_the_closed_form() {
    // 1024 x 1024 = 1.05e6 samples; expected 20 log10(255 / 30)
    let clean = VideoSequence::new(4, 512, 512, 1, vec![0.5; 4 * 512 * 512]).unwrap();
    let noisy = add_awgn(&clean, &NoiseModel::gaussian(30.0, 5).unwrap()).unwrap();
    let measured = psnr(noisy.data(), clean.data(), 1.0).unwrap();
    let expected = 20.0 * (255.0f64 / 30.0).log10();
    assert!((measured - expected).abs() < 0.05, "{measured} vs {expected}");
}

#[test]
fn report_on_identical_clips_is_capped_and_perfect() {
    let clip = VideoSequence::new(2, 16, 16, 3, (0..2 * 16 * 16 * 3).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
    let r = evaluate(&clip, &clip).unwrap();
    assert_eq!(r.per_frame_psnr, vec![100.0, 100.0]);
    assert_eq!(r.mean_ssim, 1.0);
}
