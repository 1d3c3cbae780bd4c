use mimicforge_core::imgcore::{warp_perspective, BorderMode, Homography};
use mimicforge_core::matcher::{detect_and_describe, match_ratio_test, SiftParams};
use mimicforge_core::synthetic::{natural_image, noise_image};

const SIDE: usize = 256;

#[test]
fn translation_recovered() {
    // ref = big[:, 0..256], src = big[:, 5..261]: a source point at x sits at x + 5 in ref
    let big = natural_image(SIDE, SIDE + 5, 21);
    let src = big.crop(0, 5, SIDE, SIDE).unwrap();
    let reference = big.crop(0, 0, SIDE, SIDE).unwrap();
    let p = SiftParams::default();
    let fs = detect_and_describe(&src, &p).unwrap();
    let fr = detect_and_describe(&reference, &p).unwrap();
    let m = match_ratio_test(&fs, &fr, 0.8).unwrap();
    assert!(m.matches.len() >= 20, "only {} matches", m.matches.len());
    let good = m
        .matches
        .iter()
        .filter(|k| {
            let dx = k.reference.x - k.source.x - 5.0;
            let dy = k.reference.y - k.source.y;
            (dx * dx + dy * dy).sqrt() <= 2.0
        })
        .count();
    let frac = good as f64 / m.matches.len() as f64;
    assert!(frac >= 0.8, "{good}/{} within 2 px", m.matches.len());
}

#[test]
fn unrelated_noise_rarely_matches() {
    let p = SiftParams::default();
    let img = natural_image(SIDE, SIDE, 4);
    let noise = noise_image(SIDE, SIDE, 3, 5);
    let fs = detect_and_describe(&img, &p).unwrap();
    let fr = detect_and_describe(&noise, &p).unwrap();
    let m = match_ratio_test(&fs, &fr, 0.8).unwrap();
    assert!(
        m.matches.len() as f64 <= 0.1 * fs.len() as f64,
        "{} matches of {} keypoints",
        m.matches.len(),
        fs.len()
    );
}

#[test]
fn lowering_ratio_never_adds_matches() {
    let p = SiftParams::default();
    let a = natural_image(128, 128, 8);
    let h = Homography::similarity_about(64.0, 64.0, 0.15, 1.05);
    let b = warp_perspective(&a, &h, 128, 128, BorderMode::Replicate).unwrap();
    let fa = detect_and_describe(&a, &p).unwrap();
    let fb = detect_and_describe(&b, &p).unwrap();
    let mut last = usize::MAX;
    for ratio in [0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.3, 0.1] {
        let n = match_ratio_test(&fa, &fb, ratio).unwrap().matches.len();
        assert!(n <= last, "ratio {ratio}: {n} > {last}");
        last = n;
    }
}

#[test]
fn homography_transfer_error_small() {
    let p = SiftParams::default();
    let img = natural_image(SIDE, SIDE, 13);
    let s = SIDE as f64;
    let src_corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let dst_corners = [(10.0, 6.0), (s - 4.0, 14.0), (s - 12.0, s - 3.0), (5.0, s - 15.0)];
    let h = Homography::from_four_points(src_corners, dst_corners).unwrap();
    let warped = warp_perspective(&img, &h, SIDE, SIDE, BorderMode::Zero).unwrap();
    let inv = h.invert().unwrap();
    let m = match_ratio_test(
        &detect_and_describe(&img, &p).unwrap(),
        &detect_and_describe(&warped, &p).unwrap(),
        0.8,
    )
    .unwrap();
    assert!(m.matches.len() >= 20);
    let mut errs: Vec<f64> = m
        .matches
        .iter()
        .map(|k| {
            let (fx, fy) = h.apply(k.source.x as f64, k.source.y as f64).unwrap();
            let (bx, by) = inv.apply(k.reference.x as f64, k.reference.y as f64).unwrap();
            let fwd = ((fx - k.reference.x as f64).powi(2) + (fy - k.reference.y as f64).powi(2)).sqrt();
            let bwd = ((bx - k.source.x as f64).powi(2) + (by - k.source.y as f64).powi(2)).sqrt();
            0.5 * (fwd + bwd)
        })
        .collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = errs[errs.len() / 2];
    assert!(median <= 3.0, "median transfer error {median}");
}
