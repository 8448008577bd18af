use spe_wasm_demo::demo::{fuse, posterior_map, render_rgba, CLASS_COLORS};

const MEANS: [f64; 16] = [
    -2.0, -2.0, -1.5, -2.5, // class 0
    2.0, -2.0, 2.5, -1.5, // class 1
    -2.0, 2.0, -2.5, 2.5, // class 2
    2.0, 2.0, 1.5, 2.5, // class 3
];

#[test]
fn render_is_opaque_rgba_and_deterministic() {
    let a = render_rgba(32, 120.0, 200.0, 1.0, 0.0, false, 3).unwrap();
    assert_eq!(a.len(), 32 * 32 * 4);
    assert!(a.chunks(4).all(|px| px[3] == 255));
    assert!(a.chunks(4).any(|px| px[..3] != [0, 0, 0]));
    assert_eq!(
        a,
        render_rgba(32, 120.0, 200.0, 1.0, 0.0, false, 3).unwrap()
    );
}

#[test]
fn occlusion_only_darkens() {
    let clean = render_rgba(32, 90.0, 90.0, 1.0, 0.0, false, 7).unwrap();
    let dark = (0..20)
        .map(|s| render_rgba(32, 90.0, 90.0, 1.0, 0.0, true, s).unwrap())
        .find(|img| img != &clean)
        .expect("some seed draws a visible rectangle");
    for (c, o) in clean.chunks(4).zip(dark.chunks(4)) {
        assert!(o[..3] == c[..3] || o[..3] == [0, 0, 0]);
    }
}

#[test]
fn render_rejects_bad_leg_fraction() {
    assert!(render_rgba(32, 0.0, 0.0, 1.5, 0.0, false, 0).is_err());
}

#[test]
fn uncertain_support_pulls_less_on_the_prototype() {
    let means = [0.0, 0.0, 4.0, 4.0];
    let confident = fuse(&means, &[0.1, 0.1, 3.0, 3.0], 2, 0.1).unwrap();
    assert!(confident[0] < 2.0 && confident[1] < 2.0, "{confident:?}");
    let equal = fuse(&means, &[1.0, 1.0, 1.0, 1.0], 2, 0.1).unwrap();
    assert!((equal[0] - 2.0).abs() < 1e-12 && (equal[1] - 2.0).abs() < 1e-12);
    assert!(equal[2] > 0.1);
}

#[test]
fn posterior_map_is_dominated_by_the_nearest_class() {
    let vars = [0.2; 16];
    let img = posterior_map(&MEANS, &vars, 2, 0.3, 0.05, 8, 8, 3.0, 32, 1).unwrap();
    assert_eq!(img.len(), 8 * 8 * 4);
    // Top-left cell sits in class 2's quadrant (x < 0, y > 0).
    let px = &img[..3];
    let want = CLASS_COLORS[2];
    for k in 0..3 {
        assert!((px[k] as f64 - want[k]).abs() < 20.0, "{px:?} vs {want:?}");
    }
    assert!(posterior_map(&MEANS, &vars[..15], 2, 0.3, 0.05, 8, 8, 3.0, 32, 1).is_err());
}
