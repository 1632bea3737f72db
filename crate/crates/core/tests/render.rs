use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereosplat::image::Image;
use stereosplat::render::{render, render_backward, RenderSettings};
use stereosplat::testkit::{make_scene, SyntheticSceneSpec};

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn tiled_forward_is_bit_identical_and_backward_agrees_to_rounding() {
    let spec = SyntheticSceneSpec { n_gaussians: 800, width: 53, height: 37, focal: 50.0, ..SyntheticSceneSpec::two_layer() };
    let scene = make_scene(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (_, cam) in &scene.cameras {
        let tiled = RenderSettings::default();
        let brute = RenderSettings { tile_size: 0, ..tiled };
        let (a, sa) = render(&scene.gt, cam, [0.2, 0.1, 0.0], &tiled);
        let (b, sb) = render(&scene.gt, cam, [0.2, 0.1, 0.0], &brute);
        assert_eq!(a, b);
        let d_color = Image::from_fn(cam.width, cam.height, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let d_depth = Image::from_fn(cam.width, cam.height, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let d_alpha = Image::from_fn(cam.width, cam.height, 1, |_, _, _| rng.random_range(-1.0..1.0));
        let ga = render_backward(&sa, &d_color, &d_depth, &d_alpha).unwrap();
        let gb = render_backward(&sb, &d_color, &d_depth, &d_alpha).unwrap();
        // per-tile partial sums associate differently from one full-image sum
        let scale = ga.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((x - y).abs() <= 1e-12 * scale, "{x} vs {y}");
        }
        assert_eq!(ga.visible, gb.visible);
    }
}

#[test]
fn odd_tile_sizes_agree() {
    let scene = make_scene(&SyntheticSceneSpec::random_blob_cloud()).unwrap();
    let cam = &scene.cameras[0].1;
    let (reference, _) = render(&scene.gt, cam, [0.0; 3], &RenderSettings { tile_size: 0, ..Default::default() });
    for tile in [1, 3, 7, 16, 64] {
        let (fb, _) = render(&scene.gt, cam, [0.0; 3], &RenderSettings { tile_size: tile, ..Default::default() });
        assert_eq!(fb, reference, "tile size {tile}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = SyntheticSceneSpec { n_gaussians: 1500, ..SyntheticSceneSpec::two_layer() };
    let scene = make_scene(&spec).unwrap();
    let cam = scene.cameras[2].1.clone();
    let d_color = Image::from_fn(cam.width, cam.height, 3, |r, c, ch| ((r * 7 + c * 3 + ch) as f64).sin());
    let d_plane = Image::from_fn(cam.width, cam.height, 1, |r, c, _| ((r + 2 * c) as f64 * 0.1).cos());
    let run = |threads| {
        in_pool(threads, || {
            let (fb, state) = render(&scene.gt, &cam, [0.0; 3], &RenderSettings::default());
            let g = render_backward(&state, &d_color, &d_plane, &d_plane).unwrap();
            (fb, g.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        })
    };
    let one = run(1);
    for threads in [2, 3, 8] {
        assert_eq!(run(threads), one, "{threads} threads");
    }
}
