use stereosplat::consistency::{consistency_loss, ConsistencySettings};
use stereosplat::render::{render, RenderSettings};
use stereosplat::testkit::{make_scene, SyntheticSceneSpec};

#[test]
fn exact_plane_depth_aligns_every_shift() {
    let scene = make_scene(&SyntheticSceneSpec::textured_plane()).unwrap();
    let cam = scene.camera(&scene.train[0]).clone();
    let s = RenderSettings::default();
    let (left, _) = render(&scene.gt, &cam, [0.0; 3], &s);
    let cs = ConsistencySettings::default();
    for d in [-0.4, -0.1, 0.1, 0.4] {
        let (right, _) = render(&scene.gt, &cam.translate(d), [0.0; 3], &s);
        let exact = consistency_loss(&left.color, &right.color, &left.depth, &left.alpha, &cam, d, &cs).unwrap();
        assert!(exact.masked_pixels > 1000);
        assert!(exact.value < 1e-3, "d = {d}: {}", exact.value);

        let mut far = left.depth.clone();
        far.data.iter_mut().for_each(|z| *z *= 1.1);
        let off = consistency_loss(&left.color, &right.color, &far, &left.alpha, &cam, d, &cs).unwrap();
        assert!(off.value > exact.value, "d = {d}");
        // a positive adjoint means gradient descent pulls the depth back down
        let restoring = off.d_depth.data.iter().filter(|&&g| g > 0.0).count();
        assert!(restoring as f64 >= 0.95 * off.masked_pixels as f64, "d = {d}: {restoring} of {}", off.masked_pixels);
    }
}
