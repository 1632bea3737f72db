use stereosplat::camera::CameraModel;
use stereosplat::density::ndc_gradients;
use stereosplat::gaussian::{logit, rgb_to_feature, GaussianCloud};
use stereosplat::image::Image;
use stereosplat::loss::l1_loss;
use stereosplat::render::{render, render_backward, RenderSettings};

fn blob(x: f64) -> GaussianCloud {
    let mut c = GaussianCloud::new();
    c.push([x, 0.05, 3.0], [1.0, 0.0, 0.0, 0.0], [(0.3f64).ln(); 3], logit(0.8), [0.9, 0.4, 0.1].map(rgb_to_feature));
    c
}

fn ndc_grad_at(size: usize) -> [f64; 2] {
    let f = size as f64;
    let cam = CameraModel::identity(f, f, (f - 1.0) / 2.0, (f - 1.0) / 2.0, size, size);
    // No dilation, so the footprint scales exactly with the resolution.
    let s = RenderSettings { dilation: 0.0, ..Default::default() };
    let (target, _) = render(&blob(0.1), &cam, [0.0; 3], &s);
    let (fb, state) = render(&blob(0.0), &cam, [0.0; 3], &s);
    let l = l1_loss(&fb.color, &target.color).unwrap();
    let plane = Image::new(size, size, 1);
    let g = render_backward(&state, &l.grad, &plane, &plane).unwrap();
    ndc_gradients(&g.d_means2d, size, size)[0]
}

#[test]
fn ndc_mean_gradient_does_not_depend_on_resolution() {
    let lo = ndc_grad_at(48);
    let hi = ndc_grad_at(192);
    let norm = |g: [f64; 2]| g[0].hypot(g[1]);
    assert!(norm(lo) > 0.0);
    assert!((norm(lo) - norm(hi)).abs() < 0.05 * norm(hi), "{lo:?} vs {hi:?}");
}
