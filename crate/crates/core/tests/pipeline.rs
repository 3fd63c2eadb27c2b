use cascadereg::checkpoint::Checkpoint;
use cascadereg::harness::register_prepared;
use cascadereg::params::Adam;
use cascadereg::preprocess::preprocess_pair;
use cascadereg::synth::make_synthetic_case;
use cascadereg::train::{init_params, warp_study, PreparedCase, TrainConfig};
use cascadereg::volume::Contrast;
use cascadereg::warp::{warp, AffineTransform};

fn perturbed_checkpoint() -> Checkpoint {
    let cfg = TrainConfig::default();
    let mut params = init_params(&cfg).unwrap();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (k, name) in names.iter().enumerate() {
        let t = params.get_mut(name).unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i * 7 + k * 13) as f32 * 0.37).sin();
        }
    }
    Checkpoint {
        config: cfg,
        params,
        adam: Adam::default(),
        step: 0,
    }
}

#[test]
fn composed_field_matches_sequential_mapping() {
    let case = make_synthetic_case(3, 32).unwrap();
    let (pre, post) = preprocess_pair(&case.pre, &case.post).unwrap();
    let c = 15.5;
    let a = AffineTransform::about_center([[1.03, 0.04, 0.0], [-0.03, 0.98, 0.02], [0.0, -0.02, 1.01]], [c, c, c]);
    let a = AffineTransform::translation([0.7, -1.2, 0.4]).compose(&a);
    let prepared = PreparedCase {
        moving: warp_study(&pre, &a).unwrap(),
        fixed: post,
        affine: Some(a),
    };
    let r = register_prepared(&perturbed_checkpoint(), &pre, &prepared).unwrap();
    assert!(r.deformable.max_norm() > 0.05, "deformable stage is trivial");

    let [d, h, w] = r.field.dims();
    let mut worst = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64, z as f64];
                let u = r.deformable.at(x, y, z);
                let expect = a.apply(std::array::from_fn(|i| p[i] + u[i]));
                let t = r.field.at(x, y, z);
                for i in 0..3 {
                    worst = worst.max((p[i] + t[i] - expect[i]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-4, "composed field off by {worst} mm");

    let direct = warp(pre.get(Contrast::T1ce), &r.field).unwrap();
    assert_eq!(direct, r.warped);
    assert!(r.score.is_some() && r.residual_score.is_some());
}
