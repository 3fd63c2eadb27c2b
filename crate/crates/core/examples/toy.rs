//! Trains on one synthetic case and prints loss and landmark error.
//! Usage: toy [size] [steps] [lr] [affine_first] [fused|raw] [w_diff]

use std::time::Instant;

use cascadereg::harness::register_prepared;
use cascadereg::preprocess::preprocess_pair;
use cascadereg::synth::make_synthetic_case;
use cascadereg::train::{prepare_case, train, LossInput, TrainConfig};

fn main() -> cascadereg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let size: usize = arg(1, "48").parse().unwrap();
    let steps: usize = arg(2, "300").parse().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.train.steps_per_epoch = steps;
    cfg.train.lr_initial = arg(3, "1e-4").parse().unwrap();
    cfg.train.affine_first = arg(4, "false").parse().unwrap();
    if arg(5, "fused") == "raw" {
        cfg.train.loss_input = LossInput::Raw;
    }
    cfg.loss.w_diff = arg(6, "1").parse().unwrap();
    let case = make_synthetic_case(0, size)?;
    let (pre, post) = preprocess_pair(&case.pre, &case.post)?;
    let prepared = prepare_case(&pre, &post, &cfg)?;
    let t = Instant::now();
    let (ckpt, logs) = train(&cfg, std::slice::from_ref(&prepared), None)?;
    for l in logs.iter().filter(|l| l.step % 10 == 0 || l.step + 1 == steps) {
        println!("{:4} lr {:.2e} mse {:.5} diff {:.5} edge {:.5} total {:.5}", l.step, l.lr, l.report.l_mse, l.report.l_diff, l.report.l_edge, l.report.l_total);
    }
    println!("train {:.1}s", t.elapsed().as_secs_f64());
    let r = register_prepared(&ckpt, &pre, &prepared)?;
    let s = r.score.unwrap();
    let init = cascadereg::metrics::score_case(
        post.landmarks.as_ref().unwrap(),
        pre.landmarks.as_ref().unwrap(),
        &cascadereg::field::DisplacementField::zeros(r.field.dims()),
        post.grid(),
    )?;
    println!("median ae {:.3} -> {:.3}  robustness {:.2}  max|u| {:.2}", init.median_ae, s.median_ae, s.robustness, r.field.max_norm());
    if let Some(res) = r.residual_score {
        println!("residual median {:.3}", res.median_ae);
    }
    Ok(())
}
