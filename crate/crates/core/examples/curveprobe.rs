//! Scratch: long plain-S curve vs distill-stage component curves.

use pkd_core::experiments::{evaluate_model, AnyModel};
use pkd_core::loss::{DistillOptions, Hyper};
use pkd_core::metrics::Metric;
use pkd_core::synth::{generate, GenConfig};
use pkd_core::train::{distill_stage, train_single, ModelFamily, ModelId};

fn main() {
    let cfg = GenConfig::default_benchmark();
    let data = generate(&cfg).unwrap();
    let family = ModelFamily::for_data(&data.train);

    // Plain S, long run.
    let hyper = Hyper { epochs: 40, seed: 1, ..Hyper::default() };
    let out = train_single(&family.spec(ModelId::S), &data.train, &hyper).unwrap();
    println!("plain S curve (holdout mAP):");
    for r in &out.log.records {
        println!("  {:2} {:6.2} loss={:.4}", r.epoch, r.holdout_metric, r.loss_cls_s);
    }
    let m = evaluate_model(&AnyModel::Plain(out.checkpoint.clone()), &data.test, Metric::Map, None).unwrap().headline();
    println!("plain S test mAP after {} epochs: {m:.2}", out.log.records.len());

    // Distill stage on top of a 6-epoch S and T4.
    let short = Hyper { epochs: 6, seed: 1, ..Hyper::default() };
    let s = train_single(&family.spec(ModelId::S), &data.train, &short).unwrap().checkpoint;
    let t4 = train_single(&family.spec(ModelId::T(4)), &data.train, &short).unwrap().checkpoint;
    let long = Hyper { epochs: 24, seed: 1, ..Hyper::default() };
    let stage = distill_stage(&s, &t4, &data.train, &long, &DistillOptions::default()).unwrap();
    println!("S>T4 long stage components:");
    for r in &stage.log.records {
        println!(
            "  {:2} holdout={:6.2} cls_s={:.4} cls_t={:.4} l={:.4} an={:.4}",
            r.epoch, r.holdout_metric, r.loss_cls_s, r.loss_cls_t, r.loss_l, r.loss_an
        );
    }
    let m = evaluate_model(&AnyModel::Plain(stage.learner.clone()), &data.test, Metric::Map, None).unwrap().headline();
    let mt = evaluate_model(&AnyModel::Plain(stage.teacher.clone()), &data.test, Metric::Map, None).unwrap().headline();
    println!("after stage: student test={m:.2} teacher test={mt:.2}");
}
