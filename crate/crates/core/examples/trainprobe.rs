//! Scratch: time a few training epochs and print test mAPs for the family.

use pkd_core::checkpoint::Checkpoint;
use pkd_core::experiments::{evaluate_model, AnyModel};
use pkd_core::loss::Hyper;
use pkd_core::metrics::Metric;
use pkd_core::synth::{generate, GenConfig};
use pkd_core::train::{train_single, ModelFamily, ModelId};

fn test_map(ckpt: &Checkpoint, data: &pkd_core::synth::SequenceSet) -> f64 {
    evaluate_model(&AnyModel::Plain(ckpt.clone()), data, Metric::Map, None)
        .unwrap()
        .headline()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map(|a| a.parse().unwrap()).unwrap_or(4);
    let which: String = args.get(1).cloned().unwrap_or_else(|| "S,T1,T4".into());

    let cfg = GenConfig::default_benchmark();
    let data = generate(&cfg).unwrap();
    let family = ModelFamily::for_data(&data.train);
    let hyper = Hyper {
        epochs,
        seed: 1,
        ..Hyper::default()
    };

    for name in which.split(',') {
        let id = match name {
            "S" => ModelId::S,
            t => ModelId::T(t[1..].parse().unwrap()),
        };
        let t0 = std::time::Instant::now();
        let out = train_single(&family.spec(id), &data.train, &hyper).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let m = test_map(&out.checkpoint, &data.test);
        let per_epoch = dt / out.log.records.len() as f64;
        let holdout = out.log.records.last().unwrap().holdout_metric;
        println!(
            "{name}: test_map={m:.2} holdout={holdout:.2} epochs_run={} {dt:.1}s ({per_epoch:.1}s/epoch)",
            out.log.records.len()
        );
        for r in &out.log.records {
            println!("   epoch {} loss={:.4} holdout={:.2}", r.epoch, r.loss_cls_s, r.holdout_metric);
        }
    }
}
