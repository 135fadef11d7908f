//! Scratch: probe distillation trends at candidate epoch budgets.

use pkd_core::checkpoint::Checkpoint;
use pkd_core::experiments::{evaluate_model, AnyModel};
use pkd_core::loss::{DistillOptions, Hyper};
use pkd_core::metrics::Metric;
use pkd_core::synth::{generate, GenConfig};
use pkd_core::train::{
    distill_stage, parse_path, run_path, ModelFamily, ModelId, Pretrained,
};

fn test_map(ckpt: &Checkpoint, data: &pkd_core::synth::SequenceSet) -> f64 {
    evaluate_model(&AnyModel::Plain(ckpt.clone()), data, Metric::Map, None)
        .unwrap()
        .headline()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map(|a| a.parse().unwrap()).unwrap_or(6);
    let stage_epochs: usize = args.get(1).map(|a| a.parse().unwrap()).unwrap_or(epochs);
    let seed: u64 = args.get(2).map(|a| a.parse().unwrap()).unwrap_or(1);

    let cfg = GenConfig::default_benchmark();
    let data = generate(&cfg).unwrap();
    let family = ModelFamily::for_data(&data.train);
    let hyper = Hyper {
        epochs,
        seed,
        ..Hyper::default()
    };
    let stage_hyper = Hyper { epochs: stage_epochs, ..hyper };
    let opts = DistillOptions::default();

    let t0 = std::time::Instant::now();
    let mut base = Pretrained::default();
    for id in [ModelId::S, ModelId::T(1), ModelId::T(2), ModelId::T(3), ModelId::T(4)] {
        base.ensure(id, &family, &data.train, &hyper).unwrap();
    }
    let s_map = test_map(&base.models["S"], &data.test);
    let t4_map = test_map(&base.models["T4"], &data.test);
    println!("pretrain done {:.0}s: S={s_map:.2} T4={t4_map:.2}", t0.elapsed().as_secs_f64());

    let s = base.models["S"].clone();
    let t4 = base.models["T4"].clone();

    let ll_hyper = Hyper { alpha: 0.0, ..stage_hyper };
    let ll = distill_stage(&s, &t4, &data.train, &ll_hyper, &opts).unwrap();
    let ll_map = test_map(&ll.learner, &data.test);
    println!("S>T4 (L_L only):  {ll_map:.2}  (+{:.2} vs S)", ll_map - s_map);

    let full = distill_stage(&s, &t4, &data.train, &stage_hyper, &opts).unwrap();
    let full_map = test_map(&full.learner, &data.test);
    println!("S>T4 (L_L+L_AN):  {full_map:.2}  (+{:.2} vs L_L)", full_map - ll_map);

    let path = parse_path("S>T1>T2>T3>T4").unwrap();
    let cur = run_path(&path, &family, &data.train, &stage_hyper, &opts, &mut base).unwrap();
    let cur_map = test_map(&cur.student, &data.test);
    println!(
        "curriculum:       {cur_map:.2}  (+{:.2} vs direct, gap recovery {:.1}%)",
        cur_map - full_map,
        100.0 * (cur_map - s_map) / (t4_map - s_map)
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
