//! Scratch: sweep generator noise/ambiguity and print oracle ceilings.

use pkd_core::oracle::bayes_oracle;
use pkd_core::synth::{generate, GenConfig};

fn main() {
    for d in [8usize, 10] {
        for sigma in [0.85, 0.9, 0.95, 1.0] {
            let cfg = GenConfig {
                noise_sigma: sigma,
                ambiguity_len: d,
                ..GenConfig::default_benchmark()
            };
            let data = generate(&cfg).unwrap();
            print!("d={d} sigma={sigma:.2} ");
            let mut first = 0.0;
            let mut last = 0.0;
            for w in [0usize, 2, 4, 6, 8] {
                let run = bayes_oracle(&cfg, &data.test, w).unwrap();
                let m = 100.0 * run.report.map;
                if w == 0 {
                    first = m;
                }
                last = m;
                print!("w{w}={m:.1} ");
            }
            println!("gap8={:.1}", last - first);
        }
    }
}
