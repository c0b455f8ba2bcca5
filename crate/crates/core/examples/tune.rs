use elma::basin::Tolerances;
use elma::gwl::{Sampler, SamplerConfig};
use elma::models::toy::DoubleWell1D;
use elma::rng::substream;
use std::collections::BTreeMap;

fn main() {
    let model = DoubleWell1D::new(0.0, 2.5);
    for budget in [1_000_000u64, 2_000_000] {
        for seed in [303u64, 1, 2, 3, 4] {
            let mut s = Sampler::init(
                &model,
                SamplerConfig { budget, seed, ..Default::default() },
                substream(seed, "chain-0"),
                Tolerances::default(),
            )
            .unwrap();
            s.run().unwrap();
            s.freeze();
            let mut visits: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for _ in 0..100_000 {
                let e = s.step().unwrap();
                *visits.entry((e.bin.basin, e.bin.interval)).or_insert(0) += 1;
            }
            let max = *visits.values().max().unwrap() as f64;
            let min = *visits.values().min().unwrap() as f64;
            let mut sorted: Vec<((u32,u32), u64)> = visits.iter().map(|(k,v)| (*k,*v)).collect();
            sorted.sort_by_key(|&(_, v)| v);
            println!(
                "budget {budget} seed {seed}: ratio {:.2} over {} bins; lowest {:?} highest {:?}",
                max / min, visits.len(), &sorted[..2], &sorted[sorted.len()-2..]
            );
        }
    }
}
