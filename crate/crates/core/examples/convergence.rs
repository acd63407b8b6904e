//! Baseline vs replay training on ModAdd, one line per seed.
//!
//! cargo run --release -p rlep-core --example convergence -- [seeds] [total_steps] [lr]

use rlep_core::*;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let steps: u64 = args.get(2).map_or(400, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.05, |s| s.parse().unwrap());
    let vocab = Vocab::new(16)?;
    for seed in 0..seeds {
        let train_set = generate_taskset(TaskFamily::ModAdd, FamilyParams::default(), 200, seed, vocab, Split::Train)?;
        let eval_set = generate_taskset(TaskFamily::ModAdd, FamilyParams::default(), 100, seed + 1000, vocab, Split::Eval)?;
        let base_cfg = TrainConfig { m: 0, seed, total_steps: steps, learning_rate: lr, checkpoint_every: 0, ..TrainConfig::default() };
        let init = Policy::zeros(vocab, 2)?;
        let t0 = std::time::Instant::now();
        let base = train(&base_cfg, &train_set, init.clone(), TrainOptions { eval_tasks: Some(&eval_set), ..Default::default() })?;
        let opts = CollectOptions { min_paths: 1, source_checkpoint: "baseline".into(), collection_step: steps, ..Default::default() };
        let pool = collect(&base.params, &train_set, &opts, &mut Streams::new(seed).rng(Stream::Collection, 0))?;
        let rlep_cfg = TrainConfig { m: 2, ..base_cfg.clone() };
        let rlep = train(&rlep_cfg, &train_set, init, TrainOptions { eval_tasks: Some(&eval_set), pool: Some(&pool), ..Default::default() })?;
        let c = compare_runs(&base.log, &rlep.log, "eval_pass1")?;
        let curve = |log: &RunLog| log.series("eval_pass1").unwrap().iter().step_by(4).map(|(_, v)| format!("{v:.2}")).collect::<Vec<_>>().join(" ");
        println!(
            "seed {seed}: pool {}/{} | base peak {:.2}@{} final {:.2} | rlep peak {:.2} reach {:?} final {:.2} | speedup {:?} | {:.1}s",
            pool.num_questions(), train_set.len(), c.baseline_peak, c.baseline_steps_to_peak, c.baseline_final,
            c.rlep_peak, c.rlep_steps_to_baseline_peak, c.rlep_final, c.speedup, t0.elapsed().as_secs_f64()
        );
        println!("  base: {}", curve(&base.log));
        println!("  rlep: {}", curve(&rlep.log));
    }
    Ok(())
}
