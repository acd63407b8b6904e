//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any fails.
//!
//! cargo test -p rlep-cli --test acceptance

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlep_cli::{
    collect, gen_tasks, report, train_baseline, train_rlep, CollectArgs, GenTasksArgs, ReportArgs, TrainArgs,
    TrainRlepArgs,
};
use rlep_core::tasks::is_correct;
use rlep_core::{
    clipped_token_term, group_advantage, surrogate_objective, Aggregation, ClipConfig, ExperiencePool, Group,
    Policy, TaskSet, Traj, TrajectorySource, Vocab, DEFAULT_DEGENERACY_EPS,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn clip(aggregation: Aggregation) -> ClipConfig<f64> {
    ClipConfig { eps_low: 0.2, eps_high: 0.28, aggregation }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so instances whose gradient is
/// essentially zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;
/// Ratios closer than this to a clip bound are resampled, so the central
/// difference never straddles a branch switch.
const BRANCH_MARGIN: f64 = 1e-3;

struct Instance {
    params: Policy,
    group: Group<f64>,
    clip: ClipConfig<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let v = rng.gen_range(2..=8u32);
        let ctx = rng.gen_range(1..=2);
        let vocab = Vocab::new(v).unwrap();
        let n = Policy::zeros(vocab, ctx).unwrap().logits().len();
        let logits = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = Policy::from_logits(vocab, ctx, logits).unwrap();
        let prompt: Vec<u32> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..v)).collect();
        let n_traj = rng.gen_range(2..=4);
        let trajs: Vec<Traj> = (0..n_traj)
            .map(|_| {
                let tokens: Vec<u32> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..v)).collect();
                let current = params.logprob(&prompt, &tokens).unwrap();
                // Behavior log-probs offset so a fair share of tokens lands outside the trust region.
                let old_logprob = current.iter().map(|l| l + rng.gen_range(-0.4..0.4)).collect();
                Traj { source: TrajectorySource::Fresh, tokens, old_logprob, reward: rng.gen_range(0..=1) as f64 }
            })
            .collect();
        let group = Group::new("q", prompt.clone(), trajs, DEFAULT_DEGENERACY_EPS).unwrap();
        let aggregation = if rng.gen_bool(0.5) { Aggregation::TokenMean } else { Aggregation::SequenceMean };
        let clip = clip(aggregation);
        let near_bound = group.trajectories.iter().any(|t| {
            let current = params.logprob(&group.prompt, &t.tokens).unwrap();
            current.iter().zip(&t.old_logprob).any(|(c, o)| {
                let r = (c - o).exp();
                (r - (1.0 - clip.eps_low)).abs() < BRANCH_MARGIN || (r - (1.0 + clip.eps_high)).abs() < BRANCH_MARGIN
            })
        });
        if !near_bound {
            return Instance { params, group, clip };
        }
    }
}

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    let mut clipped_seen = 0usize;
    let instances = 150;
    for _ in 0..instances {
        let Instance { params, group, clip } = random_instance(&mut rng);
        let res = surrogate_objective(&params, &group, &clip).unwrap();
        clipped_seen += res.clipped_tokens;
        let analytic = res.grad.to_dense(params.num_rows());
        let mut fd = vec![0.0; analytic.len()];
        let mut p = params.clone();
        // Rows no trajectory visits have zero gradient both ways; check every coordinate anyway.
        for i in 0..analytic.len() {
            let orig = p.logits()[i];
            p.logits_mut()[i] = orig + FD_STEP;
            let plus = surrogate_objective(&p, &group, &clip).unwrap().objective;
            p.logits_mut()[i] = orig - FD_STEP;
            let minus = surrogate_objective(&p, &group, &clip).unwrap().objective;
            p.logits_mut()[i] = orig;
            fd[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        coords += analytic.len();
        let scale = analytic.iter().chain(&fd).fold(REL_FLOOR, |m, x| m.max(x.abs()));
        let err = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    check(worst < 1e-5, || format!("max relative error {worst:.3e} >= 1e-5"))?;
    check(clipped_seen > 0, || "no instance exercised the clipped branch".into())?;
    Ok(format!("{instances} instances, {coords} coordinates, {clipped_seen} clipped tokens, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn advantage_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut degenerate, mut regular) = (0, 0);
    for case in 0..1000 {
        let n = rng.gen_range(2..=32);
        let rewards: Vec<f64> = match case % 4 {
            0 => vec![rng.gen_range(0..=1) as f64; n],
            1 => (0..n).map(|_| rng.gen_range(0..=1) as f64).collect(),
            _ => (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        };
        let adv = group_advantage(&rewards, DEFAULT_DEGENERACY_EPS).unwrap();
        let constant = rewards.iter().all(|&r| r == rewards[0]);
        if constant {
            degenerate += 1;
            check(adv.iter().all(|&a| a == 0.0), || format!("case {case}: constant rewards gave {adv:?}"))?;
            continue;
        }
        regular += 1;
        let nf = n as f64;
        let mean = adv.iter().sum::<f64>() / nf;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / nf).sqrt();
        check(mean.abs() < 1e-9, || format!("case {case}: mean {mean:e}"))?;
        check((std - 1.0).abs() < 1e-9, || format!("case {case}: std {std}"))?;
        let scale = rng.gen_range(0.1..10.0);
        let shift = rng.gen_range(-5.0..5.0);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = group_advantage(&moved, DEFAULT_DEGENERACY_EPS).unwrap();
        let diff = adv.iter().zip(&adv2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(diff < 1e-9, || format!("case {case}: shift/scale changed advantages by {diff:e}"))?;
    }
    Ok(format!("{regular} standardized groups, {degenerate} zero-variance groups"))
}

// ---------------------------------------------------------------- 3

fn clip_higher() -> Outcome {
    let cfg = clip(Aggregation::TokenMean);
    let (lo, hi) = (1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut advantages = vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    advantages.extend((0..20).map(|_| rng.gen_range(-3.0..3.0)));
    let mut points = 0;
    let mut clipped = 0;
    for &a in &advantages {
        for i in 10..=200 {
            let r = i as f64 / 100.0;
            let term = clipped_token_term(r, a, &cfg);
            let unclipped = r * a;
            let bounded = r.clamp(lo, hi) * a;
            let brute_clipped = bounded < unclipped;
            check(term.value == unclipped.min(bounded), || format!("A={a} r={r}: value {}", term.value))?;
            check(term.clipped == brute_clipped, || format!("A={a} r={r}: branch mismatch"))?;
            check((term.grad_coeff == 0.0) == term.clipped, || format!("A={a} r={r}: grad_coeff {}", term.grad_coeff))?;
            if !term.clipped {
                check(term.grad_coeff == a, || format!("A={a} r={r}: grad_coeff {} != A", term.grad_coeff))?;
            }
            // Asymmetric bounds: positive advantages stop at 1 + eps_high, negative ones at 1 - eps_low.
            let expected = (a > 0.0 && r > hi) || (a < 0.0 && r < lo);
            let on_bound = (r - hi).abs() < 1e-12 || (r - lo).abs() < 1e-12;
            if !on_bound {
                check(term.clipped == expected, || format!("A={a} r={r}: clipped {} expected {expected}", term.clipped))?;
            }
            points += 1;
            clipped += term.clipped as usize;
        }
    }
    Ok(format!("{points} grid points, {clipped} clipped, bounds [{lo}, {hi}]"))
}

// ---------------------------------------------------------------- pipeline helpers

struct Tasks {
    train: PathBuf,
    eval: PathBuf,
}

fn make_tasks(dir: &Path, seed: u64, train_count: usize, eval_count: usize) -> Tasks {
    let gen = |split: &str, count, seed, name: &str| {
        let out = dir.join(name);
        gen_tasks(&GenTasksArgs {
            family: "modadd".into(),
            count,
            seed,
            vocab_size: 16,
            modulus: 10,
            payload_len: 3,
            split: split.into(),
            out: out.clone(),
        })
        .unwrap();
        out
    };
    Tasks { train: gen("train", train_count, seed, "train.tsv"), eval: gen("eval", eval_count, seed + 10_000, "eval.tsv") }
}

fn baseline_args(tasks: &Tasks, out: PathBuf, seed: u64) -> TrainArgs {
    TrainArgs { config: None, tasks: tasks.train.clone(), eval_tasks: tasks.eval.clone(), out, seed: Some(seed), resume: None }
}

fn rlep_args(tasks: &Tasks, pool: &Path, out: PathBuf, seed: u64, config: Option<PathBuf>) -> TrainRlepArgs {
    TrainRlepArgs {
        config,
        tasks: tasks.train.clone(),
        eval_tasks: tasks.eval.clone(),
        pool: Some(pool.to_path_buf()),
        out,
        seed: Some(seed),
        warm_start: None,
        collection_checkpoint: None,
    }
}

fn collect_args(checkpoint: &Path, tasks: &Path, out: PathBuf, min_paths: usize, seed: u64) -> CollectArgs {
    CollectArgs {
        checkpoint: checkpoint.to_path_buf(),
        tasks: tasks.to_path_buf(),
        out,
        candidates: 64,
        temperature: 0.7,
        top_p: 0.95,
        min_paths,
        max_len: 16,
        seed,
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------- 4

fn m0_reduction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tasks = make_tasks(dir.path(), 4, 200, 100);
    let base = train_baseline(&baseline_args(&tasks, dir.path().join("base"), 4)).map_err(|e| e.to_string())?;
    let pool = dir.path().join("pool.tsv");
    collect(&collect_args(&base.final_checkpoint, &tasks.train, pool.clone(), 1, 4)).map_err(|e| e.to_string())?;
    let config = dir.path().join("m0.toml");
    std::fs::write(&config, "M = 0\n").unwrap();
    let rlep = train_rlep(&rlep_args(&tasks, &pool, dir.path().join("rlep"), 4, Some(config))).map_err(|e| e.to_string())?;
    check(read(&base.log_path) == read(&rlep.log_path), || "run logs differ".into())?;
    check(read(&base.final_checkpoint) == read(&rlep.final_checkpoint), || "final checkpoints differ".into())?;
    Ok(format!("{} steps, logs and final checkpoints byte-identical", base.steps))
}

// ---------------------------------------------------------------- 5

fn pool_integrity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tasks = make_tasks(dir.path(), 5, 200, 100);
    train_baseline(&baseline_args(&tasks, dir.path().join("base"), 5)).map_err(|e| e.to_string())?;
    let taskset = TaskSet::load(&tasks.train).unwrap();
    let ckpt_dir = dir.path().join("base/checkpoints");
    let mut summary = Vec::new();
    for (ckpt, min_paths) in [("policy_step000080.txt", 1), ("policy_step000400.txt", 1), ("policy_step000400.txt", 2)] {
        let out = dir.path().join(format!("pool_{ckpt}_{min_paths}.tsv"));
        let s = collect(&collect_args(&ckpt_dir.join(ckpt), &tasks.train, out.clone(), min_paths, 5)).map_err(|e| e.to_string())?;
        let pool = ExperiencePool::read_unverified(read(&out).as_slice()).map_err(|e| e.to_string())?;
        for qid in pool.questions() {
            let records = pool.records(qid).unwrap();
            check(records.len() >= min_paths, || format!("{qid}: {} records < min_paths {min_paths}", records.len()))?;
            let task = taskset.get(qid).ok_or_else(|| format!("{qid} not in taskset"))?;
            for r in records {
                check(r.reward == 1 && is_correct(task, &r.response_tokens), || format!("{qid}: record fails verification"))?;
            }
        }
        let loaded = ExperiencePool::load(&out, &taskset).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        loaded.write_to(&mut bytes).unwrap();
        check(bytes == read(&out), || format!("{ckpt}: save/load round trip changed the file"))?;
        check(loaded == pool, || format!("{ckpt}: loaded pool differs"))?;
        summary.push(format!("{ckpt} min_paths={min_paths}: {}/{} questions, {} records", s.retained, s.total, s.records));
    }
    Ok(summary.join("; "))
}

// ---------------------------------------------------------------- 6

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn convergence() -> Outcome {
    let seeds = 0..5u64;
    let mut ratios = Vec::new();
    let mut base_final = Vec::new();
    let mut rlep_final = Vec::new();
    let mut lines = Vec::new();
    for seed in seeds {
        let dir = tempfile::tempdir().unwrap();
        let tasks = make_tasks(dir.path(), 600 + seed, 200, 100);
        let base = train_baseline(&baseline_args(&tasks, dir.path().join("base"), seed)).map_err(|e| e.to_string())?;
        let pool = dir.path().join("pool.tsv");
        // ModAdd has one correct answer per question, so a question can hold at most one distinct success.
        collect(&collect_args(&base.final_checkpoint, &tasks.train, pool.clone(), 1, seed)).map_err(|e| e.to_string())?;
        let rlep = train_rlep(&rlep_args(&tasks, &pool, dir.path().join("rlep"), seed, None)).map_err(|e| e.to_string())?;
        let cmp = report(&ReportArgs {
            baseline_log: base.log_path.clone(),
            rlep_log: rlep.log_path.clone(),
            out: dir.path().join("summary.csv"),
            metric: "eval_pass1".into(),
        })
        .map_err(|e| e.to_string())?;
        // Never reaching the baseline peak counts as taking the whole run (and then some).
        let reach = cmp.rlep_steps_to_baseline_peak.map_or(f64::INFINITY, |s| s as f64);
        ratios.push(reach / cmp.baseline_steps_to_peak as f64);
        base_final.push(cmp.baseline_final);
        rlep_final.push(cmp.rlep_final);
        lines.push(format!(
            "seed {seed}: base peak {:.2}@{} rlep reaches it @{:?}, finals {:.2}/{:.2}",
            cmp.baseline_peak, cmp.baseline_steps_to_peak, cmp.rlep_steps_to_baseline_peak, cmp.baseline_final, cmp.rlep_final
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    let ratio = median(ratios);
    let (bf, rf) = (median(base_final), median(rlep_final));
    check(ratio <= 0.6, || format!("median step ratio {ratio:.3} > 0.6"))?;
    check(rf >= bf, || format!("median final pass1 rlep {rf:.3} < baseline {bf:.3}"))?;
    Ok(format!("median step ratio {ratio:.3} (<= 0.6), median final pass1 rlep {rf:.3} vs baseline {bf:.3}"))
}

// ---------------------------------------------------------------- 7

fn group_with(params: &Policy, prompt: &[u32], lens_rewards: &[(usize, f64)], rng: &mut ChaCha8Rng) -> Group<f64> {
    let v = params.vocab().size();
    let trajs = lens_rewards
        .iter()
        .map(|&(len, reward)| {
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
            let current = params.logprob(prompt, &tokens).unwrap();
            let old_logprob = current.iter().map(|l| l + rng.gen_range(-0.1..0.1)).collect();
            Traj { source: TrajectorySource::Fresh, tokens, old_logprob, reward }
        })
        .collect();
    Group::new("q", prompt.to_vec(), trajs, DEFAULT_DEGENERACY_EPS).unwrap()
}

/// Objective share of trajectory `i`: total minus the total with its advantage zeroed.
fn contribution(params: &Policy, group: &Group<f64>, i: usize, agg: Aggregation) -> f64 {
    let full = surrogate_objective(params, group, &clip(agg)).unwrap().objective;
    let mut without = group.clone();
    without.advantages[i] = 0.0;
    full - surrogate_objective(params, &without, &clip(agg)).unwrap().objective
}

fn aggregation_modes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vocab = Vocab::new(8).unwrap();
    let n = Policy::zeros(vocab, 2).unwrap().logits().len();
    let params = Policy::from_logits(vocab, 2, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let prompt = [1, 2];
    let mut margins = Vec::new();
    for long in [6, 12, 24] {
        let group = group_with(&params, &prompt, &[(long, 0.0), (2, 1.0), (2, 1.0), (3, 1.0)], &mut rng);
        check(group.advantages[0] < 0.0, || "long trajectory should have negative advantage".into())?;
        let tm = contribution(&params, &group, 0, Aggregation::TokenMean).abs();
        let sm = contribution(&params, &group, 0, Aggregation::SequenceMean).abs();
        check(tm > sm, || format!("len {long}: token_mean |{tm}| <= sequence_mean |{sm}|"))?;
        margins.push(format!("len {long}: {tm:.3} vs {sm:.3}"));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=8);
        let g = rng.gen_range(2..=8);
        let members: Vec<(usize, f64)> = (0..g).map(|_| (len, rng.gen_range(0..=1) as f64)).collect();
        let group = group_with(&params, &prompt, &members, &mut rng);
        let tm = surrogate_objective(&params, &group, &clip(Aggregation::TokenMean)).unwrap();
        let sm = surrogate_objective(&params, &group, &clip(Aggregation::SequenceMean)).unwrap();
        worst = worst.max((tm.objective - sm.objective).abs());
    }
    check(worst < 1e-12, || format!("equal-length objectives differ by {worst:e}"))?;
    Ok(format!("{}; equal-length max diff {worst:.1e}", margins.join(", ")))
}

// ---------------------------------------------------------------- 8

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rlep")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("rlep {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn full_pipeline(dir: &Path, workers: &str) -> Result<(), String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let w = ["--workers", workers];
    run_bin(&[&w[..], &["gen-tasks", "--family", "modadd", "--count", "200", "--seed", "8", "--out", &p("train.tsv")]].concat())?;
    run_bin(&[&w[..], &["gen-tasks", "--family", "modadd", "--count", "100", "--seed", "9", "--split", "eval", "--out", &p("eval.tsv")]].concat())?;
    run_bin(&[&w[..], &["train-baseline", "--tasks", &p("train.tsv"), "--eval-tasks", &p("eval.tsv"), "--out", &p("base"), "--seed", "8"]].concat())?;
    let ckpt = p("base/checkpoints/policy_step000400.txt");
    run_bin(&[&w[..], &["collect", "--checkpoint", &ckpt, "--tasks", &p("train.tsv"), "--out", &p("pool.tsv"), "--min-paths", "1", "--seed", "8"]].concat())?;
    run_bin(&[&w[..], &["train-rlep", "--tasks", &p("train.tsv"), "--eval-tasks", &p("eval.tsv"), "--pool", &p("pool.tsv"), "--out", &p("rlep"), "--seed", "8"]].concat())?;
    run_bin(&[&w[..], &["report", "--baseline-log", &p("base/run_log.csv"), "--rlep-log", &p("rlep/run_log.csv"), "--out", &p("summary.csv")]].concat())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path(), "1")?;
    full_pipeline(b.path(), "4")?;
    let files = ["train.tsv", "eval.tsv", "base/run_log.csv", "pool.tsv", "rlep/run_log.csv", "rlep/group_sizes.csv", "summary.csv"];
    for f in files {
        check(read(&a.path().join(f)) == read(&b.path().join(f)), || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across runs with 1 and 4 workers", files.len()))
}

// ----------------------------------------------------------------

fn main() {
    // Name, body, runtime budget in seconds where one is set.
    let criteria: [(&str, fn() -> Outcome, Option<f64>); 8] = [
        ("1 gradient oracle", gradient_oracle, Some(10.0)),
        ("2 advantage invariants", advantage_invariants, Some(1.0)),
        ("3 clip-higher branches", clip_higher, Some(1.0)),
        ("4 M=0 reduction", m0_reduction, None),
        ("5 pool integrity", pool_integrity, None),
        ("6 convergence replication", convergence, Some(5.0 * 15.0 * 60.0)),
        ("7 token-mean vs sequence-mean", aggregation_modes, None),
        ("8 pipeline determinism", determinism, None),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        let result = result.and_then(|d| match budget {
            Some(b) if secs > b => Err(format!("took {secs:.2}s, budget {b}s ({d})")),
            _ => Ok(d),
        });
        match result {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
