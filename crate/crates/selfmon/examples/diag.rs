use numcore::{ParamSet, Tape};
use selfmon::agent::{BnStats, ModelDims};
use selfmon::inference::{AgentPolicy, Policy};
use selfmon::rng::{stream, tag};
use selfmon::training::{
    rollout_episode, teacher_action, train_with, ActionSource, BoundNet, Checkpoint, TrainConfig,
};
use selfmon::worldgen::{generate_benchmark, Benchmark, Episode, GenConfig, Split};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// Eval-mode forward passes along the teacher path; counts argmax(p) == teacher.
fn eval_mode_probe(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    eps: &[&Episode],
) -> (f64, Vec<(usize, usize)>) {
    let mut hit = 0usize;
    let mut tot = 0usize;
    let mut by_step: Vec<(usize, usize)> = Vec::new();
    for ep in eps {
        let graph = bench.world(ep.world_id).unwrap();
        let mut policy = AgentPolicy::new(params, dims, stats, &ep.instruction);
        let mut state = policy.start(graph, ep.start).unwrap();
        let mut v = ep.start;
        for t in 0..20 {
            let teacher = teacher_action(graph, v, ep.goal).unwrap();
            let (scores, ex) = policy.expand(graph, v, &state).unwrap();
            if by_step.len() <= t {
                by_step.push((0, 0));
            }
            let pick = argmax(&scores.p);
            if pick == teacher {
                hit += 1;
                by_step[t].0 += 1;
            }
            tot += 1;
            by_step[t].1 += 1;
            if teacher == 0 {
                break;
            }
            state = policy.advance(&ex, teacher).unwrap();
            v = graph.neighbors(v)[teacher - 1].target;
        }
    }
    (hit as f64 / tot as f64, by_step)
}

// Train-mode forward passes (dropout on, batch stats) along the teacher path.
fn train_mode_probe(
    params: &ParamSet,
    dims: &ModelDims,
    stats: &BnStats,
    bench: &Benchmark,
    eps: &[&Episode],
    cfg: &TrainConfig,
) -> f64 {
    let loss_cfg = cfg.loss_config(bench.success_threshold_m).unwrap();
    let mut hit = 0usize;
    let mut tot = 0usize;
    for ep in eps {
        let graph = bench.world(ep.world_id).unwrap();
        let mut rng = stream(999, &[tag::ROLLOUT, 0, ep.id as u64]);
        let mut tape = Tape::new();
        let (net, _) = BoundNet::bind(&mut tape, params, dims).unwrap();
        let r = rollout_episode(
            &mut tape,
            &net,
            dims,
            stats,
            graph,
            ep,
            &loss_cfg,
            ActionSource::Teacher,
            &mut rng,
        )
        .unwrap();
        for s in &r.steps {
            if argmax(&s.p) == s.teacher {
                hit += 1;
            }
            tot += 1;
        }
    }
    (hit as f64) / tot as f64
}

fn main() {
    let bench = generate_benchmark(&GenConfig::desk(7)).unwrap();
    let dims = ModelDims::desk(bench.vocab.len());
    let cfg = TrainConfig::desk(7);
    let cache = std::path::Path::new("/tmp/diag_best.json");
    let best = if cache.exists() {
        println!("using cached checkpoint {}", cache.display());
        Checkpoint::load(cache).unwrap()
    } else {
        let start = Checkpoint::fresh(&dims, &cfg).unwrap();
        let t0 = std::time::Instant::now();
        let out = train_with(&bench, &start, |m| {
            if m.epoch % 5 == 4 || m.epoch == 0 {
                println!(
                    "epoch {:3} {:10} loss {:8.4} ne {:6.3} sr {:.3} ({:.1}s)",
                    m.epoch,
                    m.split.to_string(),
                    m.loss,
                    m.ne,
                    m.sr,
                    t0.elapsed().as_secs_f64()
                );
            }
        })
        .unwrap();
        println!("train time: {:.1}s", t0.elapsed().as_secs_f64());
        out.best_checkpoint.save(cache).unwrap();
        out.best_checkpoint
    };
    let (params, _, bn) = best.restore().unwrap();
    for (name, split, cap) in [
        ("train", Split::Train, 60),
        ("val_seen", Split::ValSeen, usize::MAX),
        ("val_unseen", Split::ValUnseen, usize::MAX),
    ] {
        let eps: Vec<&Episode> = bench.episodes_for(split).into_iter().take(cap).collect();
        let (acc, by_step) = eval_mode_probe(&params, &dims, &bn, &bench, &eps);
        let tacc = train_mode_probe(&params, &dims, &bn, &bench, &eps, &cfg);
        println!("{name}: eval-mode acc {acc:.3}, train-mode acc {tacc:.3}");
        print!("  per-step eval acc:");
        for (h, n) in &by_step {
            print!(" {:.2}({})", *h as f64 / *n as f64, n);
        }
        println!();
    }

    // criteria 6, 8, 9 margins on the best checkpoint
    let mut traces = Vec::new();
    let mut final_pm_success = Vec::new();
    let mut final_pm_failure = Vec::new();
    for split in [Split::ValSeen, Split::ValUnseen] {
        let (summary, runs) = selfmon::eval::evaluate_split(
            &params,
            &dims,
            &bn,
            &bench,
            split,
            selfmon::eval::DecodeMode::Greedy,
            cfg.max_steps,
        )
        .unwrap();
        println!(
            "{split}: ne {:.3} sr {:.3} osr {:.3} spl {:.3}",
            summary.ne, summary.sr, summary.osr, summary.spl
        );
        for run in &runs {
            if let Some(last) = run.log.steps.last() {
                let fin = selfmon::inference::normalize_progress(last.p_pm);
                if run.eval.success {
                    final_pm_success.push(fin);
                } else {
                    final_pm_failure.push(fin);
                }
            }
            if run.eval.success {
                traces.push(selfmon::metrics::AttentionTrace {
                    alphas: run.log.steps.iter().map(|s| s.alpha.clone()).collect(),
                    real_len: run.instruction_len.min(dims.l_max),
                });
            }
        }
    }
    let diag = selfmon::metrics::attention_diagonality(&traces).unwrap();
    println!(
        "diagonality: spearman {:.3} over {} pairs ({} traces)",
        diag.spearman,
        diag.pairs,
        traces.len()
    );
    println!("mean center by step: {:?}", diag.mean_center_by_step);
    for trace in traces.iter().take(3) {
        let centers: Vec<f64> = trace
            .alphas
            .iter()
            .map(|a| {
                let mass: f64 = a[..trace.real_len].iter().sum();
                a[..trace.real_len]
                    .iter()
                    .enumerate()
                    .map(|(i, w)| i as f64 * w)
                    .sum::<f64>()
                    / mass
            })
            .collect();
        println!(
            "  trace len {} centers {:?}",
            trace.real_len,
            centers.iter().map(|c| (c * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
        let a0 = &trace.alphas[0][..trace.real_len];
        let peaked: Vec<(usize, f64)> = a0
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.08)
            .map(|(i, w)| (i, (w * 100.0).round() / 100.0))
            .collect();
        println!("  step0 alpha peaks: {peaked:?}");
    }
    let ms = final_pm_success.iter().sum::<f64>() / final_pm_success.len().max(1) as f64;
    let mf = final_pm_failure.iter().sum::<f64>() / final_pm_failure.len().max(1) as f64;
    println!(
        "failure awareness: success mean {:.3} ({}), failure mean {:.3} ({}), gap {:.3}",
        ms,
        final_pm_success.len(),
        mf,
        final_pm_failure.len(),
        ms - mf
    );

    // Monte Carlo random policy baseline on val_unseen
    let mut rng = stream(7, &[tag::MONTE_CARLO]);
    let eps = bench.episodes_for(Split::ValUnseen);
    let mut successes = 0usize;
    let mut n = 0usize;
    for ep in &eps {
        let graph = bench.world(ep.world_id).unwrap();
        for _ in 0..200 {
            let mut v = ep.start;
            for _ in 0..cfg.max_steps {
                let k = graph.neighbors(v).len();
                let a = rand::Rng::gen_range(&mut rng, 0..=k);
                if a == 0 {
                    break;
                }
                v = graph.neighbors(v)[a - 1].target;
            }
            if graph.shortest_path_distance(v, ep.goal).unwrap() <= bench.success_threshold_m {
                successes += 1;
            }
            n += 1;
        }
    }
    println!(
        "random-policy SR (MC {} rollouts): {:.4}",
        n,
        successes as f64 / n as f64
    );
}
