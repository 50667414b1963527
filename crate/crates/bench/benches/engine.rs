use std::collections::BTreeMap;
use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use negosim_core::agents::{Agent, AgentSpec, ScriptedPolicy};
use negosim_core::scenario::bundled;
use negosim_core::stats::{fit_logistic, Design};
use negosim_core::{parse_action, run_negotiation, RunOptions, Scenario, Transcript, Treatment, TreatmentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn agents(s: &Scenario) -> BTreeMap<String, Box<dyn Agent>> {
    let ladder = ScriptedPolicy::ConcessionLadder { start: None, order: vec![], threshold: 99_999, words: 60 };
    let accepter = ScriptedPolicy::AdaptiveAccepter { threshold: 15_000, floor: 6_000, scale: 900.0, words: 45 };
    [(&s.roles[0], ladder), (&s.roles[1], accepter)]
        .into_iter()
        .map(|(r, p)| (r.clone(), AgentSpec::Scripted(p).build(None).unwrap()))
        .collect()
}

fn negotiation(c: &mut Criterion) {
    let s = Arc::new(bundled::new_recruit());
    for tr in [Treatment::Control, Treatment::TimeAware] {
        let cfg = TreatmentConfig::timed(tr, 360);
        c.bench_function(&format!("run_negotiation/{}", cfg.label()), |b| {
            let mut seed = 0u64;
            b.iter_batched(
                || agents(&s),
                |mut a| {
                    seed += 1;
                    run_negotiation(s.clone(), &mut a, &cfg, "hr", seed, &RunOptions::default()).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn transcript_io(c: &mut Criterion) {
    let s = Arc::new(bundled::new_recruit());
    let mut a = agents(&s);
    let cfg = TreatmentConfig::turn_limited(60);
    let never = ScriptedPolicy::NeverAgree { words: 80 };
    a.insert("candidate".into(), AgentSpec::Scripted(never).build(None).unwrap());
    let t = run_negotiation(s.clone(), &mut a, &cfg, "hr", 1, &RunOptions::default()).unwrap();
    let text = t.to_jsonl();
    c.bench_function("transcript/to_jsonl", |b| b.iter(|| black_box(&t).to_jsonl()));
    c.bench_function("transcript/from_jsonl", |b| b.iter(|| Transcript::from_jsonl(black_box(&text)).unwrap()));
    let raw = &t.events[0].raw;
    c.bench_function("parse_action", |b| b.iter(|| parse_action(black_box(raw), &s).unwrap()));
}

fn utility(c: &mut Criterion) {
    let s = bundled::rubbermind();
    let bundle = s.best_bundle(&s.roles[0]);
    c.bench_function("utility/rubbermind", |b| {
        b.iter(|| s.utility(black_box(&s.roles[1]), black_box(&bundle)).unwrap())
    });
}

fn logistic(c: &mut Criterion) {
    let beta = [-12.43, 1.23, 1.60, 1.85, 0.70];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut d = Design::new(["intercept", "d300", "d360", "ta", "payoff"].map(String::from).to_vec());
    for i in 0..5000 {
        let level = rng.gen_range(0..3);
        let x = [1.0, (level == 1) as u8 as f64, (level == 2) as u8 as f64, rng.gen_bool(0.5) as u8 as f64, rng.gen_range(12.0..22.0)];
        let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        d.push(&x, rng.gen_bool(1.0 / (1.0 + (-eta).exp())), i / 8);
    }
    c.bench_function("fit_logistic/5000x5", |b| b.iter(|| fit_logistic(black_box(&d)).unwrap()));
}

criterion_group!(benches, negotiation, transcript_io, utility, logistic);
criterion_main!(benches);
