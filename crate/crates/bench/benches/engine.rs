use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use reenact_core::auditlog::parse_log;
use reenact_core::history::{execute_history, History};
use reenact_core::mvsemiring::TxnId;
use reenact_core::reenact::{evaluate, reenact_transaction, reenact_transaction_opt};
use reenact_core::verify::{fuzz, Check, FuzzConfig};

/// `rows` committed tuples, then T2 runs `updates` statements on R while
/// other transactions insert and commit in between.
fn workload(rows: usize, updates: usize) -> History {
    let mut log = String::from("TABLE R(A INT, B INT)\n");
    let mut t = 1;
    for i in 0..rows {
        log.push_str(&format!("{t} | T1 | INSERT INTO R VALUES ({i}, {});\n", i % 10));
        t += 1;
    }
    log.push_str(&format!("{t} | T1 | COMMIT;\n"));
    t += 1;
    for u in 0..updates {
        log.push_str(&format!("{t} | T2 | UPDATE R SET B = B + 1 WHERE B >= {};\n", u % 10));
        t += 1;
        let other = 10 + u;
        log.push_str(&format!("{t} | T{other} | INSERT INTO R VALUES ({}, 0);\n", rows + u));
        log.push_str(&format!("{} | T{other} | COMMIT;\n", t + 1));
        t += 2;
    }
    log.push_str(&format!("{t} | T2 | COMMIT;\n"));
    parse_log(&log).unwrap().history
}

fn reenactment(c: &mut Criterion) {
    let mut g = c.benchmark_group("reenact");
    for updates in [2, 4, 8] {
        let h = workload(50, updates);
        let st = execute_history(&h).unwrap();
        let chained = reenact_transaction(&h, TxnId(2), "R").unwrap();
        let single = reenact_transaction_opt(&h, TxnId(2), "R").unwrap();
        g.bench_with_input(BenchmarkId::new("chained", updates), &updates, |b, _| {
            b.iter(|| evaluate(black_box(&chained), &st).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("single_scan", updates), &updates, |b, _| {
            b.iter(|| evaluate(black_box(&single), &st).unwrap())
        });
    }
    g.finish();
}

fn execution(c: &mut Criterion) {
    let h = workload(100, 4);
    c.bench_function("execute_history", |b| b.iter(|| execute_history(black_box(&h)).unwrap()));
}

fn checker(c: &mut Criterion) {
    let cfg = FuzzConfig {
        iters: 20,
        check: Check::Theorem1,
        ..FuzzConfig::default()
    };
    c.bench_function("fuzz_theorem1_20", |b| b.iter(|| fuzz(black_box(&cfg))));
}

criterion_group!(benches, reenactment, execution, checker);
criterion_main!(benches);
