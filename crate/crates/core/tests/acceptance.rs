//! One line per acceptance criterion. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reenact_core::auditlog::{parse_log, serialize_log};
use reenact_core::history::execute_history;
use reenact_core::mvsemiring::{normalize, AnnotExpr, BaseSemiring, LiftedHom, TxnId};
use reenact_core::provenance::transaction_provenance;
use reenact_core::relalg::{eval_version_filter, eval_version_merge, CmpOp, Tuple, VCond, Value};
use reenact_core::verify::gen::{random_annotation, random_expr, random_relation};
use reenact_core::verify::{fuzz, random_history, Check, FuzzConfig, Verdict};

const EMPLOYEES: &str = include_str!("fixtures/employees.log");
const CASES: usize = 10_000;

type Outcome = Result<String, String>;

fn verdict(v: Verdict, summary: impl FnOnce(&Verdict) -> String) -> Outcome {
    if v.passed() {
        Ok(summary(&v))
    } else {
        Err(serde_json::to_string(&v.to_json()).unwrap())
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let log = parse_log(EMPLOYEES).map_err(|e| e.to_string())?;
    let st = execute_history(&log.history).map_err(|e| e.to_string())?;
    let int = |i: i64| Value::Int(i);
    let s = |x: &str| Value::Str(x.into());
    let checks = [
        (
            "Employee",
            Tuple(vec![int(101), s("Mark Smith"), s("Software Architect")]),
            "C[T7,26,1](U[T7,21,1](C[T0,6,1](I[T0,2,1](x1))))",
        ),
        ("Bonus", Tuple(vec![int(1), int(101), int(2000)]), "C[T7,26,4](U[T7,22,4](C[T1,10,4](I[T1,8,4](x4))))"),
        ("Bonus", Tuple(vec![int(4), int(101), int(500)]), "C[T8,24,7](I[T8,23,7](C[T0,6,1](I[T0,2,1](x1))))"),
    ];
    for (rel, t, want) in checks {
        let r = st.committed_at(rel, 26).map_err(|e| e.to_string())?;
        let got = r.get(&t).map(|k| k.render()).unwrap_or_else(|| "0".into());
        ensure(got == want, || format!("{rel}{t}: expected {want}, got {got}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 1.0, || format!("took {elapsed:?}"))?;
    Ok(format!("e1', b1', b4 exact in {:.1} ms", elapsed.as_secs_f64() * 1e3))
}

fn criterion2() -> Outcome {
    let start = Instant::now();
    let v = fuzz(&FuzzConfig {
        seed: 2,
        iters: 1000,
        check: Check::Theorem1,
        ..FuzzConfig::default()
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(v, |v| {
        format!(
            "{} histories, {} transactions, {} with R_opt ({} exact), {secs:.1} s",
            v.stats.histories, v.stats.transactions, v.stats.opt_transactions, v.stats.exact_opt_transactions
        )
    })
}

fn criterion3() -> Outcome {
    let v = fuzz(&FuzzConfig {
        seed: 3,
        iters: 200,
        check: Check::Homs,
        pairs_per_history: 3,
        ..FuzzConfig::default()
    });
    let homs = verdict(v, |v| format!("{} histories, {} operator pairs", v.stats.hom_histories, v.stats.operator_pairs))?;
    let l4 = fuzz(&FuzzConfig {
        seed: 3,
        iters: 1000,
        check: Check::Lemma4,
        ..FuzzConfig::default()
    });
    let lemma = verdict(l4, |v| format!("{} eligible transactions", v.stats.lemma4_transactions))?;
    Ok(format!("{homs}; predecessors: {lemma}"))
}

fn criterion4() -> Outcome {
    let v = fuzz(&FuzzConfig {
        seed: 4,
        iters: 500,
        check: Check::Bag,
        ..FuzzConfig::default()
    });
    verdict(v, |v| format!("{} histories, {} versions compared", v.stats.histories, v.stats.bag_versions))
}

fn criterion5() -> Outcome {
    let mut total = 0;
    for (seed, mix) in [(5, FuzzConfig::default().op_mix), (6, [0.45, 0.25, 0.0, 0.3])] {
        let v = fuzz(&FuzzConfig {
            seed,
            iters: 500,
            check: Check::Theorem1,
            op_mix: mix,
            ..FuzzConfig::default()
        });
        total += verdict(v, |v| v.stats.access_checks.to_string())?.parse::<u64>().unwrap();
    }
    ensure(total > 0, || "no update/delete-only transaction generated".into())?;
    Ok(format!("{total} update/delete-only transactions"))
}

fn criterion6() -> Outcome {
    let log = parse_log(EMPLOYEES).map_err(|e| e.to_string())?;
    let st = execute_history(&log.history).map_err(|e| e.to_string())?;
    let p = transaction_provenance(&log.history, &st, TxnId(7), "Bonus").map_err(|e| e.to_string())?;
    let csv = p.to_csv().map_err(|e| e.to_string())?;
    let golden = include_str!("golden/t7_bonus.csv");
    ensure(csv == golden, || format!("CSV differs:\n{csv}"))?;
    ensure(csv == p.to_csv().unwrap(), || "CSV is not stable".into())?;
    Ok("T7 on Bonus matches golden CSV".into())
}

fn criterion7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ks = [BaseSemiring::Nat, BaseSemiring::Bool, BaseSemiring::ProvPoly];
    let n = |e: &AnnotExpr, k| normalize(e, k);
    for i in 0..CASES {
        let k = ks[i % 3];
        let (a, b, c) = (random_expr(&mut rng, k, 3), random_expr(&mut rng, k, 3), random_expr(&mut rng, k, 3));
        let zero = AnnotExpr::base(k.zero());
        let one = AnnotExpr::base(k.one());
        let add = |x: &AnnotExpr, y: &AnnotExpr| AnnotExpr::sum(x.clone(), y.clone());
        let mul = |x: &AnnotExpr, y: &AnnotExpr| AnnotExpr::product(x.clone(), y.clone());
        let laws = [
            ("a+b = b+a", n(&add(&a, &b), k), n(&add(&b, &a), k)),
            ("ab = ba", n(&mul(&a, &b), k), n(&mul(&b, &a), k)),
            ("(a+b)+c = a+(b+c)", n(&add(&add(&a, &b), &c), k), n(&add(&a, &add(&b, &c)), k)),
            ("(ab)c = a(bc)", n(&mul(&mul(&a, &b), &c), k), n(&mul(&a, &mul(&b, &c)), k)),
            ("a(b+c) = ab+ac", n(&mul(&a, &add(&b, &c)), k), n(&add(&mul(&a, &b), &mul(&a, &c)), k)),
            ("a+0 = a", n(&add(&a, &zero), k), n(&a, k)),
            ("a1 = a", n(&mul(&a, &one), k), n(&a, k)),
            ("a0 = 0", n(&mul(&a, &zero), k), n(&zero, k)),
        ];
        for (law, l, r) in laws {
            ensure(l == r, || format!("{law} fails in {} for a={a}, b={b}, c={c}: {l} vs {r}", k.name()))?;
        }
    }
    for i in 0..CASES {
        let k = ks[i % 3];
        let e = random_expr(&mut rng, k, 4);
        let once = normalize(&e, k);
        let twice = normalize(&once.to_expr(), k);
        ensure(once == twice, || format!("normalize not idempotent on {e}: {once} vs {twice}"))?;
        // Congruence under a version annotation.
        let ann = random_annotation(&mut rng);
        let wrapped = normalize(&AnnotExpr::wrap(ann, e.clone()), k);
        let wrapped_nf = normalize(&AnnotExpr::wrap(ann, once.to_expr()), k);
        ensure(wrapped == wrapped_nf, || format!("annotation is not a congruence on {e}"))?;
    }
    // Admissible relations: committed versions of fuzzed histories.
    let cfg = FuzzConfig::default();
    let mut merged = 0;
    while merged < CASES {
        let h = random_history(&cfg, &mut rng);
        let st = execute_history(&h).map_err(|e| e.to_string())?;
        for s in st.schemas() {
            for v in 1..=st.horizon() {
                let r = st.committed_at(&s.name, v).map_err(|e| e.to_string())?;
                let m = eval_version_merge(&r, &r).map_err(|e| e.to_string())?;
                ensure(m == r, || format!("merge(R,R) != R for\n{}", r.render_text()))?;
                merged += 1;
            }
        }
    }
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
    for i in 0..CASES {
        use rand::Rng;
        let r = random_relation(&mut rng, ks[i % 3]);
        let c1 = VCond::cmp(ops[rng.gen_range(0..6)], rng.gen_range(0..13));
        let c2 = VCond::cmp(ops[rng.gen_range(0..6)], rng.gen_range(0..13));
        let all = VCond::cmp(CmpOp::Ge, 0);
        let id = eval_version_filter(&all, &r).map_err(|e| e.to_string())?;
        ensure(id == r, || format!("filter({all}) is not the identity"))?;
        let nested = eval_version_filter(&c1, &eval_version_filter(&c2, &r).unwrap()).unwrap();
        let both = eval_version_filter(&VCond::and(c1.clone(), c2.clone()), &r).unwrap();
        ensure(nested == both, || format!("filter({c1}) . filter({c2}) != filter({c1} AND {c2})"))?;
        let swapped = eval_version_filter(&c2, &eval_version_filter(&c1, &r).unwrap()).unwrap();
        ensure(nested == swapped, || "version filters do not commute".into())?;
        // Homomorphisms commute with both operators on arbitrary relations.
        let h = LiftedHom::vars_to_one();
        if r.semiring() == BaseSemiring::ProvPoly {
            let a = eval_version_filter(&c1, &r).unwrap().map_annotations(&h);
            let b = eval_version_filter(&c1, &r.map_annotations(&h)).unwrap();
            ensure(a == b, || "filter does not commute with vars-to-1".into())?;
        }
    }
    Ok(format!("{CASES} cases each for semiring laws, normalization, merge, filter"))
}

fn criterion8() -> Outcome {
    let v = fuzz(&FuzzConfig {
        seed: 8,
        iters: 1000,
        check: Check::Roundtrip,
        ..FuzzConfig::default()
    });
    let fuzzed = verdict(v, |v| format!("{} fuzzed histories", v.stats.roundtrips))?;

    let log = parse_log(EMPLOYEES).map_err(|e| e.to_string())?;
    let text = serialize_log(&log.history)?;
    let back = parse_log(&text).map_err(|e| e.to_string())?;
    ensure(back.history == log.history, || format!("running example does not round-trip:\n{text}"))?;

    let malformed = [
        include_str!("fixtures/malformed/syntax.log"),
        include_str!("fixtures/malformed/unknown_table.log"),
        include_str!("fixtures/malformed/unknown_column.log"),
        include_str!("fixtures/malformed/duplicate_timestamp.log"),
        include_str!("fixtures/malformed/after_commit.log"),
        include_str!("fixtures/malformed/uncommitted.log"),
        include_str!("fixtures/malformed/type_mismatch.log"),
    ];
    for (i, text) in malformed.iter().enumerate() {
        match catch_unwind(|| parse_log(text)) {
            Ok(Err(e)) => ensure(e.line > 0 && e.column > 0, || format!("fixture {i}: unpositioned error {e}"))?,
            Ok(Ok(_)) => return Err(format!("malformed fixture {i} parsed")),
            Err(_) => return Err(format!("malformed fixture {i} panicked")),
        }
    }
    // Every prefix of the corpus either parses or fails with a position.
    let mut prefixes = 0;
    for (cut, _) in EMPLOYEES.char_indices() {
        let text = &EMPLOYEES[..cut];
        match catch_unwind(AssertUnwindSafe(|| parse_log(text))) {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => ensure(e.line > 0 && e.column > 0, || format!("prefix {cut}: unpositioned error {e}"))?,
            Err(_) => return Err(format!("parser panicked on a prefix of length {cut}")),
        }
        prefixes += 1;
    }
    Ok(format!(
        "{fuzzed} plus the running example; {} malformed fixtures and {prefixes} truncations rejected with positions",
        malformed.len()
    ))
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        match catch_unwind(f) {
            Ok(Ok(msg)) => println!("criterion {n}: PASS {msg}"),
            Ok(Err(msg)) => {
                failed += 1;
                println!("criterion {n}: FAIL {msg}");
            }
            Err(_) => {
                failed += 1;
                println!("criterion {n}: FAIL panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
