//! The employee/bonus example end to end: parse, execute, inspect annotations.

use reenact_core::auditlog::parse_log;
use reenact_core::history::{execute_history, HistoryState};
use reenact_core::mvsemiring::TxnId;
use reenact_core::relalg::{Tuple, Value};

fn employees() -> HistoryState {
    let log = parse_log(include_str!("fixtures/employees.log")).unwrap();
    execute_history(&log.history).unwrap()
}

fn tup(vals: &[Value]) -> Tuple {
    Tuple(vals.to_vec())
}

fn i(v: i64) -> Value {
    Value::Int(v)
}

fn s(v: &str) -> Value {
    Value::Str(v.into())
}

#[test]
fn seed_state_annotations() {
    let st = employees();
    let emp = st.committed_at("Employee", 18).unwrap();
    let e1 = emp.get(&tup(&[i(101), s("Mark Smith"), s("Software Engineer")])).unwrap();
    assert_eq!(e1.render(), "C[T0,6,1](I[T0,2,1](x1))");
    let bonus = st.committed_at("Bonus", 18).unwrap();
    let expect = [
        ((1, 101, 1000), "C[T1,10,4](I[T1,8,4](x4))"),
        ((2, 102, 2000), "C[T2,14,5](I[T2,12,5](x5))"),
        ((3, 103, 500), "C[T4,18,6](I[T4,16,6](x6))"),
    ];
    assert_eq!(bonus.len(), 3);
    for ((a, b, c), ann) in expect {
        assert_eq!(bonus.get(&tup(&[i(a), i(b), i(c)])).unwrap().render(), ann);
    }
}

#[test]
fn final_state_annotations() {
    let st = employees();
    let emp = st.committed_at("Employee", 26).unwrap();
    let e1 = emp.get(&tup(&[i(101), s("Mark Smith"), s("Software Architect")])).unwrap();
    assert_eq!(e1.render(), "C[T7,26,1](U[T7,21,1](C[T0,6,1](I[T0,2,1](x1))))");

    let bonus = st.committed_at("Bonus", 26).unwrap();
    let b1 = bonus.get(&tup(&[i(1), i(101), i(2000)])).unwrap();
    assert_eq!(b1.render(), "C[T7,26,4](U[T7,22,4](C[T1,10,4](I[T1,8,4](x4))))");
    let b4 = bonus.get(&tup(&[i(4), i(101), i(500)])).unwrap();
    assert_eq!(b4.render(), "C[T8,24,7](I[T8,23,7](C[T0,6,1](I[T0,2,1](x1))))");

    let live: Vec<_> = HistoryState::live_bag(&bonus).into_iter().collect();
    let want: Vec<_> = [(1, 101, 2000), (2, 102, 2000), (3, 103, 500), (4, 101, 500)]
        .iter()
        .map(|&(a, b, c)| (tup(&[i(a), i(b), i(c)]), 1u64))
        .collect();
    assert_eq!(live, want);
}

#[test]
fn snapshot_seen_by_concurrent_insert() {
    let st = employees();
    // T8 starts at 22 and sees the committed Bonus, unaffected by T7's update.
    let seen = st.relation_in_txn("Bonus", TxnId(8), 22).unwrap();
    assert_eq!(seen, st.committed_at("Bonus", 22).unwrap());
    let b1 = seen.get(&tup(&[i(1), i(101), i(1000)])).unwrap();
    assert_eq!(b1.render(), "C[T1,10,4](I[T1,8,4](x4))");
    // T7 sees its own uncommitted update.
    let own = st.relation_in_txn("Bonus", TxnId(7), 22).unwrap();
    assert!(own.get(&tup(&[i(1), i(101), i(2000)])).is_some());
}

#[test]
fn provenance_table_for_t7() {
    use reenact_core::provenance::transaction_provenance;
    let log = parse_log(include_str!("fixtures/employees.log")).unwrap();
    let st = execute_history(&log.history).unwrap();
    let p = transaction_provenance(&log.history, &st, TxnId(7), "Bonus").unwrap();
    assert_eq!(p.to_csv().unwrap(), include_str!("golden/t7_bonus.csv"));
    let t8 = transaction_provenance(&log.history, &st, TxnId(8), "Bonus").unwrap();
    assert_eq!(t8.rows.len(), 1);
    assert_eq!(t8.rows[0][0], Some(i(4)));
    assert_eq!(t8.rows[0][3], Some(i(101)));
}

#[test]
fn checks_pass_on_the_example() {
    use reenact_core::mvsemiring::LiftedHom;
    use reenact_core::verify::{check_bag_oracle, check_hom_commutation, check_immediate_predecessors, check_theorem1};
    let log = parse_log(include_str!("fixtures/employees.log")).unwrap();
    let st = execute_history(&log.history).unwrap();
    for t in [0, 1, 2, 4, 7, 8] {
        let v = check_theorem1(&log.history, &st, TxnId(t));
        assert!(v.passed(), "{v:?}");
        assert!(check_immediate_predecessors(&log.history, &st, TxnId(t)).passed());
    }
    assert!(check_bag_oracle(&log.history, &st).passed());
    for h in [LiftedHom::vars_to_one(), LiftedHom::vars_to_true()] {
        assert!(check_hom_commutation(&log.history, &st, &h).passed());
    }
}

#[test]
fn bag_oracle_agrees_on_final_bonus() {
    let log = parse_log(include_str!("fixtures/employees.log")).unwrap();
    let bags = reenact_core::verify::bag_oracle(&log.history).unwrap();
    let bonus = &bags[&26]["Bonus"];
    let want: Vec<_> = [(1, 101, 2000), (2, 102, 2000), (3, 103, 500), (4, 101, 500)]
        .iter()
        .map(|&(a, b, c)| (tup(&[i(a), i(b), i(c)]), 1u64))
        .collect();
    assert_eq!(bonus.clone().into_iter().collect::<Vec<_>>(), want);
}
