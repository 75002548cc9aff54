//! Counter properties checked against a tally kept by the test itself.

use ervm::counter::{Counter, CounterConfig, CounterProfile};
use ervm::isa::Mode;
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
enum Op {
    Retire { user: bool, mark: bool },
    Switch { mark: bool },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (any::<bool>(), any::<bool>()).prop_map(|(user, mark)| Op::Retire { user, mark }),
        1 => any::<bool>().prop_map(|mark| Op::Switch { mark }),
    ]
}

fn config() -> impl Strategy<Value = CounterConfig> {
    (any::<bool>(), any::<bool>(), any::<bool>())
        .prop_filter("at least one mode", |(u, s, _)| *u || *s)
        .prop_map(|(count_user, count_supervisor, marked_only)| CounterConfig {
            profile: CounterProfile::Exact,
            count_user,
            count_supervisor,
            marked_only,
        })
}

fn apply(c: &mut Counter, op: Op) {
    match op {
        Op::Retire { user, mark } => c.on_retire(if user { Mode::User } else { Mode::Supervisor }, mark),
        Op::Switch { mark } => c.on_mode_switch(mark),
    }
}

/// What an exact counter with `cfg`'s filters should read.
fn tally(cfg: &CounterConfig, ops: &[Op]) -> u64 {
    ops.iter()
        .filter(|op| match **op {
            Op::Retire { user, mark } => {
                (if user { cfg.count_user } else { cfg.count_supervisor }) && (mark || !cfg.marked_only)
            }
            Op::Switch { .. } => false,
        })
        .count() as u64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn compensated_count_equals_exact(cfg in config(), ops in prop::collection::vec(op(), 0..200)) {
        let mut exact = Counter::new(cfg);
        let mut ppc = Counter::new(cfg.with_profile(CounterProfile::PpcMpc7441));
        for &o in &ops {
            apply(&mut exact, o);
            apply(&mut ppc, o);
            prop_assert_eq!(ppc.corrected().unwrap(), exact.corrected().unwrap());
        }
        prop_assert_eq!(exact.corrected().unwrap(), tally(&cfg, &ops));
        // The raw PPC value really is off whenever a counted switch happened.
        let switches = ops.iter().filter(|o| matches!(o, Op::Switch { mark } if *mark || !cfg.marked_only)).count() as u64;
        prop_assert_eq!(ppc.state().raw, tally(&cfg, &ops) + switches);
    }

    #[test]
    fn pmi_fires_exactly_at_target(
        cfg in config(),
        ppc in any::<bool>(),
        ops in prop::collection::vec(op(), 1..200),
        prefix in 0usize..200,
        ahead in 0u64..60,
    ) {
        let cfg = if ppc { cfg.with_profile(CounterProfile::PpcMpc7441) } else { cfg };
        let prefix = prefix.min(ops.len());
        let mut c = Counter::new(cfg);
        for &o in &ops[..prefix] {
            apply(&mut c, o);
        }
        let target = tally(&cfg, &ops[..prefix]) + ahead;
        c.arm_pmi(target).unwrap();
        prop_assert_eq!(c.pmi_fired(), ahead == 0);
        for i in prefix..ops.len() {
            apply(&mut c, ops[i]);
            // Brute-force oracle: fired iff the exact tally has reached the
            // target by now.
            prop_assert_eq!(c.pmi_fired(), tally(&cfg, &ops[..=i]) >= target, "after op {}", i);
        }
    }
}

#[test]
fn arming_in_the_past_is_refused() {
    let mut c = Counter::new(CounterConfig::default());
    for _ in 0..3 {
        c.on_retire(Mode::User, false);
    }
    assert!(c.arm_pmi(2).is_err());
    c.arm_pmi(3).unwrap();
    assert!(c.pmi_fired());
    c.clear_pmi();
    assert!(!c.pmi_fired());
}

#[test]
fn flaky_counter_has_no_corrected_value() {
    let c = Counter::new(CounterConfig::all(CounterProfile::X86Flaky { seed: 1 }));
    assert!(c.corrected().is_err());
}
