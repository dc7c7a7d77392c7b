mod common;

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use cxrinf_annotate::campaign::blind_order;
use cxrinf_annotate::{Campaign, CampaignState, Choice, ManualClock};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Poll(u8),
    Pick(u8, u8),
    Reject(u8),
    Renew(u8),
    Wait(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..3).prop_map(Op::Poll),
        (0u8..3, 0u8..6).prop_map(|(r, c)| Op::Pick(r, c)),
        (0u8..3).prop_map(Op::Reject),
        (0u8..3).prop_map(Op::Renew),
        (1u8..30).prop_map(Op::Wait),
    ]
}

proptest! {
    #[test]
    fn blinding_is_a_seeded_permutation(seed in any::<u64>(), n in 0usize..26) {
        let order = blind_order(seed, n);
        prop_assert_eq!(order.len(), n);
        prop_assert_eq!(order.iter().copied().collect::<HashSet<_>>().len(), n);
        prop_assert!(order.iter().all(|&i| i < n));
        prop_assert_eq!(order, blind_order(seed, n));
    }

    #[test]
    fn choices_round_trip(label in "[A-Z]") {
        let c = Choice::Label(label.clone());
        prop_assert_eq!(c.to_string().parse::<Choice>().unwrap(), c);
        prop_assert_eq!(Choice::RejectAll.to_string().parse::<Choice>().unwrap(), Choice::RejectAll);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever reviewers do, and however long they stall, the log replays
    /// to the live state and reopening the store changes nothing.
    #[test]
    fn any_session_replays_byte_identically(ops in prop::collection::vec(op(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let mut c = common::campaign(dir.path(), clock.clone(), 3, 3);
        let mut held: [Option<String>; 3] = [None, None, None];
        for op in ops {
            match op {
                Op::Poll(r) => held[r as usize] = c.next_task(&format!("r{r}")).unwrap().map(|p| p.task_id),
                Op::Pick(r, _) | Op::Reject(r) if held[r as usize].is_none() => {}
                Op::Pick(r, k) => {
                    let t = held[r as usize].take().unwrap();
                    let label = ((b'A' + k) as char).to_string();
                    // stale locks and unknown labels are refused, never half-applied
                    let _ = c.submit_selection(&t, &format!("r{r}"), Choice::Label(label));
                }
                Op::Reject(r) => {
                    let t = held[r as usize].take().unwrap();
                    let _ = c.submit_selection(&t, &format!("r{r}"), Choice::RejectAll);
                }
                Op::Renew(r) => {
                    if let Some(t) = &held[r as usize] {
                        let _ = c.renew_lock(t, &format!("r{r}"));
                    }
                }
                Op::Wait(m) => clock.advance(Duration::from_secs(60 * m as u64)),
            }
        }
        let p = c.progress().unwrap();
        prop_assert_eq!(p.open + p.locked + p.completed + p.rejected_all, 6);
        let live = c.state().canonical_json();
        prop_assert_eq!(&CampaignState::replay(&c.log_path()).unwrap().canonical_json(), &live);
        drop(c);
        let reopened = Campaign::open(dir.path(), clock).unwrap();
        prop_assert_eq!(&reopened.state().canonical_json(), &live);
    }
}
