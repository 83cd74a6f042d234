use govkit_core::ids::UserId;
use govkit_core::model::{quorum, DataStore, Proposal, UserVote, VoteValue, DATA_STORE_CAP};
use govkit_core::time::Timestamp;
use govkit_core::ErrorCode;
use proptest::prelude::*;
use serde_json::json;

proptest! {
    #[test]
    fn quorum_is_the_least_count_reaching_the_share(n in 0usize..10_000, pct in 0u32..=100) {
        // Oracle: linear search for the smallest k with k/n >= pct/100.
        let k = (0..=n).find(|k| k * 100 >= n * pct as usize).unwrap();
        prop_assert_eq!(quorum(n, pct), k);
    }

    #[test]
    fn a_voter_holds_at_most_one_vote(votes in proptest::collection::vec((0u8..5, any::<bool>()), 0..40)) {
        let mut p = Proposal::new(Timestamp::EPOCH);
        let mut last = std::collections::BTreeMap::new();
        for (v, b) in &votes {
            let voter = UserId(format!("u{v}"));
            p.cast(UserVote { voter: voter.clone(), action: "a-1".into(), value: VoteValue::Boolean(*b), cast_at: Timestamp::EPOCH });
            last.insert(voter, *b);
        }
        let t = p.tally(0);
        prop_assert_eq!(t.yes as usize, last.values().filter(|b| **b).count());
        prop_assert_eq!(t.no as usize, last.values().filter(|b| !**b).count());
        prop_assert_eq!(p.votes.len(), last.len());
    }
}

#[test]
fn data_store_rejects_writes_past_the_cap_and_keeps_old_value() {
    let mut d = DataStore::default();
    d.set("k", json!("small")).unwrap();
    let big = "x".repeat(DATA_STORE_CAP);
    let err = d.set("k", json!(big)).unwrap_err();
    assert_eq!(err.code, ErrorCode::InvalidInput);
    assert_eq!(d.get("k"), Some(&json!("small")));
}

#[test]
fn decide_happens_once() {
    use govkit_core::model::ProposalStatus;
    let mut p = Proposal::new(Timestamp::EPOCH);
    assert!(p.decide(ProposalStatus::Passed, Timestamp::from_millis(5)));
    assert!(!p.decide(ProposalStatus::Failed, Timestamp::from_millis(6)));
    assert_eq!((p.status, p.decided_at), (ProposalStatus::Passed, Some(Timestamp::from_millis(5))));
}
