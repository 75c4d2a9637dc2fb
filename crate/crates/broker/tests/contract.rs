//! Runs the shared contract suite against both broker implementations.

use esg_broker::testing::{self, Backend, MemoryBackend, RespBackend};

macro_rules! contract {
    ($backend:ident: $($case:ident),* $(,)?) => {
        $(
            #[test]
            fn $case() {
                testing::$case(&*$backend());
            }
        )*
    };
}

fn memory() -> Box<dyn Backend> {
    Box::new(MemoryBackend)
}

fn resp() -> Box<dyn Backend> {
    Box::new(RespBackend::new())
}

mod in_process {
    use super::*;
    contract!(memory: enqueue_sets_queued, duplicate_enqueue_is_rejected, claim_is_fifo_per_queue, queues_are_separate, empty_claim_returns_none, claim_waits_for_enqueue, claim_race, visibility_expiry_redelivery, reap_leaves_live_leases, reap_skips_completed_tasks, renewed_lease_survives, renew_requires_the_lease, status_transitions, unknown_task_errors, outcome_is_write_once, fetch_is_repeatable, failure_outcome_passes_through, delete_removes_everything, claim_skips_deleted_and_finished, scan_reports_metadata, cross_handle_visibility, blocking_claim_does_not_starve, at_least_once_under_crashes);
}

mod resp_backed {
    use super::*;
    contract!(resp: enqueue_sets_queued, duplicate_enqueue_is_rejected, claim_is_fifo_per_queue, queues_are_separate, empty_claim_returns_none, claim_waits_for_enqueue, claim_race, visibility_expiry_redelivery, reap_leaves_live_leases, reap_skips_completed_tasks, renewed_lease_survives, renew_requires_the_lease, status_transitions, unknown_task_errors, outcome_is_write_once, fetch_is_repeatable, failure_outcome_passes_through, delete_removes_everything, claim_skips_deleted_and_finished, scan_reports_metadata, cross_handle_visibility, blocking_claim_does_not_starve, at_least_once_under_crashes);
}

#[test]
fn suite_lists_every_case() {
    assert_eq!(testing::CASES.len(), 23);
}
