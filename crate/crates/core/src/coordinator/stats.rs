use serde::{Deserialize, Serialize};

use crate::protocol::{ProxyStats, QueryId};

const HOUR_MS: u64 = 3_600_000;
const DAY_MS: u64 = 24 * HOUR_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    QueryAssigned,
    ResponseDelivered,
    Downvote,
    AuditPass,
    AuditFail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyEvent {
    pub kind: EventKind,
    pub query_id: QueryId,
    pub assigned_at: u64,
    pub completed_at: Option<u64>,
}

/// Reputation over a proxy's event log. Only answered queries count towards
/// SLA and MTTR; unanswered ones are simply not finished yet.
pub fn compute_proxy_stats(events: &[ProxyEvent], now: u64, sla_threshold_ms: u64) -> ProxyStats {
    let mut finished = 0u32;
    let mut within_sla = 0u32;
    let mut latency_sum = 0u64;
    let mut downvotes = 0u32;
    let (mut load_day, mut load_hour) = (0u32, 0u32);
    for e in events {
        match e.kind {
            EventKind::ResponseDelivered => {
                let Some(done) = e.completed_at else { continue };
                let latency = done.saturating_sub(e.assigned_at);
                finished += 1;
                latency_sum += latency;
                within_sla += u32::from(latency < sla_threshold_ms);
            }
            EventKind::Downvote => downvotes += 1,
            EventKind::QueryAssigned => {
                let age = now.saturating_sub(e.assigned_at);
                load_day += u32::from(age < DAY_MS);
                load_hour += u32::from(age < HOUR_MS);
            }
            EventKind::AuditPass | EventKind::AuditFail => {}
        }
    }
    let ratio = |num: u32, den: u32| (den > 0).then(|| f64::from(num) / f64::from(den));
    ProxyStats {
        sla_rate: ratio(within_sla, finished),
        mttr_seconds: (finished > 0).then(|| latency_sum as f64 / 1000.0 / f64::from(finished)),
        load_day,
        load_hour,
        downvote_rate: ratio(downvotes, finished),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, assigned_at: u64, completed_at: Option<u64>) -> ProxyEvent {
        ProxyEvent {
            kind,
            query_id: QueryId([0; 16]),
            assigned_at,
            completed_at,
        }
    }

    #[test]
    fn sla_and_mttr_over_finished_only() {
        let events: Vec<_> = [30_000, 45_000, 90_000]
            .into_iter()
            .map(|l| ev(EventKind::ResponseDelivered, 0, Some(l)))
            .chain([ev(EventKind::QueryAssigned, 0, None)])
            .collect();
        let s = compute_proxy_stats(&events, 100_000, 60_000);
        assert_eq!(s.sla_rate, Some(2.0 / 3.0));
        assert_eq!(s.mttr_seconds, Some(55.0));
        assert_eq!(s.downvote_rate, Some(0.0));
    }

    #[test]
    fn downvote_rate_and_empty_denominators() {
        let mut events: Vec<_> = (0..4).map(|_| ev(EventKind::ResponseDelivered, 0, Some(1_000))).collect();
        events.push(ev(EventKind::Downvote, 0, None));
        assert_eq!(compute_proxy_stats(&events, 0, 60_000).downvote_rate, Some(0.25));

        let s = compute_proxy_stats(&[ev(EventKind::QueryAssigned, 0, None)], 10, 60_000);
        assert_eq!((s.sla_rate, s.mttr_seconds, s.downvote_rate), (None, None, None));
    }

    #[test]
    fn load_windows() {
        let now = 10 * DAY_MS;
        let events = [
            ev(EventKind::QueryAssigned, now - 10 * 60_000, None),
            ev(EventKind::QueryAssigned, now - 2 * HOUR_MS, None),
            ev(EventKind::QueryAssigned, now - 2 * DAY_MS, None),
        ];
        let s = compute_proxy_stats(&events, now, 60_000);
        assert_eq!((s.load_hour, s.load_day), (1, 2));
    }
}
