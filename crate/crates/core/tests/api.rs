//! HTTP API behaviour against an in-process server.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

use c2ms::aggregator::StackedSeries;
use c2ms::api::StatusClass;
use c2ms::clock::ManualClock;
use c2ms::control::{JobState, Mode, Outcome};
use c2ms::protocol::{Datagram, Slope};
use c2ms::sim::{ApiClient, FleetOptions, SimProfile, Testbed, TestbedOptions, VirtualFleet};

const T0: u64 = 1_700_000_000;

async fn virtual_bed(allow_all: bool) -> (Testbed, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(T0));
    let tb = Testbed::start(TestbedOptions { clock: clock.clone(), allow_all_scope: allow_all, ..Default::default() })
        .await
        .unwrap();
    (tb, clock)
}

fn fleet(n: usize, cpu: f64) -> VirtualFleet {
    VirtualFleet::with_count(n, &SimProfile::constant(cpu), &FleetOptions::default()).unwrap()
}

#[tokio::test]
async fn login_then_authorised_calls() {
    let (tb, _) = virtual_bed(false).await;
    let c = tb.client().await.unwrap();
    assert_eq!(c.token().unwrap().len(), 22);
    assert!(c.overview().await.is_ok());

    let anon = ApiClient::anonymous(tb.base_url());
    let err = anon.post::<Value>("/api/login", json!({"username": "admin", "password": "nope"})).await.unwrap_err();
    assert_eq!((err.status(), err.kind()), (Some(401), Some("InvalidCredentials")));
    let err = anon.post::<Value>("/api/login", json!({"username": "root", "password": tb.password})).await.unwrap_err();
    assert_eq!(err.kind(), Some("InvalidCredentials"));
    tb.stop().await;
}

#[tokio::test]
async fn sixth_failure_is_throttled() {
    let (tb, _) = virtual_bed(false).await;
    let anon = ApiClient::anonymous(tb.base_url());
    let bad = json!({"username": "admin", "password": "wrong"});
    for _ in 0..5 {
        let e = anon.post::<Value>("/api/login", bad.clone()).await.unwrap_err();
        assert_eq!(e.kind(), Some("InvalidCredentials"));
    }
    let e = anon.post::<Value>("/api/login", bad).await.unwrap_err();
    assert_eq!((e.status(), e.kind()), (Some(429), Some("Throttled")));
    tb.stop().await;
}

#[tokio::test]
async fn every_protected_route_rejects_bad_tokens() {
    let (tb, _) = virtual_bed(false).await;
    let routes: &[(Method, &str, Option<Value>)] = &[
        (Method::POST, "/api/password", Some(json!({"old_password": "a", "new_password": "bbbbbbbb"}))),
        (Method::GET, "/api/overview", None),
        (Method::GET, "/api/hosts", None),
        (Method::POST, "/api/cloudlets", Some(json!({"name": "X"}))),
        (Method::DELETE, "/api/cloudlets/X", None),
        (Method::POST, "/api/cloudlets/X/members", Some(json!({"host": "h"}))),
        (Method::DELETE, "/api/cloudlets/X/members/h", None),
        (Method::POST, "/api/members/h/move", Some(json!({"to": "X"}))),
        (Method::GET, "/api/series?scope=all&metric=cpu_user&start=1&end=2", None),
        (Method::GET, "/api/heatmap", None),
        (Method::GET, "/api/commands", None),
        (Method::POST, "/api/control", Some(json!({"scope": "host:h", "command": "true", "mode": "serial"}))),
        (Method::GET, "/api/control/j1", None),
    ];
    let missing = ApiClient::anonymous(tb.base_url());
    let garbage = ApiClient::anonymous(tb.base_url()).with_token("AAAAAAAAAAAAAAAAAAAAAA");
    for client in [&missing, &garbage] {
        for (m, path, body) in routes {
            let (status, v) = client.request(m.clone(), path, body.clone()).await.unwrap();
            assert_eq!(status, StatusCode::UNAUTHORIZED, "{m} {path}");
            assert_eq!(v["error"], "Unauthorized", "{m} {path}");
        }
    }
    assert!(tb.aggregator.registry().snapshot().cloudlets().is_empty());
    tb.stop().await;
}

#[tokio::test]
async fn password_change_flow() {
    let (tb, _) = virtual_bed(false).await;
    let me = tb.client().await.unwrap();
    let other = tb.client().await.unwrap();
    let e = me
        .post::<Value>("/api/password", json!({"old_password": tb.password, "new_password": "1234567"}))
        .await
        .unwrap_err();
    assert_eq!(e.kind(), Some("WeakPassword"));
    let e = me
        .post::<Value>("/api/password", json!({"old_password": "wrong", "new_password": "new password"}))
        .await
        .unwrap_err();
    assert_eq!(e.kind(), Some("InvalidCredentials"));
    assert!(tb.client().await.is_ok(), "hash must be unchanged after a failed change");

    me.post::<Value>("/api/password", json!({"old_password": tb.password, "new_password": "new password"}))
        .await
        .unwrap();
    assert!(me.overview().await.is_ok());
    assert_eq!(other.overview().await.unwrap_err().kind(), Some("Unauthorized"));
    assert_eq!(tb.client().await.unwrap_err().kind(), Some("InvalidCredentials"));
    assert!(ApiClient::login(tb.base_url(), "admin", "new password").await.is_ok());
    tb.stop().await;
}

#[tokio::test]
async fn fresh_fleet_sits_in_initial_pool() {
    let (tb, clock) = virtual_bed(false).await;
    fleet(3, 2.0).run(&tb.aggregator, &clock, T0, T0 + 20);
    let c = tb.client().await.unwrap();
    let o = c.overview().await.unwrap();
    assert!(o.cloudlets.is_empty());
    assert_eq!(o.initial_pool.len(), 3);
    for h in &o.initial_pool {
        assert!(h.up);
        assert_eq!(h.cloudlet, "Initial");
        // cpu_idle is 98, so 2% busy
        assert_eq!(h.cpu_busy, Some(2.0));
        assert_eq!(h.cpu_class, StatusClass::Green);
    }
    let hosts: Vec<c2ms::api::HostStatusView> = c.get("/api/hosts").await.unwrap();
    assert_eq!(hosts.len(), 3);
    tb.stop().await;
}

#[tokio::test]
async fn overview_mirrors_registry_and_stays_disjoint() {
    let (tb, clock) = virtual_bed(false).await;
    fleet(6, 10.0).run(&tb.aggregator, &clock, T0, T0 + 20);
    let c = tb.client().await.unwrap();
    c.create_cloudlet("MySQL").await.unwrap();
    c.create_cloudlet("MPI").await.unwrap();
    for h in ["node000", "node001", "node002", "node003"] {
        c.add_member("MySQL", h).await.unwrap();
    }
    c.add_member("MPI", "node004").await.unwrap();
    assert_eq!(c.create_cloudlet("MySQL").await.unwrap_err().kind(), Some("DuplicateName"));
    assert_eq!(c.create_cloudlet("Initial").await.unwrap_err().kind(), Some("ReservedName"));
    assert_eq!(c.add_member("MPI", "node000").await.unwrap_err().kind(), Some("AlreadyMember"));
    assert_eq!(c.add_member("Nope", "node005").await.unwrap_err().kind(), Some("UnknownCloudlet"));

    c.move_member("node003", "MPI").await.unwrap();
    c.move_member("node005", "MPI").await.unwrap();
    c.move_member("node004", "Initial").await.unwrap();
    c.remove_member("MySQL", "node002").await.unwrap();
    assert_eq!(c.remove_member("MySQL", "node002").await.unwrap_err().kind(), Some("NotAMember"));

    let o = c.overview().await.unwrap();
    let snap = tb.aggregator.registry().snapshot();
    assert_eq!(o.revision, snap.revision);
    let listed: Vec<(String, Vec<String>)> = o
        .cloudlets
        .iter()
        .map(|cl| (cl.name.clone(), cl.members.iter().map(|m| m.hostname.clone()).collect()))
        .collect();
    let expected: Vec<(String, Vec<String>)> = snap.cloudlets().into_iter().map(|cl| (cl.name, cl.members)).collect();
    assert_eq!(listed, expected);
    assert_eq!(listed[0], ("MySQL".into(), vec!["node000".into(), "node001".into()]));
    assert_eq!(listed[1], ("MPI".into(), vec!["node003".into(), "node005".into()]));

    let mut seen = BTreeMap::new();
    for h in o.cloudlets.iter().flat_map(|c| &c.members).chain(&o.initial_pool) {
        *seen.entry(h.hostname.clone()).or_insert(0) += 1;
    }
    assert_eq!(seen.len(), 6);
    assert!(seen.values().all(|&n| n == 1));

    c.delete_cloudlet("MPI").await.unwrap();
    let o = c.overview().await.unwrap();
    assert_eq!(o.initial_pool.len(), 4);
    assert_eq!(c.delete_cloudlet("MPI").await.unwrap_err().kind(), Some("UnknownCloudlet"));
    tb.stop().await;
}

#[tokio::test]
async fn series_errors_and_all_scope_equivalence() {
    let (tb, clock) = virtual_bed(false).await;
    let specs = (0..4).map(|i| (format!("h{i}"), SimProfile::constant(5.0 + i as f64 * 7.5))).collect();
    VirtualFleet::new(specs, &FleetOptions::default()).unwrap().run(&tb.aggregator, &clock, T0, T0 + 600);
    let c = tb.client().await.unwrap();

    let e = c.series("all", "cpu_user", T0 + 10, T0 + 10).await.unwrap_err();
    assert_eq!((e.status(), e.kind()), (Some(400), Some("BadWindow")));
    assert_eq!(c.series("group:x", "cpu_user", T0, T0 + 60).await.unwrap_err().kind(), Some("BadScope"));
    assert_eq!(c.series("cloudlet:Ghost", "cpu_user", T0, T0 + 60).await.unwrap_err().kind(), Some("UnknownCloudlet"));

    let (start, end) = (T0, T0 + 600);
    let all = c.series("all", "cpu_user", start, end).await.unwrap();
    assert_eq!(all.hostnames(), ["h0", "h1", "h2", "h3"]);
    // Oracle: the union of the four per-host queries, summed by hand.
    let mut sum = vec![0.0; all.timestamps.len()];
    for h in ["h0", "h1", "h2", "h3"] {
        let one = c.series(&format!("host:{h}"), "cpu_user", start, end).await.unwrap();
        assert_eq!(one.timestamps, all.timestamps);
        assert_eq!(&one.layers[0], all.layer(h).unwrap());
        for (acc, v) in sum.iter_mut().zip(&one.layers[0].values) {
            *acc += v.unwrap_or(0.0);
        }
    }
    assert_eq!(sum, all.sum);
    assert!(all.sum.contains(&(5.0 + 12.5 + 20.0 + 27.5)));

    // Unknown slots travel as JSON null.
    let (_, raw) = c
        .request(
            Method::GET,
            &format!("/api/series?scope=host:h0&metric=cpu_user&start={}&end={}", T0 - 60, T0 + 30),
            None,
        )
        .await
        .unwrap();
    assert_eq!(raw["layers"][0]["values"][0], Value::Null);
    tb.stop().await;
}

#[tokio::test]
async fn control_over_a_cloudlet() {
    let (tb, clock) = virtual_bed(false).await;
    fleet(5, 1.0).run(&tb.aggregator, &clock, T0, T0 + 10);
    let c = tb.client().await.unwrap();
    c.create_cloudlet("MySQL").await.unwrap();
    for h in ["node000", "node001", "node002", "node003"] {
        c.add_member("MySQL", h).await.unwrap();
    }
    let id = c.control("cloudlet:MySQL", "uptime", Mode::Parallel).await.unwrap();
    // Registry edits after submission leave the job's targets alone.
    c.move_member("node003", "Initial").await.unwrap();
    let job = c.await_job(&id, Duration::from_millis(50)).await.unwrap();
    assert_eq!(job.state, JobState::Done);
    assert_eq!(job.targets, ["node000", "node001", "node002", "node003"]);
    assert_eq!(job.results.len(), 4);
    for r in &job.results {
        assert_eq!(r.outcome, Some(Outcome::Exited(0)));
        assert!(r.stdout.contains("load average"), "{}", r.stdout);
    }

    let e = c.control("all", "uptime", Mode::Parallel).await.unwrap_err();
    assert_eq!((e.status(), e.kind()), (Some(403), Some("AllScopeDisabled")));
    assert_eq!(c.control("cloudlet:Ghost", "uptime", Mode::Serial).await.unwrap_err().kind(), Some("UnknownCloudlet"));
    assert_eq!(c.control("host:node000", " ", Mode::Serial).await.unwrap_err().kind(), Some("EmptyCommand"));
    let e = c.job("j424242").await.unwrap_err();
    assert_eq!((e.status(), e.kind()), (Some(404), Some("UnknownJob")));
    tb.stop().await;
}

#[tokio::test]
async fn all_scope_control_when_enabled() {
    let (tb, clock) = virtual_bed(true).await;
    fleet(3, 1.0).run(&tb.aggregator, &clock, T0, T0 + 10);
    let c = tb.client().await.unwrap();
    let id = c.control("all", "echo $C2MS_TARGET", Mode::Serial).await.unwrap();
    let job = c.await_job(&id, Duration::from_millis(50)).await.unwrap();
    let out: Vec<_> = job.results.iter().map(|r| r.stdout.trim().to_owned()).collect();
    assert_eq!(out, ["node000", "node001", "node002"]);
    tb.stop().await;
}

#[tokio::test]
async fn palette_and_empty_heatmap() {
    let (tb, _) = virtual_bed(false).await;
    let c = tb.client().await.unwrap();
    let p: Value = c.get("/api/commands").await.unwrap();
    assert_eq!(p["entries"][0]["label"], "Uptime");
    assert_eq!(p["entries"][0]["template"], "uptime");
    let h: Value = c.get("/api/heatmap").await.unwrap();
    assert_eq!(h["cells"], json!([]));
    tb.stop().await;
}

#[tokio::test]
async fn summary_reflects_liveness() {
    let (tb, clock) = virtual_bed(false).await;
    let mut f = fleet(2, 1.0);
    f.run(&tb.aggregator, &clock, T0, T0 + 10);
    let c = tb.client().await.unwrap();
    c.create_cloudlet("Pair").await.unwrap();
    c.add_member("Pair", "node000").await.unwrap();
    c.add_member("Pair", "node001").await.unwrap();
    f.set_active("node001", false).unwrap();
    f.run(&tb.aggregator, &clock, T0 + 10, T0 + 40);
    let o = c.overview().await.unwrap();
    let pair = &o.cloudlets[0];
    assert_eq!((pair.summary.hosts_up, pair.summary.hosts_down, pair.summary.cpus_total), (1, 1, 1));
    let down = pair.members.iter().find(|m| m.hostname == "node001").unwrap();
    assert!(!down.up);
    assert_eq!(down.cpu_class, StatusClass::Unknown);
    tb.stop().await;
}

#[test]
fn series_json_round_trips() {
    use proptest::prelude::*;
    let layer = prop::collection::vec(prop::option::of(-1e12f64..1e12), 0..20);
    let strat = (prop::collection::vec(layer, 0..5), 1u64..400, 0u64..2_000_000_000);
    proptest!(ProptestConfig::with_cases(300), |((values, step, t0) in strat)| {
        let n = values.iter().map(Vec::len).max().unwrap_or(0);
        let layers: Vec<_> = values
            .into_iter()
            .enumerate()
            .map(|(i, mut v)| {
                v.resize(n, None);
                c2ms::aggregator::Layer { hostname: format!("h{i}"), values: v }
            })
            .collect();
        let mut sum = vec![0.0; n];
        let mut coverage = vec![0u32; n];
        for l in &layers {
            for (j, v) in l.values.iter().enumerate() {
                if let Some(v) = v {
                    sum[j] += v;
                    coverage[j] += 1;
                }
            }
        }
        let s = StackedSeries {
            metric: "cpu_user".into(),
            step,
            timestamps: (0..n as u64).map(|j| t0 + j * step).collect(),
            layers,
            sum,
            coverage,
        };
        let text = serde_json::to_string(&s).unwrap();
        let back: StackedSeries = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, s);
    });
}

#[tokio::test]
async fn metric_units_survive_ingest() {
    let (tb, _) = virtual_bed(false).await;
    let d = Datagram::metric("solo", T0, "power_watts", 120.0, "W", Slope::Both);
    tb.aggregator.ingest(&d);
    let rec = tb.aggregator.hosts().get("solo").unwrap();
    assert_eq!(rec.latest["power_watts"].units, "W");
    tb.stop().await;
}
