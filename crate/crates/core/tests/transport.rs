use std::collections::BTreeMap;
use std::time::Duration;

use ftsgd_core::transport::sim::{self, SimConfig, SimMode};
use ftsgd_core::transport::{Event, RecvError, Transport};
use ftsgd_core::wire::{Op, Payload, WireMessage};
use ftsgd_core::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODES: u32 = 4;
const PER_SENDER: usize = 2_500;

fn destinations(sender: NodeId) -> Vec<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + sender as u64);
    (0..PER_SENDER)
        .map(|_| loop {
            let d = rng.gen_range(0..NODES);
            if d != sender {
                break d;
            }
        })
        .collect()
}

fn soak(mode: SimMode) {
    let cfg = SimConfig {
        mode,
        heartbeat: None,
        connection_reset_notices: false,
        ..SimConfig::deterministic(99)
    };
    let mut expected: BTreeMap<NodeId, usize> = BTreeMap::new();
    for s in 0..NODES {
        for d in destinations(s) {
            *expected.entry(d).or_default() += 1;
        }
    }
    let expected = &expected;
    let nodes: Vec<NodeId> = (0..NODES).collect();
    let (net, out) = sim::run(cfg, &nodes, |mut ep| {
        let me = ep.me();
        let mut next_seq: BTreeMap<NodeId, u32> = BTreeMap::new();
        for (i, d) in destinations(me).into_iter().enumerate() {
            let seq = next_seq.entry(d).or_default();
            let m = WireMessage::new(Op::Bcast, me, 0, *seq).with_payload(Payload::Reals(vec![i as f64; i % 7]));
            *seq += 1;
            ep.send(d, &m).unwrap();
        }
        let mut last: BTreeMap<NodeId, u32> = BTreeMap::new();
        let mut got = 0;
        while got < expected[&me] {
            match ep.recv(Duration::from_secs(30)) {
                Ok(Event::Message(m)) => {
                    let want = last.get(&m.sender).map_or(0, |s| s + 1);
                    assert_eq!(m.seq, want, "FIFO from {} to {me}", m.sender);
                    last.insert(m.sender, m.seq);
                    got += 1;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        // everything expected arrived and nothing else is in flight
        assert_eq!(ep.recv(Duration::from_millis(10)), Err(RecvError::Timeout));
        got
    });
    assert_eq!(out.iter().sum::<usize>(), NODES as usize * PER_SENDER);
    for n in nodes {
        let s = net.stats(n);
        assert_eq!(s.sent as usize, PER_SENDER);
        assert_eq!(s.dropped, 0);
    }
}

#[test]
fn ten_thousand_messages_fifo_deterministic() {
    soak(SimMode::Deterministic);
}

#[test]
fn ten_thousand_messages_fifo_free_running() {
    soak(SimMode::Free);
}

#[test]
fn same_seed_same_interleaving() {
    let run = |seed| {
        let cfg = SimConfig {
            heartbeat: None,
            ..SimConfig::deterministic(seed)
        };
        let (net, out) = sim::run(cfg, &[0, 1, 2], |mut ep| {
            let me = ep.me();
            for p in 0..3 {
                if p != me {
                    ep.send(p, &WireMessage::new(Op::Barrier, me, 0, 0)).unwrap();
                }
            }
            let mut order = Vec::new();
            for _ in 0..2 {
                if let Ok(Event::Message(m)) = ep.recv(Duration::from_secs(1)) {
                    order.push((m.sender, ep.now()));
                }
            }
            order
        });
        (out, net.switches())
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn heartbeat_suspects_within_timeout_plus_interval() {
    let cfg = SimConfig {
        connection_reset_notices: false,
        ..SimConfig::deterministic(3)
    };
    let hb = cfg.heartbeat.unwrap();
    let (net, out) = sim::run(cfg, &[0, 1, 2], |mut ep| {
        match ep.me() {
            1 => {
                ep.advance(Duration::from_secs(2));
                ep.kill_self();
                None
            }
            _ => {
                let mut seen = Vec::new();
                while seen.is_empty() {
                    match ep.recv(Duration::from_secs(10)) {
                        Ok(Event::Suspect(p)) => seen.push((p, ep.now())),
                        Ok(other) => panic!("unexpected {other:?}"),
                        Err(e) => panic!("{e}"),
                    }
                }
                Some(seen)
            }
        }
    });
    let killed = net.kills()[0].1;
    for seen in out.into_iter().flatten() {
        assert_eq!(seen.len(), 1);
        let (p, at) = seen[0];
        assert_eq!(p, 1, "only the dead node is suspected");
        let delay = at - killed;
        assert!(delay > hb.timeout - hb.interval && delay <= hb.timeout + 2 * hb.interval, "{delay:?}");
    }
}

#[test]
fn no_suspicion_without_failure() {
    let (_, out) = sim::run(SimConfig::deterministic(8), &[0, 1, 2, 3], |mut ep| {
        let mut events = 0;
        for _ in 0..100 {
            ep.advance(Duration::from_millis(37));
            while let Ok(ev) = ep.recv(Duration::ZERO) {
                if matches!(ev, Event::Suspect(_)) {
                    events += 1;
                }
            }
        }
        events
    });
    assert_eq!(out, vec![0; 4]);
}
