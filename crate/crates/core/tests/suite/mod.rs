//! RPC and bulk behaviour, written once and run over every transport plugin.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::common::{class_on, class_with, crc32_reference, drive, serve_echo};
use mrpc::bulk::{self, BulkError, BulkHandle, BulkOp, Locality};
use mrpc::nal::{MemRegion, NalConfig, NetAddress, Permission};
use mrpc::rpc::{CallbackOp, Context, Phase, RpcClass, RpcError, Status};
use mrpc::wire::{encode_frame, rpc_id_from_name, Flags, MessageHeader, MessageKind};

type Slot<T> = Arc<Mutex<Option<T>>>;

fn slot<T>() -> Slot<T> {
    Arc::new(Mutex::new(None))
}

fn pair(t: &str) -> (RpcClass, Context, RpcClass, Context) {
    let server = class_on(t);
    let client = class_on(t);
    let sc = server.create_context();
    let cc = client.create_context();
    (server, sc, client, cc)
}

fn addr(c: &RpcClass) -> NetAddress {
    c.self_address().unwrap().clone()
}

fn call(t: &str, input: &[u8]) -> (Status, Vec<u8>) {
    let (server, sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let h = cc.create_handle(&addr(&server), id).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(input, None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&sc, &cc], || got.lock().unwrap().is_some());
    let status = got.lock().unwrap().unwrap();
    (status, h.output().unwrap_or_default())
}

pub fn echo_empty(t: &str) {
    let (s, out) = call(t, b"");
    assert_eq!(s, Status::Ok);
    assert!(out.is_empty());
}

pub fn echo_sizes(t: &str) {
    let limit = NalConfig::default().eager_limit;
    for n in [1usize, 100, limit - 64, limit - 8] {
        let input: Vec<u8> = (0..n).map(|i| (i * 7 + 3) as u8).collect();
        let (s, out) = call(t, &input);
        assert_eq!(s, Status::Ok);
        assert_eq!(out, input, "size {n}");
    }
}

pub fn no_such_rpc(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let h = cc.create_handle(&addr(&server), rpc_id_from_name("missing").unwrap()).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(b"x", None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&sc, &cc], || got.lock().unwrap().is_some());
    assert_eq!(got.lock().unwrap().unwrap(), Status::NoSuchRpc);
    assert!(h.output().is_err());
    assert_eq!(cc.inflight_count(), 0);
}

pub fn forward_oversize_keeps_created(t: &str) {
    let (server, _sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let h = cc.create_handle(&addr(&server), id).unwrap();
    let big = vec![0u8; NalConfig::default().eager_limit];
    assert!(matches!(h.forward(&big, None, |_| {}), Err(RpcError::Oversize { .. })));
    assert_eq!(h.phase(), Phase::Created);
    assert_eq!(cc.inflight_count(), 0);
    assert!(matches!(h.cancel(), Err(RpcError::InvalidState(_))));
}

pub fn create_without_forward_is_silent(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let a = cc.create_handle(&addr(&server), id).unwrap();
    let b = cc.create_handle(&addr(&server), id).unwrap();
    drop(a);
    for _ in 0..5 {
        assert_eq!(cc.progress(Duration::ZERO).unwrap(), 0);
        assert_eq!(sc.progress(Duration::ZERO).unwrap(), 0);
    }
    b.forward(b"", None, |_| {}).unwrap();
    let c = cc.create_handle(&addr(&server), id).unwrap();
    c.forward(b"", None, |_| {}).unwrap();
    assert_ne!(b.cookie(), c.cookie());
}

pub fn self_call(t: &str) {
    let class = class_on(t);
    let id = serve_echo(&class);
    let ctx = class.create_context();
    let h = ctx.create_handle(&addr(&class), id).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(b"self", None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&ctx], || got.lock().unwrap().is_some());
    assert_eq!(got.lock().unwrap().unwrap(), Status::Ok);
    assert_eq!(h.output().unwrap(), b"self");
}

pub fn respond_twice_and_oversize(t: &str) {
    let (server, sc, client, cc) = pair(t);
    let outcomes: Arc<Mutex<Vec<String>>> = Arc::default();
    let o = outcomes.clone();
    let limit = server.eager_limit();
    let id = server
        .register(
            "twice",
            move |h| {
                let big = vec![0u8; limit + 1];
                o.lock().unwrap().push(format!("{:?}", h.respond(&big, |_| {}).err()));
                assert_eq!(h.phase(), Phase::Received);
                o.lock().unwrap().push(format!("{:?}", h.respond(b"ok", |_| {}).err()));
                o.lock().unwrap().push(format!("{:?}", h.respond(b"ok", |_| {}).err()));
                assert!(h.input().is_err());
            },
            true,
        )
        .unwrap();
    let _ = client;
    let h = cc.create_handle(&addr(&server), id).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(b"", None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&sc, &cc], || got.lock().unwrap().is_some());
    let o = outcomes.lock().unwrap();
    assert!(o[0].contains("Oversize"), "{o:?}");
    assert_eq!(o[1], "None");
    assert!(o[2].contains("InvalidState"), "{o:?}");
    assert_eq!(h.output().unwrap(), b"ok");
}

pub fn response_callback_fires(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let sent: Slot<(CallbackOp, Status)> = slot();
    let s = sent.clone();
    let id = server
        .register(
            "ack",
            move |h| {
                let s = s.clone();
                h.respond(b"", move |i| *s.lock().unwrap() = Some((i.op, i.status))).unwrap();
            },
            true,
        )
        .unwrap();
    let h = cc.create_handle(&addr(&server), id).unwrap();
    h.forward(b"", None, |_| {}).unwrap();
    drive(&[&sc, &cc], || sent.lock().unwrap().is_some());
    assert_eq!(sent.lock().unwrap().unwrap(), (CallbackOp::Respond, Status::Ok));
}

pub fn no_response_completes_on_send(t: &str) {
    let (server, sc, client, cc) = pair(t);
    let hits = Arc::new(AtomicUsize::new(0));
    let hh = hits.clone();
    let id = server
        .register(
            "notify",
            move |h| {
                assert!(h.no_response());
                assert!(matches!(h.respond(b"", |_| {}), Err(RpcError::InvalidState(_))));
                hh.fetch_add(1, Ordering::SeqCst);
            },
            false,
        )
        .unwrap();
    client.register_origin("notify", false).unwrap();
    let h = cc.create_handle(&addr(&server), id).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(b"n", None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&sc, &cc], || got.lock().unwrap().is_some() && hits.load(Ordering::SeqCst) == 1);
    assert_eq!(got.lock().unwrap().unwrap(), Status::Ok);
    assert_eq!(cc.inflight_count(), 0);
}

pub fn unknown_cookie_is_dropped(t: &str) {
    let (server, _sc, client, cc) = pair(t);
    let ep = server.endpoint();
    let frame = encode_frame(
        MessageHeader::new(MessageKind::Response, rpc_id_from_name("echo").unwrap(), 0xDEAD_BEEF, Flags::NONE, 0),
        b"stray",
    )
    .unwrap();
    ep.send_unexpected(&addr(&client), frame, 0).unwrap();
    let mut out = Vec::new();
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while cc.stats().dropped_responses() == 0 {
        assert!(std::time::Instant::now() < deadline);
        ep.progress(Duration::from_millis(1), &mut out).unwrap();
        assert_eq!(cc.progress(Duration::from_millis(1)).unwrap(), 0);
    }
    assert_eq!(cc.queue_len(), 0);
}

pub fn idle_progress_and_trigger(t: &str) {
    let class = class_on(t);
    let ctx = class.create_context();
    assert_eq!(ctx.progress(Duration::ZERO).unwrap(), 0);
    assert_eq!(ctx.trigger(10).unwrap(), 0);
}

pub fn progress_after_forward_queues_event(t: &str) {
    let class = class_on(t);
    let ctx = class.create_context();
    class.register("fire", |_| {}, false).unwrap();
    let h = ctx.create_handle(&addr(&class), rpc_id_from_name("fire").unwrap()).unwrap();
    h.forward(b"", None, |_| {}).unwrap();
    let mut queued = 0;
    for _ in 0..2000 {
        queued += ctx.progress(Duration::from_millis(5)).unwrap();
        if queued > 0 {
            break;
        }
    }
    assert!(queued >= 1);
}

pub fn trigger_respects_max_and_order(t: &str) {
    let (server, sc, client, cc) = pair(t);
    server.register("fire", |_| {}, false).unwrap();
    client.register_origin("fire", false).unwrap();
    let order: Arc<Mutex<Vec<usize>>> = Arc::default();
    for i in 0..3 {
        let h = cc.create_handle(&addr(&server), rpc_id_from_name("fire").unwrap()).unwrap();
        let o = order.clone();
        h.forward(b"", None, move |_| o.lock().unwrap().push(i)).unwrap();
    }
    drive(&[&sc], || {
        cc.progress(Duration::from_millis(1)).unwrap();
        cc.queue_len() == 3
    });
    assert_eq!(cc.trigger(2).unwrap(), 2);
    assert_eq!(cc.queue_len(), 1);
    assert_eq!(cc.trigger(2).unwrap(), 1);
    assert_eq!(*order.lock().unwrap(), vec![0, 1, 2]);
}

pub fn cancel_states(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let h = cc.create_handle(&addr(&server), id).unwrap();
    assert!(matches!(h.cancel(), Err(RpcError::InvalidState(_))));
    let got: Slot<Status> = slot();
    let g = got.clone();
    h.forward(b"", None, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    drive(&[&sc, &cc], || got.lock().unwrap().is_some());
    assert!(matches!(h.cancel(), Err(RpcError::InvalidState(_))));
}

pub fn cancel_races_resolve_once(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let fired = Arc::new(AtomicUsize::new(0));
    let mut handles = Vec::new();
    for i in 0..50 {
        let h = cc.create_handle(&addr(&server), id).unwrap();
        let f = fired.clone();
        h.forward(&[i as u8], None, move |_| {
            f.fetch_add(1, Ordering::SeqCst);
        })
        .unwrap();
        if i % 2 == 0 {
            h.cancel().unwrap();
        }
        handles.push(h);
    }
    drive(&[&sc, &cc], || fired.load(Ordering::SeqCst) == 50);
    for _ in 0..20 {
        sc.progress(Duration::from_millis(1)).unwrap();
        sc.trigger(usize::MAX).unwrap();
        cc.progress(Duration::from_millis(1)).unwrap();
        cc.trigger(usize::MAX).unwrap();
    }
    assert_eq!(fired.load(Ordering::SeqCst), 50);
    assert_eq!(cc.inflight_count(), 0);
    for (i, h) in handles.iter().enumerate() {
        if i % 2 == 0 {
            assert_eq!(h.status(), Some(Status::Canceled));
            assert_eq!(h.phase(), Phase::Canceled);
        } else {
            assert_eq!(h.status(), Some(Status::Ok));
        }
    }
}

pub fn request_shim(t: &str) {
    let (server, sc, _client, cc) = pair(t);
    let id = serve_echo(&server);
    let req = cc.request_post(&addr(&server), id, b"shim").unwrap();
    assert!(!req.test());
    assert!(matches!(req.wait(Duration::ZERO), Err(RpcError::Timeout)));
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let st = stop.clone();
    let sc2 = sc.clone();
    let server_thread = std::thread::spawn(move || {
        while !st.load(Ordering::SeqCst) {
            sc2.progress(Duration::from_millis(1)).unwrap();
            sc2.trigger(usize::MAX).unwrap();
        }
    });
    assert_eq!(req.wait(Duration::from_secs(20)).unwrap(), Status::Ok);
    assert!(req.test());
    assert_eq!(req.output().unwrap(), b"shim");
    let missing = cc.request_post(&addr(&server), rpc_id_from_name("nothing").unwrap(), b"").unwrap();
    assert_eq!(missing.wait(Duration::from_secs(20)).unwrap(), Status::NoSuchRpc);
    stop.store(true, Ordering::SeqCst);
    server_thread.join().unwrap();
}

pub fn role_symmetry(t: &str) {
    let a = class_on(t);
    let b = class_on(t);
    let count = 100;
    for c in [&a, &b] {
        c.register("ping", |h| {
            let i = h.input().unwrap();
            h.respond(&i, |_| {}).unwrap();
        }, true)
        .unwrap();
    }
    let ac = a.create_context();
    let bc = b.create_context();
    let ok = Arc::new(AtomicUsize::new(0));
    let id = rpc_id_from_name("ping").unwrap();
    for i in 0..count {
        for (ctx, peer) in [(&ac, addr(&b)), (&bc, addr(&a))] {
            let h = ctx.create_handle(&peer, id).unwrap();
            let o = ok.clone();
            let input = (i as u32).to_le_bytes();
            let hh = h.clone();
            h.forward(&input, None, move |info| {
                if info.status.is_ok() && hh.output().unwrap() == input {
                    o.fetch_add(1, Ordering::SeqCst);
                }
            })
            .unwrap();
        }
    }
    drive(&[&ac, &bc], || ok.load(Ordering::SeqCst) == 2 * count);
}

// --- bulk ---

fn region_with(data: &[u8]) -> MemRegion {
    MemRegion::from_vec(data.to_vec())
}

fn pattern(n: usize, seed: u32) -> Vec<u8> {
    let mut x = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            x as u8
        })
        .collect()
}

fn run_transfer(
    ctxs: &[&Context],
    ctx: &Context,
    op: BulkOp,
    remote: &BulkHandle,
    roff: u64,
    local: &BulkHandle,
    loff: u64,
    len: u64,
) -> Status {
    let got: Slot<Status> = slot();
    let g = got.clone();
    bulk::transfer(ctx, op, remote, roff, local, loff, len, move |i| {
        assert_eq!(i.op, CallbackOp::Bulk);
        *g.lock().unwrap() = Some(i.status);
    })
    .unwrap();
    drive(ctxs, || got.lock().unwrap().is_some());
    let s = got.lock().unwrap().unwrap();
    s
}

pub fn bulk_create_shapes(t: &str) {
    let class = class_on(t);
    let h = BulkHandle::create(&class, vec![MemRegion::new(1 << 20)], Permission::Read).unwrap();
    assert_eq!(h.total_size(), 1_048_576);
    assert_eq!(h.locality(), Locality::Local);
    let h = BulkHandle::create(
        &class,
        vec![MemRegion::new(10), MemRegion::new(20), MemRegion::new(30)],
        Permission::ReadWrite,
    )
    .unwrap();
    assert_eq!(h.total_size(), 60);
    assert_eq!(h.segment_at(15), Some((1, 5)));
    assert_eq!(h.segment_at(60), None);
    assert!(matches!(BulkHandle::create(&class, vec![], Permission::Read), Err(BulkError::EmptyRegion)));
    assert!(matches!(
        BulkHandle::create(&class, vec![MemRegion::new(4), MemRegion::new(0)], Permission::Read),
        Err(BulkError::EmptyRegion)
    ));
    let d = h.serialize().unwrap();
    let r = BulkHandle::deserialize(&d).unwrap();
    assert_eq!(r.owner(), h.owner());
    assert_eq!(r.segments(), h.segments());
    assert_eq!(r.permission(), h.permission());
    assert_eq!(r.total_size(), h.total_size());
    assert_eq!(r.locality(), Locality::Remote);
    assert!(r.serialize().is_err());
    assert!(matches!(BulkHandle::deserialize(&d[..d.len() - 1]), Err(BulkError::Decode(_))));
}

pub fn bulk_pull_multi_segment(t: &str) {
    let (owner, oc, puller, pc) = pair(t);
    let sizes = [20_000usize, 7, 45_529];
    let data = pattern(sizes.iter().sum(), 9);
    let mut regions = Vec::new();
    let mut at = 0;
    for s in sizes {
        regions.push(region_with(&data[at..at + s]));
        at += s;
    }
    let src = BulkHandle::create(&owner, regions, Permission::Read).unwrap();
    let remote = BulkHandle::deserialize(&src.serialize().unwrap()).unwrap();
    let dst_region = MemRegion::new(data.len());
    let dst = BulkHandle::create(&puller, vec![dst_region.clone()], Permission::Write).unwrap();
    let s = run_transfer(&[&oc, &pc], &pc, BulkOp::Pull, &remote, 0, &dst, 0, data.len() as u64);
    assert_eq!(s, Status::Ok);
    let got = dst_region.to_vec();
    assert_eq!(crc32_reference(&got), crc32_reference(&data));
    assert_eq!(got, data);
}

pub fn bulk_push_pull_inverse(t: &str) {
    let (owner, oc, driver, dc) = pair(t);
    let target = BulkHandle::create(&owner, vec![MemRegion::new(100), MemRegion::new(300)], Permission::ReadWrite).unwrap();
    let remote = BulkHandle::deserialize(&target.serialize().unwrap()).unwrap();
    let payload = pattern(250, 4);
    let src = BulkHandle::create(&driver, vec![region_with(&payload)], Permission::Read).unwrap();
    assert_eq!(run_transfer(&[&oc, &dc], &dc, BulkOp::Push, &remote, 50, &src, 0, 250), Status::Ok);
    let back_region = MemRegion::new(250);
    let back = BulkHandle::create(&driver, vec![back_region.clone()], Permission::Write).unwrap();
    assert_eq!(run_transfer(&[&oc, &dc], &dc, BulkOp::Pull, &remote, 50, &back, 0, 250), Status::Ok);
    assert_eq!(back_region.to_vec(), payload);
}

pub fn bulk_checks_before_moving(t: &str) {
    let (owner, _oc, driver, dc) = pair(t);
    let ro_region = region_with(&[7u8; 64]);
    let ro = BulkHandle::create(&owner, vec![ro_region.clone()], Permission::Read).unwrap();
    let remote = BulkHandle::deserialize(&ro.serialize().unwrap()).unwrap();
    let src = BulkHandle::create(&driver, vec![MemRegion::new(64)], Permission::ReadWrite).unwrap();
    let err = bulk::transfer(&dc, BulkOp::Push, &remote, 0, &src, 0, 64, |_| {}).unwrap_err();
    assert!(matches!(err, BulkError::Permission(_)));
    let wo = BulkHandle::create(&driver, vec![MemRegion::new(64)], Permission::Read).unwrap();
    assert!(matches!(
        bulk::transfer(&dc, BulkOp::Pull, &remote, 0, &wo, 0, 64, |_| {}),
        Err(BulkError::Permission(_))
    ));
    assert!(matches!(
        bulk::transfer(&dc, BulkOp::Pull, &remote, 1, &src, 0, 64, |_| {}),
        Err(BulkError::OutOfRange { .. })
    ));
    assert!(matches!(
        bulk::transfer(&dc, BulkOp::Pull, &remote, 0, &src, 10, 60, |_| {}),
        Err(BulkError::OutOfRange { .. })
    ));
    assert!(matches!(
        bulk::transfer(&dc, BulkOp::Pull, &remote, u64::MAX, &src, 0, 2, |_| {}),
        Err(BulkError::OutOfRange { .. })
    ));
    assert_eq!(ro_region.to_vec(), vec![7u8; 64]);
    assert_eq!(dc.queue_len(), 0);
}

pub fn bulk_zero_length(t: &str) {
    let (owner, _oc, driver, dc) = pair(t);
    let h = BulkHandle::create(&owner, vec![MemRegion::new(8)], Permission::Read).unwrap();
    let remote = BulkHandle::deserialize(&h.serialize().unwrap()).unwrap();
    let dst = BulkHandle::create(&driver, vec![MemRegion::new(8)], Permission::Write).unwrap();
    let got: Slot<Status> = slot();
    let g = got.clone();
    bulk::transfer(&dc, BulkOp::Pull, &remote, 8, &dst, 0, 0, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
    assert_eq!(dc.queue_len(), 1);
    assert!(got.lock().unwrap().is_none());
    dc.trigger(1).unwrap();
    assert_eq!(got.lock().unwrap().unwrap(), Status::Ok);
}

pub fn bulk_free_semantics(t: &str) {
    let (owner, oc, driver, dc) = pair(t);
    let h = BulkHandle::create(&owner, vec![MemRegion::new(32)], Permission::Read).unwrap();
    let remote = BulkHandle::deserialize(&h.serialize().unwrap()).unwrap();
    assert!(matches!(remote.free(), Err(BulkError::InvalidState(_))));
    h.free().unwrap();
    assert!(matches!(h.free(), Err(BulkError::InvalidState(_))));
    let dst = BulkHandle::create(&driver, vec![MemRegion::new(32)], Permission::Write).unwrap();
    assert_eq!(run_transfer(&[&oc, &dc], &dc, BulkOp::Pull, &remote, 0, &dst, 0, 32), Status::RemoteError);
}

pub fn bulk_free_in_flight(t: &str) {
    let (owner, oc, driver, dc) = pair(t);
    for round in 0..20 {
        let h = BulkHandle::create(&owner, vec![MemRegion::new(256 << 10), MemRegion::new(64 << 10)], Permission::Read).unwrap();
        let remote = BulkHandle::deserialize(&h.serialize().unwrap()).unwrap();
        let dst = BulkHandle::create(&driver, vec![MemRegion::new(320 << 10)], Permission::Write).unwrap();
        let got: Slot<Status> = slot();
        let g = got.clone();
        bulk::transfer(&dc, BulkOp::Pull, &remote, 0, &dst, 0, 320 << 10, move |i| *g.lock().unwrap() = Some(i.status)).unwrap();
        if round % 2 == 0 {
            oc.progress(Duration::ZERO).unwrap();
        }
        h.free().unwrap();
        drive(&[&oc, &dc], || got.lock().unwrap().is_some());
        let s = got.lock().unwrap().unwrap();
        assert!(matches!(s, Status::Ok | Status::RemoteError), "{s:?}");
    }
}

pub fn bulk_descriptor_rides_request(t: &str) {
    let (server, sc, client, cc) = pair(t);
    let data = pattern(300_000, 77);
    let sc2 = sc.clone();
    let id = server
        .register(
            "sink",
            move |h| {
                let remote = BulkHandle::deserialize(&h.bulk_descriptor().unwrap()).unwrap();
                let n = remote.total_size();
                let class = sc2.class().clone();
                let region = MemRegion::new(n as usize);
                let local = BulkHandle::create(&class, vec![region.clone()], Permission::Write).unwrap();
                let keep = local.clone();
                bulk::transfer(&sc2, BulkOp::Pull, &remote, 0, &local, 0, n, move |i| {
                    assert!(i.status.is_ok());
                    let crc = crc32_reference(&region.to_vec());
                    drop(keep);
                    h.respond(&crc.to_le_bytes(), |_| {}).unwrap();
                })
                .unwrap();
            },
            true,
        )
        .unwrap();
    let src = BulkHandle::create(&client, vec![region_with(&data)], Permission::Read).unwrap();
    let desc = src.serialize().unwrap();
    let req = cc.request_post_with_bulk(&addr(&server), id, b"", &desc).unwrap();
    drive(&[&sc, &cc], || req.test());
    assert_eq!(req.status(), Some(Status::Ok));
    assert_eq!(req.output().unwrap(), crc32_reference(&data).to_le_bytes());
    let max = client.endpoint().stats().max_metadata_frame();
    assert!(max <= client.eager_limit() + 24, "{max}");
}

pub fn small_eager_limit(t: &str) {
    let cfg = NalConfig::with_eager_limit(64);
    let server = class_with(t, cfg.clone());
    let client = class_with(t, cfg);
    let id = serve_echo(&server);
    let (sc, cc) = (server.create_context(), client.create_context());
    let h = cc.create_handle(&addr(&server), id).unwrap();
    assert!(matches!(h.forward(&[0u8; 57], None, |_| {}), Err(RpcError::Oversize { len: 65, limit: 64 })));
    let req = cc.request_post(&addr(&server), id, &[1u8; 56]).unwrap();
    drive(&[&sc, &cc], || req.test());
    assert_eq!(req.output().unwrap(), vec![1u8; 56]);
}

/// Every case, by name.
pub const CASES: &[(&str, fn(&str))] = &[
    ("echo_empty", echo_empty),
    ("echo_sizes", echo_sizes),
    ("no_such_rpc", no_such_rpc),
    ("forward_oversize_keeps_created", forward_oversize_keeps_created),
    ("create_without_forward_is_silent", create_without_forward_is_silent),
    ("self_call", self_call),
    ("respond_twice_and_oversize", respond_twice_and_oversize),
    ("response_callback_fires", response_callback_fires),
    ("no_response_completes_on_send", no_response_completes_on_send),
    ("unknown_cookie_is_dropped", unknown_cookie_is_dropped),
    ("idle_progress_and_trigger", idle_progress_and_trigger),
    ("progress_after_forward_queues_event", progress_after_forward_queues_event),
    ("trigger_respects_max_and_order", trigger_respects_max_and_order),
    ("cancel_states", cancel_states),
    ("cancel_races_resolve_once", cancel_races_resolve_once),
    ("request_shim", request_shim),
    ("role_symmetry", role_symmetry),
    ("bulk_create_shapes", bulk_create_shapes),
    ("bulk_pull_multi_segment", bulk_pull_multi_segment),
    ("bulk_push_pull_inverse", bulk_push_pull_inverse),
    ("bulk_checks_before_moving", bulk_checks_before_moving),
    ("bulk_zero_length", bulk_zero_length),
    ("bulk_free_semantics", bulk_free_semantics),
    ("bulk_free_in_flight", bulk_free_in_flight),
    ("bulk_descriptor_rides_request", bulk_descriptor_rides_request),
    ("small_eager_limit", small_eager_limit),
];
