mod common;

use std::io::{BufReader, Write};
use std::net::TcpStream;

use common::{memnode, random_trace, region_contents, replay, sim, MIB};
use dolma::fabric::region::RemoteRegion;
use dolma::fabric::{Fabric, FabricError, LatencyModel};
use dolma::memnode::wire::{self, Frame, Opcode};
use dolma::memnode::{spawn, MemnodeConfig};

fn raw(addr: std::net::SocketAddr) -> (BufReader<TcpStream>, TcpStream) {
    let s = TcpStream::connect(addr).unwrap();
    (BufReader::new(s.try_clone().unwrap()), s)
}

#[test]
fn ping_echoes_request_id() {
    let (node, _f) = memnode(MIB);
    let (mut r, mut w) = raw(node.local_addr());
    w.write_all(&Frame::request(Opcode::Ping, 0xABCD, 0, 0).encode()).unwrap();
    let resp = wire::read_response(&mut r).unwrap().unwrap();
    assert_eq!(resp.request_id, 0xABCD);
    assert!(!resp.is_error());
}

#[test]
fn write_then_read_on_one_connection() {
    let (node, _f) = memnode(MIB);
    let (mut r, mut w) = raw(node.local_addr());
    let data: Vec<u8> = (0..16).collect();
    w.write_all(&Frame::with_payload(Opcode::Write, 1, 4096, data.clone()).encode())
        .unwrap();
    w.write_all(&Frame::request(Opcode::Read, 2, 4096, 16).encode()).unwrap();
    let a = wire::read_response(&mut r).unwrap().unwrap();
    let b = wire::read_response(&mut r).unwrap().unwrap();
    assert_eq!((a.request_id, b.request_id), (1, 2));
    assert_eq!(b.payload, data);
}

#[test]
fn snapshot_restore_reproduces_region() {
    let dir = tempfile::tempdir().unwrap();
    let (node, f) = memnode(2 * MIB);
    let a = f.remote_alloc(1000).unwrap();
    let _b = f.remote_alloc(3000).unwrap();
    f.remote_free(a).unwrap();
    let trace = random_trace(3, 200, 2 * MIB);
    replay(&f, &trace);
    let p = dir.path().join("node.snap");
    f.snapshot(&p).unwrap();
    let before = region_contents(&f, None);
    let allocator = RemoteRegion::restore(&p).unwrap().allocator();
    // Clobber, then bring the snapshot back in a fresh node.
    replay(&f, &random_trace(4, 200, 2 * MIB));
    drop(node);
    let node2 = spawn(MemnodeConfig {
        bind: "127.0.0.1:0".into(),
        capacity_bytes: 0,
        snapshot_dir: None,
        restore: Some(p.clone()),
    })
    .unwrap();
    let f2 = dolma::fabric::tcp::TcpFabric::connect(node2.local_addr(), LatencyModel::default()).unwrap();
    assert_eq!(region_contents(&f2, None), before);
    let p2 = dir.path().join("again.snap");
    f2.snapshot(&p2).unwrap();
    assert_eq!(
        RemoteRegion::restore(&p2).unwrap().allocator().free_ranges(),
        allocator.free_ranges()
    );
}

#[test]
fn snapshot_to_unwritable_path_fails() {
    let (_node, f) = memnode(MIB);
    let e = f.snapshot(std::path::Path::new("/nonexistent-dir/x/y.snap")).unwrap_err();
    assert!(matches!(e, FabricError::Status(dolma::fabric::ErrorCode::Io)), "{e:?}");
}

#[test]
fn trace_matches_sim_backend() {
    let cap = 2 * MIB;
    let trace = random_trace(9, 400, cap);
    let s = sim(cap);
    let (_node, t) = memnode(cap);
    assert_eq!(replay(&s, &trace), replay(&t, &trace));
    assert_eq!(region_contents(&s, Some(&s)), region_contents(&t, None));
}
