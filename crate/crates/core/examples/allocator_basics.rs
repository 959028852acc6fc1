//! Splitting, coalescing and cache release on a bare allocator.

use fragsim::{Allocator, AllocatorConfig, MIB};

fn show(label: &str, a: &Allocator) {
    let s = a.stats();
    println!(
        "{label:<28} reserved {:>8} allocated {:>8} cached {:>8} segments {}",
        s.reserved, s.allocated, s.cached, s.segment_count
    );
}

fn main() {
    let mut a = Allocator::new(AllocatorConfig::default(), 64 * MIB).unwrap();

    // Small requests share 2 MiB segments.
    let x = a.alloc(1000, 0).unwrap();
    let y = a.alloc(300 * 1024, 0).unwrap();
    show("two small blocks", &a);

    // A 3 MiB request gets its own 4 MiB segment.
    let big = a.alloc(3 * MIB, 0).unwrap();
    show("plus one large block", &a);

    a.free(x).unwrap();
    a.free(y).unwrap();
    show("small blocks freed", &a);

    // Reuses the cached 4 MiB block; no new reservation.
    a.free(big).unwrap();
    let again = a.alloc(2 * MIB + 1, 0).unwrap();
    show("large block reused", &a);

    let released = a.empty_cache();
    println!("empty_cache released {released} B");
    show("after empty_cache", &a);

    a.free(again).unwrap();
    a.empty_cache();
    show("everything released", &a);
    a.check_invariants().unwrap();
}
