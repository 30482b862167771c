//! Frozen inference must never allocate a buffer the size of a dense expert
//! matrix; experts exist only as rotations of the packed substrate.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use butterfly_moe::autodiff::Tensor;
use butterfly_moe::moe::{MoEConfig, MoELayer};

struct Probe;

static ARMED: AtomicBool = AtomicBool::new(false);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
/// The probe is process-wide, so tests take turns.
static SERIAL: Mutex<()> = Mutex::new(());

unsafe impl GlobalAlloc for Probe {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ARMED.load(Ordering::Relaxed) {
            LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        }
        // SAFETY: forwarded unchanged to the system allocator.
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        // SAFETY: `ptr` came from `System.alloc` with this layout.
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if ARMED.load(Ordering::Relaxed) {
            LARGEST.fetch_max(new_size, Ordering::Relaxed);
        }
        // SAFETY: as for `alloc` and `dealloc`.
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Probe = Probe;

#[test]
fn frozen_forward_never_allocates_an_expert_matrix() {
    let _turn = SERIAL.lock().unwrap();
    for (d_model, d_ff, n_experts, k) in [(64, 128, 8, 2), (32, 256, 4, 1), (128, 64, 8, 2)] {
        let mut layer = MoELayer::<f32>::new(MoEConfig::new(d_model, d_ff, n_experts, k), 1).unwrap();
        layer.freeze().unwrap();
        let x = Tensor::from_fn([8, d_model], |i| ((i * 37 % 101) as f32 - 50.0) / 50.0);
        layer.moe_forward(&x).unwrap();

        LARGEST.store(0, Ordering::Relaxed);
        ARMED.store(true, Ordering::Relaxed);
        let (y, _) = layer.moe_forward(&x).unwrap();
        ARMED.store(false, Ordering::Relaxed);

        let largest = LARGEST.load(Ordering::Relaxed);
        let dense = d_ff * d_model * std::mem::size_of::<f32>();
        assert!(largest > 0);
        assert!(largest < dense, "({d_model}, {d_ff}): allocation of {largest} bytes reaches a dense expert ({dense})");
        assert_eq!(y.shape(), &[8, d_ff]);
    }
}

#[test]
fn materializing_is_visible_to_the_probe() {
    let _turn = SERIAL.lock().unwrap();
    let layer = MoELayer::<f32>::new(MoEConfig::new(64, 128, 2, 1), 1).unwrap();
    LARGEST.store(0, Ordering::Relaxed);
    ARMED.store(true, Ordering::Relaxed);
    let w = layer.materialize_expert(0).unwrap();
    ARMED.store(false, Ordering::Relaxed);
    assert!(LARGEST.load(Ordering::Relaxed) >= 128 * 64 * 4);
    assert_eq!(w.shape(), &[128, 64]);
}
