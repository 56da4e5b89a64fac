//! Compares `memory_estimate` with the allocator high-water mark of a real
//! no-grad forward pass. Lives in its own binary so no other test allocates
//! concurrently.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use scaleformer::model::{infer, ModelConfig, ModelParams};
use scaleformer::profile::memory_estimate;
use scaleformer::Tensor;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn measured_peak(cfg: &ModelConfig, params: &ModelParams, size: usize, window: usize) -> usize {
    let pan = Tensor::full(vec![1, 1, size, size], 0.5f32);
    let lrms = Tensor::full(vec![1, cfg.ms_bands, size / 2, size / 2], 0.5f32);
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = infer(params, cfg, &pan, &lrms, 2.0, window).unwrap();
    let peak = PEAK.load(Ordering::SeqCst) - base;
    drop(out);
    // Inputs were allocated before the baseline; add them back.
    peak + (pan.numel() + lrms.numel()) * 4
}

#[test]
fn estimate_within_2x_of_measured_high_water_mark() {
    for (cfg, size, window) in [
        (ModelConfig { channels: 8, heads: 2, n_single: 1, n_cross: 1, ..ModelConfig::default() }, 64, 16),
        (ModelConfig { channels: 16, heads: 2, n_single: 1, n_cross: 1, ..ModelConfig::default() }, 64, 8),
        (ModelConfig::default(), 96, 16),
        (ModelConfig { use_seq_transformer: false, ..ModelConfig::default() }, 64, 32),
    ] {
        let params = ModelParams::init(&cfg, 0).unwrap();
        let measured = measured_peak(&cfg, &params, size, window) as f64;
        let est = memory_estimate(&cfg, size, size, 2.0, window, 1).unwrap().bytes as f64;
        let ratio = measured / est;
        println!("size {size} window {window} C {}: measured {measured} estimate {est} ratio {ratio:.3}", cfg.channels);
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
    }
}
