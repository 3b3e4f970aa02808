//! The rank-2 pipeline (factorization, inversion, application) must run
//! without ever allocating anything of the size of the Fisher block or its
//! rearrangement. A counting allocator records the largest single request.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use kronfisher::fisher::exact_fim_block;
use kronfisher::{Activation, LossKind, Matrix, Mlp, Optimizer, OptimizerConfig, OptimizerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct PeakRequest;

static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for PeakRequest {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LARGEST.fetch_max(new_size, Ordering::Relaxed);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static ALLOCATOR: PeakRequest = PeakRequest;

fn largest_during(f: impl FnOnce()) -> usize {
    LARGEST.store(0, Ordering::Relaxed);
    f();
    LARGEST.load(Ordering::Relaxed)
}

// One test per binary keeps the global peak attributable.
#[test]
fn rank_two_steps_never_allocate_a_block_sized_buffer() {
    let (d_in, d_out, batch) = (39, 30, 32);
    // Z(F) is d² x d'² = 1600 x 900 doubles, the same count as F itself.
    let block_bytes = (d_in + 1) * (d_in + 1) * d_out * d_out * std::mem::size_of::<f64>();
    let limit = block_bytes / 8;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Matrix::from_fn(batch, d_in, |_, _| rng.random::<f64>());
    for kind in [OptimizerKind::Deflation, OptimizerKind::Lanczos, OptimizerKind::KfacCorrected] {
        let mut model = Mlp::init(
            vec![d_in, d_out, d_in],
            vec![Activation::Relu, Activation::Sigmoid],
            LossKind::BinaryCrossEntropy,
            &mut rng,
        )
        .unwrap();
        let config = OptimizerConfig {
            method: kind,
            refresh_period: 1,
            inverse_period: 1,
            batch_size: batch,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(config, &model).unwrap();
        let peak = largest_during(|| {
            for _ in 0..3 {
                opt.step(&mut model, &x, &x).unwrap();
            }
        });
        assert!(
            peak < limit,
            "{}: {peak}-byte allocation, block is {block_bytes} bytes",
            kind.name()
        );
    }

    // The guard does see a dense block when one is built.
    let mut model = Mlp::init(
        vec![d_in, d_out, d_in],
        vec![Activation::Relu, Activation::Sigmoid],
        LossKind::BinaryCrossEntropy,
        &mut rng,
    )
    .unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::default(), &model).unwrap();
    let report = opt.step(&mut model, &x, &x).unwrap();
    let stats = report.fisher_stats.unwrap();
    let peak = largest_during(|| {
        exact_fim_block(&stats.layers()[0]).unwrap();
    });
    assert!(peak >= block_bytes, "dense block allocation of {peak} bytes went unseen");
}
