use asgd::shared_model::{AtomicF64, SharedModel};
use std::sync::Arc;
use std::thread;

const THREADS: usize = 8;
const ADDS: usize = 100_000;

#[test]
fn integer_adds_are_never_lost() {
    let model = Arc::new(SharedModel::new(&[0.0, 0.0]));
    thread::scope(|s| {
        for _ in 0..THREADS {
            let model = &model;
            s.spawn(move || {
                for _ in 0..ADDS {
                    model.atomic_add(0, 1.0);
                    model.atomic_add(1, -2.0);
                }
            });
        }
    });
    let view = model.read_view();
    assert_eq!(view[0], (THREADS * ADDS) as f64);
    assert_eq!(view[1], -2.0 * (THREADS * ADDS) as f64);
    assert_eq!(model.versions(), vec![(THREADS * ADDS) as u64; 2]);
}

#[test]
fn float_adds_match_serial_sum() {
    let cell = AtomicF64::new(0.0);
    let delta = |t: usize, k: usize| ((t * ADDS + k) % 977) as f64 * 0.001 + 0.125;
    thread::scope(|s| {
        for t in 0..THREADS {
            let cell = &cell;
            s.spawn(move || {
                for k in 0..ADDS {
                    cell.fetch_add(delta(t, k));
                }
            });
        }
    });
    let serial: f64 = (0..THREADS).flat_map(|t| (0..ADDS).map(move |k| delta(t, k))).sum();
    let total = cell.load();
    assert!((total - serial).abs() <= 1e-9 * serial, "{total} vs {serial}");
}

#[test]
fn versioned_adds_form_a_permutation() {
    let model = SharedModel::new(&[0.0]);
    let mut positions: Vec<u64> = thread::scope(|s| {
        let handles: Vec<_> = (0..THREADS)
            .map(|_| {
                let model = &model;
                s.spawn(move || (0..ADDS / 10).map(|_| model.atomic_add_versioned(0, 1.0).1).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    positions.sort_unstable();
    assert_eq!(positions, (0..(THREADS * ADDS / 10) as u64).collect::<Vec<_>>());
}

#[test]
fn iteration_counter_is_a_permutation() {
    let model = SharedModel::new(&[0.0]);
    let mut claimed: Vec<u64> = thread::scope(|s| {
        let handles: Vec<_> = (0..THREADS)
            .map(|_| {
                let model = &model;
                s.spawn(move || (0..ADDS).map(|_| model.next_iteration()).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    claimed.sort_unstable();
    assert_eq!(claimed, (0..(THREADS * ADDS) as u64).collect::<Vec<_>>());
    assert_eq!(model.counter(), (THREADS * ADDS) as u64);
}
