//! Regenerates the shipped benchmark scenarios under `bench/`.
//!
//! `cargo run -p busguard-core --example gen_bench`

use std::f64::consts::TAU;
use std::path::Path;

use busguard_core::simbot::{plan_injections, InjectionKind, Scenario};

fn round2(p: [f64; 2]) -> [f64; 2] {
    [(p[0] * 100.0).round() / 100.0, (p[1] * 100.0).round() / 100.0]
}

fn main() {
    let figure8 = (0..12)
        .map(|i| {
            let t = i as f64 / 12.0 * TAU;
            round2([4.0 * t.sin(), 2.0 * (2.0 * t).sin()])
        })
        .collect();
    let pentagon = (0..5)
        .map(|i| {
            let t = i as f64 / 5.0 * TAU;
            round2([3.0 * t.cos(), 3.0 * t.sin()])
        })
        .collect();
    let paths: Vec<(&str, Vec<[f64; 2]>, f64, u64)> = vec![
        ("square", vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]], 0.5, 11),
        ("figure8", figure8, 0.5, 42),
        ("zigzag", vec![[0.0, 0.0], [2.0, 2.0], [4.0, 0.0], [6.0, 2.0], [8.0, 0.0], [8.0, -2.0], [0.0, -2.0]], 0.5, 7),
        ("corridor", vec![[0.0, 0.0], [8.0, 0.0], [8.0, 1.5], [0.0, 1.5]], 0.6, 23),
        ("pentagon", pentagon, 0.45, 97),
    ];
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../bench");
    for (name, path, speed, seed) in paths {
        let s = Scenario {
            name: name.into(),
            path,
            nominal_speed: speed,
            duration_ms: 150_000,
            tick_ms: 50,
            seed,
            injections: plan_injections(&InjectionKind::DETECTABLE, 150_000, 60_000, seed),
        };
        std::fs::write(dir.join(format!("{name}.yaml")), s.to_yaml()).expect("write scenario");
    }
}
