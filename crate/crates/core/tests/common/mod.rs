#![allow(dead_code)]

use headlab::exec::Exec;
use headlab::experiment::{prepare, ExperimentConfig, Prepared};
use headlab::train::{TrainSchedule, Trainer};

pub const FIVE_TASKS: [&str; 5] = ["MNLI", "QQP", "QNLI", "AG", "SST-2"];
pub const FIVE_BASE: [f64; 5] = [83.91, 87.64, 90.26, 94.50, 92.05];
/// Row `i`: every task's performance with task `i`'s heads pruned.
pub const FIVE_PRUNED: [[f64; 5]; 5] = [
    [58.23, 71.52, 61.39, 91.99, 85.32],
    [62.54, 69.43, 60.80, 91.54, 85.13],
    [59.29, 70.96, 57.50, 91.88, 86.35],
    [65.88, 76.28, 69.35, 80.01, 85.09],
    [69.50, 77.40, 73.96, 86.51, 82.45],
];
/// The published score row, in the column order above.
pub const FIVE_PRINTED: [f64; 5] = [7.28, 5.26, 11.07, 9.84, 3.28];

pub struct DualRow {
    pub a: &'static str,
    pub b: &'static str,
    /// base A, A with A's heads pruned, A with B's heads pruned.
    pub perf_a: [f64; 3],
    /// base B, B with A's heads pruned, B with B's heads pruned.
    pub perf_b: [f64; 3],
    /// Printed D_A, D_B, D.
    pub printed: [f64; 3],
}

pub const DUAL_ROWS: [DualRow; 4] = [
    DualRow { a: "AG", b: "QNLI", perf_a: [94.13, 85.94, 92.44], perf_b: [91.13, 65.04, 52.95], printed: [6.905, 13.270, 10.088] },
    DualRow { a: "AG-Pair", b: "QNLI", perf_a: [94.46, 56.17, 64.52], perf_b: [90.72, 64.85, 53.66], printed: [8.842, 12.337, 10.590] },
    DualRow { a: "AG", b: "SST-2", perf_a: [94.29, 89.51, 92.32], perf_b: [92.47, 89.76, 86.01], printed: [2.982, 4.051, 3.517] },
    DualRow { a: "AG-Pair", b: "SST-2", perf_a: [94.68, 67.65, 71.80], perf_b: [92.66, 89.33, 85.78], printed: [4.387, 3.837, 4.112] },
];

pub fn prepared(json: &str) -> (ExperimentConfig, Prepared) {
    let cfg = ExperimentConfig::from_json(json).unwrap();
    cfg.validate().unwrap();
    let p = prepare(&cfg).unwrap();
    (cfg, p)
}

/// Two small synthetic tasks with an IAT phase over the second half.
pub const SMALL_IAT: &str = r#"{
    "version": 1,
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 16, "max_seq_len": 24},
    "tasks": [
        {"name": "parity", "synth": {"kind": "marker-parity", "size": 100, "seed": 1}},
        {"name": "equal", "synth": {"kind": "pair-equality", "size": 100, "seed": 2}}
    ],
    "schedule": {"epochs": 2, "seed": 5, "delta": 0.5, "alpha": 0.5, "batch_size": 8}
}"#;

pub fn trainer(p: &Prepared, schedule: TrainSchedule, exec: Exec) -> Trainer {
    let model = p.init_model(schedule.seed).unwrap();
    Trainer::new(model, p.tasks.clone(), schedule, exec).unwrap()
}
