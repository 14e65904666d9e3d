#![allow(dead_code)]

use taskfuse::pipeline::{ExperimentConfig, TaskSource};

/// A desk-scale experiment: width-4 networks, 16x16 patches from three
/// 32x32 synthetic pairs per task.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        patch_size: 16,
        batch_size: 2,
        ..ExperimentConfig::default()
    };
    c.space.width = 4;
    c.search.epochs = 2;
    c.search.inner_steps = 2;
    c.search.record_wall_time = false;
    c.meta.outer_iters = 10;
    c.joint.epochs = 3;
    c.joint.lr = 3e-3;
    for t in &mut c.data.tasks {
        let s = t.synthetic.as_mut().expect("default tasks are synthetic");
        s.pairs = 3;
        s.size = 32;
    }
    c
}

pub fn single_task(c: &mut ExperimentConfig) {
    let first: TaskSource = c.data.tasks[0].clone();
    c.data.tasks = vec![first];
}
