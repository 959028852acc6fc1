//! The experiment runner as a library: a policy x checkpointing grid from
//! a config string.

use fragsim::cli::{compare_rows, compare_table, ExperimentConfig};

const CONFIG: &str = "
workload.preset = default
workload.rounds = 1
sweep.grad_ckpt = false, true
";

fn main() {
    let cfg = ExperimentConfig::parse(CONFIG).unwrap();
    let rows = compare_rows(&cfg).unwrap();
    print!("{}", compare_table(&rows));
}
