//! Command line front end: dataset generation, training, evaluation,
//! suppression sweeps and attention export.

mod args;
mod commands;
mod config;

pub use args::{run, AttentionArgs, Cli, Command, EvalArgs, GenerateArgs, SweepArgs, Switch, TrainArgs};
pub use commands::{
    cmd_eval, cmd_export_attention, cmd_generate, cmd_nms_sweep, cmd_train, load_grid, load_spec, render_sweep_table,
    write_sweep, EvalOutcome, SweepRow, TrainOverrides, EVAL_REPORT, FINAL_DUMP, RAW_DUMP, SWEEP_REPORT, SWEEP_TABLE,
};
pub use config::{model_config_diff, RunConfig, RunPaths, RESOLVED_CONFIG};
