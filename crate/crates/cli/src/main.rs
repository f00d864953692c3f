//! `demmae`: synthetic data, MAE pre-training, head fine-tuning,
//! evaluation and prediction.

mod args;
mod finetune;
mod infer;
mod pretrain;
mod settings;
mod synth;

use clap::Parser;
use demmae_core::Result;

use args::{Cli, Command};
use settings::{init_threads, Settings};

fn run(cli: &Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Synth(a) => &a.common,
        Command::Pretrain(a) => &a.common,
        Command::Finetune(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Predict(a) => &a.common,
    };
    let settings = Settings::load(common)?;
    init_threads(common.threads)?;
    match &cli.command {
        Command::Synth(a) => synth::run(a, &settings),
        Command::Pretrain(a) => pretrain::run(a, &settings),
        Command::Finetune(a) => finetune::run(a, &settings),
        Command::Eval(a) => infer::eval(a),
        Command::Predict(a) => infer::predict(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("demmae: {e}");
        std::process::exit(e.exit_code());
    }
}
