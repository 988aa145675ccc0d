use std::fs;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedkace::config::{parse_config, ConfigArgs};
use fedkace::data::{dump_client_data, DataStream};
use fedkace::error::FedError;
use fedkace::federation::run_experiment_with;
use fedkace::runner::{execute, run_dir, RunOptions};
use fedkace::suite::{run_suite, SuiteOptions};

#[derive(Parser)]
#[command(
    name = "fedkace",
    version,
    about = "Streaming federated continual learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method and write rounds.csv and summary.json
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the paired Centralized run used for regret
        #[arg(long)]
        no_regret: bool,
        /// Also write every round's buffer contents to buffers.csv
        #[arg(long)]
        dump_buffers: bool,
    },
    /// Run the acceptance criteria and print one line per criterion
    Suite {
        /// Keep benchmark runs in memory instead of writing them to disk
        #[arg(long)]
        quick: bool,
        /// Worker threads (0 picks the machine default)
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Print each client's category windows, optionally writing the sampled data
    DumpSchedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write per-client data CSVs into the output directory
        #[arg(long)]
        data: bool,
    },
    /// Run one method and print the buffer contents after each round
    DumpBuffer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Only print this round
        #[arg(long)]
        round: Option<usize>,
        /// Only print this client
        #[arg(long)]
        client: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e @ FedError::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> fedkace::Result<ExitCode> {
    match command {
        Command::Run {
            cfg,
            no_regret,
            dump_buffers,
        } => {
            let cfg = parse_config(&cfg)?;
            let (done, dir) = execute(
                &cfg,
                RunOptions {
                    no_regret,
                    dump_buffers,
                },
            )?;
            let s = &done.summary;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{}: AA {} AR {} cond {} -> {}",
                s.run_id,
                show(s.aa),
                show(s.ar),
                show(s.cond_window_mean),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { quick, workers } => {
            let results = run_suite(&SuiteOptions { quick, workers });
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::DumpSchedule { cfg, data } => {
            let cfg = parse_config(&cfg)?;
            let stream = DataStream::new(cfg.schedule())?;
            let dir = run_dir(&cfg);
            if data {
                fs::create_dir_all(&dir).map_err(|e| FedError::io(&dir, e))?;
            }
            for k in 0..cfg.clients {
                let schedule = stream.build_schedule(k);
                for (t, window) in schedule.iter().enumerate() {
                    let ids: Vec<String> = window.iter().map(usize::to_string).collect();
                    println!("client {k} round {} categories {}", t + 1, ids.join(" "));
                }
                if data {
                    let tasks: Vec<_> = schedule
                        .iter()
                        .enumerate()
                        .map(|(t, w)| stream.draw_round_data(k, t + 1, w))
                        .collect();
                    dump_client_data(&dir.join(format!("client{k}.csv")), &tasks)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpBuffer { cfg, round, client } => {
            let cfg = parse_config(&cfg)?;
            let record = run_experiment_with(&cfg, true)?;
            println!("{}", fedkace::buffer::DUMP_HEADER);
            for line in &record.buffer_dump {
                let mut f = line.split(',');
                let r: Option<usize> = f.next().and_then(|v| v.parse().ok());
                let c: Option<usize> = f.next().and_then(|v| v.parse().ok());
                if round.is_none_or(|x| r == Some(x)) && client.is_none_or(|x| c == Some(x)) {
                    println!("{line}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
