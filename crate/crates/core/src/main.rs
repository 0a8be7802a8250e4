use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use sdlto::cli_io::{resolve, write_outputs, Cli};
use sdlto::orchestrator::{run_sdl_to, run_seq_to, Mode};

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        return ExitCode::from(2);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> sdlto::Result<()> {
    let parsed = resolve(cli)?;
    parsed.outputs.prepare()?;
    let out = match parsed.run.mode {
        Mode::Seq => run_seq_to(&parsed.problem, &parsed.run)?,
        Mode::Sdl => run_sdl_to(&parsed.problem, &parsed.run)?,
    };
    write_outputs(&parsed.effective, &parsed.outputs, &out)?;
    let m = &out.manifest;
    println!(
        "{} {} {}x{}: objective {:.6e} -> {:.6e}, {} FEM solves ({} learning / {} online steps), outputs in {}",
        parsed.effective.preset,
        m.mode.as_str(),
        parsed.effective.nelx,
        parsed.effective.nely,
        m.initial_objective,
        m.final_objective,
        m.fem_solves,
        m.learning_step_count,
        m.online_step_count,
        parsed.outputs.dir.display()
    );
    Ok(())
}
