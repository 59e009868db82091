use std::io::Write;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Err(e) = knowledge_ffn::cli::run(&args, &mut out, &mut std::io::stderr()) {
        let _ = out.flush();
        eprintln!("{}: {e}", e.code());
        std::process::exit(e.exit_code());
    }
}
