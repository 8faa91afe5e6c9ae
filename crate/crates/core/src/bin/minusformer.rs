use minusformer::cli::{dispatch, exit_code, parse_args, USAGE};

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" {
        println!("{USAGE}");
        return;
    }
    let result = parse_args(&argv).and_then(|spec| {
        dispatch(&spec)?;
        Ok(spec)
    });
    match result {
        Ok(spec) => println!("{} done: {}", spec.command.as_str(), spec.out.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
