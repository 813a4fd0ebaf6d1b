fn main() {
    std::process::exit(parapath::cli::main_entry());
}
