fn main() {
    std::process::exit(stormnet_cli::main_exit_code());
}
