fn main() { std::process::exit(tree_attn::cli::main()) }
