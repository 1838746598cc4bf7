use clap::Parser;

fn main() -> anyhow::Result<()> {
    docmem_cli::run(docmem_cli::Cli::parse())
}
