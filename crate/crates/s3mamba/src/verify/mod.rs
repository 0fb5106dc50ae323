//! Runtime self-check suite: every mathematical claim the implementation
//! rests on, verified against independent oracles. Exposed through the CLI
//! `verify` subcommand; the checks are cheap enough to run before long jobs.

pub mod oracles;
