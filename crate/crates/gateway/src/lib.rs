//! HTTP gateway and command-line tools over the `selfroute` library.
//!
//! - [`server`]: the routing service (`/v1/route`, `/v1/health`, `/v1/stats`)
//! - [`protocol`]: serves any backend over the backend wire protocol
//! - [`config`]: the gateway configuration file
//! - [`cli`]: the `selfroute` subcommands

pub mod cli;
pub mod config;
pub mod error;
pub mod protocol;
pub mod server;

pub use config::GatewayConfig;
pub use error::CliError;
