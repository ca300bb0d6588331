pub mod api;
pub mod cli;
pub mod chatbot;
pub mod clock;
pub mod config;
pub mod coordinator;
pub mod crypto;
pub mod game;
pub mod http;
pub mod protocol;
pub mod provenance;
pub mod proxy;
pub mod sim;
pub mod user;
pub mod wire;
