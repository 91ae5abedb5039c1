pub mod agent;
pub mod cipher;
pub mod cli;
pub mod coordinator;
pub mod crack;
pub mod estimator;
pub mod keyspace;
pub mod protocol;
pub mod simulator;
pub mod timeline;
pub mod transport;
