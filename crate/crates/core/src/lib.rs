pub mod alarmdesk;
pub mod bench;
pub mod capture;
pub mod detectors;
pub mod envelope;
pub mod eval;
pub mod features;
pub mod hierarchy;
pub mod msgbus;
pub mod placement;
pub mod recovery;
pub mod simbot;
pub mod system;
