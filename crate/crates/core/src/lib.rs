pub mod builtins;
pub mod dpp;
pub mod fmt;
pub mod lq;
pub mod martcheck;
pub mod model;
pub mod oracle;
pub mod relaxed;
pub mod rng;
pub mod selection;
pub mod simulate;
