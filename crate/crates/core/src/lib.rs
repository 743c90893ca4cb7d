pub mod attention;
pub mod bench;
#[doc(hidden)]
pub mod fixtures;
pub mod lanes;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod scheduler;
pub mod tensor;
pub mod transport;
