pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod matching;
pub mod model;
pub mod neck;
pub mod nn;
pub mod optim;
pub mod param;
pub mod query;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use param::ParamStore;
pub use rng::SeededRng;
pub use tensor::{Real, Tensor};
