pub mod detect;
pub mod exec;
pub mod format;
pub mod ops;
pub mod reference;
pub mod tensor;
