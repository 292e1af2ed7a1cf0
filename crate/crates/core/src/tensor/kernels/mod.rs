pub mod conv;
pub mod interp;
pub mod pool;
