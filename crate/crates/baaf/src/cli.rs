//! Command-line entry point (placeholder while the stack comes up).

pub fn run() -> i32 {
    0
}
