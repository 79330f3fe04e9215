//! Fault injection for checking that the verification suites actually bite.
//!
//! A mutation is scoped to the calling thread and to the closure passed to
//! [`with_mutation`], so concurrently running tests are unaffected.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Flip the sign of the exponent inside softmax.
    SoftmaxSign,
}

thread_local! {
    static ACTIVE: Cell<Option<Mutation>> = const { Cell::new(None) };
}

pub fn with_mutation<R>(mutation: Mutation, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<Mutation>);
    impl Drop for Reset {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }
    let _reset = Reset(ACTIVE.with(|a| a.replace(Some(mutation))));
    f()
}

pub(crate) fn active(mutation: Mutation) -> bool {
    ACTIVE.with(|a| a.get() == Some(mutation))
}
