//! The single interface through which every optimizer observes `f`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::search_space::{SearchSpace, TuningVector};

/// A black-box objective to be maximized over a [`SearchSpace`].
///
/// Implementations meter every call to [`evaluate`](Objective::evaluate) with
/// a counter that never loses increments under concurrent use.
pub trait Objective: Sync {
    fn space(&self) -> &SearchSpace;

    fn evaluate(&self, x: &TuningVector) -> Result<f64>;

    /// Total number of evaluations performed so far.
    fn evaluations(&self) -> u64;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn space(&self) -> &SearchSpace {
        (**self).space()
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        (**self).evaluate(x)
    }

    fn evaluations(&self) -> u64 {
        (**self).evaluations()
    }
}

/// Wraps a closure as a metered objective. The closure receives validated points.
pub struct FnObjective<F> {
    space: SearchSpace,
    func: F,
    counter: AtomicU64,
}

impl<F> FnObjective<F>
where
    F: Fn(&TuningVector) -> f64 + Sync,
{
    pub fn new(space: SearchSpace, func: F) -> Self {
        FnObjective {
            space,
            func,
            counter: AtomicU64::new(0),
        }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&TuningVector) -> f64 + Sync,
{
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        self.space.validate(x)?;
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok((self.func)(x))
    }

    fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

/// Forwards to another objective while keeping a private evaluation count,
/// so one run can be metered while others share the inner objective.
pub struct Metered<'a, O: ?Sized> {
    inner: &'a O,
    counter: AtomicU64,
}

impl<'a, O: Objective + ?Sized> Metered<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Metered {
            inner,
            counter: AtomicU64::new(0),
        }
    }
}

impl<O: Objective + ?Sized> Objective for Metered<'_, O> {
    fn space(&self) -> &SearchSpace {
        self.inner.space()
    }

    fn evaluate(&self, x: &TuningVector) -> Result<f64> {
        let f = self.inner.evaluate(x)?;
        self.counter.fetch_add(1, Ordering::Relaxed);
        Ok(f)
    }

    fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}
