use crate::error::{Error, Result};

/// Ceiling on the number of elementary steps an enumeration may take.
/// Operations estimate their cost up front and refuse (with a structured
/// error naming the estimate) instead of starting a hopeless loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    ceiling: u128,
}

pub const DEFAULT_BUDGET_CEILING: u128 = 1_000_000_000;

impl Default for Budget {
    fn default() -> Self {
        Budget {
            ceiling: DEFAULT_BUDGET_CEILING,
        }
    }
}

impl Budget {
    pub fn new(ceiling: u128) -> Self {
        Budget { ceiling }
    }

    pub fn ceiling(&self) -> u128 {
        self.ceiling
    }

    pub fn admit(&self, estimated: u128) -> Result<()> {
        if estimated > self.ceiling {
            Err(Error::BudgetExceeded {
                estimated,
                ceiling: self.ceiling,
            })
        } else {
            Ok(())
        }
    }
}

/// Saturating product of per-coordinate choice counts; the usual cost
/// estimate for a box walk.
pub fn product_cost<I: IntoIterator<Item = u128>>(counts: I) -> u128 {
    counts
        .into_iter()
        .fold(1u128, |acc, c| acc.saturating_mul(c))
}
