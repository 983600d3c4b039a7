use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational used for thresholds and ratios.
pub type Rational = Ratio<i128>;

/// Problem dimensions shared by the meter formulas and the planner.
///
/// `groups` selects how the attention projections are factorized: one unit
/// (`groups == 1`, single matrix), one unit per head (`groups == heads`) or
/// anything dividing `heads` in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub groups: usize,
    pub rank: usize,
    pub layers: usize,
}

impl Geometry {
    /// Multi-head factorization (`groups == heads`), one layer.
    pub fn multi_head(batch: usize, seq_len: usize, d_model: usize, d_ff: usize, heads: usize, rank: usize) -> Self {
        Self {
            batch,
            seq_len,
            d_model,
            d_ff,
            heads,
            groups: heads,
            rank,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("groups", self.groups),
            ("rank", self.rank),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("geometry field `{name}` must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if !self.heads.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "groups ({}) must divide heads ({})",
                self.groups, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `B·M`, the number of token rows.
    pub fn tokens(&self) -> u64 {
        (self.batch * self.seq_len) as u64
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }
}

pub(crate) fn ratio(num: u128, den: u128) -> Rational {
    Rational::new(num as i128, den as i128)
}

/// Lossy decimal view of a rational, for reports.
pub fn rational_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
