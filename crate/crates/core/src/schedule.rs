//! Nested patch index algebra.
//!
//! Tokens are numbered `1..=n` in schedule order. Patch `i` of module `m`
//! covers tokens `k^(m-1)·(i-1)+1 ..= k^(m-1)·i`, and is conditioned on the
//! `k^(m-1)·(i-1)` tokens that precede it. All indices crossing this module's
//! boundary are 1-based and inclusive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_K: usize = 8;
pub const MAX_MODULES: usize = 8;

/// Spatial linearization of the square token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// Z-curve; every prefix of length `4^m` is an aligned `2^m × 2^m` block.
    #[default]
    Morton,
    /// Row-major, top-left first.
    Raster,
}

impl Ordering {
    pub fn code(self) -> u32 {
        match self {
            Ordering::Morton => 0,
            Ordering::Raster => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Ordering::Morton),
            1 => Ok(Ordering::Raster),
            other => Err(Error::Format(format!("unknown ordering code {other}"))),
        }
    }
}

/// The `i`-th patch (1-based) of scaled module `m` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchId {
    pub m: usize,
    pub i: usize,
}

impl PatchId {
    pub fn new(m: usize, i: usize) -> Self {
        PatchId { m, i }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScheduleSpec {
    k: usize,
    modules: usize,
    n: usize,
    c: usize,
    ordering: Ordering,
    grid_side: Option<usize>,
}

impl ScheduleSpec {
    pub fn new(k: usize, modules: usize, c: usize, ordering: Ordering) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidParameter(format!("k must be >= 2, got {k}")));
        }
        if modules < 1 {
            return Err(Error::InvalidParameter("M must be >= 1".into()));
        }
        if c < 1 {
            return Err(Error::InvalidParameter(
                "token dimension c must be >= 1".into(),
            ));
        }
        if k > MAX_K || modules > MAX_MODULES {
            return Err(Error::Overflow(format!(
                "k^M with k={k}, M={modules} is outside the supported range (k <= {MAX_K}, M <= {MAX_MODULES})"
            )));
        }
        let n = k
            .checked_pow(modules as u32)
            .ok_or_else(|| Error::Overflow(format!("{k}^{modules} overflows")))?;
        if ordering == Ordering::Morton && k != 4 {
            return Err(Error::InvalidParameter(format!(
                "morton ordering requires k = 4, got k = {k}"
            )));
        }
        let grid_side = if k == 4 {
            Some(1usize << modules)
        } else {
            let side = isqrt(n);
            (side * side == n).then_some(side)
        };
        Ok(ScheduleSpec {
            k,
            modules,
            n,
            c,
            ordering,
            grid_side,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of scaled modules `M`.
    pub fn modules(&self) -> usize {
        self.modules
    }

    /// Total token count `k^M`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn grid_side(&self) -> Option<usize> {
        self.grid_side
    }

    fn check_module(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.modules {
            return Err(Error::OutOfRange(format!(
                "module index {m} not in 1..={}",
                self.modules
            )));
        }
        Ok(())
    }

    fn check_patch(&self, p: PatchId) -> Result<()> {
        self.check_module(p.m)?;
        if p.i == 0 || p.i > self.k {
            return Err(Error::OutOfRange(format!(
                "patch index {} not in 1..={}",
                p.i, self.k
            )));
        }
        Ok(())
    }

    /// Tokens per patch of module `m`: `k^(m-1)`.
    pub fn patch_tokens(&self, m: usize) -> Result<usize> {
        self.check_module(m)?;
        Ok(self.k.pow(m as u32 - 1))
    }

    /// Tokens covered by modules `1..=m`: `k^m`.
    pub fn scope_tokens(&self, m: usize) -> Result<usize> {
        self.check_module(m)?;
        Ok(self.k.pow(m as u32))
    }

    /// Inclusive 1-based token range of patch `p`.
    pub fn patch_range(&self, p: PatchId) -> Result<(usize, usize)> {
        self.check_patch(p)?;
        let len = self.k.pow(p.m as u32 - 1);
        Ok((len * (p.i - 1) + 1, len * p.i))
    }

    /// Number of tokens conditioning patch `p`.
    pub fn prefix_len(&self, p: PatchId) -> Result<usize> {
        self.check_patch(p)?;
        Ok(self.k.pow(p.m as u32 - 1) * (p.i - 1))
    }

    /// Patch solves needed to produce the first `k^m` tokens: `(k-1)·m + 1`.
    pub fn eval_count(&self, m: usize) -> Result<usize> {
        self.check_module(m)?;
        Ok((self.k - 1) * m + 1)
    }

    /// Patches in generation order: `(1,1)` first, then `(m, 2..=k)` for each module.
    pub fn generation_order(&self) -> Vec<PatchId> {
        let mut order = Vec::with_capacity(self.eval_count(self.modules).unwrap_or(0));
        order.push(PatchId::new(1, 1));
        for m in 1..=self.modules {
            for i in 2..=self.k {
                order.push(PatchId::new(m, i));
            }
        }
        order
    }

    /// Grid cell `(row, col)` of the 1-based token `index`.
    pub fn token_cell(&self, index: usize) -> Result<(usize, usize)> {
        let side = self
            .grid_side
            .ok_or_else(|| Error::InvalidParameter("schedule has no square grid".into()))?;
        if index == 0 || index > self.n {
            return Err(Error::OutOfRange(format!(
                "token index {index} not in 1..={}",
                self.n
            )));
        }
        match self.ordering {
            Ordering::Morton => morton_unrank(index - 1, side),
            Ordering::Raster => raster_unrank(index - 1, side),
        }
    }

    /// 1-based token index of grid cell `(row, col)`.
    pub fn cell_token(&self, row: usize, col: usize) -> Result<usize> {
        let side = self
            .grid_side
            .ok_or_else(|| Error::InvalidParameter("schedule has no square grid".into()))?;
        let rank = match self.ordering {
            Ordering::Morton => morton_rank(row, col, side)?,
            Ordering::Raster => raster_rank(row, col, side)?,
        };
        Ok(rank + 1)
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

fn check_cell(row: usize, col: usize, side: usize) -> Result<()> {
    if row >= side || col >= side {
        return Err(Error::OutOfRange(format!(
            "cell ({row}, {col}) outside a {side}x{side} grid"
        )));
    }
    Ok(())
}

fn check_pow2(side: usize) -> Result<()> {
    if !side.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "grid side {side} is not a power of two"
        )));
    }
    Ok(())
}

/// Z-curve rank: column bits on even positions, row bits on odd positions.
pub fn morton_rank(row: usize, col: usize, side: usize) -> Result<usize> {
    check_pow2(side)?;
    check_cell(row, col, side)?;
    let bits = side.trailing_zeros();
    let mut rank = 0usize;
    for b in 0..bits {
        rank |= ((col >> b) & 1) << (2 * b);
        rank |= ((row >> b) & 1) << (2 * b + 1);
    }
    Ok(rank)
}

pub fn morton_unrank(index: usize, side: usize) -> Result<(usize, usize)> {
    check_pow2(side)?;
    if index >= side * side {
        return Err(Error::OutOfRange(format!(
            "rank {index} outside a {side}x{side} grid"
        )));
    }
    let bits = side.trailing_zeros();
    let (mut row, mut col) = (0usize, 0usize);
    for b in 0..bits {
        col |= ((index >> (2 * b)) & 1) << b;
        row |= ((index >> (2 * b + 1)) & 1) << b;
    }
    Ok((row, col))
}

pub fn raster_rank(row: usize, col: usize, side: usize) -> Result<usize> {
    check_cell(row, col, side)?;
    Ok(row * side + col)
}

pub fn raster_unrank(index: usize, side: usize) -> Result<(usize, usize)> {
    if index >= side * side {
        return Err(Error::OutOfRange(format!(
            "rank {index} outside a {side}x{side} grid"
        )));
    }
    Ok((index / side, index % side))
}
