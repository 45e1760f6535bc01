//! Dilation-rate lattices.
//!
//! A [`DilationMatrix`] assigns one dilation rate to every kernel `(c, k)` of a
//! filter bank, where `c` is the output channel and `k` the input channel
//! within `c`'s group. The poly-scale construction tiles a short cyclic
//! pattern `{d1, …, dt}` along the input-channel axis and rotates it by one
//! channel from each filter to the next:
//!
//! ```text
//! D(c, k) = pattern[(k - c) mod t]          (0-indexed slots)
//! ```
//!
//! so for `{1,2,1,4}` on a 4×4 lattice
//!
//! ```text
//! 1 2 1 4
//! 4 1 2 1
//! 1 4 1 2
//! 2 1 4 1
//! ```
//!
//! Slots are 0-indexed in code; `pattern.rate(0)` is `d1`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DilationPattern {
    rates: Vec<u32>,
}

impl DilationPattern {
    pub fn new(rates: Vec<u32>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("dilation pattern must have at least one slot"));
        }
        if rates.iter().any(|&r| r == 0) {
            return Err(Error::invalid(format!(
                "dilation rates must be >= 1, got {rates:?}"
            )));
        }
        Ok(DilationPattern { rates })
    }

    pub fn constant(rate: u32) -> Result<Self> {
        Self::new(vec![rate])
    }

    /// Cyclic interval `t`.
    pub fn interval(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, slot: usize) -> u32 {
        self.rates[slot % self.rates.len()]
    }

    pub fn rates(&self) -> &[u32] {
        &self.rates
    }

    /// Distinct rates, ascending.
    pub fn distinct_rates(&self) -> Vec<u32> {
        self.rates
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn is_constant(&self) -> bool {
        self.rates.iter().all(|&r| r == self.rates[0])
    }
}

impl Default for DilationPattern {
    /// `{1, 2, 1, 4}`.
    fn default() -> Self {
        DilationPattern {
            rates: vec![1, 2, 1, 4],
        }
    }
}

impl FromStr for DilationPattern {
    type Err = Error;

    /// Parses a comma list such as `"1,2,1,4"`.
    fn from_str(s: &str) -> Result<Self> {
        let rates = s
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::invalid(format!("bad dilation rate `{tok}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rates)
    }
}

impl fmt::Display for DilationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.rates.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Which axis an ablation lattice varies along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Every filter carries the same tiled row; no shift between filters.
    InputOnly,
    /// Each filter is constant; the pattern runs down the output channels.
    OutputOnly,
}

/// How a [`DilationMatrix`] was built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Construction {
    Uniform(u32),
    PsConv(DilationPattern),
    PsConvGrouped {
        pattern: DilationPattern,
        groups: usize,
    },
    Depthwise(DilationPattern),
    InputAxisOnly(DilationPattern),
    OutputAxisOnly(DilationPattern),
}

impl Construction {
    /// The cyclic interval of the underlying pattern (1 for uniform).
    pub fn interval(&self) -> usize {
        match self {
            Construction::Uniform(_) => 1,
            Construction::PsConv(p)
            | Construction::PsConvGrouped { pattern: p, .. }
            | Construction::Depthwise(p)
            | Construction::InputAxisOnly(p)
            | Construction::OutputAxisOnly(p) => p.interval(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DilationMatrix {
    rows: usize,
    cols: usize,
    groups: usize,
    entries: Vec<u32>,
    construction: Construction,
}

fn require_positive(what: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::invalid(format!("{what} must be >= 1")));
    }
    Ok(())
}

fn require_divisible(what: &'static str, value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::NotDivisible {
            what,
            value,
            divisor,
        });
    }
    Ok(())
}

impl DilationMatrix {
    fn from_fn(
        rows: usize,
        cols: usize,
        groups: usize,
        construction: Construction,
        f: impl Fn(usize, usize) -> u32,
    ) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for c in 0..rows {
            for k in 0..cols {
                entries.push(f(c, k));
            }
        }
        DilationMatrix {
            rows,
            cols,
            groups,
            entries,
            construction,
        }
    }

    /// Every kernel dilated by `d`; `d = 1` is ordinary convolution.
    pub fn uniform(cout: usize, cin: usize, d: u32) -> Result<Self> {
        require_positive("Cout", cout)?;
        require_positive("Cin", cin)?;
        if d == 0 {
            return Err(Error::invalid("dilation rate must be >= 1"));
        }
        Ok(Self::from_fn(cout, cin, 1, Construction::Uniform(d), |_, _| d))
    }

    /// Cyclic poly-scale lattice with the shift-by-one rule. A trailing
    /// partial cycle is truncated when `t` does not divide `cin`.
    pub fn psconv(cout: usize, cin: usize, pattern: &DilationPattern) -> Result<Self> {
        require_positive("Cout", cout)?;
        require_positive("Cin", cin)?;
        let t = pattern.interval();
        Ok(Self::from_fn(
            cout,
            cin,
            1,
            Construction::PsConv(pattern.clone()),
            |c, k| pattern.rate((k + t - c % t) % t),
        ))
    }

    /// The same cyclic lattice repeated in each of `groups` channel groups.
    /// The result is `cout × (cin / groups)`.
    pub fn psconv_grouped(
        cout: usize,
        cin: usize,
        groups: usize,
        pattern: &DilationPattern,
    ) -> Result<Self> {
        require_positive("Cout", cout)?;
        require_positive("Cin", cin)?;
        require_positive("groups", groups)?;
        require_divisible("Cin", cin, groups)?;
        require_divisible("Cout", cout, groups)?;
        let cin_pg = cin / groups;
        let cout_pg = cout / groups;
        if groups > 1 && cin_pg == 1 && !pattern.is_constant() {
            return Err(Error::invalid(
                "one input channel per group cannot hold a cyclic pattern; use DilationMatrix::depthwise",
            ));
        }
        let t = pattern.interval();
        Ok(Self::from_fn(
            cout,
            cin_pg,
            groups,
            Construction::PsConvGrouped {
                pattern: pattern.clone(),
                groups,
            },
            |c, k| {
                let c_local = c % cout_pg;
                pattern.rate((k + t - c_local % t) % t)
            },
        ))
    }

    /// Depthwise lattice: the pattern runs across consecutive groups, one
    /// channel per group. Shape `c × 1`.
    pub fn depthwise(channels: usize, pattern: &DilationPattern) -> Result<Self> {
        require_positive("C", channels)?;
        Ok(Self::from_fn(
            channels,
            1,
            channels,
            Construction::Depthwise(pattern.clone()),
            |c, _| pattern.rate(c),
        ))
    }

    /// Single-axis ablation lattices.
    pub fn axis_variant(
        cout: usize,
        cin: usize,
        pattern: &DilationPattern,
        axis: Axis,
    ) -> Result<Self> {
        require_positive("Cout", cout)?;
        require_positive("Cin", cin)?;
        Ok(match axis {
            Axis::InputOnly => Self::from_fn(
                cout,
                cin,
                1,
                Construction::InputAxisOnly(pattern.clone()),
                |_, k| pattern.rate(k),
            ),
            Axis::OutputOnly => Self::from_fn(
                cout,
                cin,
                1,
                Construction::OutputAxisOnly(pattern.clone()),
                |c, _| pattern.rate(c),
            ),
        })
    }

    /// Output channels (`Cout`).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input channels per group (`Cin / g`).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn construction(&self) -> &Construction {
        &self.construction
    }

    #[inline]
    pub fn get(&self, c: usize, k: usize) -> u32 {
        self.entries[c * self.cols + k]
    }

    pub fn row(&self, c: usize) -> &[u32] {
        &self.entries[c * self.cols..(c + 1) * self.cols]
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn distinct_rates(&self) -> Vec<u32> {
        self.entries
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// `Some(d)` if every entry equals `d`.
    pub fn uniform_rate(&self) -> Option<u32> {
        let first = *self.entries.first()?;
        self.entries.iter().all(|&d| d == first).then_some(first)
    }

    /// One CSV line per output channel.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in 0..self.rows {
            let line: Vec<String> = self.row(c).iter().map(|d| d.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Channel permutations that make this lattice block-constant.
    pub fn rearrangement(&self) -> Result<Rearrangement> {
        Rearrangement::new(self)
    }
}

/// Block structure of a lattice after residue-class sorting: `t × t` blocks
/// per group, block `(q, r)` covering output residue `q` and input residue
/// `r`, each holding a single dilation rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub interval: usize,
    pub groups: usize,
    /// Input channels per block (`Cin_pg / t`).
    pub in_block: usize,
    /// Output channels per block (`Cout_pg / t`).
    pub out_block: usize,
    rates: Vec<u32>,
}

impl BlockLayout {
    pub fn rate(&self, q: usize, r: usize) -> u32 {
        self.rates[q * self.interval + r]
    }
}

/// Channel permutations plus the resulting block layout.
///
/// Permutations map new position → original channel: the permuted tensor's
/// channel `p` is the original channel `perm_in[p]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rearrangement {
    pub perm_in: Vec<usize>,
    pub perm_out: Vec<usize>,
    pub layout: BlockLayout,
}

/// Stable sort of `0..groups*per_group` by `(group, index mod t)`.
fn residue_permutation(groups: usize, per_group: usize, t: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(groups * per_group);
    for g in 0..groups {
        for residue in 0..t {
            perm.extend((residue..per_group).step_by(t).map(|i| g * per_group + i));
        }
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

impl Rearrangement {
    fn new(d: &DilationMatrix) -> Result<Self> {
        let t = match d.construction {
            Construction::Depthwise(ref p) if p.interval() > 1 => {
                return Err(Error::PlanMismatch(
                    "depthwise lattices have no within-group residue classes".into(),
                ))
            }
            ref c => c.interval(),
        };
        let groups = d.groups;
        let cin_pg = d.cols;
        let cout_pg = d.rows / groups;
        require_divisible("Cin per group", cin_pg, t)?;
        require_divisible("Cout per group", cout_pg, t)?;

        let perm_in = residue_permutation(groups, cin_pg, t);
        let perm_out = residue_permutation(groups, cout_pg, t);
        let in_block = cin_pg / t;
        let out_block = cout_pg / t;

        let mut rates = vec![0u32; t * t];
        for q in 0..t {
            for r in 0..t {
                rates[q * t + r] = d.get(q, r);
            }
        }

        // Verify block-constancy against the actual lattice in every group.
        for g in 0..groups {
            for q in 0..t {
                for r in 0..t {
                    let want = rates[q * t + r];
                    for bo in 0..out_block {
                        let c = perm_out[g * cout_pg + q * out_block + bo];
                        for bi in 0..in_block {
                            let k = perm_in[g * cin_pg + r * in_block + bi] - g * cin_pg;
                            if d.get(c, k) != want {
                                return Err(Error::PlanMismatch(format!(
                                    "lattice is not block-constant at group {g}, block ({q},{r})"
                                )));
                            }
                        }
                    }
                }
            }
        }

        Ok(Rearrangement {
            perm_in,
            perm_out,
            layout: BlockLayout {
                interval: t,
                groups,
                in_block,
                out_block,
                rates,
            },
        })
    }

    /// `D'(p, s) = D(perm_out[p], local(perm_in[s]))` for the channels of
    /// each group; returned row-major with the same shape as `d`.
    pub fn permuted_entries(&self, d: &DilationMatrix) -> Vec<u32> {
        let cols = d.cols();
        let cout_pg = d.rows() / d.groups();
        let mut out = Vec::with_capacity(d.entries().len());
        for p in 0..d.rows() {
            let g = p / cout_pg;
            let c = self.perm_out[p];
            for s in 0..cols {
                let k = self.perm_in[g * cols + s] - g * cols;
                out.push(d.get(c, k));
            }
        }
        out
    }
}
