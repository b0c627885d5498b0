//! Global pairwise alignment (Needleman–Wunsch) with unit scores.

use serde::Serialize;

pub const MATCH: i32 = 1;
pub const MISMATCH: i32 = -1;
pub const GAP: i32 = -1;

/// Rendering of a gap in [`Alignment::aligned_a`] / [`Alignment::aligned_b`].
pub const GAP_CHAR: char = '-';

/// One alignment column. Never gap-gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AlignedPair {
    pub a: Option<char>,
    pub b: Option<char>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Alignment {
    pub columns: Vec<AlignedPair>,
    pub score: i32,
}

impl Alignment {
    fn render(&self, pick: impl Fn(&AlignedPair) -> Option<char>) -> String {
        self.columns.iter().map(|c| pick(c).unwrap_or(GAP_CHAR)).collect()
    }

    /// First sequence with gaps drawn as `-`.
    pub fn aligned_a(&self) -> String {
        self.render(|c| c.a)
    }

    pub fn aligned_b(&self) -> String {
        self.render(|c| c.b)
    }

    /// The first input, recovered by dropping gap columns.
    pub fn degapped_a(&self) -> String {
        self.columns.iter().filter_map(|c| c.a).collect()
    }

    pub fn degapped_b(&self) -> String {
        self.columns.iter().filter_map(|c| c.b).collect()
    }
}

#[inline]
fn substitution(x: char, y: char) -> i32 {
    if x == y {
        MATCH
    } else {
        MISMATCH
    }
}

/// Aligns two symbol sequences. Traceback prefers the diagonal, then a gap
/// in `b` (consume `a`), then a gap in `a`.
pub fn align_chars(a: &[char], b: &[char]) -> Alignment {
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut dp = vec![0i32; (n + 1) * width];
    for (j, cell) in dp.iter_mut().enumerate().take(width) {
        *cell = j as i32 * GAP;
    }
    for i in 1..=n {
        dp[i * width] = i as i32 * GAP;
        for j in 1..=m {
            let diag = dp[(i - 1) * width + j - 1] + substitution(a[i - 1], b[j - 1]);
            let up = dp[(i - 1) * width + j] + GAP;
            let left = dp[i * width + j - 1] + GAP;
            dp[i * width + j] = diag.max(up).max(left);
        }
    }

    let mut columns = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 && here == dp[(i - 1) * width + j - 1] + substitution(a[i - 1], b[j - 1]) {
            columns.push(AlignedPair {
                a: Some(a[i - 1]),
                b: Some(b[j - 1]),
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dp[(i - 1) * width + j] + GAP {
            columns.push(AlignedPair {
                a: Some(a[i - 1]),
                b: None,
            });
            i -= 1;
        } else {
            columns.push(AlignedPair {
                a: None,
                b: Some(b[j - 1]),
            });
            j -= 1;
        }
    }
    columns.reverse();
    Alignment {
        columns,
        score: dp[n * width + m],
    }
}

/// Optimal global alignment of two strings (match +1, mismatch −1, gap −1).
pub fn nw_align(a: &str, b: &str) -> Alignment {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    align_chars(&a, &b)
}
