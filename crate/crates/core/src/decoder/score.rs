use super::DecodeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Word,
    Character,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    /// Reference length.
    pub n: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.errors() as f64 / self.n as f64
        }
    }
}

impl std::ops::Add for ErrorCounts {
    type Output = ErrorCounts;
    fn add(self, o: ErrorCounts) -> ErrorCounts {
        ErrorCounts {
            s: self.s + o.s,
            d: self.d + o.d,
            i: self.i + o.i,
            n: self.n + o.n,
        }
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = ErrorCounts>>(iter: I) -> Self {
        iter.fold(ErrorCounts::default(), |a, b| a + b)
    }
}

fn explode<S: AsRef<str>>(tokens: &[S], unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        Unit::Character => tokens
            .iter()
            .flat_map(|t| {
                t.as_ref()
                    .chars()
                    .filter(|c| !c.is_whitespace())
                    .map(String::from)
            })
            .collect(),
    }
}

/// Minimal unit-cost edit alignment. Among equal-cost alignments the backtrace takes a
/// match or substitution first, then a deletion, then an insertion.
pub fn score_errors<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hyp: &[T],
    unit: Unit,
) -> Result<ErrorCounts, DecodeError> {
    let r = explode(reference, unit);
    let h = explode(hyp, unit);
    if r.is_empty() {
        return Err(DecodeError::EmptyReference);
    }
    let (n, m) = (r.len(), h.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut out = ErrorCounts {
        n,
        ..ErrorCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub = usize::from(r[i - 1] != h[j - 1]);
            if cost[i][j] == cost[i - 1][j - 1] + sub {
                out.s += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            out.d += 1;
            i -= 1;
        } else {
            out.i += 1;
            j -= 1;
        }
    }
    Ok(out)
}
