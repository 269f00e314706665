//! Deterministic element-count accounting for kernel buffers.
//!
//! Memory is accounted by recording the element count of every named
//! auxiliary buffer the kernel allocates, instead of inspecting the OS.
//! Counts follow the canonical single-worker schedule: tile scratch is
//! recorded once per pass even when parallel workers each hold a private
//! copy, so the ledger (and any CSV derived from it) is identical at every
//! thread count. The four n-by-d inputs are never counted.

/// Element-count ledger with a live-set high-water mark.
#[derive(Debug, Clone, Default)]
pub struct AllocationLedger {
    current: usize,
    peak: usize,
    breakdown: Vec<(String, usize)>,
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a named buffer entering the live set.
    pub fn alloc(&mut self, name: &str, elements: usize) {
        self.current += elements;
        if self.current > self.peak {
            self.peak = self.current;
        }
        match self.breakdown.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = (*e).max(elements),
            None => self.breakdown.push((name.to_string(), elements)),
        }
    }

    /// Record a buffer leaving the live set.
    pub fn free(&mut self, elements: usize) {
        debug_assert!(elements <= self.current);
        self.current = self.current.saturating_sub(elements);
    }

    /// Peak number of simultaneously live auxiliary elements.
    pub fn peak_aux_elements(&self) -> usize {
        self.peak
    }

    /// Largest element count recorded per buffer name, in first-seen order.
    pub fn breakdown(&self) -> &[(String, usize)] {
        &self.breakdown
    }

    /// Check the linear-memory decomposition: the peak and every individual
    /// buffer stay within `c1*n*d + c2*n + c3*tr*tc`.
    #[allow(clippy::too_many_arguments)]
    pub fn fits_linear_bound(
        &self,
        n: usize,
        d: usize,
        tr: usize,
        tc: usize,
        c1: usize,
        c2: usize,
        c3: usize,
    ) -> bool {
        let bound = c1 * n * d + c2 * n + c3 * tr * tc;
        self.peak <= bound && self.breakdown.iter().all(|(_, e)| *e <= bound)
    }
}

/// Least-squares fit `y = slope * x + intercept` with coefficient of
/// determination; used to confirm the kernel's peak grows linearly in n.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let fit = slope * x + intercept;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}
