/// Minimum of `Σ_j cost[p(j)][j]` over injective `p` from columns to rows, by
/// enumeration, with the minimising row of every column. Sums run in column order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let k = cost.len();
    let g = if k == 0 { 0 } else { cost[0].len() };
    let mut best = (f64::INFINITY, Vec::new());
    let mut used = vec![false; k];
    let mut pick = Vec::with_capacity(g);
    fn go(cost: &[Vec<f64>], col: usize, used: &mut [bool], pick: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        let g = cost[0].len();
        if col == g {
            let total = column_sum(cost, pick);
            if total < best.0 {
                *best = (total, pick.clone());
            }
            return;
        }
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                pick.push(r);
                go(cost, col + 1, used, pick, best);
                pick.pop();
                used[r] = false;
            }
        }
    }
    if g == 0 {
        return (0.0, Vec::new());
    }
    go(cost, 0, &mut used, &mut pick, &mut best);
    best
}

/// `Σ_j cost[rows[j]][j]` in column order.
pub fn column_sum(cost: &[Vec<f64>], rows: &[usize]) -> f64 {
    rows.iter().enumerate().map(|(j, &r)| cost[r][j]).sum()
}
