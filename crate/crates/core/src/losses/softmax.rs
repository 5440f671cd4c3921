/// `-ln softmax(logits)[target]`, evaluated with max subtraction.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if logits[target] == max {
        // log1p keeps precision when the target dominates.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, l)| (l - max).exp())
            .sum();
        return rest.ln_1p();
    }
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max - logits[target] + sum.ln()
}

/// Softmax probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss and its gradient with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    (softmax_cross_entropy(logits, target), g)
}
